"""Few-shot segmentation head with class-description embedding fusion.

Pipeline for one episode::

    backbone -> support prototype (masked average pooling) + query prior mask
             -> spatial dense interaction (support tokens + embedding tokens)
             -> global content modulation (channel coefficient from prototype + embedding)
             -> decoder -> 2-channel logits -> cross-entropy against the query mask

K-shot episodes average per-shot prototypes, prior masks and general prototypes.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .backbone import BackboneConfig, FeaturePair, build_backbone, extract_features
from .errors import ConfigError, DimensionError, LookupFailure
from .numerics import (
    DEFAULT_DTYPE,
    Tensor,
    add,
    broadcast_to,
    clip,
    concat,
    conv2d,
    getitem,
    log,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    resize_bilinear,
    sigmoid,
    softmax_lastdim,
    sub,
    transpose,
)
from .params import ParamSet
from .semantics import PROJECTOR_KINDS, init_projector, project

SDI_KINDS = ("sd1", "sd2", "sd3", "off")
GCM_KINDS = ("gc1", "gc2", "off")
PROB_EPS = 1e-7


@dataclass(frozen=True)
class VariantConfig:
    sdi: str = "sd3"
    gcm: str = "gc2"

    def __post_init__(self):
        if self.sdi not in SDI_KINDS:
            raise ConfigError(f"unknown sdi kind {self.sdi!r}; expected one of {SDI_KINDS}")
        if self.gcm not in GCM_KINDS:
            raise ConfigError(f"unknown gcm kind {self.gcm!r}; expected one of {GCM_KINDS}")

    @classmethod
    def parse(cls, text: str) -> "VariantConfig":
        """Parse ``"sd3,gc2"`` style strings."""
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 2:
            raise ConfigError(f"variant must look like 'sd3,gc2', got {text!r}")
        return cls(parts[0], parts[1])

    def __str__(self) -> str:
        return f"{self.sdi},{self.gcm}"

    @property
    def uses_embedding(self) -> bool:
        return self.sdi != "off" or self.gcm != "off"


BASELINE = VariantConfig("off", "off")
FULL = VariantConfig("sd3", "gc2")
ABLATION_VARIANTS = (BASELINE, VariantConfig("sd3", "off"), VariantConfig("off", "gc2"), FULL)


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    ct: int = 16
    projector: str = "linear"
    heads: int = 1
    sdi_tokens: str = "W"  # "W" repeats the embedding token W times, "1" appends it once
    decoder_depth: int = 2

    @property
    def channels(self) -> int:
        return self.backbone.mid_channels

    def validate(self) -> None:
        self.backbone.validate()
        if self.ct < 1:
            raise ConfigError(f"ct must be positive, got {self.ct}")
        if self.projector not in PROJECTOR_KINDS:
            raise ConfigError(f"unknown projector {self.projector!r}")
        if self.heads < 1 or self.channels % self.heads:
            raise ConfigError(f"heads={self.heads} must divide channels={self.channels}")
        if self.sdi_tokens not in ("W", "1"):
            raise ConfigError(f"sdi_tokens must be 'W' or '1', got {self.sdi_tokens!r}")
        if self.decoder_depth < 1:
            raise ConfigError("decoder_depth must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["backbone"] = BackboneConfig(**d["backbone"])
        return cls(**d)


def model_config(params: ParamSet) -> ModelConfig:
    return ModelConfig.from_dict(params.meta["model"])


def build_model(cfg: ModelConfig, seed: int, train_backbone: bool = False) -> ParamSet:
    """Backbone plus all head parameters (used or not by a given variant)."""
    cfg.validate()
    backbone = build_backbone(cfg.backbone, seed)
    rng = np.random.default_rng([int(seed), 0x45E])
    c = cfg.channels
    t: dict[str, Tensor] = {}
    t.update(init_projector("proj_spatial", cfg.projector, cfg.ct, c, rng))
    t.update(init_projector("proj_channel", cfg.projector, cfg.ct, c, rng))
    bound = 1.0 / math.sqrt(c)
    for name in ("wq", "wk", "wv", "wo"):
        t[f"interactor.{name}"] = Tensor(rng.uniform(-bound, bound, size=(c, c)))
    for name, fan_in in (("fc1", 2 * c), ("fc2", c)):
        b = 1.0 / math.sqrt(fan_in)
        t[f"modulator.{name}.w"] = Tensor(rng.uniform(-b, b, size=(fan_in, c)))
        t[f"modulator.{name}.b"] = Tensor(np.zeros(c))
    cin = 2 * c + 1
    for i in range(cfg.decoder_depth):
        b = math.sqrt(6.0 / (cin * 9))
        t[f"decoder.conv{i}.w"] = Tensor(rng.uniform(-b, b, size=(c, cin, 3, 3)))
        t[f"decoder.conv{i}.b"] = Tensor(np.zeros(c))
        cin = c
    b = 1.0 / math.sqrt(c)
    t["decoder.cls.w"] = Tensor(rng.uniform(-b, b, size=(2, c, 1, 1)))
    t["decoder.cls.b"] = Tensor(np.zeros(2))
    params = backbone.merged(ParamSet(t, set(), {"model": cfg.to_dict()}))
    if train_backbone:
        params.frozen.clear()
    return params.astype(DEFAULT_DTYPE)


# --------------------------------------------------------------------------
# masks and prototypes


class Prototype(NamedTuple):
    vector: Tensor
    empty: bool = False


class PriorMask(NamedTuple):
    map: np.ndarray
    constant: bool = False


def resize_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Soft (bilinear) resize of a binary mask."""
    mask = np.asarray(mask, dtype=np.float64)
    return resize_bilinear(Tensor(mask, dtype=np.float64), size).data


def binarize(mask: np.ndarray) -> np.ndarray:
    return (np.asarray(mask) >= 0.5).astype(np.float64)


def masked_avg_pool(f: Tensor, mask) -> Prototype:
    """Average of ``f``'s channel vectors over the foreground pixels of ``mask``."""
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
    c, h, w = f.shape
    if mask.shape != (h, w):
        raise DimensionError(f"mask extent {mask.shape} does not match feature extent {(h, w)}")
    m = binarize(mask).reshape(h * w, 1)
    count = float(m.sum())
    weights = Tensor(m / max(count, 1.0), dtype=f.dtype)
    vec = reshape(matmul(reshape(f, (c, h * w)), weights), (c,))
    return Prototype(vec, count == 0)


def _cosine_max(high_s: np.ndarray, high_q: np.ndarray, fg: np.ndarray) -> np.ndarray | None:
    c = high_s.shape[0]
    s = high_s.reshape(c, -1)[:, fg.reshape(-1) > 0]
    if s.shape[1] == 0:
        return None
    q = high_q.reshape(c, -1)
    sn = np.linalg.norm(s, axis=0)
    qn = np.linalg.norm(q, axis=0)
    s = np.divide(s, sn, out=np.zeros_like(s), where=sn > 0)
    q = np.divide(q, qn, out=np.zeros_like(q), where=qn > 0)
    return (q.T @ s).max(axis=1).reshape(high_q.shape[1:])


def prior_mask(high_s, high_q, mask_s, out_size: tuple[int, int] | None = None) -> PriorMask:
    """Max cosine correlation of each query pixel with the support foreground, scaled to [0, 1].

    ``mask_s`` is resized to the high-level extent and thresholded if needed.
    The correlation map is resized to ``out_size`` before min-max scaling, so
    a non-constant map always attains both 0 and 1. Gradients are not tracked.
    """
    hs = np.asarray(high_s.data if isinstance(high_s, Tensor) else high_s, dtype=np.float64)
    hq = np.asarray(high_q.data if isinstance(high_q, Tensor) else high_q, dtype=np.float64)
    if hs.shape != hq.shape or hs.ndim != 3:
        raise DimensionError(f"support/query high features differ: {hs.shape} vs {hq.shape}")
    mask_s = np.asarray(mask_s, dtype=np.float64)
    if mask_s.shape != hs.shape[1:]:
        mask_s = resize_mask(mask_s, hs.shape[1:])
    corr = _cosine_max(hs, hq, binarize(mask_s))
    size = tuple(out_size) if out_size is not None else hs.shape[1:]
    if corr is None:
        return PriorMask(np.zeros(size), True)
    if corr.shape != size:
        corr = resize_mask(corr, size)
    lo, hi = corr.min(), corr.max()
    if not hi > lo:
        return PriorMask(np.zeros(size), True)
    return PriorMask((corr - lo) / (hi - lo), False)


# --------------------------------------------------------------------------
# spatial dense interaction


def sdi_tokens(f_s: Tensor, t_spatial: Tensor, repeats: int | None = None) -> Tensor:
    """Flattened support features extended with ``repeats`` embedding tokens: ``C x (HW + repeats)``."""
    c, h, w = f_s.shape
    if t_spatial.shape != (c,):
        raise DimensionError(f"spatial embedding shape {t_spatial.shape} != ({c},)")
    repeats = w if repeats is None else repeats
    tok = broadcast_to(reshape(t_spatial, (c, 1)), (c, repeats))
    return concat([reshape(f_s, (c, h * w)), tok], axis=1)


def attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, heads: int = 1):
    """Self-attention over the rows of ``x`` (tokens x C) with a residual connection.

    Returns (output, list of per-head attention weight matrices).
    """
    n, c = x.shape
    d = c // heads
    q, k, v = matmul(x, wq), matmul(x, wk), matmul(x, wv)
    scale = 1.0 / math.sqrt(d)
    outs, weights = [], []
    for hd in range(heads):
        cols = slice(hd * d, (hd + 1) * d)
        qh, kh, vh = (getitem(m, (slice(None), cols)) if heads > 1 else m for m in (q, k, v))
        a = softmax_lastdim(mul(matmul(qh, transpose(kh)), scale))
        weights.append(a)
        outs.append(matmul(a, vh))
    o = outs[0] if heads == 1 else concat(outs, axis=1)
    return add(matmul(o, wo), x), weights


def sdi(f_s: Tensor, t_spatial: Tensor, tensors, kind: str = "sd3", heads: int = 1, repeats: int | None = None) -> Tensor:
    c, h, w = f_s.shape
    if kind == "off":
        return f_s
    if t_spatial.shape != (c,):
        raise DimensionError(f"spatial embedding shape {t_spatial.shape} != ({c},)")
    tb = reshape(t_spatial, (c, 1, 1))
    if kind == "sd1":
        return add(f_s, tb)
    if kind == "sd2":
        return mul(f_s, tb)
    if kind != "sd3":
        raise ConfigError(f"unknown sdi kind {kind!r}")
    tokens = transpose(sdi_tokens(f_s, t_spatial, repeats))
    out, _ = attention(
        tokens, tensors["interactor.wq"], tensors["interactor.wk"], tensors["interactor.wv"], tensors["interactor.wo"], heads
    )
    kept = getitem(out, slice(0, h * w))
    return reshape(transpose(kept), (c, h, w))


def general_prototype(f_hat: Tensor, mask) -> Prototype:
    return masked_avg_pool(f_hat, mask)


# --------------------------------------------------------------------------
# global content modulation


def gcm_coefficient(p: Tensor, t_channel: Tensor, tensors) -> Tensor:
    """Channel coefficient in (0, 1)^C from the visual prototype and projected embedding."""
    if p.shape != t_channel.shape or p.data.ndim != 1:
        raise DimensionError(f"prototype {p.shape} and channel embedding {t_channel.shape} must both be (C,)")
    c = p.shape[0]
    x = reshape(concat([p, t_channel], axis=0), (1, 2 * c))
    h = relu(add(matmul(x, tensors["modulator.fc1.w"]), tensors["modulator.fc1.b"]))
    w = sigmoid(add(matmul(h, tensors["modulator.fc2.w"]), tensors["modulator.fc2.b"]))
    return reshape(w, (c,))


def gcm_modulate(p_gen: Tensor, f_q: Tensor, w: Tensor, t_channel: Tensor, kind: str = "gc2") -> tuple[Tensor, Tensor]:
    if kind == "off":
        return p_gen, f_q
    c = p_gen.shape[0]
    if f_q.shape[0] != c or w.shape != (c,) or t_channel.shape != (c,):
        raise DimensionError(f"gcm shapes disagree: p {p_gen.shape}, f_q {f_q.shape}, w {w.shape}, t {t_channel.shape}")
    wb = reshape(w, (c, 1, 1))
    p_mod = mul(p_gen, w)
    f_mod = mul(f_q, wb)
    if kind == "gc2":
        p_mod = add(p_mod, t_channel)
        f_mod = add(f_mod, reshape(t_channel, (c, 1, 1)))
    elif kind != "gc1":
        raise ConfigError(f"unknown gcm kind {kind!r}")
    return p_mod, f_mod


# --------------------------------------------------------------------------
# decoding and loss


def decode(p_mod: Tensor, f_q_mod: Tensor, prior, tensors, out_size: tuple[int, int]) -> Tensor:
    """Background/foreground logits at ``out_size`` from prototype, query features and prior."""
    c, h, w = f_q_mod.shape
    if p_mod.shape != (c,):
        raise DimensionError(f"prototype {p_mod.shape} vs query features {f_q_mod.shape}")
    prior_map = prior.map if isinstance(prior, PriorMask) else np.asarray(prior)
    if prior_map.shape != (h, w):
        raise DimensionError(f"prior extent {prior_map.shape} != feature extent {(h, w)}")
    tiled = broadcast_to(reshape(p_mod, (c, 1, 1)), (c, h, w))
    x = concat([tiled, f_q_mod, Tensor(prior_map[None], dtype=f_q_mod.dtype)], axis=0)
    i = 0
    while f"decoder.conv{i}.w" in tensors:
        x = relu(conv2d(x, tensors[f"decoder.conv{i}.w"], tensors[f"decoder.conv{i}.b"], padding=1))
        i += 1
    logits = conv2d(x, tensors["decoder.cls.w"], tensors["decoder.cls.b"])
    return resize_bilinear(logits, out_size)


def bce_loss(logits: Tensor, target) -> Tensor:
    """Mean negative log-likelihood of the true class under a per-pixel 2-way softmax."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    if logits.data.ndim != 3 or logits.shape[0] != 2 or logits.shape[1:] != target.shape:
        raise DimensionError(f"logits {logits.shape} do not match mask {target.shape}")
    m = Tensor(binarize(target), dtype=logits.dtype)
    # two-way softmax == sigmoid of the logit difference
    p_fg = sigmoid(sub(getitem(logits, 1), getitem(logits, 0)))
    p_true = add(mul(m, p_fg), mul(sub(1.0, m), sub(1.0, p_fg)))
    return mul(mean(log(clip(p_true, PROB_EPS, 1.0 - PROB_EPS))), -1.0)


def predict_mask(logits: Tensor) -> np.ndarray:
    """Argmax over the two channels (ties go to background)."""
    return (logits.data[1] > logits.data[0]).astype(np.uint8)


def kshot_merge(items: Sequence):
    """Elementwise mean of prototypes, prior masks, tensors or arrays."""
    items = list(items)
    if not items:
        raise ValueError("kshot_merge needs at least one item")
    first = items[0]
    if isinstance(first, Prototype):
        vec = kshot_merge([p.vector for p in items])
        return Prototype(vec, all(p.empty for p in items))
    if isinstance(first, PriorMask):
        return PriorMask(kshot_merge([p.map for p in items]), all(p.constant for p in items))
    if isinstance(first, Tensor):
        shapes = {t.shape for t in items}
        if len(shapes) != 1:
            raise DimensionError(f"cannot merge shapes {sorted(shapes)}")
        if len(items) == 1:
            return first
        total = items[0]
        for t in items[1:]:
            total = add(total, t)
        return mul(total, 1.0 / len(items))
    arrays = [np.asarray(a, dtype=np.float64) for a in items]
    if len({a.shape for a in arrays}) != 1:
        raise DimensionError(f"cannot merge shapes {[a.shape for a in arrays]}")
    return np.mean(np.stack(arrays), axis=0)


# --------------------------------------------------------------------------
# full episode


class EpisodeOutput(NamedTuple):
    logits: Tensor
    loss: Tensor | None
    prior: PriorMask
    warnings: tuple[str, ...]


FeatureFn = Callable[[object, Tensor], FeaturePair]


def _lookup_embedding(embeddings, name: str) -> Tensor:
    table = embeddings if isinstance(embeddings, dict) else {e.name: e.vector for e in embeddings}
    try:
        return table[name]
    except KeyError:
        raise LookupFailure(f"no class embedding for {name!r}") from None


def forward_episode(
    params: ParamSet,
    variant: VariantConfig,
    episode,
    embeddings,
    *,
    features: FeatureFn | None = None,
    with_loss: bool = True,
) -> EpisodeOutput:
    """Run one episode end to end.

    ``episode`` needs ``support`` (list of (image, mask)), ``query_image``,
    ``query_mask`` and ``class_name``; optional ``support_keys``/``query_key``
    are passed to ``features`` for caching frozen backbone outputs.
    """
    cfg = model_config(params)
    extract = features or (lambda key, image: extract_features(params, image))
    dtype = params["decoder.cls.w"].dtype
    warnings: list[str] = []

    q_img = _image_tensor(episode.query_image, dtype)
    out_size = q_img.shape[1:]
    q_feat = extract(getattr(episode, "query_key", None), q_img)
    mid_hw = q_feat.mid.shape[1:]

    keys = getattr(episode, "support_keys", None) or [None] * len(episode.support)
    protos, priors, shots = [], [], []
    for key, (img, mask) in zip(keys, episode.support):
        feat = extract(key, _image_tensor(img, dtype))
        soft = resize_mask(mask, mid_hw)
        p = masked_avg_pool(feat.mid, soft)
        if p.empty:
            warnings.append("empty support foreground after resize")
        protos.append(p)
        priors.append(prior_mask(feat.high, q_feat.high, mask, out_size=mid_hw))
        shots.append((feat.mid, soft))
    p = kshot_merge(protos)
    prior = kshot_merge(priors)

    t = None
    if variant.uses_embedding:
        t = _lookup_embedding(embeddings, episode.class_name)
        t = Tensor(t.data, dtype=dtype)

    if variant.sdi == "off":
        p_gen = p.vector
    else:
        t_sp = project(params, "proj_spatial", t)
        repeats = None if cfg.sdi_tokens == "W" else 1
        gens = [general_prototype(sdi(f, t_sp, params, variant.sdi, cfg.heads, repeats), m) for f, m in shots]
        p_gen = kshot_merge(gens).vector

    f_q = q_feat.mid
    if variant.gcm != "off":
        t_ch = project(params, "proj_channel", t)
        w = gcm_coefficient(p.vector, t_ch, params)
        p_gen, f_q = gcm_modulate(p_gen, f_q, w, t_ch, variant.gcm)

    logits = decode(p_gen, f_q, prior, params, out_size)
    loss = bce_loss(logits, episode.query_mask) if with_loss else None
    return EpisodeOutput(logits, loss, prior, tuple(warnings))


def _image_tensor(img, dtype) -> Tensor:
    if isinstance(img, Tensor):
        return img if img.dtype == dtype else Tensor(img.data, dtype=dtype)
    return Tensor(img, dtype=dtype)
