"""Episodic training, evaluation protocol, metrics and ablation runs."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .backbone import FeaturePair, extract_features
from .episodes import Dataset, Episode, sample_episode
from .errors import ConfigError, DimensionError, DivergenceError
from .hse import (
    FULL,
    ABLATION_VARIANTS,
    ModelConfig,
    VariantConfig,
    build_model,
    forward_episode,
    predict_mask,
)
from .numerics import GradTape, Tensor
from .params import ParamSet

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 4
    epochs: int = 20
    episodes_per_epoch: int = 200
    fold: int = 0
    shots: int = 1
    variant: VariantConfig = FULL
    train_seed: int = 0
    lr_schedule: str = "constant"  # or "poly"
    poly_power: float = 0.9
    check_frozen: bool = False

    def __post_init__(self):
        if isinstance(self.variant, str):
            self.variant = VariantConfig.parse(self.variant)
        if not self.lr >= 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1 or self.epochs < 0 or self.episodes_per_epoch < 1:
            raise ConfigError("batch_size and episodes_per_epoch must be >= 1, epochs >= 0")
        if self.lr_schedule not in ("constant", "poly"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = str(self.variant)
        return d

    def lr_at(self, step: int, total: int) -> float:
        if self.lr_schedule == "poly" and total > 0:
            return self.lr * (1 - step / total) ** self.poly_power
        return self.lr


# --------------------------------------------------------------------------
# optimizer


def sgd_step(params: ParamSet, grads: dict, cfg: TrainConfig, velocity: dict, lr: float | None = None) -> ParamSet:
    """One momentum SGD update with L2 weight decay; frozen parameters are skipped.

    ``velocity`` is updated in place.
    """
    lr = cfg.lr if lr is None else lr
    updates = {}
    for name, g in grads.items():
        if name in params.frozen:
            continue
        theta = params[name].data
        g = np.asarray(g)
        if g.shape != theta.shape:
            raise RuntimeError(f"gradient shape {g.shape} != parameter shape {theta.shape} for {name}")
        d = g + cfg.weight_decay * theta
        v = velocity.get(name)
        v = d if v is None else cfg.momentum * v + d
        velocity[name] = v
        updates[name] = Tensor(theta - lr * v, dtype=theta.dtype)
    return params.with_tensors(updates)


# --------------------------------------------------------------------------
# metrics


class IouSummary(NamedTuple):
    per_class_iou: dict[str, float]
    miou: float
    undefined: list[str]


def miou(predictions: Sequence, truths: Sequence, classes: Sequence[str], per_episode: bool = False) -> IouSummary:
    """Per-class foreground IoU (summed intersections over summed unions) and their mean.

    Classes whose union is empty are excluded from the mean and listed in
    ``undefined``. With ``per_episode`` the per-class value is instead the
    mean of per-episode IoUs.
    """
    if not len(predictions) == len(truths) == len(classes):
        raise DimensionError("predictions, truths and classes must be aligned")
    inter: dict[str, int] = {}
    union: dict[str, int] = {}
    per_ep: dict[str, list[float]] = {}
    for pred, truth, cls in zip(predictions, truths, classes):
        p = np.asarray(pred) > 0
        t = np.asarray(truth) > 0
        if p.shape != t.shape:
            raise DimensionError(f"prediction {p.shape} and truth {t.shape} differ")
        i = int(np.count_nonzero(p & t))
        u = int(np.count_nonzero(p | t))
        inter[cls] = inter.get(cls, 0) + i
        union[cls] = union.get(cls, 0) + u
        if u:
            per_ep.setdefault(cls, []).append(i / u)
    per_class, undefined = {}, []
    for cls in dict.fromkeys(classes):
        if per_episode:
            if per_ep.get(cls):
                per_class[cls] = math.fsum(per_ep[cls]) / len(per_ep[cls])
            else:
                undefined.append(cls)
        elif union[cls]:
            per_class[cls] = inter[cls] / union[cls]
        else:
            undefined.append(cls)
    m = math.fsum(per_class.values()) / len(per_class) if per_class else float("nan")
    return IouSummary(per_class, m, undefined)


@dataclass
class EvalReport:
    config_fingerprint: str
    fold: int
    shots: int
    episodes: int
    seeds: list[int]
    per_seed_miou: list[float]
    per_class_iou: dict[str, float]
    miou: float
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


# --------------------------------------------------------------------------
# training


class FeatureCache:
    """Memoizes frozen-backbone features by sample key."""

    def __init__(self, params: ParamSet):
        self.params = params
        self._store: dict = {}

    def __call__(self, key, image: Tensor) -> FeaturePair:
        if key is None:
            return extract_features(self.params, image)
        hit = self._store.get(key)
        if hit is None or hit.mid.dtype != image.dtype:
            hit = self._store[key] = extract_features(self.params, image)
        return hit


def backbone_frozen(params: ParamSet) -> bool:
    return all(n in params.frozen for n in params if n.startswith("backbone."))


def active_parameters(params: ParamSet, variant: VariantConfig) -> list[str]:
    """Trainable names the variant's forward pass actually uses."""
    prefixes = ["decoder."]
    if variant.sdi != "off":
        prefixes.append("proj_spatial.")
    if variant.sdi == "sd3":
        prefixes.append("interactor.")
    if variant.gcm != "off":
        prefixes += ["proj_channel.", "modulator."]
    if not backbone_frozen(params):
        prefixes.append("backbone.")
    return [n for n in params.trainable() if n.startswith(tuple(prefixes))]


def episode_gradients(params: ParamSet, variant, episode: Episode, embeddings, names, features=None):
    watched = params.watched(names)
    with GradTape() as tape:
        out = forward_episode(watched, variant, episode, embeddings, features=features)
    grads = tape.gradient(out.loss, [watched[n] for n in names])
    return float(out.loss.data), dict(zip(names, grads)), out.warnings


class TrainResult(NamedTuple):
    params: ParamSet
    loss_curve: list[float]
    warnings: list[str]


def train(
    dataset: Dataset,
    cfg: TrainConfig,
    params: ParamSet,
    embeddings,
    progress: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Episodic training; each batch averages episode gradients before one SGD step."""
    names = active_parameters(params, cfg.variant)
    snapshot = {n: params[n].data.copy() for n in params.frozen} if cfg.check_frozen else None
    cache = FeatureCache(params) if backbone_frozen(params) else None
    velocity: dict = {}
    curve: list[float] = []
    warn_count = 0
    n_batches = math.ceil(cfg.episodes_per_epoch / cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    step = 0
    for epoch in range(cfg.epochs):
        losses = []
        for b in range(n_batches):
            lo = b * cfg.batch_size
            hi = min(lo + cfg.batch_size, cfg.episodes_per_epoch)
            acc: dict[str, np.ndarray] = {}
            for i in range(lo, hi):
                ep = sample_episode(dataset, cfg.fold, "train", cfg.shots, cfg.train_seed, epoch * cfg.episodes_per_epoch + i)
                loss, grads, warns = episode_gradients(params, cfg.variant, ep, embeddings, names, cache)
                if not math.isfinite(loss):
                    raise DivergenceError(f"loss became {loss} at epoch {epoch} (episode {i})")
                warn_count += len(warns)
                losses.append(loss)
                for n, g in grads.items():
                    acc[n] = g if n not in acc else acc[n] + g
            scale = 1.0 / (hi - lo)
            avg = {n: g * scale for n, g in acc.items()}
            params = sgd_step(params, avg, cfg, velocity, cfg.lr_at(step, total_steps))
            step += 1
        epoch_loss = math.fsum(losses) / len(losses)
        if not math.isfinite(epoch_loss):
            raise DivergenceError(f"loss became {epoch_loss} at epoch {epoch}")
        curve.append(epoch_loss)
        if snapshot is not None:
            for n, arr in snapshot.items():
                if not np.array_equal(arr, params[n].data):
                    raise RuntimeError(f"frozen parameter {n} changed during epoch {epoch}")
        log.info("epoch %d loss %.5f", epoch, epoch_loss)
        if progress:
            progress(epoch, epoch_loss)
    warnings = [f"{warn_count} episodes had an empty support foreground after resize"] if warn_count else []
    return TrainResult(params, curve, warnings)


# --------------------------------------------------------------------------
# evaluation


def params_digest(params: ParamSet) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data, dtype="<f4").tobytes())
    return h.hexdigest()


def fingerprint(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def model_predictor(params: ParamSet, variant: VariantConfig, embeddings, cache=None):
    if cache is None and backbone_frozen(params):
        cache = FeatureCache(params)

    def predict(ep: Episode) -> tuple[np.ndarray, tuple[str, ...]]:
        out = forward_episode(params, variant, ep, embeddings, features=cache, with_loss=False)
        return predict_mask(out.logits), out.warnings

    return predict


def evaluate(
    dataset: Dataset,
    params: ParamSet | None,
    fold: int,
    shots: int,
    n_episodes: int,
    seeds: Sequence[int],
    *,
    variant: VariantConfig = FULL,
    embeddings=None,
    predictor: Callable[[Episode], np.ndarray] | None = None,
    per_episode_iou: bool = False,
    workers: int = 1,
) -> EvalReport:
    """Test-phase protocol: per seed, ``n_episodes`` episodes on the fold's novel classes.

    ``predictor`` overrides the model (it may return a mask or (mask, warnings)).
    The reported mIoU is the mean of the per-seed values.
    """
    if not seeds:
        raise ConfigError("at least one seed is required")
    if predictor is None:
        if params is None:
            raise ConfigError("either params or predictor is required")
        predictor = model_predictor(params, variant, embeddings)

    def run(args):
        seed, i = args
        ep = sample_episode(dataset, fold, "test", shots, seed, i)
        res = predictor(ep)
        mask, warns = res if isinstance(res, tuple) else (res, ())
        return mask, ep.query_mask, ep.class_name, warns

    per_seed, class_vals = [], {}
    empty_support, undefined = 0, set()
    for seed in seeds:
        jobs = [(int(seed), i) for i in range(n_episodes)]
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                results = list(pool.map(run, jobs))
        else:
            results = [run(j) for j in jobs]
        preds, truths, classes = zip(*[(r[0], r[1], r[2]) for r in results]) if results else ((), (), ())
        empty_support += sum(len(r[3]) for r in results)
        summary = miou(list(preds), list(truths), list(classes), per_episode=per_episode_iou)
        undefined.update(summary.undefined)
        per_seed.append(summary.miou)
        for cls, v in summary.per_class_iou.items():
            class_vals.setdefault(cls, []).append(v)

    per_class = {c: math.fsum(v) / len(v) for c, v in sorted(class_vals.items())}
    warnings = []
    if empty_support:
        warnings.append(f"{empty_support} support shots had an empty foreground after resize")
    for cls in sorted(undefined):
        warnings.append(f"class {cls} had zero union in at least one seed; excluded from that seed's mean")
    payload = {
        "fold": fold,
        "shots": shots,
        "episodes": n_episodes,
        "seeds": [int(s) for s in seeds],
        "variant": str(variant),
        "per_episode_iou": per_episode_iou,
        "params": params_digest(params) if params is not None else "external-predictor",
    }
    return EvalReport(
        config_fingerprint=fingerprint(payload),
        fold=fold,
        shots=shots,
        episodes=n_episodes,
        seeds=[int(s) for s in seeds],
        per_seed_miou=per_seed,
        per_class_iou=per_class,
        miou=math.fsum(per_seed) / len(per_seed),
        warnings=warnings,
    )


# --------------------------------------------------------------------------
# ablation

VARIANT_LABELS = {
    "off,off": "Baseline",
    "sd3,off": "Baseline+SDI",
    "off,gc2": "Baseline+GCM",
    "sd3,gc2": "Baseline+GCM+SDI",
}


@dataclass
class AblationRow:
    variant: str
    label: str
    folds: dict[str, float]
    mean: float


@dataclass
class AblationTable:
    rows: list[AblationRow]
    folds: list[int]
    seeds: list[int]
    train_seed: int
    config: dict

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        heads = ["Method", "Variant"] + [f"Split{f}" for f in self.folds] + ["Mean"]
        body = [
            [r.label, r.variant] + [f"{100 * r.folds[str(f)]:.2f}" for f in self.folds] + [f"{100 * r.mean:.2f}"]
            for r in self.rows
        ]
        widths = [max(len(x) for x in col) for col in zip(heads, *body)]
        fmt = lambda cells: "  ".join(c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))
        sep = "-" * len(fmt(heads))
        return "\n".join([fmt(heads), sep] + [fmt(b) for b in body]) + "\n"

    def best_variant(self) -> str:
        return max(self.rows, key=lambda r: r.mean).variant


def run_ablation(
    dataset: Dataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    variants: Sequence[VariantConfig] = ABLATION_VARIANTS,
    seeds: Sequence[int] = (0, 1, 2),
    *,
    folds: Sequence[int] = (0, 1, 2),
    embeddings=None,
    eval_episodes: int = 200,
    init_seed: int | None = None,
    progress: Callable[[str], None] | None = None,
) -> AblationTable:
    """Train and evaluate each variant on each fold under identical seeds and config."""
    if not variants:
        raise ConfigError("at least one variant is required")
    init_seed = train_cfg.train_seed if init_seed is None else init_seed
    rows = []
    for variant in variants:
        fold_scores = {}
        for fold in folds:
            cfg = replace(train_cfg, variant=variant, fold=fold)
            params = build_model(model_cfg, init_seed)
            result = train(dataset, cfg, params, embeddings)
            report = evaluate(
                dataset, result.params, fold, cfg.shots, eval_episodes, seeds, variant=variant, embeddings=embeddings
            )
            fold_scores[str(fold)] = report.miou
            if progress:
                progress(f"{variant} fold {fold}: mIoU {report.miou:.4f}")
        mean = math.fsum(fold_scores.values()) / len(fold_scores)
        rows.append(AblationRow(str(variant), VARIANT_LABELS.get(str(variant), str(variant)), fold_scores, mean))
    return AblationTable(rows, list(folds), [int(s) for s in seeds], init_seed, train_cfg.to_dict())
