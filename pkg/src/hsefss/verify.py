"""Verification suites behind ``hsefss check``.

The oracles here are deliberately naive loops written against the textbook
definitions, independent of the vectorized code paths they check.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .backbone import BackboneConfig
from .episodes import class_hues, render_sample, DEFAULT_CLASSES, default_folds
from .harness import active_parameters, miou
from .hse import (
    FULL,
    ModelConfig,
    attention,
    bce_loss,
    build_model,
    decode,
    forward_episode,
    gcm_coefficient,
    gcm_modulate,
    masked_avg_pool,
    prior_mask,
    sdi,
)
from .numerics import Tensor, check_gradients
from .semantics import synth_embedding


@dataclass
class CheckResult:
    name: str
    max_error: float
    tol: float
    cases: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28} max_err={self.max_error:.3e}  tol={self.tol:.0e}  cases={self.cases}  ({self.seconds:.1f}s)"


# --------------------------------------------------------------------------
# naive references


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def naive_conv2d(x, w, b=None, stride=1, padding=0):
    cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((cout, ho, wo))
    for co in range(cout):
        for oy in range(ho):
            for ox in range(wo):
                s = 0.0 if b is None else b[co]
                for ci in range(cin):
                    for i in range(k):
                        for j in range(k):
                            y = oy * stride + i - padding
                            xx = ox * stride + j - padding
                            if 0 <= y < h and 0 <= xx < wd:
                                s += x[ci, y, xx] * w[co, ci, i, j]
                out[co, oy, ox] = s
    return out


def naive_masked_avg_pool(f, mask):
    c, h, w = f.shape
    out = np.zeros(c)
    count = 0
    for y in range(h):
        for x in range(w):
            if mask[y, x] >= 0.5:
                count += 1
                for ch in range(c):
                    out[ch] += f[ch, y, x]
    return out / count if count else out


def naive_bilinear(x, ho, wo):
    """Half-pixel-centre bilinear interpolation, sources clamped at the border."""
    h, w = x.shape[-2:]
    out = np.zeros(x.shape[:-2] + (ho, wo))
    for oy in range(ho):
        sy = max((oy + 0.5) * h / ho - 0.5, 0.0)
        y0 = min(int(sy), h - 1)
        y1 = min(y0 + 1, h - 1)
        ly = sy - y0
        for ox in range(wo):
            sx = max((ox + 0.5) * w / wo - 0.5, 0.0)
            x0 = min(int(sx), w - 1)
            x1 = min(x0 + 1, w - 1)
            lx = sx - x0
            out[..., oy, ox] = (
                (1 - ly) * (1 - lx) * x[..., y0, x0]
                + (1 - ly) * lx * x[..., y0, x1]
                + ly * (1 - lx) * x[..., y1, x0]
                + ly * lx * x[..., y1, x1]
            )
    return out


def naive_prior(fs, fq, mask):
    c, h, w = fq.shape
    corr = np.zeros((h, w))
    any_fg = False
    for qy in range(h):
        for qx in range(w):
            best = -np.inf
            qv = fq[:, qy, qx]
            qn = math.sqrt(sum(v * v for v in qv))
            for sy in range(h):
                for sx in range(w):
                    if mask[sy, sx] < 0.5:
                        continue
                    any_fg = True
                    sv = fs[:, sy, sx]
                    sn = math.sqrt(sum(v * v for v in sv))
                    cos = 0.0 if qn == 0 or sn == 0 else sum(a * b for a, b in zip(qv, sv)) / (qn * sn)
                    best = max(best, cos)
            corr[qy, qx] = best
    if not any_fg or corr.max() == corr.min():
        return np.zeros((h, w))
    return (corr - corr.min()) / (corr.max() - corr.min())


def naive_attention(x, wq, wk, wv, wo):
    """Single-head attention with residual, via explicit loops. Returns (output, weights)."""
    n, c = x.shape
    q, k, v = naive_matmul(x, wq), naive_matmul(x, wk), naive_matmul(x, wv)
    weights = np.zeros((n, n))
    for i in range(n):
        logits = [sum(q[i, d] * k[j, d] for d in range(c)) / math.sqrt(c) for j in range(n)]
        top = max(logits)
        exps = [math.exp(l - top) for l in logits]
        z = sum(exps)
        for j in range(n):
            weights[i, j] = exps[j] / z
    mixed = np.zeros((n, c))
    for i in range(n):
        for j in range(n):
            mixed[i] += weights[i, j] * v[j]
    return naive_matmul(mixed, wo) + x, weights


def naive_bce(logits, target):
    _, h, w = logits.shape
    total = 0.0
    for y in range(h):
        for x in range(w):
            l0, l1 = logits[0, y, x], logits[1, y, x]
            m = max(l0, l1)
            p1 = math.exp(l1 - m) / (math.exp(l0 - m) + math.exp(l1 - m))
            p = p1 if target[y, x] >= 0.5 else 1 - p1
            p = min(max(p, 1e-7), 1 - 1e-7)
            total -= math.log(p)
    return total / (h * w)


def naive_miou(preds, truths, classes):
    inter, union = {}, {}
    for p, t, c in zip(preds, truths, classes):
        for a, b in zip(np.ravel(p), np.ravel(t)):
            a, b = bool(a), bool(b)
            inter[c] = inter.get(c, 0) + (a and b)
            union[c] = union.get(c, 0) + (a or b)
    ious = [inter[c] / union[c] for c in inter if union[c]]
    return sum(ious) / len(ious)


# --------------------------------------------------------------------------
# oracle suite


def _timed(name: str, tol: float, cases: int, body: Callable[[np.random.Generator], float], seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    worst = max(body(rng) for _ in range(cases))
    return CheckResult(name, worst, tol, cases, time.perf_counter() - start)


def _f64(arr) -> Tensor:
    return Tensor(arr, dtype=np.float64)


def run_oracle_suite(cases: int = 20, seed: int = 0, tol: float = 1e-6) -> list[CheckResult]:
    results = []

    def matmul_case(rng):
        m, k, n = rng.integers(1, 9, size=3)
        a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
        return float(np.abs(nx.matmul(_f64(a), _f64(b)).data - naive_matmul(a, b)).max())

    def conv_case(rng):
        cin, cout = rng.integers(1, 4, size=2)
        h, w = rng.integers(3, 9, size=2)
        k = int(rng.choice([1, 3]))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        x, ker, b = rng.standard_normal((cin, h, w)), rng.standard_normal((cout, cin, k, k)), rng.standard_normal(cout)
        got = nx.conv2d(_f64(x), _f64(ker), _f64(b), stride=stride, padding=pad).data
        return float(np.abs(got - naive_conv2d(x, ker, b, stride, pad)).max())

    def pool_case(rng):
        c, h, w = rng.integers(1, 9, size=3)
        f = rng.standard_normal((c, h, w))
        mask = (rng.random((h, w)) < 0.4).astype(float)
        return float(np.abs(masked_avg_pool(_f64(f), mask).vector.data - naive_masked_avg_pool(f, mask)).max())

    def prior_case(rng):
        c, h = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        fs, fq = rng.standard_normal((c, h, h)), rng.standard_normal((c, h, h))
        mask = (rng.random((h, h)) < 0.4).astype(float)
        got = prior_mask(fs, fq, mask).map
        err = float(np.abs(got - naive_prior(fs, fq, mask)).max())
        # resized variant: min-max after interpolation
        raw = naive_prior(fs, fq, mask)
        if raw.max() > 0:
            up = naive_bilinear(raw, 2 * h, 2 * h)
            up = (up - up.min()) / (up.max() - up.min())
            err = max(err, float(np.abs(prior_mask(fs, fq, mask, out_size=(2 * h, 2 * h)).map - up).max()))
        return err

    def attention_case(rng):
        n, c = int(rng.integers(2, 10)), int(rng.integers(1, 6))
        x = rng.standard_normal((n, c))
        ws = [rng.standard_normal((c, c)) / math.sqrt(c) for _ in range(4)]
        out, weights = attention(_f64(x), *map(_f64, ws))
        ref_out, ref_w = naive_attention(x, *ws)
        return max(float(np.abs(out.data - ref_out).max()), float(np.abs(weights[0].data - ref_w).max()))

    def bilinear_case(rng):
        h, w = rng.integers(1, 9, size=2)
        ho, wo = rng.integers(1, 17, size=2)
        x = rng.standard_normal((2, h, w))
        return float(np.abs(nx.resize_bilinear(_f64(x), (ho, wo)).data - naive_bilinear(x, ho, wo)).max())

    def bce_case(rng):
        h, w = rng.integers(1, 9, size=2)
        logits = 3 * rng.standard_normal((2, h, w))
        target = (rng.random((h, w)) < 0.5).astype(float)
        return abs(float(bce_loss(_f64(logits), target).data) - naive_bce(logits, target))

    def miou_case(rng):
        n = int(rng.integers(1, 6))
        classes = [str(rng.choice(["a", "b", "c"])) for _ in range(n)]
        preds = [(rng.random((5, 5)) < 0.5) for _ in range(n)]
        truths = [(rng.random((5, 5)) < 0.5) for _ in range(n)]
        truths[0][0, 0] = True
        return abs(miou(preds, truths, classes).miou - naive_miou(preds, truths, classes))

    for i, (name, body) in enumerate(
        [
            ("matmul", matmul_case),
            ("conv2d", conv_case),
            ("masked_avg_pool", pool_case),
            ("prior_mask", prior_case),
            ("dense_attention", attention_case),
            ("bilinear_resize", bilinear_case),
            ("bce_loss", bce_case),
            ("miou", miou_case),
        ]
    ):
        results.append(_timed(name, tol, cases, body, seed + i))
    return results


# --------------------------------------------------------------------------
# gradient suite


def small_model(channels: int = 8, ct: int = 8, seed: int = 0):
    cfg = ModelConfig(backbone=BackboneConfig(mid_channels=channels, high_channels=channels), ct=ct)
    return build_model(cfg, seed)


def synthetic_episode(extent: int = 32, shots: int = 1, seed: int = 0):
    """A rendered episode without a dataset on disk."""
    from .episodes import Episode

    classes = list(DEFAULT_CLASSES)
    hues = class_hues(classes, default_folds(classes))
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(shots + 1):
        img, mask, _ = render_sample("circle", ["square", "triangle"], extent, rng, hues)
        pairs.append((img.transpose(2, 0, 1).astype(np.float64) / 255.0, mask))
    return Episode(support=pairs[:shots], query_image=pairs[-1][0], query_mask=pairs[-1][1], class_name="circle")


def episode_loss_check(seed: int, variant=FULL, eps: float = 1e-6, tol: float = 1e-4, extent: int = 32):
    params = small_model(seed=seed).astype(np.float64)
    emb = {"circle": Tensor(synth_embedding("circle", 8, seed).vector.data, dtype=np.float64)}
    episode = synthetic_episode(extent, seed=seed)
    names = active_parameters(params, variant)

    def f(tensors):
        p = params.with_tensors(dict(zip(names, tensors)))
        return forward_episode(p, variant, episode, emb).loss

    return check_gradients(f, [params[n] for n in names], eps=eps, tol=tol)


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    def away_from_zero(shape):
        x = rng.standard_normal(shape)
        return np.where(np.abs(x) < 0.1, np.sign(x) * 0.1 + x, x)

    def weighted(t: Tensor, seed_shape) -> Tensor:
        # random projection to a scalar so every output entry matters
        w = Tensor(np.random.default_rng(list(seed_shape.encode())).standard_normal(t.shape), dtype=np.float64)
        return nx.sum_(nx.mul(t, w))

    c = 3
    return {
        "matmul": (lambda t: weighted(nx.matmul(t[0], t[1]), "mm"), [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))]),
        "softmax_lastdim": (lambda t: weighted(nx.softmax_lastdim(t[0]), "sm"), [rng.standard_normal((3, 5))]),
        "conv2d": (
            lambda t: weighted(nx.conv2d(t[0], t[1], t[2], stride=1, padding=1), "cv"),
            [rng.standard_normal((2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)],
        ),
        "conv2d_stride2": (
            lambda t: weighted(nx.conv2d(t[0], t[1], None, stride=2, padding=1), "cv2"),
            [rng.standard_normal((2, 6, 6)), rng.standard_normal((2, 2, 3, 3))],
        ),
        "add_broadcast": (lambda t: weighted(nx.add(t[0], t[1]), "ad"), [rng.standard_normal((c, 4, 4)), rng.standard_normal((c, 1, 1))]),
        "mul_broadcast": (lambda t: weighted(nx.mul(t[0], t[1]), "mu"), [rng.standard_normal((c, 4, 4)), rng.standard_normal((c, 1, 1))]),
        "sub": (lambda t: weighted(nx.sub(t[0], t[1]), "sb"), [rng.standard_normal((3, 3)), rng.standard_normal((3, 3))]),
        "relu": (lambda t: weighted(nx.relu(t[0]), "re"), [away_from_zero((4, 4))]),
        "sigmoid": (lambda t: weighted(nx.sigmoid(t[0]), "sg"), [rng.standard_normal((4, 4))]),
        "log_clip": (lambda t: weighted(nx.log(nx.clip(t[0], 1e-7, 10.0)), "lg"), [rng.uniform(0.5, 2.0, (3, 3))]),
        "resize_bilinear": (lambda t: weighted(nx.resize_bilinear(t[0], (7, 9)), "rz"), [rng.standard_normal((2, 3, 4))]),
        "shape_ops": (
            lambda t: weighted(
                nx.concat([nx.transpose(nx.reshape(t[0], (3, 4))), nx.broadcast_to(t[1], (4, 2))], axis=1)[1:3], "sh"
            ),
            [rng.standard_normal((2, 6)), rng.standard_normal((1, 2))],
        ),
        "mean": (lambda t: nx.mean(nx.mul(t[0], t[0])), [rng.standard_normal((3, 4))]),
    }


def _module_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    c, h, w = 4, 3, 3
    f = rng.standard_normal((c, h, w))
    mask = np.zeros((h, w))
    mask[1:, :2] = 1
    prior = rng.random((h, w))
    target = (rng.random((6, 6)) < 0.5).astype(float)

    def sd3(t):
        tensors = {"interactor.wq": t[1], "interactor.wk": t[2], "interactor.wv": t[3], "interactor.wo": t[4]}
        return nx.sum_(nx.mul(sdi(t[0], t[5], tensors, "sd3"), Tensor(f, dtype=np.float64)))

    def gcm(t):
        tensors = {"modulator.fc1.w": t[2], "modulator.fc1.b": t[3], "modulator.fc2.w": t[4], "modulator.fc2.b": t[5]}
        w_ = gcm_coefficient(t[0], t[1], tensors)
        p_mod, f_mod = gcm_modulate(t[0], t[6], w_, t[1], "gc2")
        return nx.add(nx.sum_(nx.mul(p_mod, p_mod)), nx.mean(nx.mul(f_mod, f_mod)))

    def dec(t):
        tensors = {"decoder.conv0.w": t[2], "decoder.conv0.b": t[3], "decoder.cls.w": t[4], "decoder.cls.b": t[5]}
        return bce_loss(decode(t[0], t[1], prior, tensors, (6, 6)), target)

    def pool(t):
        v = masked_avg_pool(t[0], mask).vector
        return nx.sum_(nx.mul(v, v))

    return {
        "masked_avg_pool": (pool, [f]),
        "sdi_sd3": (sd3, [f] + [rng.standard_normal((c, c)) / 2 for _ in range(4)] + [rng.standard_normal(c)]),
        "gcm_gc2": (
            gcm,
            [
                rng.standard_normal(c),
                rng.standard_normal(c),
                rng.standard_normal((2 * c, c)),
                rng.standard_normal(c),
                rng.standard_normal((c, c)),
                rng.standard_normal(c),
                rng.standard_normal((c, h, w)),
            ],
        ),
        "decode_bce": (
            dec,
            [
                rng.standard_normal(c),
                rng.standard_normal((c, h, w)),
                rng.standard_normal((c, 2 * c + 1, 3, 3)) / 3,
                rng.standard_normal(c),
                rng.standard_normal((2, c, 1, 1)),
                rng.standard_normal(2),
            ],
        ),
    }


# Step for the end-to-end check. The loss sits near 0.7, where one float64 ulp
# is 1.1e-16, so an entry at the 1e-8 gradient floor is resolved only to
# ulp / (2 * eps * 1e-8): 1.9e-4 at eps=3e-5, 6.9e-5 at eps=8e-5. At 1e-4
# some steps cross ReLU kinks.
EPISODE_EPS = 8e-5


def run_gradient_suite(
    seeds=(0, 1, 2), eps: float = 1e-6, tol: float = 1e-4, episode: bool = True, episode_eps: float = EPISODE_EPS
) -> list[CheckResult]:
    results: dict[str, list] = {}
    for seed in seeds:
        rng = np.random.default_rng(1000 + seed)
        cases = {**_op_cases(rng), **_module_cases(rng)}
        for name, (fn, arrays) in cases.items():
            start = time.perf_counter()
            rep = check_gradients(fn, [_f64(a) for a in arrays], eps=eps, tol=tol)
            results.setdefault(name, []).append((rep.max_rel_error, rep.n_entries, time.perf_counter() - start))
        if episode:
            start = time.perf_counter()
            rep = episode_loss_check(seed, eps=episode_eps, tol=tol)
            results.setdefault("episode_loss (C=8, 32x32)", []).append(
                (rep.max_rel_error, rep.n_entries, time.perf_counter() - start)
            )
    return [
        CheckResult(name, max(r[0] for r in runs), tol, sum(r[1] for r in runs), sum(r[2] for r in runs))
        for name, runs in results.items()
    ]
