"""End-to-end acceptance criteria, each run at its stated tolerance.

Criteria 5 and 6 train at full desk scale and take most of the suite's runtime.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import record_criterion
from hsefss.cli import main
from hsefss.episodes import DatasetSpec, EMBEDDINGS_FILE, generate_dataset, load_dataset
from hsefss.harness import EvalReport, TrainConfig, evaluate, run_ablation, train
from hsefss.hse import (
    ABLATION_VARIANTS,
    BASELINE,
    FULL,
    ModelConfig,
    build_model,
    forward_episode,
    gcm_modulate,
    prior_mask,
    sdi_tokens,
)
from hsefss.numerics import Tensor
from hsefss.semantics import embedding_table, load_embeddings
from hsefss.verify import run_gradient_suite, run_oracle_suite, small_model, synthetic_episode

DESK_SEED = 0
EVAL_SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def desk_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    generate_dataset(DatasetSpec(), DESK_SEED, root)
    ds = load_dataset(root)
    return ds, embedding_table(load_embeddings(Path(root) / EMBEDDINGS_FILE))


def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    results = run_gradient_suite(seeds=(0, 1, 2))
    elapsed = time.perf_counter() - start
    for r in results:
        print(r.line())
    worst = max(results, key=lambda r: r.max_error / r.tol)
    ok = all(r.passed for r in results) and elapsed < 120
    record_criterion(1, ok, f"{len(results)} checks, worst {worst.name} {worst.max_error:.2e} < 1e-4, {elapsed:.1f}s < 120s")
    assert all(r.passed for r in results)
    assert elapsed < 120


def test_criterion_2_oracle_suite():
    start = time.perf_counter()
    results = run_oracle_suite(cases=20)
    elapsed = time.perf_counter() - start
    for r in results:
        print(r.line())
    names = {r.name for r in results}
    needed = {"masked_avg_pool", "prior_mask", "dense_attention", "conv2d", "bilinear_resize", "bce_loss", "miou"}
    worst = max(r.max_error for r in results)
    ok = all(r.passed and r.cases >= 20 for r in results) and needed <= names and elapsed < 60
    record_criterion(2, ok, f"{len(results)} oracles x 20 cases, worst error {worst:.2e} < 1e-6, {elapsed:.1f}s < 60s")
    assert needed <= names
    assert all(r.passed and r.cases >= 20 for r in results)
    assert elapsed < 60


def test_criterion_3_structural_contracts():
    rng = np.random.default_rng(2024)
    failures = []

    # token count: HW + W before truncation
    for h, w in [(16, 16), (3, 5), (8, 4)]:
        toks = sdi_tokens(Tensor(rng.standard_normal((4, h, w))), Tensor(rng.standard_normal(4)))
        if toks.shape != (4, h * w + w):
            failures.append(f"tokens {h}x{w}: {toks.shape}")

    # prior masks in [0,1], extremes attained when non-constant
    for _ in range(20):
        c, h = int(rng.integers(1, 6)), int(rng.integers(2, 7))
        fs, fq = rng.standard_normal((c, h, h)), rng.standard_normal((c, h, h))
        mask = (rng.random((h, h)) < 0.4).astype(np.uint8)
        mask[0, 0] = 1
        for size in (None, (2 * h, 2 * h)):
            m = prior_mask(Tensor(fs), Tensor(fq), mask, out_size=size)
            if m.map.min() < 0 or m.map.max() > 1:
                failures.append("prior out of range")
            if not m.constant and not (m.map.min() == 0.0 and m.map.max() == 1.0):
                failures.append(f"prior extremes {m.map.min()}, {m.map.max()}")

    # gcm fixed point
    for kind in ("gc1", "gc2"):
        p, fq = Tensor(rng.standard_normal(6)), Tensor(rng.standard_normal((6, 4, 4)))
        pm, fm = gcm_modulate(p, fq, Tensor(np.ones(6)), Tensor(np.zeros(6)), kind)
        if not (np.array_equal(pm.data, p.data) and np.array_equal(fm.data, fq.data)):
            failures.append(f"gcm fixed point {kind}")

    # K identical supports collapse to 1-shot
    params = small_model(seed=1)
    ep1 = synthetic_episode(32, shots=1, seed=5)
    emb = {"circle": Tensor(rng.standard_normal(8))}
    worst = 0.0
    for k in (2, 3, 5):
        epk = type(ep1)(support=ep1.support * k, query_image=ep1.query_image, query_mask=ep1.query_mask, class_name="circle")
        for variant in ABLATION_VARIANTS:
            a = forward_episode(params, variant, ep1, emb).logits.data
            b = forward_episode(params, variant, epk, emb).logits.data
            worst = max(worst, float(np.abs(a - b).max()))
    if worst > 1e-5:
        failures.append(f"K-identical collapse {worst:.2e}")

    record_criterion(3, not failures, f"tokens, prior range, gcm fixed point, K-collapse (max diff {worst:.1e} <= 1e-5) {failures or ''}")
    assert not failures


def test_criterion_4_protocol_determinism(tmp_path):
    data = tmp_path / "data"
    spec = DatasetSpec(extent=32, train_per_class=12, test_per_class=8)
    generate_dataset(spec, 11, data)
    params = tmp_path / "p.hseb"
    assert main(["train", "--data", str(data), "--out", str(params), "--epochs", "2", "--episodes-per-epoch", "20", "--channels", "8"]) == 0
    flags = ["eval", "--data", str(data), "--params", str(params), "--episodes", "30", "--seeds", "0,1,2"]
    assert main(flags + ["--report", str(tmp_path / "a.json")]) == 0
    assert main(flags + ["--report", str(tmp_path / "b.json")]) == 0
    a, b = (tmp_path / "a.json").read_bytes(), (tmp_path / "b.json").read_bytes()

    perm = flags[:-1] + ["2,0,1", "--report", str(tmp_path / "c.json")]
    assert main(perm) == 0
    ra, rc = EvalReport.from_json(a.decode()), EvalReport.from_json((tmp_path / "c.json").read_text())
    diff = abs(ra.miou - rc.miou)
    ok = a == b and diff <= 1e-12
    record_criterion(4, ok, f"eval payloads byte-identical={a == b}, permuted-seed mIoU diff {diff:.1e} <= 1e-12")
    assert a == b
    assert diff <= 1e-12


def test_criterion_5_desk_learning_trend(desk_data):
    ds, emb = desk_data
    mcfg = ModelConfig()
    scores, start = {}, time.perf_counter()
    for variant in (FULL, BASELINE):
        cfg = TrainConfig(fold=0, shots=1, epochs=20, episodes_per_epoch=200, variant=variant, train_seed=0)
        trained = train(ds, cfg, build_model(mcfg, 0), emb).params
        report = evaluate(ds, trained, 0, 1, 200, EVAL_SEEDS, variant=variant, embeddings=emb)
        scores[str(variant)] = report.miou
        print(f"{variant}: mIoU {report.miou:.4f} per-seed {report.per_seed_miou}")
    elapsed = time.perf_counter() - start
    full, base = scores[str(FULL)], scores[str(BASELINE)]
    ok_a, ok_b = full >= 0.45, full >= base + 0.02
    record_criterion(
        5,
        ok_a and ok_b and elapsed <= 45 * 60,
        f"(a) full {full:.4f} >= 0.45: {ok_a}; (b) baseline {base:.4f} + 0.02 <= full: {ok_b}; {elapsed / 60:.1f} min on 1 core",
    )
    assert ok_a
    assert ok_b
    assert elapsed <= 45 * 60


def test_criterion_6_ablation_structure(desk_data, tmp_path):
    ds, _ = desk_data
    structural, wins, summaries = True, 0, []
    for rep in (0, 1, 2):
        report = tmp_path / f"ablation_{rep}.json"
        argv = ["ablate", "--data", str(ds.root), "--variants", "all", "--seeds", "0,1,2", "--folds", "0,1,2"]
        argv += ["--eval-episodes", "200", "--epochs", "20", "--episodes-per-epoch", "200", "--seed", str(rep)]
        assert main(argv + ["--report", str(report)]) == 0
        rows = json.loads(report.read_text())["rows"]
        structural &= [r["variant"] for r in rows] == [str(v) for v in ABLATION_VARIANTS]
        structural &= rows[-1]["label"] == "Baseline+GCM+SDI"
        for r in rows:
            structural &= set(r["folds"]) == {"0", "1", "2"}
            structural &= abs(r["mean"] - math.fsum(r["folds"].values()) / 3) <= 1e-9
        structural &= all((tmp_path / f"ablation_{rep}.{ext}").exists() for ext in ("txt", "csv", "png"))
        wins += max(rows, key=lambda r: r["mean"])["variant"] == str(FULL)
        summaries.append(" ".join(f"{r['variant']}={r['mean']:.3f}" for r in rows))
    # a single losing repetition is tolerated; more than one fails the trend
    trend = wins >= 2
    record_criterion(
        6,
        structural and trend,
        f"4-row table, means recompute within 1e-9: {structural}; (sd3,gc2) max in {wins}/3 repetitions"
        f" (trend {'met' if trend else 'NOT met'}); " + " | ".join(summaries),
    )
    assert structural
    assert trend, f"(sd3,gc2) had the best mean in only {wins}/3 repetitions"
