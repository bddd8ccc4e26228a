"""Acceptance suite: one test per criterion, each printing a PASS line
with its measured numbers (run with ``pytest tests/test_acceptance.py -v -s``).
"""

import math
import time

import numpy as np
import pytest

from countforge.core import dumps_canonical
from countforge.demo import DemoConfig, ablation_csv_text, run_ablation
from countforge.gl import GlConfig, brute_force_gl, finite_diff_grad, gl_loss
from countforge.metrics import CountRecord, bin_distribution, compute_metrics, exclusion_report
from countforge.mosaic import EVAL_CONFIG, generate_mosaic_dataset
from countforge.transport import cost_matrix, grid_coords
from countforge.ttn import TtnConfig, plan_tiles, should_normalize

from test_mosaic import make_image, recount_from_provenance


def _random_instance(rng, max_cells=6, min_m=0, max_m=4):
    h = int(rng.integers(1, 4))
    w = int(rng.integers(1, max_cells // h + 1))
    m = int(rng.integers(min_m, max_m + 1))
    cells = grid_coords(h, w)
    pts = rng.uniform(0, 1, size=(m, 2))
    cost = cost_matrix(cells, pts, eta=0.6)
    a = rng.uniform(0, 2, size=h * w)
    return a, cost, m


def test_criterion_1_gl_oracle_equivalence():
    rng = np.random.default_rng(20240601)
    solver_cfg = GlConfig(max_iters=20000, tol=1e-11)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        a, cost, m = _random_instance(rng)
        loss = gl_loss(a, cost, m, solver_cfg).loss
        reference = brute_force_gl(a, cost, m, GlConfig())
        gap = abs(loss - reference) / max(1.0, abs(reference))
        worst = max(worst, gap)
        assert gap <= 1e-3
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0
    print(f"PASS criterion 1: oracle equivalence on 200 instances "
          f"(worst rel gap {worst:.2e}, {elapsed:.1f}s)")


def test_criterion_2_gl_gradient():
    rng = np.random.default_rng(77002)
    cfg = GlConfig(max_iters=60000, tol=1e-10)
    worst = 0.0
    for _ in range(50):
        a, cost, m = _random_instance(rng, min_m=1)
        res = gl_loss(a, cost, m, cfg)
        fd = finite_diff_grad(a, cost, m, cfg, h=1e-5)
        rel = np.linalg.norm(res.grad_a - fd) / max(1.0, np.linalg.norm(fd))
        worst = max(worst, rel)
        assert rel <= 1e-3
    # m = 0 closed form is exactly 2 * tau * a
    a = rng.uniform(0, 2, size=5)
    res = gl_loss(a, np.zeros((5, 0)), 0, GlConfig())
    assert np.array_equal(res.grad_a, 2.0 * 0.5 * a)
    print(f"PASS criterion 2: gradient vs finite differences on 50 instances "
          f"(worst rel err {worst:.2e}); m=0 closed form exact")


def test_criterion_3_gl_distance_monotonicity():
    h, w = 1, 40
    a = np.zeros(h * w)
    a[0] = 1.0
    cells = grid_coords(h, w)
    cfg = GlConfig(max_iters=20000, tol=1e-11)
    losses = []
    for j in range(20):
        cost = cost_matrix(cells, cells[j][None, :], eta=0.6)
        losses.append(gl_loss(a, cost, 1, cfg).loss)
    for near, far in zip(losses, losses[1:]):
        assert far >= near - 1e-12
    print(f"PASS criterion 3: loss non-decreasing over 20 distances "
          f"({losses[0]:.4f} -> {losses[-1]:.4f})")


def test_criterion_4_metrics_fixtures():
    report = compute_metrics(
        [CountRecord("a", 10, 12.0), CountRecord("b", 20, 24.0)]
    )
    assert abs(report.mae - 3.0) <= 1e-9
    assert abs(report.rmse - math.sqrt(10.0)) <= 1e-9
    assert abs(report.nae - 0.2) <= 1e-9
    assert abs(report.sre - math.sqrt(0.6)) <= 1e-9

    import random

    prng = random.Random(42)
    records = []
    for i in range(998):
        gt = prng.randint(5, 100)
        records.append(
            CountRecord(f"small{i:03d}", gt, gt * (1.0 + prng.uniform(-0.12, 0.12)))
        )
    records.append(CountRecord("tail_a", 2400, 2880.0))
    records.append(CountRecord("tail_b", 2500, 2000.0))
    full, excluded, dropped = exclusion_report(records, 2)
    assert set(dropped) == {"tail_a", "tail_b"}
    rmse_change = abs(full.rmse - excluded.rmse) / full.rmse
    nae_change = abs(full.nae - excluded.nae) / full.nae
    assert rmse_change > 0.5
    assert nae_change < 0.05
    bins = bin_distribution(records, 10)
    assert bins[-1][2] == 2
    print(f"PASS criterion 4: metric fixtures exact to 1e-9; top-2 exclusion moves "
          f"RMSE {rmse_change:.0%} but NAE only {nae_change:.1%}")


@pytest.fixture(scope="module")
def manifest_200():
    images = []
    k = 0
    for c in range(20):
        for i in range(10):
            images.append(
                make_image(
                    f"img{k:03d}",
                    f"class{c:02d}",
                    width=560 + 40 * (k % 6),
                    height=560 + 40 * ((k + 3) % 6),
                    n_points=30 + (k % 50),
                    seed=9000 + k,
                )
            )
            k += 1
    return images


def test_criterion_5_mosaic_integrity(manifest_200):
    t0 = time.perf_counter()
    payload = generate_mosaic_dataset(manifest_200, 1000, EVAL_CONFIG, seed=31)
    text_a = dumps_canonical(payload)
    assert len(payload["pairs"]) == 4000

    by_id = {img.id: img for img in manifest_200}
    per_mosaic_pairs: dict[str, list] = {}
    for pair in payload["pairs"]:
        assert pair["gt_count"] == recount_from_provenance(pair, by_id)
        per_mosaic_pairs.setdefault(pair["mosaic_id"], []).append(pair)
    # mass conservation: the four pairs of one collage cover its four
    # classes exactly once, so their counts must sum to the total points
    # retained across the four tiles
    for mosaic_id, pairs in per_mosaic_pairs.items():
        assert len(pairs) == 4
        total_from_pairs = sum(p["gt_count"] for p in pairs)
        tile_total = 0
        for tile in pairs[0]["tiles"]:
            img = by_id[tile["source_id"]]
            pts = img.points.points
            inside = (
                (pts[:, 0] > tile["x"]) & (pts[:, 0] < tile["x"] + tile["w"])
                & (pts[:, 1] > tile["y"]) & (pts[:, 1] < tile["y"] + tile["h"])
            )
            tile_total += int(inside.sum())
        assert total_from_pairs == tile_total

    text_b = dumps_canonical(generate_mosaic_dataset(manifest_200, 1000, EVAL_CONFIG, seed=31))
    assert text_a == text_b
    elapsed = time.perf_counter() - t0
    assert elapsed < 30.0
    print(f"PASS criterion 5: 1000 queries -> 4000 pairs, recount and mass "
          f"conservation verified, reruns byte-identical ({elapsed:.1f}s)")


def test_criterion_6_ttn():
    plan = plan_tiles(768, 768, TtnConfig(M=8))
    assert len(plan.tiles) == 64
    assert all(t.w == 96 and t.h == 96 for t in plan.tiles)
    covered = np.zeros((768, 768), dtype=np.int32)
    for t in plan.tiles:
        covered[t.y : t.y + t.h, t.x : t.x + t.w] += 1
    assert covered.min() == 1 and covered.max() == 1

    from countforge.core import BoundingBox

    small = [BoundingBox(0, 0, 10, 10)] * 3
    large = [BoundingBox(0, 0, 100, 100)]
    assert should_normalize(small, 768, 768)
    assert not should_normalize(large, 768, 768)

    rng = np.random.default_rng(5)
    for _ in range(1000):
        m = int(rng.integers(1, 17))
        w = int(rng.integers(m, 1200))
        h = int(rng.integers(m, 1200))
        p = plan_tiles(w, h, TtnConfig(M=m))
        assert sum(t.w * t.h for t in p.tiles) == w * h
        assert len({(t.x, t.y) for t in p.tiles}) == m * m
        xs = sorted({t.x for t in p.tiles})
        ys = sorted({t.y for t in p.tiles})
        assert len(xs) == m and len(ys) == m  # grid structure => disjoint
    print("PASS criterion 6: 64-tile cover exact, threshold fixtures match, "
          "partition property over 1000 draws")


@pytest.fixture(scope="module")
def ablation_outcome():
    t0 = time.perf_counter()
    outcome = run_ablation(DemoConfig())
    elapsed = time.perf_counter() - t0
    return outcome, elapsed


def test_criterion_7_recipe_demonstration(ablation_outcome):
    outcome, elapsed = ablation_outcome
    nae = {s: outcome.aggregate_reports[s].nae for s in ("S1", "S2", "S3", "S4")}
    assert nae["S4"] < min(nae["S1"], nae["S2"], nae["S3"])
    s1_runs = [r for r in outcome.runs if r.setting == "S1"]
    mean_pred = np.mean([r.mean_pred for r in s1_runs])
    mean_gt = np.mean([r.mean_gt for r in s1_runs])
    assert mean_pred > mean_gt
    assert elapsed < 180.0
    print(f"PASS criterion 7: aggregate NAE S1={nae['S1']:.3f} S2={nae['S2']:.3f} "
          f"S3={nae['S3']:.3f} S4={nae['S4']:.3f}; S1 over-counts "
          f"({mean_pred:.2f} vs {mean_gt:.2f}); {elapsed:.0f}s")


def test_criterion_8_determinism(manifest_200, ablation_outcome):
    a = dumps_canonical(generate_mosaic_dataset(manifest_200, 40, EVAL_CONFIG, seed=77))
    b = dumps_canonical(generate_mosaic_dataset(manifest_200, 40, EVAL_CONFIG, seed=77))
    assert a == b

    outcome, _ = ablation_outcome
    small = DemoConfig(
        n_train_scenes=6, n_eval_scenes=8, epochs=2, seeds=(5,),
        gl=GlConfig(epsilon=0.01, tau=3.0, eta=0.1, max_iters=40, tol=1e-3),
    )
    csv_a = ablation_csv_text(run_ablation(small))
    csv_b = ablation_csv_text(run_ablation(small))
    assert csv_a == csv_b
    # the full checked-in run is itself reproducible per seed: rerun one cell
    from countforge.demo import _run_single

    ref = next(r for r in outcome.runs if r.setting == "S4" and r.seed == 101)
    rerun = _run_single("S4", 101, DemoConfig())
    assert rerun.report == ref.report
    assert rerun.trace == ref.trace
    print("PASS criterion 8: mosaic and demo pipelines byte-identical across reruns")
