"""End-to-end acceptance checks, one test per criterion.

The summary at the end of the pytest run prints a PASS/FAIL line for each.
Criteria 7 and 8 train real networks and take several minutes.
"""

import importlib.util
import json
import time
from pathlib import Path

import numpy as np
import pytest

from kpseg import arch, cli, kpkernel as kp
from kpseg.metrics import evaluate_labels
from kpseg.pccore import LabeledCloud, grid_subsample, load_cloud, radius_search, save_cloud
from kpseg.synth import RosetteConfig, fov_coverage

SCRIPTS = Path(__file__).resolve().parents[1] / "scripts"


def load_script(name):
    spec = importlib.util.spec_from_file_location(name, SCRIPTS / f"{name}.py")
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


# -- 1 -------------------------------------------------------------------------------


@pytest.mark.criterion(1)
def test_gradients_match_finite_differences(note):
    t0 = time.time()
    report = cli.gradient_report()
    elapsed = time.time() - t0
    worst = max(report, key=report.get)
    note(f"max rel err {report[worst]:.2e} ({worst}), kpconv {report['kpconv']:.2e}, "
         f"softmax_ce {report['softmax_ce']:.2e}, {elapsed:.1f} s")
    assert {"unary", "leaky_relu", "batch_norm", "softmax_ce", "kpconv", "micro_network"} <= set(report)
    assert all(err < 1e-4 for err in report.values())
    assert report["kpconv"] < 1e-6 and report["softmax_ce"] < 1e-6
    assert elapsed < 60


# -- 2 -------------------------------------------------------------------------------


def brute_radius_table(queries, supports, radius, cap):
    rows = []
    for q in queries:
        d = np.sqrt(((supports - q) ** 2).sum(axis=1))
        hits = [i for i in np.lexsort((np.arange(len(d)), d)) if d[i] <= radius][:cap]
        rows.append(hits)
    width = max(1, max(len(r) for r in rows))
    table = np.full((len(queries), width), len(supports), dtype=np.int64)
    for i, r in enumerate(rows):
        table[i, :len(r)] = r
    return table


def brute_grid(coords, labels, cell):
    groups = {}
    for i, p in enumerate(coords):
        groups.setdefault(tuple(int(np.floor(v / cell)) for v in p), []).append(i)
    pts, labs = [], []
    for key in sorted(groups):
        idx = groups[key]
        acc = np.zeros(3)
        for i in idx:  # sequential sum, same rounding as a per-cell accumulator
            acc = acc + coords[i]
        pts.append(acc / len(idx))
        votes = np.bincount(labels[idx], minlength=6)
        labs.append(int(np.argmax(votes)))
    return np.array(pts), np.array(labs)


@pytest.mark.criterion(2)
def test_neighbor_and_grid_oracles(note):
    rng = np.random.default_rng(2024)
    t0 = time.time()
    neighbor_pairs = 0
    for case in range(100):
        n = int(rng.integers(1, 1001))
        coords = rng.uniform(-2, 2, (n, 3)) * rng.uniform(0.2, 1.0, 3)
        labels = rng.integers(0, 6, n).astype(np.uint8)
        radius = float(rng.uniform(0.05, 0.6))
        cap = int(rng.integers(1, 50))
        queries = coords[rng.choice(n, size=min(n, 200), replace=False)]
        got = radius_search(queries, coords, radius, cap).indices
        want = brute_radius_table(queries, coords, radius, cap)
        assert np.array_equal(got, want), f"radius_search differs in case {case}"
        neighbor_pairs += int((want < n).sum())
        cell = float(rng.uniform(0.05, 1.0))
        sub = grid_subsample(LabeledCloud(coords, labels=labels), cell)
        pts, labs = brute_grid(coords, labels, cell)
        assert np.array_equal(sub.coords, pts), f"grid_subsample barycenters differ in case {case}"
        assert np.array_equal(sub.labels, labs), f"grid_subsample labels differ in case {case}"
    elapsed = time.time() - t0
    note(f"100 clouds identical, {neighbor_pairs} neighbor pairs, {elapsed:.1f} s")
    assert elapsed < 60


# -- 3 -------------------------------------------------------------------------------


@pytest.mark.criterion(3)
def test_influence_analytic_cases(note):
    kd = kp.KernelDisposition(np.zeros((1, 3)), 1.0, 1.5)
    d = kd.influence
    rel = np.array([[0.0, 0.0, 0.0], [d / 2, 0.0, 0.0], [0.0, d, 0.0]])
    h = kp.kernel_influence(rel, kd)[:, 0]
    note(f"h = {h.tolist()}")
    np.testing.assert_allclose(h, [1.0, 0.5, 0.0], rtol=0, atol=1e-12)


# -- 4 -------------------------------------------------------------------------------


def chain_outputs(n, hops, spacing=0.15, r=0.2, length=21, query=10):
    cfg = arch.NetworkConfig(num_layers=1, radii=(r,), channels=(5,), stack_depth=n)
    net = arch.Network(cfg, seed=n)
    net.set_mode("eval")
    for s in net.bn.values():
        s.running_mean[:] = 0.1
        s.running_var[:] = 2.0
    pts = np.column_stack([spacing * np.arange(length), np.zeros(length), np.zeros(length)])
    A = kp.influence_operator(pts, pts, radius_search(pts, pts, r), net.kernels[0])
    x = np.ones((length, 1))
    base = net.stacked_block(0, x, A, update_stats=False)[query]
    x[query + hops] += 0.7
    return base, net.stacked_block(0, x, A, update_stats=False)[query]


@pytest.mark.criterion(4)
def test_stacked_receptive_field(note):
    for n in (1, 2, 3):
        for hops in range(1, 7):
            base, moved = chain_outputs(n, hops)
            if hops > n:
                assert np.array_equal(base, moved), f"n={n}: change leaked from {hops} hops"
            else:
                assert np.any(base != moved), f"n={n}: no change from {hops} hops"
    note("n=1,2,3: zero change beyond n hops, nonzero within")


# -- 5 -------------------------------------------------------------------------------


@pytest.mark.criterion(5)
def test_network_translation_invariance(note):
    cfg = arch.NetworkConfig(channels=arch.TINY_CHANNELS)
    net = arch.Network(cfg, seed=5)
    rng = np.random.default_rng(5)
    spheres = [LabeledCloud(rng.uniform(-4, 4, (1200, 3)) * [1, 1, 0.4]) for _ in range(2)]
    shift = np.array([100.0, -50.0, 7.0])
    moved = [s.with_coords(s.coords + shift) for s in spheres]
    worst = 0.0
    for mode in ("train", "eval"):
        net.set_mode(mode)
        a = net(arch.build_pyramid(spheres, cfg), update_stats=False)
        b = net(arch.build_pyramid(moved, cfg), update_stats=False)
        worst = max(worst, float(np.max(np.abs(a - b))))
    note(f"max |logit change| {worst:.2e}")
    assert worst < 1e-9


# -- 6 -------------------------------------------------------------------------------


@pytest.mark.criterion(6)
def test_metrics_against_set_oracle(note):
    from fractions import Fraction

    rng = np.random.default_rng(6)
    for _ in range(1000):
        n = int(rng.integers(1, 80))
        truth = rng.integers(0, int(rng.integers(1, 7)), n)
        pred = np.where(rng.random(n) < 0.6, truth, rng.integers(0, 6, n))
        rep = evaluate_labels(pred, truth)
        ious = {}
        for c in range(6):
            P = set(np.flatnonzero(pred == c).tolist())
            T = set(np.flatnonzero(truth == c).tolist())
            if P | T:
                ious[c] = Fraction(len(P & T), len(P | T))
        assert rep.oa == float(Fraction(int((pred == truth).sum()), n))
        assert rep.miou == float(sum(ious.values(), Fraction(0)) / len(ious))
        assert [rep.iou[k] for k in rep.iou] == [float(ious[c]) if c in ious else None for c in range(6)]
    four = evaluate_labels(np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1]))
    note(f"1000 cases exact; 4-point OA {four.oa}, mIoU {four.miou:.6f}")
    assert four.oa == 0.75
    assert four.miou == float(Fraction(7, 12))


# -- 7 -------------------------------------------------------------------------------


@pytest.mark.criterion(7)
def test_overfit_single_scene(tmp_path, note):
    result = load_script("overfit").run(tmp_path, steps=200, seed=0)
    note(f"{result['points']} points, training-scene OA {result['oa']:.4f} (mIoU {result['miou']:.4f}), "
         f"{result['total_s']:.0f} s")
    assert 19_000 <= result["points"] <= 21_000
    assert result["total_s"] < 300
    assert result["oa"] >= 0.95


# -- 8 -------------------------------------------------------------------------------


@pytest.mark.criterion(8)
def test_generalization_smoke(tmp_path, note):
    gen = load_script("generalization")
    t0 = time.time()
    train_dir, test_dir = gen.split_scenes(tmp_path, 8, 2, seed=0)
    deep = gen.run_depth(tmp_path, train_dir, test_dir, 3, gen.DEFAULT_STEPS, seed=0)
    shallow = gen.run_depth(tmp_path, train_dir, test_dir, 1, gen.DEFAULT_STEPS, seed=0)
    elapsed = time.time() - t0
    note(f"held-out mIoU depth 3 = {deep['miou']:.4f}, depth 1 = {shallow['miou']:.4f}, {elapsed / 60:.1f} min")
    assert elapsed <= 20 * 60
    assert deep["miou"] >= 0.60
    assert deep["miou"] >= shallow["miou"] - 0.02


# -- 9 -------------------------------------------------------------------------------


@pytest.mark.criterion(9)
def test_rosette_calibration(note):
    cfg = RosetteConfig()
    c01, c1 = fov_coverage(cfg, 0.1, 64), fov_coverage(cfg, 1.0, 64)
    times = np.linspace(0.0, 1.0, 21)
    cov = [fov_coverage(cfg, t, 64) for t in times]
    note(f"coverage {c01:.3f} @ 0.1 s, {c1:.3f} @ 1 s")
    assert 0.15 <= c01 <= 0.25
    assert c1 >= 0.88
    assert all(a <= b for a, b in zip(cov, cov[1:]))


# -- 10 ------------------------------------------------------------------------------


@pytest.mark.criterion(10)
def test_determinism_and_round_trips(tmp_path, note):
    data = tmp_path / "data"
    assert cli.main(["gen-data", "--scenes", "1", "--seed", "7", "--extent", "12", "--density", "6",
                     "--out", str(data)]) == 0
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"preset": "tiny", "stack_depth": 1, "batch_spheres": 2}))
    logs = []
    for run in ("a", "b"):
        model = tmp_path / f"{run}.ckpt"
        assert cli.main(["train", "--config", str(cfg), "--data", str(data), "--steps", "4", "--seed", "7",
                         "--workers", "1", "--out", str(model)]) == 0
        logs.append((tmp_path / f"{run}.log.jsonl").read_text())
    assert logs[0] == logs[1] and len(logs[0].splitlines()) == 4
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    net, state = arch.load_checkpoint(tmp_path / "a.ckpt")
    arch.save_checkpoint(net, tmp_path / "again.ckpt", rng_state=state)
    assert (tmp_path / "again.ckpt").read_bytes() == (tmp_path / "a.ckpt").read_bytes()

    scene = data / "scene_000.kpc"
    cloud = load_cloud(scene)
    save_cloud(cloud, tmp_path / "copy.kpc")
    back = load_cloud(tmp_path / "copy.kpc")
    assert (tmp_path / "copy.kpc").read_bytes() == scene.read_bytes()
    assert back.coords.tobytes() == cloud.coords.tobytes()
    note(f"identical 4-step logs and checkpoints; kpc ({len(cloud)} points) and checkpoint re-saves byte-identical")
