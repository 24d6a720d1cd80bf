"""Command line entry point: ``kpseg <command> [options]``."""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import arch, synth
from .metrics import ConfusionMatrix, compute_metrics
from .pccore import (
    CloudDataError,
    CloudFormatError,
    LabeledCloud,
    grid_subsample,
    load_cloud,
    save_cloud,
)

CLOUD_SUFFIXES = (".kpc", ".bin", ".ply", ".xyz", ".txt")

# what the desk-scale "tiny" preset changes relative to the default preset: narrow layers and a
# schedule sized for a few hundred steps instead of tens of epochs
TINY_OVERRIDES = {
    "channels": list(arch.TINY_CHANNELS),
    "lr": 0.05,
    "momentum": 0.9,
    "steps_per_epoch": 50,
    "lr_decay": 0.5,
}

_NET_KEYS = {f.name for f in fields(arch.NetworkConfig)}
_TRAIN_KEYS = {f.name for f in fields(arch.TrainConfig)}


@dataclass
class RunConfig:
    """Flat view of network, optimizer and run settings, as read from a JSON file."""

    preset: str = "paper"
    seed: int = 0
    steps: Optional[int] = None  # None: epochs * steps_per_epoch
    workers: int = 1
    data: Optional[str] = None
    tile_stride: float = 2.5
    network: arch.NetworkConfig = field(default_factory=arch.NetworkConfig)
    train: arch.TrainConfig = field(default_factory=arch.TrainConfig)

    @property
    def total_steps(self) -> int:
        return self.steps if self.steps is not None else self.train.epochs * self.train.steps_per_epoch

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in ("preset", "seed", "steps", "workers", "data", "tile_stride")}
        out.update(self.network.to_dict())
        t = asdict(self.train)
        t["scale_range"] = list(t["scale_range"])
        out.update(t)
        return out


_RUN_KEYS = {"preset", "seed", "steps", "workers", "data", "tile_stride"}


def preset_values(name: str) -> dict:
    if name == "paper":
        return {}
    if name == "tiny":
        return dict(TINY_OVERRIDES)
    raise ValueError(f"unknown preset {name!r} (expected paper or tiny)")


def build_run_config(values: dict) -> RunConfig:
    """Fill defaults from the preset, then apply ``values``; unknown keys are rejected."""
    unknown = set(values) - _RUN_KEYS - _NET_KEYS - _TRAIN_KEYS
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
    preset = values.get("preset", "paper")
    merged = preset_values(preset)
    merged.update(values)
    net = arch.NetworkConfig(**{k: v for k, v in merged.items() if k in _NET_KEYS})
    tr = arch.TrainConfig(**{k: v for k, v in merged.items() if k in _TRAIN_KEYS})
    run = RunConfig(network=net, train=tr, **{k: v for k, v in merged.items() if k in _RUN_KEYS})
    if run.steps is not None and run.steps < 1:
        raise ValueError("steps must be >= 1")
    if run.workers < 1:
        raise ValueError("workers must be >= 1")
    if not 0 < run.tile_stride <= net.sphere_radius:
        raise ValueError(f"tile_stride must be in (0, sphere_radius={net.sphere_radius}]")
    return run


def load_config(path) -> dict:
    try:
        values = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(values, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return values


def resolve_config(args) -> RunConfig:
    values = load_config(args.config) if getattr(args, "config", None) else {}
    for key in ("preset", "seed", "steps", "workers", "data"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    return build_run_config(values)


# ----------------------------------------------------------------------------
# data helpers
# ----------------------------------------------------------------------------


def cloud_files(path) -> List[Path]:
    p = Path(path)
    if p.is_dir():
        files = sorted(f for f in p.iterdir() if f.suffix.lower() in CLOUD_SUFFIXES)
        if not files:
            raise ValueError(f"{p}: no point cloud files")
        return files
    if not p.exists():
        raise ValueError(f"{p}: no such file or directory")
    return [p]


def load_clouds(path) -> List[LabeledCloud]:
    return [load_cloud(f) for f in cloud_files(path)]


def _echo(run: RunConfig, stream):
    stream.write("config " + json.dumps(run.to_dict(), sort_keys=True) + "\n")


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = []
    for i in range(args.scenes):
        seed = (args.seed or 0) * 1000 + i
        spec = synth.interchange_spec(seed, extent=(args.extent, args.extent), density=args.density,
                                      layers=args.decks)
        scene = synth.build_scene(spec, seed)
        cloud = scene.cloud
        if args.scan_seconds > 0:
            poses = synth.flight_poses(scene, args.passes, seed=seed)
            per = args.scan_seconds / len(poses)
            scans = [synth.rosette_scan(scene, p, synth.RosetteConfig(), per, seed=seed + k, t0=k * per)
                     for k, p in enumerate(poses)]
            cloud = LabeledCloud(np.vstack([s.coords for s in scans]), np.concatenate([s.intensity for s in scans]),
                                 np.concatenate([s.labels for s in scans]))
        name = f"scene_{i:03d}.kpc"
        save_cloud(cloud, out / name)
        manifest.append({"file": name, "seed": seed, "points": len(cloud), "spec": spec.to_dict()})
        print(f"{name}: {len(cloud)} points")
    (out / "scenes.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return 0


def cmd_grid_sample(args) -> int:
    cloud = load_cloud(args.input)
    sub = grid_subsample(cloud, args.cell, args.label_mode if cloud.labels is not None else "none")
    save_cloud(sub, args.out)
    print(f"{len(cloud)} -> {len(sub)} points")
    return 0


def cmd_pattern(args) -> int:
    cfg = synth.RosetteConfig()
    report = {
        "duration": args.duration,
        "directions": int(round(cfg.rate * args.duration)),
        "f_petal": cfg.f_petal,
        "f_spin": cfg.f_spin,
        "fov": cfg.fov,
    }
    if args.coverage:
        report["grid_res"] = args.grid_res
        report["coverage"] = synth.fov_coverage(cfg, args.duration, args.grid_res)
    if args.out:
        dirs, t = synth.rosette_directions(cfg, 0.0, args.duration)
        np.savetxt(args.out, np.column_stack([t, dirs]), fmt="%.9g", header="t dx dy dz")
    print(json.dumps(report))
    return 0


def prepare_training(clouds, cfg: arch.NetworkConfig):
    """Reduce every scene to the first-layer grid, labels by majority."""
    out = []
    for c in clouds:
        if c.labels is None:
            raise ValueError("training data needs labels")
        out.append(grid_subsample(c, cfg.cell_sizes[0], "majority"))
    return out


def cmd_train(args) -> int:
    run = resolve_config(args)
    if run.data is None:
        raise ValueError("train needs --data")
    _echo(run, sys.stdout)
    clouds = prepare_training(load_clouds(run.data), run.network)
    if args.checkpoint:
        net, state = arch.load_checkpoint(args.checkpoint, expect=run.network)
        if state and state.get("seed") != run.seed:
            raise ValueError(f"checkpoint was trained with seed {state.get('seed')}, not {run.seed}")
    else:
        net = arch.Network(run.network, seed=run.seed)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".log.jsonl")
    t0 = time.time()
    with open(log_path, "a" if args.checkpoint else "w") as log:
        remaining = run.total_steps - net.step if args.checkpoint else run.total_steps
        arch.train(net, clouds, run.train, max(0, remaining), seed=run.seed, workers=run.workers, log=log)
    arch.save_checkpoint(net, out, rng_state={"seed": run.seed, "step": net.step})
    print(f"trained to step {net.step} in {time.time() - t0:.1f} s; checkpoint {out}, log {log_path}")
    return 0


def cmd_eval(args) -> int:
    net, _ = arch.load_checkpoint(args.checkpoint)
    stride = args.tile_stride if args.tile_stride is not None else 2.5
    cm = ConfusionMatrix(net.cfg.num_classes)
    for f in cloud_files(args.data):
        cloud = load_cloud(f)
        if cloud.labels is None:
            raise ValueError(f"{f}: evaluation needs labels")
        cm.accumulate(arch.predict_cloud(net, cloud, stride), cloud.labels)
    report = compute_metrics(cm)
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n")
    print(report.table(args.method))
    return 0


def cmd_predict(args) -> int:
    net, _ = arch.load_checkpoint(args.checkpoint)
    stride = args.tile_stride if args.tile_stride is not None else 2.5
    cloud = load_cloud(args.input)
    labels = arch.predict_cloud(net, cloud, stride)
    save_cloud(LabeledCloud(cloud.coords, cloud.intensity, labels), args.out)
    hist = np.bincount(labels, minlength=net.cfg.num_classes)
    print(json.dumps({"points": len(labels), "histogram": hist.tolist()}))
    return 0


def gradient_report(seed: int = 0) -> dict:
    """Max relative error of every layer type and of a micro-network, against central differences."""
    from . import kpkernel as kp
    from . import nncore as nn
    from .pccore import radius_search

    rng = np.random.default_rng(seed)
    out = {}

    x, W, b = rng.normal(size=(6, 3)), rng.normal(size=(3, 4)), rng.normal(size=4)
    out["unary"] = nn.finite_diff_check(
        lambda: nn.unary_forward(x, W, b),
        lambda G: dict(zip("xWb", nn.unary_backward(x, W, G))), {"x": x, "W": W, "b": b})

    z = rng.normal(size=(12, 3))
    z[np.abs(z) < 1e-3] = 0.5
    out["leaky_relu"] = nn.finite_diff_check(
        lambda: nn.leaky_relu(z), lambda G: {"z": nn.leaky_relu_backward(z, G)}, {"z": z})

    xb = rng.normal(1.0, 2.0, size=(10, 4))
    s = nn.BNState.create(4)
    s.gamma[:] = rng.uniform(0.5, 2, 4)
    s.beta[:] = rng.normal(size=4)

    def bn_back(G):
        _, cache = nn.batch_norm(xb, s, update_stats=False)
        gx, gg, gb = nn.batch_norm_backward(G, s.gamma, cache)
        return {"x": gx, "gamma": gg, "beta": gb}

    out["batch_norm"] = nn.finite_diff_check(
        lambda: nn.batch_norm(xb, s, update_stats=False)[0], bn_back, {"x": xb, "gamma": s.gamma, "beta": s.beta})

    logits = rng.normal(size=(10, 6))
    labels = rng.integers(0, 6, 10)
    out["softmax_ce"] = nn.finite_diff_check(
        lambda: np.array(nn.softmax_cross_entropy(logits, labels)[0]),
        lambda G: {"l": nn.softmax_cross_entropy(logits, labels)[1] * G}, {"l": logits})

    kd = kp.generate_kernel_points(15, 1.0)
    sup = rng.uniform(-1, 1, (6, 3))
    q = sup[:4] + rng.normal(0, 0.1, (4, 3))
    nb = radius_search(q, sup, 2.0)
    feats = rng.normal(size=(6, 3))
    Wk = rng.normal(size=(15, 3, 3))

    def kp_fwd():
        return kp.kpconv_forward(q, sup, nb, np.vstack([feats, np.zeros((1, 3))]), Wk, kd)

    def kp_back(G):
        gf, gW = kp.kpconv_backward(q, sup, nb, np.vstack([feats, np.zeros((1, 3))]), Wk, kd, G)
        return {"f": gf[:-1], "W": gW}

    out["kpconv"] = nn.finite_diff_check(kp_fwd, kp_back, {"f": feats, "W": Wk})

    cfg = arch.NetworkConfig(num_layers=2, radii=(0.3, 0.6), channels=(4, 4), stack_depth=2,
                             sphere_radius=2.0, batch_spheres=1, kernel_points=5)
    net = arch.Network(cfg, seed=seed)
    batch = arch.build_pyramid(LabeledCloud(rng.uniform(0, 1, (30, 3))), cfg)
    net.set_mode("train")

    def net_back(G):
        net.params.zero_grad()
        net(batch, update_stats=False)
        grads = {"input": net.backward(G)}
        grads.update({p.name: p.grad.copy() for p in net.params})
        return grads

    tensors = {"input": batch.features}
    tensors.update({p.name: p.value for p in net.params})
    out["micro_network"] = nn.finite_diff_check(lambda: net(batch, update_stats=False), net_back, tensors)
    return out


def cmd_grad_check(args) -> int:
    report = gradient_report(args.seed or 0)
    width = max(len(k) for k in report)
    for name, err in report.items():
        print(f"{name:<{width}}  {err:.3e}")
    worst = max(report.values())
    if worst >= 1e-4:
        raise ValueError(f"gradient check failed: max relative error {worst:.3e}")
    return 0


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kpseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=False):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--config", default=None, help="JSON run configuration")
        p.add_argument("--out", required=out_required, default=None)
        p.add_argument("--preset", choices=("paper", "tiny"), default=None)
        p.add_argument("--workers", type=int, default=None)

    p = sub.add_parser("gen-data", help="write synthetic labeled scenes")
    common(p, out_required=True)
    p.add_argument("--scenes", type=int, default=1)
    p.add_argument("--extent", type=float, default=24.0)
    p.add_argument("--density", type=float, default=12.0)
    p.add_argument("--decks", type=int, default=1)
    p.add_argument("--scan-seconds", type=float, default=0.0, help="rosette-scan instead of surface sampling")
    p.add_argument("--passes", type=int, default=4)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("grid-sample", help="grid-subsample a cloud")
    common(p, out_required=True)
    p.add_argument("--data", dest="input", required=True)
    p.add_argument("--cell", type=float, default=0.1)
    p.add_argument("--label-mode", choices=("majority", "none"), default="majority")
    p.set_defaults(func=cmd_grid_sample)

    p = sub.add_parser("pattern", help="rosette scan pattern report")
    common(p)
    p.add_argument("--duration", type=float, default=0.1)
    p.add_argument("--coverage", action="store_true")
    p.add_argument("--grid-res", type=int, default=64)
    p.set_defaults(func=cmd_pattern)

    p = sub.add_parser("train", help="train a network")
    common(p, out_required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--checkpoint", default=None, help="resume from this checkpoint")
    p.add_argument("--log", default=None, help="JSON-lines loss log (default: <out>.log.jsonl)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics of a checkpoint on labeled clouds")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tile-stride", type=float, default=None)
    p.add_argument("--method", default="KPConv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="label a cloud")
    common(p, out_required=True)
    p.add_argument("--data", dest="input", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tile-stride", type=float, default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("grad-check", help="finite-difference check of every layer")
    common(p)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)  # exits with status 2 on usage errors
    try:
        return args.func(args)
    except (ValueError, KeyError, CloudFormatError, CloudDataError, OSError, arch.CheckpointError,
            RuntimeError, FloatingPointError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
