"""Train on synthetic scenes, score held-out ones, once per stack depth.

    python scripts/generalization.py --work /tmp/gen --steps 500
"""

import argparse
import json
import time
from pathlib import Path

from kpseg import cli

DEFAULT_STEPS = 500


def split_scenes(work: Path, n_train: int, n_test: int, seed: int):
    data = work / "all"
    cli.main(["gen-data", "--scenes", str(n_train + n_test), "--seed", str(seed), "--out", str(data)])
    train_dir, test_dir = work / "train", work / "heldout"
    for d in (train_dir, test_dir):
        d.mkdir(parents=True, exist_ok=True)
    files = sorted(data.glob("scene_*.kpc"))
    for i, f in enumerate(files):
        target = train_dir if i < n_train else test_dir
        (target / f.name).write_bytes(f.read_bytes())
    return train_dir, test_dir


def run_depth(work: Path, train_dir: Path, test_dir: Path, depth: int, steps: int, seed: int) -> dict:
    cfg = work / f"depth{depth}.json"
    cfg.write_text(json.dumps({"preset": "tiny", "stack_depth": depth, "steps_per_epoch": max(1, steps // 4)}))
    model = work / f"depth{depth}.ckpt"
    metrics = work / f"depth{depth}.metrics.json"
    t0 = time.time()
    rc = cli.main(["train", "--config", str(cfg), "--data", str(train_dir), "--steps", str(steps),
                   "--seed", str(seed), "--out", str(model)])
    t1 = time.time()
    rc = rc or cli.main(["eval", "--checkpoint", str(model), "--data", str(test_dir), "--out", str(metrics),
                         "--method", f"stack depth {depth}"])
    if rc:
        raise SystemExit(rc)
    report = json.loads(metrics.read_text())
    return {"depth": depth, "miou": report["miou"], "oa": report["oa"], "iou": report["iou"],
            "train_s": t1 - t0, "eval_s": time.time() - t1}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--work", default="gen_work")
    ap.add_argument("--train-scenes", type=int, default=8)
    ap.add_argument("--test-scenes", type=int, default=2)
    ap.add_argument("--steps", type=int, default=DEFAULT_STEPS)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    work = Path(args.work)
    work.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    train_dir, test_dir = split_scenes(work, args.train_scenes, args.test_scenes, args.seed)
    results = [run_depth(work, train_dir, test_dir, d, args.steps, args.seed) for d in (3, 1)]
    summary = {"runs": results, "total_s": time.time() - t0}
    (work / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    for r in results:
        print(f"depth {r['depth']}: held-out mIoU {r['miou']:.4f}  OA {r['oa']:.4f}  "
              f"train {r['train_s']:.0f} s  eval {r['eval_s']:.0f} s")
    print(f"total {summary['total_s']:.0f} s")


if __name__ == "__main__":
    main()
