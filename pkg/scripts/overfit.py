"""Fit the tiny network to one fixed ~20k-point scene and score it on that same scene.

    python scripts/overfit.py --work /tmp/overfit --steps 200
"""

import argparse
import json
import time
from pathlib import Path

from kpseg import cli, synth
from kpseg.pccore import save_cloud

SCENE_SEED = 3
SCENE_KW = dict(extent=(24.0, 24.0), density=12.0, layers=1)


def write_scene(path: Path) -> int:
    cloud = synth.build_scene(synth.interchange_spec(SCENE_SEED, **SCENE_KW), SCENE_SEED).cloud
    save_cloud(cloud, path)
    return len(cloud)


def run(work, steps: int = 200, seed: int = 0, extra=None) -> dict:
    work = Path(work)
    work.mkdir(parents=True, exist_ok=True)
    data = work / "scene.kpc"
    n = write_scene(data)
    cfg = work / "run.json"
    cfg.write_text(json.dumps({"preset": "tiny", **(extra or {})}))
    model, metrics = work / "model.ckpt", work / "metrics.json"
    t0 = time.time()
    rc = cli.main(["train", "--config", str(cfg), "--data", str(data), "--steps", str(steps), "--seed", str(seed),
                   "--out", str(model)])
    t1 = time.time()
    rc = rc or cli.main(["eval", "--checkpoint", str(model), "--data", str(data), "--out", str(metrics)])
    if rc:
        raise RuntimeError(f"kpseg exited with status {rc}")
    report = json.loads(metrics.read_text())
    return {"points": n, "oa": report["oa"], "miou": report["miou"], "iou": report["iou"],
            "train_s": t1 - t0, "total_s": time.time() - t0}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--work", default="overfit_work")
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    r = run(args.work, args.steps, args.seed)
    print(json.dumps(r, indent=1))


if __name__ == "__main__":
    main()
