"""Field-of-view coverage of the rosette pattern against integration time, for a few frequency pairs.

    python scripts/rosette_calibration.py
"""

import argparse

from kpseg.synth import RosetteConfig, fov_coverage

GOLDEN = (1 + 5**0.5) / 2


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--grid-res", type=int, default=64)
    args = ap.parse_args(argv)
    times = [0.02, 0.05, 0.1, 0.2, 0.5, 1.0]
    candidates = [(40.0, 40.0 / GOLDEN**2), (40.0, 40.0 / GOLDEN), (30.0, 30.0 / GOLDEN**2), (60.0, 60.0 / GOLDEN**2),
                  (40.0, 15.0)]
    print("f_petal  f_spin  " + "  ".join(f"{t:>5}s" for t in times))
    for fp, fs in candidates:
        cfg = RosetteConfig(f_petal=fp, f_spin=fs)
        cov = [fov_coverage(cfg, t, args.grid_res) for t in times]
        print(f"{fp:7.2f} {fs:7.3f}  " + "  ".join(f"{c:6.3f}" for c in cov))
    d = RosetteConfig()
    print(f"default ({d.f_petal:.2f}, {d.f_spin:.3f}): 0.1 s -> {fov_coverage(d, 0.1, args.grid_res):.3f}, "
          f"1 s -> {fov_coverage(d, 1.0, args.grid_res):.3f}")


if __name__ == "__main__":
    main()
