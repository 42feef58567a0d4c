"""Train the named benchmark runs and print their final metrics.

    python scripts/run_benchmark.py                      # every run, 5000 steps
    python scripts/run_benchmark.py unc_box oracle --steps 1000
"""

import argparse
import csv
import sys

from boxboot import benchmark


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("runs", nargs="*", help=f"any of {', '.join(benchmark.RUNS)} (default: all)")
    parser.add_argument("--steps", type=int, default=benchmark.STEPS)
    parser.add_argument("--eval-every", type=int, default=500)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    unknown = set(args.runs) - set(benchmark.RUNS)
    if unknown:
        parser.error(f"unknown run(s): {', '.join(sorted(unknown))}")

    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["run", "steps", "miou", "iou", "sigma2_in_mask", "sigma2_in_band", "flip_frac", "cpu_s"])
    for name in args.runs or benchmark.RUNS:
        res = benchmark.run(name, steps=args.steps, eval_every=args.eval_every, seed=args.seed)
        f = res.final
        writer.writerow(
            [name, f.step, f"{f.miou:.4f}", " ".join(f"{v:.4f}" for v in f.iou),
             f"{f.sigma2_in_mask:.4g}", f"{f.sigma2_in_band:.4g}", f"{f.flip_frac:.4f}", f"{res.cpu_seconds:.0f}"]
        )
        sys.stdout.flush()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
