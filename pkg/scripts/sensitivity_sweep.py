"""Clean-vs-jittered accuracy and score spread of a trained critic across noise scales.

    python scripts/sensitivity_sweep.py --model runs/critic/critic.mcrt --out runs/sweep.csv
"""

import argparse
from pathlib import Path

from mocritic.analysis import write_sweep
from mocritic.critic import CriticModel
from mocritic.experiments import SweepExperiment, run_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--model", type=Path, required=True)
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--scales", default="0.02,0.05,0.1,0.2")
    ap.add_argument("--seeds", default="0")
    ap.add_argument("--clips", type=int, default=200)
    args = ap.parse_args()

    exp = SweepExperiment(n_clips=args.clips, scales=tuple(float(s) for s in args.scales.split(",")),
                          seeds=tuple(int(s) for s in args.seeds.split(",")))
    rows = run_sweep(CriticModel.load(args.model), exp)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_sweep(rows, args.out)
    for r in rows:
        print(f"scale {r.scale:<6g} accuracy {r.accuracy:.3f}  mean {r.mean_score:8.3f}  std {r.std_score:.3f}")


if __name__ == "__main__":
    main()
