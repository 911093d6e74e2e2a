"""Compare the critic alone with learned ensembles of critic and heuristic features.

Trains a critic on the chosen perturbation (or loads one), builds a fresh
feature table, and fits each ensemble with and without the critic column.

    python scripts/ensemble_study.py --out runs/ensemble.json
"""

import argparse
import json
from dataclasses import asdict, replace
from pathlib import Path

from mocritic.critic import CriticModel
from mocritic.experiments import EnsembleExperiment, run_critic_experiment, run_ensemble_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--critic", type=Path, default=None, help="reuse a trained critic instead of training one")
    ap.add_argument("--kind", default="joint_distortion")
    ap.add_argument("--scale", type=float, default=0.5)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--clips", type=int, default=1500)
    args = ap.parse_args()

    base = EnsembleExperiment()
    exp = replace(base, n_clips=args.clips,
                  critic=replace(base.critic, kind=args.kind, scale=args.scale, epochs=args.epochs))
    model = CriticModel.load(args.critic) if args.critic else run_critic_experiment(exp.critic, log=print).model
    res = run_ensemble_experiment(model, exp)
    print(f"critic alone {res.critic_accuracy:.4f}")
    for m in res.with_critic:
        print(f"{m:<14} with critic {res.with_critic[m]:.4f}  without {res.without_critic[m]:.4f}")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(asdict(res), indent=2))


if __name__ == "__main__":
    main()
