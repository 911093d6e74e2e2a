"""Train the desk-config critic on clean-vs-perturbed synthetic pairs.

    python scripts/train_synthetic_critic.py --out runs/critic --kind gaussian_jitter --scale 0.2
"""

import argparse
import json
from pathlib import Path

from mocritic.experiments import CriticExperiment, run_critic_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--kind", default="gaussian_jitter")
    ap.add_argument("--scale", type=float, default=0.2)
    ap.add_argument("--clips", type=int, default=2000)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--pool-seed", type=int, default=7)
    ap.add_argument("--pair-seed", type=int, default=11)
    args = ap.parse_args()

    exp = CriticExperiment(n_clips=args.clips, kind=args.kind, scale=args.scale, pool_seed=args.pool_seed,
                           pair_seed=args.pair_seed, epochs=args.epochs)
    res = run_critic_experiment(exp, log=print)
    args.out.mkdir(parents=True, exist_ok=True)
    res.model.save(args.out / "critic.mcrt", metadata={"kind": exp.kind, "scale": exp.scale})
    summary = {"heldout_accuracy": res.heldout_accuracy, "train_loss": res.train_loss, "seconds": res.seconds}
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(f"held-out accuracy {res.heldout_accuracy[-1]:.4f} in {res.seconds:.0f}s")


if __name__ == "__main__":
    main()
