"""Elo ratings, noise-sensitivity sweeps and metric-ensemble learning."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.optimize import minimize

from . import autodiff as ad
from .autodiff import Adam, ContractViolation, Tensor, no_grad
from .metrics import HIGHER_BETTER, MetricReport, evaluate_metric
from .motion import MotionClip
from .nn import ParamSet, glorot
from .preference import PerturbationSpec, PreferencePair, derive_seed, perturb

OUTCOMES = ("a_wins", "b_wins", "tie")

# ----------------------------------------------------------------------- Elo


def elo_expected(r_a: float, r_b: float) -> tuple[float, float]:
    e_a = 1.0 / (1.0 + 10.0 ** ((r_b - r_a) / 400.0))
    return e_a, 1.0 - e_a


def elo_update(r_a: float, r_b: float, outcome: str, k: float = 32.0) -> tuple[float, float]:
    if outcome not in OUTCOMES:
        raise ContractViolation(f"unknown outcome {outcome!r}")
    s_a = {"a_wins": 1.0, "b_wins": 0.0, "tie": 0.5}[outcome]
    e_a, _ = elo_expected(r_a, r_b)
    delta = k * (s_a - e_a)
    # b's change is the exact negation so every match is zero-sum
    return r_a + delta, r_b - delta


@dataclass(frozen=True)
class Match:
    a: str
    b: str
    outcome: str

    def __post_init__(self):
        if self.outcome not in OUTCOMES:
            raise ContractViolation(f"unknown outcome {self.outcome!r}")
        if self.a == self.b:
            raise ContractViolation("a subset cannot play itself")


@dataclass
class EloTable:
    ratings: dict[str, float]
    k: float = 32.0
    matches: list[Match] = field(default_factory=list)

    def played(self, name: str) -> int:
        return sum(name in (m.a, m.b) for m in self.matches)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["subset", "rating", "matches"])
            for name in sorted(self.ratings):
                w.writerow([name, repr(self.ratings[name]), self.played(name)])


def elo_tournament(matches: Sequence[Match], k: float = 32.0, initial: float = 1500.0,
                   subsets: Sequence[str] | None = None) -> EloTable:
    """Sequential Elo over ``matches`` in the given order."""
    names = list(subsets) if subsets is not None else sorted({n for m in matches for n in (m.a, m.b)})
    ratings = {n: float(initial) for n in names}
    for m in matches:
        if m.a not in ratings or m.b not in ratings:
            raise ContractViolation(f"match names unknown subset: {m.a!r} vs {m.b!r}")
        ratings[m.a], ratings[m.b] = elo_update(ratings[m.a], ratings[m.b], m.outcome, k)
    return EloTable(ratings, k, list(matches))


def win_rate_matrix(matches: Sequence[Match], subsets: Sequence[str] | None = None) -> tuple[list[str], np.ndarray]:
    """Row-vs-column win rate; ties count in the denominator only."""
    names = list(subsets) if subsets is not None else sorted({n for m in matches for n in (m.a, m.b)})
    pos = {n: i for i, n in enumerate(names)}
    wins = np.zeros((len(names), len(names)))
    total = np.zeros_like(wins)
    for m in matches:
        if m.a not in pos or m.b not in pos:
            raise ContractViolation(f"match names unknown subset: {m.a!r} vs {m.b!r}")
        i, j = pos[m.a], pos[m.b]
        total[i, j] += 1
        total[j, i] += 1
        if m.outcome == "a_wins":
            wins[i, j] += 1
        elif m.outcome == "b_wins":
            wins[j, i] += 1
    rate = np.divide(wins, total, out=np.zeros_like(wins), where=total > 0)
    return names, rate


def load_matches(path: str | Path) -> list[Match]:
    """Matches from CSV (columns a, b, outcome) or JSON-lines."""
    path = Path(path)
    out = []
    if path.suffix == ".csv":
        with path.open(newline="") as fh:
            for lineno, row in enumerate(csv.DictReader(fh), 2):
                try:
                    out.append(Match(row["a"], row["b"], row["outcome"]))
                except (KeyError, ContractViolation) as err:
                    raise ContractViolation(f"{path}:{lineno}: {err}") from err
    else:
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out.append(Match(obj["a"], obj["b"], obj["outcome"]))
            except (json.JSONDecodeError, KeyError, TypeError, ContractViolation) as err:
                raise ContractViolation(f"{path}:{lineno}: {err}") from err
    return out


# --------------------------------------------------------------- sensitivity


@dataclass
class SweepRow:
    scale: float
    accuracy: float
    mean_score: float
    std_score: float


def sensitivity_sweep(
    scorer: Callable[[Sequence[MotionClip]], np.ndarray],
    pool: Mapping[str, MotionClip],
    scales: Sequence[float],
    seeds: Sequence[int] = (0,),
    kind: str = "gaussian_jitter",
) -> list[SweepRow]:
    """Accuracy of ``scorer`` at telling clean clips from noised copies, per scale.

    Accuracy counts strict wins of the clean clip; mean/std describe the
    scores of the perturbed clips.
    """
    if not pool:
        raise ContractViolation("empty pool")
    if list(scales) != sorted(scales):
        raise ContractViolation("scales must be ascending")
    names = sorted(pool)
    clean = np.asarray(scorer([pool[n] for n in names]))
    rows = []
    for si, scale in enumerate(scales):
        noisy, wins = [], 0
        for seed in seeds:
            batch = [perturb(pool[n], PerturbationSpec(kind, scale, derive_seed(seed, ci, si)))
                     for ci, n in enumerate(names)]
            s = np.asarray(scorer(batch))
            wins += int(np.sum(clean > s))
            noisy.append(s)
        allp = np.concatenate(noisy)
        rows.append(SweepRow(float(scale), wins / len(allp), float(allp.mean()), float(allp.std())))
    return rows


def write_sweep(rows: Sequence[SweepRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scale", "accuracy", "mean_score", "std_score"])
        for r in rows:
            w.writerow([repr(r.scale), repr(r.accuracy), repr(r.mean_score), repr(r.std_score)])


# ------------------------------------------------------------------ ensemble

ENSEMBLE_METHODS = ("logistic", "linear_margin", "mlp")


@dataclass
class EnsembleModel:
    method: str
    features: list[str]
    mean: np.ndarray
    std: np.ndarray
    weights: dict[str, np.ndarray]

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def score(self, x: np.ndarray) -> np.ndarray:
        """Higher-is-better score per row of raw feature values."""
        z = self.standardize(np.atleast_2d(x))
        w = self.weights
        if self.method == "mlp":
            h = np.logaddexp(0.0, z @ w["w1"] + w["b1"])
            return (h @ w["w2"] + w["b2"]).ravel()
        return z @ w["w"]

    def coefficients(self) -> dict[str, float]:
        if self.method == "mlp":
            return {}
        return {f: float(c) for f, c in zip(self.features, self.weights["w"])}


def load_features(path: str | Path) -> tuple[list[str], dict[str, np.ndarray]]:
    """CSV whose first column is the motion id and the rest named features."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        names = header[1:]
        table = {}
        for lineno, row in enumerate(reader, 2):
            if len(row) != len(header):
                raise ContractViolation(f"{path}:{lineno}: expected {len(header)} columns")
            try:
                vals = np.array([float(v) for v in row[1:]])
            except ValueError as err:
                raise ContractViolation(f"{path}:{lineno}: {err}") from err
            if not np.all(np.isfinite(vals)):
                raise ContractViolation(f"{path}:{lineno}: non-finite feature")
            table[row[0]] = vals
    return names, table


def write_features(names: Sequence[str], table: Mapping[str, np.ndarray], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["motion", *names])
        for key in sorted(table):
            w.writerow([key, *(repr(float(v)) for v in table[key])])


def _pair_matrix(table: Mapping[str, np.ndarray], pairs: Sequence[PreferencePair], cols: list[int]):
    better = np.stack([table[p.better][cols] for p in pairs])
    worse = np.stack([table[p.worse][cols] for p in pairs])
    return better, worse


def ensemble_train(
    feature_names: Sequence[str],
    table: Mapping[str, np.ndarray],
    pairs: Sequence[PreferencePair],
    method: str,
    use: Sequence[str] | None = None,
    seed: int = 0,
    l2: float = 1e-3,
) -> EnsembleModel:
    """Fit a pairwise combiner over per-motion features.

    ``logistic`` and ``linear_margin`` score a motion linearly from its
    standardized features; a pair is classified by the sign of the score
    gap (logistic loss, or hinge loss by subgradient descent).  ``mlp`` is a
    one-hidden-layer scorer trained with the pairwise Bradley-Terry loss.
    """
    if method not in ENSEMBLE_METHODS:
        raise ContractViolation(f"unknown ensemble method {method!r}")
    if not pairs:
        raise ContractViolation("no pairs")
    use = list(use) if use is not None else list(feature_names)
    cols = [list(feature_names).index(f) for f in use]
    motions = sorted({n for p in pairs for n in (p.better, p.worse)})
    x = np.stack([table[m][cols] for m in motions])
    mean, std = x.mean(axis=0), x.std(axis=0)
    keep = std > 1e-12
    if not keep.all():
        dropped = [f for f, k in zip(use, keep) if not k]
        warnings.warn(f"dropping constant features {dropped}", stacklevel=2)
    if not keep.any():
        raise ContractViolation("every feature is constant")
    use = [f for f, k in zip(use, keep) if k]
    cols = [c for c, k in zip(cols, keep) if k]
    mean, std = mean[keep], std[keep]
    better, worse = _pair_matrix(table, pairs, cols)
    d = (better - worse) / std
    n_feat = d.shape[1]

    if method == "logistic":
        def objective(w):
            m = d @ w
            loss = np.logaddexp(0.0, -m).mean() + 0.5 * l2 * w @ w
            grad = -(d * (1.0 / (1.0 + np.exp(np.clip(m, -500, 500))))[:, None]).mean(axis=0) + l2 * w
            return loss, grad

        w = minimize(objective, np.zeros(n_feat), jac=True, method="L-BFGS-B").x
        weights = {"w": w}
    elif method == "linear_margin":
        rng = np.random.default_rng(seed)
        w = np.zeros(n_feat)
        avg = np.zeros(n_feat)
        steps = 0
        for epoch in range(200):
            for i in rng.permutation(len(d)):
                steps += 1
                eta = 1.0 / (l2 * (steps + 100))
                margin = d[i] @ w
                g = l2 * w - (d[i] if margin < 1.0 else 0.0)
                w = w - eta * g
                avg += (w - avg) / steps
        weights = {"w": avg}
    else:
        weights = _train_mlp(d_better=(better - mean) / std, d_worse=(worse - mean) / std, seed=seed)
    return EnsembleModel(method, use, mean, std, weights)


def _train_mlp(d_better: np.ndarray, d_worse: np.ndarray, seed: int, hidden: int = 128,
               epochs: int = 200, lr: float = 1e-2, batch: int = 256) -> dict[str, np.ndarray]:
    from .critic import bt_loss

    rng = np.random.default_rng(seed)
    n_feat = d_better.shape[1]
    p = ParamSet()
    w1 = p.add("w1", glorot(rng, n_feat, hidden))
    b1 = p.add("b1", np.zeros(hidden))
    w2 = p.add("w2", glorot(rng, hidden, 1))
    b2 = p.add("b2", np.zeros(1))
    opt = Adam(list(p), lr=lr)
    n = len(d_better)

    def score(x):
        return (ad.softplus(Tensor(x) @ w1 + b1) @ w2 + b2).reshape(len(x))

    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch):
            idx = order[s:s + batch]
            loss = bt_loss(score(d_better[idx]), score(d_worse[idx]))
            opt.step(ad.forward_backward(loss, opt.params))
    return {name: t.data.copy() for name, t in p.items()}


def ensemble_eval(model: EnsembleModel, feature_names: Sequence[str], table: Mapping[str, np.ndarray],
                  pairs: Sequence[PreferencePair]) -> MetricReport:
    cols = [list(feature_names).index(f) for f in model.features]
    motions = sorted({n for p in pairs for n in (p.better, p.worse)})
    scores = model.score(np.stack([table[m][cols] for m in motions]))
    return evaluate_metric(f"ensemble:{model.method}", dict(zip(motions, scores.tolist())), HIGHER_BETTER, pairs)


@dataclass
class AblationResult:
    added: list[tuple[list[str], float]]
    removed: list[tuple[str, float]]

    def to_json(self) -> dict:
        return {
            "added": [{"features": f, "accuracy": a} for f, a in self.added],
            "removed": [{"feature": f, "accuracy": a} for f, a in self.removed],
        }


def ablate(feature_names: Sequence[str], table: Mapping[str, np.ndarray], train: Sequence[PreferencePair],
           test: Sequence[PreferencePair], method: str, order: Sequence[str] | None = None,
           seed: int = 0) -> AblationResult:
    """Test accuracy for nested prefixes of ``order`` and for each single-feature removal."""
    order = list(order) if order is not None else list(feature_names)
    added = []
    for i in range(1, len(order) + 1):
        subset = order[:i]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            m = ensemble_train(feature_names, table, train, method, use=subset, seed=seed)
        added.append((subset, ensemble_eval(m, feature_names, table, test).accuracy))
    removed = []
    for f in order:
        subset = [g for g in order if g != f]
        if not subset:
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            m = ensemble_train(feature_names, table, train, method, use=subset, seed=seed)
        removed.append((f, ensemble_eval(m, feature_names, table, test).accuracy))
    return AblationResult(added, removed)
