"""Heuristic motion-quality metrics and the pairwise accuracy / log-loss evaluator."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .autodiff import ContractViolation
from .motion import MotionClip, SkeletonTemplate, forward_kinematics

HIGHER_BETTER = "higher_better"
LOWER_BETTER = "lower_better"

CONTACT_EPS = 0.05  # metres


def _same_length(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ContractViolation(f"motions differ in shape: {a.shape} vs {b.shape}")


# --------------------------------------------------------- reference-based


def root_ae(candidate: np.ndarray, reference: np.ndarray) -> float:
    """Mean Euclidean error of the root joint."""
    _same_length(candidate, reference)
    return float(np.linalg.norm(candidate[:, 0] - reference[:, 0], axis=-1).mean())


def joint_ae(candidate: np.ndarray, reference: np.ndarray) -> float:
    """Mean Euclidean error over frames and joints."""
    _same_length(candidate, reference)
    return float(np.linalg.norm(candidate - reference, axis=-1).mean())


def root_ave(candidate: np.ndarray, reference: np.ndarray) -> float:
    """Mean |difference| of per-coordinate temporal variance, root joint only."""
    _same_length(candidate, reference)
    return float(np.abs(candidate[:, 0].var(axis=0) - reference[:, 0].var(axis=0)).mean())


def joint_ave(candidate: np.ndarray, reference: np.ndarray) -> float:
    _same_length(candidate, reference)
    return float(np.abs(candidate.var(axis=0) - reference.var(axis=0)).mean())


# ------------------------------------------------------------ reference-free


def acceleration(positions: np.ndarray, fps: float) -> float:
    """Mean magnitude of the second central difference, in m/s^2."""
    if positions.shape[0] < 3:
        raise ContractViolation("acceleration needs at least 3 frames")
    acc = (positions[2:] - 2 * positions[1:-1] + positions[:-2]) * fps**2
    return float(np.linalg.norm(acc, axis=-1).mean())


def jerk(positions: np.ndarray, fps: float) -> float:
    """Mean magnitude of the third finite difference, in m/s^3."""
    if positions.shape[0] < 4:
        raise ContractViolation("jerk needs at least 4 frames")
    j = (positions[3:] - 3 * positions[2:-1] + 3 * positions[1:-2] - positions[:-3]) * fps**3
    return float(np.linalg.norm(j, axis=-1).mean())


def ground_contact(positions: np.ndarray, skel: SkeletonTemplate, eps: float = CONTACT_EPS) -> float:
    """Fraction of frames whose lowest foot joint lies within ``eps`` of the floor."""
    feet = positions[:, list(skel.foot_joints), skel.up].min(axis=1)
    return float(np.mean(np.abs(feet - skel.floor_height) <= eps))


def floor_penetration(positions: np.ndarray, skel: SkeletonTemplate) -> float:
    """Mean depth of the lowest joint below the floor (0 when above)."""
    lowest = positions[:, :, skel.up].min(axis=1)
    return float(np.maximum(0.0, skel.floor_height - lowest).mean())


def pfc(positions: np.ndarray, skel: SkeletonTemplate, fps: float) -> float:
    """Physical foot contact score.

    Couples centre-of-mass acceleration (upward part only; falling is free)
    with the speeds of both feet: a body that accelerates while neither foot
    is planted scores high.  Each foot's speed is the slower of its joints.
    """
    if positions.shape[0] < 3:
        raise ContractViolation("pfc needs at least 3 frames")
    com = positions.mean(axis=1)
    acc = (com[2:] - 2 * com[1:-1] + com[:-2]) * fps**2
    acc[:, skel.up] = np.maximum(acc[:, skel.up], 0.0)
    acc_mag = np.linalg.norm(acc, axis=-1)
    vel = (positions[2:] - positions[:-2]) * (fps / 2.0)
    speed = np.linalg.norm(vel, axis=-1)
    left = speed[:, list(skel.left_foot)].min(axis=1)
    right = speed[:, list(skel.right_foot)].min(axis=1)
    peak = acc_mag.max()
    if peak == 0:
        return 0.0
    return float((acc_mag * left * right).mean() / peak)


def _power_cdf(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative normalized power spectrum per column and total power."""
    power = np.abs(np.fft.fft(x, axis=0)) ** 2
    total = power.sum(axis=0)
    dist = np.zeros_like(power)
    dist[0] = 1.0  # silent channel: all mass at DC
    nz = total > 0
    dist[:, nz] = power[:, nz] / total[nz]
    return np.cumsum(dist, axis=0), total


def npss(candidate: MotionClip, reference: MotionClip) -> float:
    """Normalized power spectrum similarity over rotation channels.

    Per channel the earth-mover distance between normalized power spectra is
    the mean absolute gap of their cumulative sums; channels are averaged
    with the reference's power as weight.
    """
    if candidate.length != reference.length or candidate.fps != reference.fps:
        raise ContractViolation("npss needs equal length and fps")
    c = candidate.rotations.reshape(candidate.length, -1)
    r = reference.rotations.reshape(reference.length, -1)
    cdf_c, _ = _power_cdf(c)
    cdf_r, weight = _power_cdf(r)
    emd = np.abs(cdf_c - cdf_r).mean(axis=0)
    if weight.sum() == 0:
        return float(emd.mean())
    return float((emd * weight).sum() / weight.sum())


# ------------------------------------------------------------------ registry


@dataclass(frozen=True)
class MetricDef:
    fn: Callable[..., float]
    polarity: str
    needs_reference: bool = False


def _pos_metric(f):
    return lambda clip, pos, ref, ref_pos, skel: f(pos, ref_pos)


METRICS: dict[str, MetricDef] = {
    "root_ae": MetricDef(_pos_metric(root_ae), LOWER_BETTER, True),
    "joint_ae": MetricDef(_pos_metric(joint_ae), LOWER_BETTER, True),
    "root_ave": MetricDef(_pos_metric(root_ave), LOWER_BETTER, True),
    "joint_ave": MetricDef(_pos_metric(joint_ave), LOWER_BETTER, True),
    "npss": MetricDef(lambda clip, pos, ref, ref_pos, skel: npss(clip, ref), LOWER_BETTER, True),
    "acceleration": MetricDef(lambda clip, pos, ref, ref_pos, skel: acceleration(pos, clip.fps), LOWER_BETTER),
    "jerk": MetricDef(lambda clip, pos, ref, ref_pos, skel: jerk(pos, clip.fps), LOWER_BETTER),
    "ground_contact": MetricDef(lambda clip, pos, ref, ref_pos, skel: ground_contact(pos, skel), HIGHER_BETTER),
    "floor_penetration": MetricDef(
        lambda clip, pos, ref, ref_pos, skel: floor_penetration(pos, skel), LOWER_BETTER
    ),
    "pfc": MetricDef(lambda clip, pos, ref, ref_pos, skel: pfc(pos, skel, clip.fps), LOWER_BETTER),
    # uninformative control: every motion scores the same
    "constant": MetricDef(lambda clip, pos, ref, ref_pos, skel: 0.0, HIGHER_BETTER),
}


def compute_metric(
    name: str,
    clip: MotionClip,
    skel: SkeletonTemplate | None = None,
    reference: MotionClip | None = None,
    positions: np.ndarray | None = None,
) -> float:
    if name not in METRICS:
        raise ContractViolation(f"unknown metric {name!r}; known: {sorted(METRICS)}")
    spec = METRICS[name]
    skel = skel or SkeletonTemplate()
    if spec.needs_reference and reference is None:
        raise ContractViolation(f"metric {name!r} needs a reference motion")
    pos = forward_kinematics(clip, skel) if positions is None else positions
    ref_pos = forward_kinematics(reference, skel) if reference is not None and spec.needs_reference else None
    return spec.fn(clip, pos, reference, ref_pos, skel)


# ----------------------------------------------------------------- evaluator


@dataclass
class MetricReport:
    metric: str
    polarity: str
    accuracy: float
    log_loss: float
    n_pairs: int
    scores: dict[str, float] = field(default_factory=dict, repr=False)

    def row(self) -> dict:
        return {"metric": self.metric, "polarity": self.polarity, "accuracy": self.accuracy, "log_loss": self.log_loss}


def _softplus(x: float) -> float:
    if x == math.inf:
        return math.inf
    if x == -math.inf:
        return 0.0
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


def evaluate_metric(
    metric: str,
    scores: Mapping[str, float],
    polarity: str,
    pairs: Sequence,
) -> MetricReport:
    """Pairwise accuracy and softmax log loss of a per-motion score.

    ``pairs`` holds objects with ``better``/``worse`` attributes (or 2-tuples)
    naming keys of ``scores``.  Lower-better scores are negated first; ties
    count as wrong.
    """
    if polarity not in (HIGHER_BETTER, LOWER_BETTER):
        raise ContractViolation(f"bad polarity {polarity!r}")
    if not pairs:
        raise ContractViolation("no pairs to evaluate")
    sign = 1.0 if polarity == HIGHER_BETTER else -1.0
    correct = 0
    loss = 0.0
    for pair in pairs:
        better, worse = (pair.better, pair.worse) if hasattr(pair, "better") else pair
        if better not in scores or worse not in scores:
            raise ContractViolation(f"missing score for pair ({better}, {worse})")
        gap = sign * (scores[better] - scores[worse])
        correct += gap > 0
        loss += _softplus(-gap)
    n = len(pairs)
    return MetricReport(metric, polarity, correct / n, loss / n, n, dict(scores))


def write_reports(reports: Sequence[MetricReport], path: str | Path, fmt: str = "csv", extra: dict | None = None) -> None:
    path = Path(path)
    if fmt == "csv":
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["metric", "polarity", "accuracy", "log_loss"])
            w.writeheader()
            for r in reports:
                w.writerow({**r.row(), "accuracy": repr(r.accuracy), "log_loss": repr(r.log_loss)})
    elif fmt == "json":
        payload = {"reports": [r.row() for r in reports], **(extra or {})}
        path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    else:
        raise ContractViolation(f"unknown report format {fmt!r}")


def report_as_dict(report: MetricReport) -> dict:
    return asdict(report)
