"""Preference annotations, synthetic pair generation and annotator consensus."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .autodiff import ContractViolation
from .motion import (
    CANONICAL_LEN,
    DEFAULT_FPS,
    N_JOINTS,
    MotionClip,
    SkeletonTemplate,
    forward_kinematics,
    load_motion,
    save_motion,
)

SELECTIONS = (0, 1, 2, 3, "all_good", "all_bad")
MODES = ("best", "worst")
PERTURB_KINDS = ("gaussian_jitter", "joint_distortion", "foot_skate", "freeze", "pop")


class AnnotationError(ValueError):
    """Malformed annotation or pair file; message names the line."""


# ---------------------------------------------------------------- annotations


@dataclass(frozen=True)
class ChoiceQuestion:
    question_id: str
    prompt_id: str
    motions: tuple[str, str, str, str]
    selection: int | str
    mode: str = "best"
    annotator: str = "a0"

    def __post_init__(self):
        if len(self.motions) != 4 or len(set(self.motions)) != 4:
            raise ContractViolation("a question needs four distinct motions")
        if self.selection not in SELECTIONS or isinstance(self.selection, bool):
            raise ContractViolation(f"invalid selection {self.selection!r}")
        if self.mode not in MODES:
            raise ContractViolation(f"invalid selection mode {self.mode!r}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["motions"] = list(self.motions)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> ChoiceQuestion:
        return cls(
            question_id=str(obj["question_id"]),
            prompt_id=str(obj.get("prompt_id", "")),
            motions=tuple(obj["motions"]),
            selection=obj["selection"],
            mode=obj.get("mode", "best"),
            annotator=str(obj.get("annotator", "a0")),
        )


@dataclass(frozen=True)
class PreferencePair:
    better: str
    worse: str
    source: str = ""
    weight: float = 1.0
    spec: dict | None = field(default=None, compare=False, hash=False)

    def __post_init__(self):
        if self.better == self.worse:
            raise ContractViolation("a pair needs two different motions")

    def swapped(self) -> PreferencePair:
        return PreferencePair(self.worse, self.better, self.source, self.weight, self.spec)

    def to_json(self) -> dict:
        d = {"better": self.better, "worse": self.worse, "source": self.source}
        if self.weight != 1.0:
            d["weight"] = self.weight
        if self.spec is not None:
            d["spec"] = self.spec
        return d

    @classmethod
    def from_json(cls, obj: dict) -> PreferencePair:
        return cls(str(obj["better"]), str(obj["worse"]), str(obj.get("source", "")),
                   float(obj.get("weight", 1.0)), obj.get("spec"))


def expand_question(q: ChoiceQuestion) -> list[PreferencePair]:
    """Three ordered pairs from one answered question; none for all_good/all_bad."""
    if not isinstance(q.selection, int):
        return []
    chosen = q.motions[q.selection]
    others = [m for i, m in enumerate(q.motions) if i != q.selection]
    if q.mode == "best":
        return [PreferencePair(chosen, o, q.question_id) for o in others]
    return [PreferencePair(o, chosen, q.question_id) for o in others]


def _read_jsonl(path: str | Path) -> Iterable[tuple[int, dict]]:
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise AnnotationError(f"{path}:{lineno}: invalid JSON ({err.msg})") from err
            if not isinstance(obj, dict):
                raise AnnotationError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def load_questions(path: str | Path) -> list[ChoiceQuestion]:
    out = []
    for lineno, obj in _read_jsonl(path):
        try:
            out.append(ChoiceQuestion.from_json(obj))
        except (KeyError, TypeError, ContractViolation) as err:
            raise AnnotationError(f"{path}:{lineno}: {err}") from err
    return out


def save_questions(questions: Iterable[ChoiceQuestion], path: str | Path) -> None:
    with open(path, "w") as fh:
        for q in questions:
            fh.write(json.dumps(q.to_json(), sort_keys=True) + "\n")


def load_pairs(path: str | Path) -> list[PreferencePair]:
    out = []
    for lineno, obj in _read_jsonl(path):
        try:
            out.append(PreferencePair.from_json(obj))
        except (KeyError, TypeError, ValueError) as err:
            raise AnnotationError(f"{path}:{lineno}: {err}") from err
    return out


def save_pairs(pairs: Iterable[PreferencePair], path: str | Path) -> None:
    with open(path, "w") as fh:
        for p in pairs:
            fh.write(json.dumps(p.to_json(), sort_keys=True) + "\n")


# ----------------------------------------------------------- motion pools


def save_pool(clips: dict[str, MotionClip], directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in sorted(clips):
        save_motion(clips[name], directory / f"{name}.mclp")


def load_pool(directory: str | Path) -> dict[str, MotionClip]:
    """Every motion file in a directory keyed by stem, in filename order."""
    directory = Path(directory)
    files = sorted(p for p in directory.iterdir() if p.suffix in (".mclp", ".json") and p.is_file())
    return {p.stem: load_motion(p) for p in files}


# ------------------------------------------------------- synthetic motions


@dataclass(frozen=True)
class SynthStyle:
    amplitude: float = 0.35  # cap on the summed sinusoid amplitude per axis, radians
    n_components: int = 3
    freq_range: tuple[float, float] = (0.3, 1.5)  # Hz
    root_extent: float = 0.5  # metres of horizontal travel per control point
    contact_fraction: float = 1.0
    lift_height: float = 0.05
    label: int | None = None


# larger swings for limbs, small ones for the spine and root orientation
_JOINT_GAIN = np.array(
    [0.3, 1.0, 1.0, 0.3, 1.0, 1.0, 0.3, 0.6, 0.6, 0.3, 0.3, 0.3,
     0.4, 0.4, 0.4, 0.5, 1.0, 1.0, 1.0, 1.0, 0.6, 0.6, 0.3, 0.3]
)


def synth_motion(
    seed: int,
    length: int = CANONICAL_LEN,
    fps: float = DEFAULT_FPS,
    style: SynthStyle | None = None,
    skel: SkeletonTemplate | None = None,
) -> MotionClip:
    """Smooth procedural clip, deterministic in ``seed``.

    Joint rotations are sums of up to three sinusoids per axis; the root
    follows a cubic spline and is lifted so the lowest foot joint touches the
    floor on the contact frames.
    """
    if length < 2:
        raise ContractViolation("length must be >= 2")
    style = style or SynthStyle()
    skel = skel or SkeletonTemplate()
    if not 1 <= style.n_components <= 3:
        raise ContractViolation("n_components must be 1..3")
    amp = min(style.amplitude, np.pi / 2 / np.sqrt(3) * 0.999)
    rng = np.random.default_rng(seed)
    t = np.arange(length) / fps

    k = style.n_components
    freqs = rng.uniform(*style.freq_range, size=(N_JOINTS, 3, k))
    phases = rng.uniform(0, 2 * np.pi, size=(N_JOINTS, 3, k))
    weights = rng.dirichlet(np.ones(k), size=(N_JOINTS, 3))
    bias = rng.uniform(-0.3, 0.3, size=(N_JOINTS, 3))
    waves = np.sin(2 * np.pi * freqs[None] * t[:, None, None, None] + phases[None])
    # |bias| + summed amplitudes stays below amp, so each axis is bounded by amp
    rot = amp * _JOINT_GAIN[None, :, None] * (
        0.3 * bias[None] + 0.7 * (weights[None] * waves).sum(axis=-1)
    )

    n_ctrl = 4
    ctrl_t = np.linspace(0, t[-1] if length > 1 else 1.0, n_ctrl)
    ctrl = np.cumsum(rng.normal(0, style.root_extent * (amp > 0), size=(n_ctrl, 3)), axis=0)
    ctrl -= ctrl[0]
    root = CubicSpline(ctrl_t, ctrl, axis=0, bc_type="natural")(t)
    up = skel.up
    root[:, up] = 0.0

    pos = forward_kinematics(MotionClip(rot, root, fps), skel)
    lowest_foot = pos[:, list(skel.foot_joints), up].min(axis=1)
    height = skel.floor_height - lowest_foot
    n_air = int(round((1.0 - style.contact_fraction) * length))
    if n_air > 0:
        start = int(rng.integers(0, length - n_air + 1))
        s = (np.arange(n_air) + 0.5) / n_air
        height[start:start + n_air] += style.lift_height * np.sin(np.pi * s) ** 2
    root[:, up] = height
    return MotionClip(rot, root, fps, style.label)


# ------------------------------------------------------------- perturbation


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str
    scale: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PERTURB_KINDS:
            raise ContractViolation(f"unknown perturbation kind {self.kind!r}")
        if not np.isfinite(self.scale) or self.scale < 0:
            raise ContractViolation("perturbation scale must be finite and >= 0")

    def to_json(self) -> dict:
        return {"kind": self.kind, "scale": self.scale, "seed": self.seed}

    @classmethod
    def from_json(cls, obj: dict) -> PerturbationSpec:
        return cls(obj["kind"], float(obj["scale"]), int(obj.get("seed", 0)))


def _random_unit(rng: np.random.Generator, shape) -> np.ndarray:
    v = rng.normal(size=tuple(shape) + (3,))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _window(rng: np.random.Generator, length: int, lo: float = 0.25, hi: float = 0.5) -> slice:
    n = int(rng.integers(max(1, int(lo * length)), max(2, int(hi * length)) + 1))
    n = min(n, length)
    start = int(rng.integers(0, length - n + 1))
    return slice(start, start + n)


def perturb(clip: MotionClip, spec: PerturbationSpec, skel: SkeletonTemplate | None = None) -> MotionClip:
    """Apply one failure mode; deterministic in ``spec.seed``.

    ``freeze`` reads ``scale`` as the frozen fraction of the clip; ``pop``
    as the size of a one-frame jump, radians per joint and metres for the root.
    """
    if spec.kind not in PERTURB_KINDS:
        raise ContractViolation(f"unknown perturbation kind {spec.kind!r}")
    rot = clip.rotations.copy()
    root = clip.root_translation.copy()
    L = clip.length
    if spec.scale == 0:
        return MotionClip(rot, root, clip.fps, clip.label)
    rng = np.random.default_rng(spec.seed)
    s = spec.scale

    if spec.kind == "gaussian_jitter":
        rot += rng.normal(0.0, s, size=rot.shape)
        root += rng.normal(0.0, s, size=root.shape)
    elif spec.kind == "joint_distortion":
        joint = int(rng.integers(1, N_JOINTS))
        w = _window(rng, L)
        rot[w, joint] += s * _random_unit(rng, ())
    elif spec.kind == "foot_skate":
        skel = skel or SkeletonTemplate()
        pos = forward_kinematics(clip, skel)
        feet = pos[:, list(skel.foot_joints), skel.up].min(axis=1)
        contact = np.abs(feet - skel.floor_height) <= 0.05
        direction = _random_unit(rng, ())
        direction[skel.up] = 0.0
        direction /= max(np.linalg.norm(direction), 1e-12)
        drift = np.cumsum(contact) / clip.fps * s
        root += drift[:, None] * direction[None]
    elif spec.kind == "freeze":
        n = min(L, max(1, int(round(s * L))))
        start = int(rng.integers(0, L - n + 1))
        rot[start:start + n] = rot[start]
        root[start:start + n] = root[start]
    elif spec.kind == "pop":
        k = int(rng.integers(1, L - 1)) if L > 2 else 0
        rot[k] += s * _random_unit(rng, (N_JOINTS,))
        up = (skel or SkeletonTemplate()).up
        # half sideways, half down: an upward pop would read as a hop
        jump = _random_unit(rng, ())
        jump[up] = 0.0
        jump /= max(np.linalg.norm(jump), 1e-12)
        jump[up] = -1.0
        root[k] += s * jump / np.sqrt(2.0)
    return MotionClip(rot, root, clip.fps, clip.label)


def derive_seed(*keys: int) -> int:
    """Stable per-item seed from integer keys."""
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


def make_pairs(
    pool: dict[str, MotionClip],
    specs: Sequence[PerturbationSpec],
    seed: int,
) -> tuple[list[PreferencePair], dict[str, MotionClip]]:
    """Clean-beats-perturbed pairs for every (clip, spec).

    Returns the pairs and the perturbed clips keyed by their new ids; each
    pair records the exact spec (with derived seed) that produced it.
    """
    if not pool:
        raise ContractViolation("empty motion pool")
    pairs, made = [], {}
    for ci, name in enumerate(sorted(pool)):
        for si, spec in enumerate(specs):
            item = PerturbationSpec(spec.kind, spec.scale, derive_seed(seed, ci, si, spec.seed))
            pid = f"{name}_p{si:02d}"
            made[pid] = perturb(pool[name], item)
            pairs.append(PreferencePair(name, pid, source=name, spec=item.to_json()))
    return pairs, made


def synth_pool(n: int, seed: int, style: SynthStyle | None = None, prefix: str = "c") -> dict[str, MotionClip]:
    return {f"{prefix}{i:05d}": synth_motion(derive_seed(seed, i), style=style) for i in range(n)}


# four toy "actions" that differ in tempo, swing size and travel
LABEL_STYLES = (
    SynthStyle(amplitude=0.25, freq_range=(0.3, 0.7), root_extent=0.2, label=0),
    SynthStyle(amplitude=0.35, freq_range=(0.6, 1.2), root_extent=0.5, label=1),
    SynthStyle(amplitude=0.45, freq_range=(1.0, 1.8), root_extent=0.8, label=2),
    SynthStyle(amplitude=0.30, freq_range=(0.4, 1.0), root_extent=0.4, contact_fraction=0.6, label=3),
)


def labelled_pool(n: int, seed: int, prefix: str = "g") -> dict[str, MotionClip]:
    """Clips cycling through LABEL_STYLES, so clip i carries label i % 4."""
    return {
        f"{prefix}{i:05d}": synth_motion(derive_seed(seed, i), style=LABEL_STYLES[i % len(LABEL_STYLES)])
        for i in range(n)
    }


def load_specs(path: str | Path) -> list[PerturbationSpec]:
    """Perturbation specs from JSON-lines (one object per line)."""
    out = []
    for lineno, obj in _read_jsonl(path):
        try:
            out.append(PerturbationSpec.from_json(obj))
        except (KeyError, TypeError, ValueError) as err:
            raise AnnotationError(f"{path}:{lineno}: {err}") from err
    return out


# ---------------------------------------------------------------- consensus


@dataclass
class ConsensusStats:
    annotators: list[str]
    n_questions: int
    unanimity: dict[int, int]  # votes for the top option -> number of questions
    options_per_question: dict[int, int]
    agreement: np.ndarray

    @property
    def unanimous_fraction(self) -> float:
        return self.unanimity.get(len(self.annotators), 0) / self.n_questions

    def to_json(self) -> dict:
        return {
            "annotators": self.annotators,
            "n_questions": self.n_questions,
            "unanimity": {str(k): v for k, v in sorted(self.unanimity.items())},
            "options_per_question": {str(k): v for k, v in sorted(self.options_per_question.items())},
            "unanimous_fraction": self.unanimous_fraction,
            "agreement": self.agreement.tolist(),
        }


def consensus_stats(questions: Sequence[ChoiceQuestion]) -> ConsensusStats:
    answers: dict[str, dict[str, object]] = {}
    for q in questions:
        answers.setdefault(q.question_id, {})[q.annotator] = q.selection
    if not answers:
        raise ContractViolation("no annotations")
    annotators = sorted({q.annotator for q in questions})
    for qid, by in answers.items():
        if sorted(by) != annotators:
            raise ContractViolation(f"question {qid} was not answered by every annotator")
    qids = sorted(answers)
    n = len(annotators)
    unanimity: Counter = Counter()
    options: Counter = Counter()
    agree = np.zeros((n, n))
    for qid in qids:
        picks = [answers[qid][a] for a in annotators]
        counts = Counter(map(str, picks))
        unanimity[max(counts.values())] += 1
        options[len(counts)] += 1
        for i in range(n):
            for j in range(n):
                agree[i, j] += picks[i] == picks[j]
    return ConsensusStats(annotators, len(qids), dict(unanimity), dict(options), agree / len(qids))
