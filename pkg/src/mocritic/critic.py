"""Scalar motion critic: temporal transformer encoder, mean pooling, MLP head.

Trained with the Bradley-Terry pairwise objective so that a better motion
scores higher than a worse one.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, ContractViolation, Tensor, no_grad
from .metrics import HIGHER_BETTER, MetricReport, evaluate_metric
from .motion import CANONICAL_LEN, FRAME_DIM, MotionClip
from .nn import ParamSet, glorot, read_checkpoint, sinusoidal_table, write_checkpoint
from .preference import PreferencePair

CHECKPOINT_MAGIC = b"MCRT"


@dataclass(frozen=True)
class CriticConfig:
    embed_dim: int = 64
    layers: int = 3
    heads: int = 8
    ff_dim: int | None = None  # defaults to 4 * embed_dim
    head_hidden: int = 1024
    frame_dim: int = FRAME_DIM
    seq_len: int = CANONICAL_LEN

    def __post_init__(self):
        dims = (self.embed_dim, self.layers, self.heads, self.ffn_dim, self.head_hidden, self.frame_dim, self.seq_len)
        if any(d <= 0 for d in dims):
            raise ContractViolation("critic dimensions must be positive")
        if self.embed_dim % self.heads:
            raise ContractViolation("embed_dim must be divisible by heads")

    @property
    def ffn_dim(self) -> int:
        return self.ff_dim if self.ff_dim is not None else 4 * self.embed_dim


@dataclass(frozen=True)
class TrainHyper:
    epochs: int = 150
    batch_size: int = 64
    lr: float = 2e-3
    decay: float = 0.995
    seed: int = 0
    heldout_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ContractViolation("epochs, batch_size and lr must be positive")
        if not 0 < self.decay <= 1:
            raise ContractViolation("decay must lie in (0, 1]")


class CriticModel:
    def __init__(self, config: CriticConfig = CriticConfig(), seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        E, F, H = c.embed_dim, c.ffn_dim, c.head_hidden
        p = self.params = ParamSet()
        p.add("embed.w", glorot(rng, c.frame_dim, E))
        p.add("embed.b", np.zeros(E))
        for i in range(c.layers):
            for name in ("q", "k", "v", "o"):
                p.add(f"l{i}.{name}.w", glorot(rng, E, E))
                p.add(f"l{i}.{name}.b", np.zeros(E))
            p.add(f"l{i}.ln1.g", np.ones(E))
            p.add(f"l{i}.ln1.b", np.zeros(E))
            p.add(f"l{i}.ff1.w", glorot(rng, E, F))
            p.add(f"l{i}.ff1.b", np.zeros(F))
            p.add(f"l{i}.ff2.w", glorot(rng, F, E))
            p.add(f"l{i}.ff2.b", np.zeros(E))
            p.add(f"l{i}.ln2.g", np.ones(E))
            p.add(f"l{i}.ln2.b", np.zeros(E))
        p.add("head1.w", glorot(rng, E, H))
        p.add("head1.b", np.zeros(H))
        p.add("head2.w", glorot(rng, H, 1))
        p.add("head2.b", np.zeros(1))
        self.posenc = Tensor(sinusoidal_table(c.seq_len, E))
        self.frozen = False

    # ------------------------------------------------------------- forward

    def forward(self, x: Tensor) -> Tensor:
        """Scores for a batch of frame tensors (B, L, frame_dim) -> (B,)."""
        c, p = self.config, self.params
        if x.ndim != 3 or x.shape[1:] != (c.seq_len, c.frame_dim):
            raise ContractViolation(f"critic expects (B, {c.seq_len}, {c.frame_dim}), got {x.shape}")
        B, L, E = x.shape[0], c.seq_len, c.embed_dim
        nh, dh = c.heads, c.embed_dim // c.heads
        h = x @ p["embed.w"] + p["embed.b"]
        h = h + self.posenc
        for i in range(c.layers):

            def split(t):
                return ad.transpose(t.reshape(B, L, nh, dh), (0, 2, 1, 3))

            q = split((h @ p[f"l{i}.q.w"] + p[f"l{i}.q.b"]) * (1.0 / math.sqrt(dh)))
            k = split(h @ p[f"l{i}.k.w"] + p[f"l{i}.k.b"])
            v = split(h @ p[f"l{i}.v.w"] + p[f"l{i}.v.b"])
            att = ad.softmax(q @ ad.transpose(k, (0, 1, 3, 2)))
            o = ad.transpose(att @ v, (0, 2, 1, 3)).reshape(B, L, E)
            o = o @ p[f"l{i}.o.w"] + p[f"l{i}.o.b"]
            h = ad.layer_norm(h + o, p[f"l{i}.ln1.g"], p[f"l{i}.ln1.b"])
            f = ad.softplus(h @ p[f"l{i}.ff1.w"] + p[f"l{i}.ff1.b"])
            f = f @ p[f"l{i}.ff2.w"] + p[f"l{i}.ff2.b"]
            h = ad.layer_norm(h + f, p[f"l{i}.ln2.g"], p[f"l{i}.ln2.b"])
        pooled = h.mean(axis=1)
        z = ad.softplus(pooled @ p["head1.w"] + p["head1.b"])
        return (z @ p["head2.w"] + p["head2.b"]).reshape(B)

    def freeze(self) -> None:
        self.params.freeze()
        self.frozen = True

    def snapshot(self) -> list[np.ndarray]:
        return [a.copy() for a in self.params.arrays()]

    # ----------------------------------------------------------- persistence

    def save(self, path: str | Path, metadata: dict | None = None) -> None:
        path = Path(path)
        with path.open("wb") as fh:
            write_checkpoint(fh, CHECKPOINT_MAGIC, asdict(self.config), self.params)
        sidecar = {"config": asdict(self.config), "parameters": self.params.count(), **(metadata or {})}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> CriticModel:
        config, arrays = read_checkpoint(Path(path).read_bytes(), CHECKPOINT_MAGIC)
        model = cls(CriticConfig(**config))
        if list(arrays) != model.params.names():
            raise ContractViolation("checkpoint parameters do not match the config")
        model.params.set_arrays(list(arrays.values()))
        return model


def calibrate(model: CriticModel, clips: Sequence[MotionClip], tau: float, quantile: float = 0.95) -> float:
    """Shift the output bias so the ``quantile`` of scores on ``clips`` equals ``tau``.

    Ranking is unchanged; only the absolute level moves, which is what the
    fine-tuning threshold reads.  Returns the applied shift.
    """
    if not clips:
        raise ContractViolation("calibration needs clips")
    shift = float(tau - np.quantile(score_many(model, clips), quantile))
    bias = model.params["head2.b"]
    bias.data = bias.data + shift
    return shift


def clip_frames(clips: Sequence[MotionClip], seq_len: int = CANONICAL_LEN) -> np.ndarray:
    for c in clips:
        if c.length != seq_len:
            raise ContractViolation(f"clip has {c.length} frames, critic needs {seq_len}; resample first")
    return np.stack([c.frames() for c in clips])


def critic_score(model: CriticModel, clip: MotionClip) -> float:
    with no_grad():
        return float(model.forward(Tensor(clip_frames([clip], model.config.seq_len))).data[0])


def score_many(model: CriticModel, clips: Sequence[MotionClip], batch: int = 128) -> np.ndarray:
    frames = clip_frames(clips, model.config.seq_len)
    out = []
    with no_grad():
        for i in range(0, len(frames), batch):
            out.append(model.forward(Tensor(frames[i:i + batch])).data)
    return np.concatenate(out) if out else np.zeros(0)


def bt_loss(s_better, s_worse, weight=None) -> Tensor:
    """Bradley-Terry negative log-likelihood, -log sigmoid(s_better - s_worse), averaged."""
    per_pair = ad.softplus(ad.sub(s_worse, s_better))
    if weight is None:
        return per_pair.mean()
    w = np.asarray(weight, dtype=np.float64)
    return ad.sum_(per_pair * w) * (1.0 / w.sum())


# -------------------------------------------------------------- training


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    heldout_accuracy: list[float] = field(default_factory=list)
    train_sources: list[str] = field(default_factory=list)
    heldout_sources: list[str] = field(default_factory=list)


def split_by_source(pairs: Sequence[PreferencePair], fraction: float, seed: int):
    """Seeded split keeping every pair of one source question on the same side."""
    sources = sorted({p.source for p in pairs})
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(sources))
    n_held = int(round(fraction * len(sources))) if len(sources) > 1 else 0
    held = {sources[i] for i in order[:n_held]}
    train = [p for p in pairs if p.source not in held]
    heldout = [p for p in pairs if p.source in held]
    return train, heldout


def train_critic(
    pairs: Sequence[PreferencePair],
    clips: Mapping[str, MotionClip],
    config: CriticConfig = CriticConfig(),
    hyper: TrainHyper = TrainHyper(),
    heldout: Sequence[PreferencePair] | None = None,
    log=None,
) -> tuple[CriticModel, TrainHistory]:
    """Fit a critic by mini-batch Adam on the pairwise loss.

    When ``heldout`` is None a ``hyper.heldout_fraction`` share of source
    questions is set aside.  Deterministic in ``hyper.seed``.
    """
    if not pairs:
        raise ContractViolation("no training pairs")
    if heldout is None:
        train, heldout = split_by_source(pairs, hyper.heldout_fraction, hyper.seed)
    else:
        train = list(pairs)
    if not train:
        raise ContractViolation("split left no training pairs")
    names = sorted({n for p in list(train) + list(heldout) for n in (p.better, p.worse)})
    index = {n: i for i, n in enumerate(names)}
    frames = clip_frames([clips[n] for n in names], config.seq_len)
    better = np.array([index[p.better] for p in train])
    worse = np.array([index[p.worse] for p in train])
    weight = np.array([p.weight for p in train])

    model = CriticModel(config, seed=hyper.seed)
    params = list(model.params)
    opt = Adam(params, lr=hyper.lr)
    rng = np.random.default_rng(hyper.seed + 1)
    hist = TrainHistory(
        train_sources=sorted({p.source for p in train}), heldout_sources=sorted({p.source for p in heldout})
    )
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            n = len(idx)
            x = Tensor(np.concatenate([frames[better[idx]], frames[worse[idx]]]))
            s = model.forward(x)
            loss = bt_loss(s[:n], s[n:], weight[idx])
            grads = ad.forward_backward(loss, params)
            opt.step(grads)
            losses.append(loss.item())
        opt.decay(hyper.decay)
        hist.train_loss.append(float(np.mean(losses)))
        if heldout:
            hist.heldout_accuracy.append(eval_critic(model, heldout, clips).accuracy)
        if log:
            acc = hist.heldout_accuracy[-1] if heldout else float("nan")
            log(f"epoch {epoch + 1}/{hyper.epochs} loss {hist.train_loss[-1]:.4f} heldout acc {acc:.3f}")
    return model, hist


def eval_critic(model: CriticModel, pairs: Sequence[PreferencePair], clips: Mapping[str, MotionClip]) -> MetricReport:
    names = sorted({n for p in pairs for n in (p.better, p.worse)})
    scores = dict(zip(names, score_many(model, [clips[n] for n in names]).tolist()))
    return evaluate_metric("critic", scores, HIGHER_BETTER, pairs)
