"""Toy x0-predicting DDPM motion generator and critic-supervised fine-tuning.

Each fine-tuning iteration first takes an ordinary denoising-loss step,
then denoises fresh noise without gradients down to a random step inside a
window, predicts the clean motion in one recorded step, and updates the
generator to raise the frozen critic's score of that prediction while a
quadratic penalty keeps it near the previous iteration's prediction.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, ContractViolation, NumericFault, Tensor, no_grad
from .critic import CriticModel
from .motion import CANONICAL_LEN, FRAME_DIM, MotionClip
from .nn import ParamSet, glorot, read_checkpoint, sinusoidal_table, write_checkpoint
from .preference import derive_seed

CHECKPOINT_MAGIC = b"MGEN"


# ------------------------------------------------------------------ schedule


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear beta schedule; step ``t`` runs 1..T and indexes arrays at t - 1.

    Beta bounds default to the usual 1e-4..0.02 rescaled by 1000 / T so that
    short schedules still end close to pure noise.
    """

    T: int = 100
    beta_min: float | None = None
    beta_max: float | None = None

    def __post_init__(self):
        if self.T < 2:
            raise ContractViolation("T must be >= 2")
        lo, hi = self.bounds
        if not 0 < lo < hi < 1:
            raise ContractViolation("need 0 < beta_min < beta_max < 1")
        if self.alpha_bar[-1] >= 0.01:
            raise ContractViolation(f"alpha_bar_T = {self.alpha_bar[-1]:.3g} is not close to zero")

    @property
    def bounds(self) -> tuple[float, float]:
        scale = 1000.0 / self.T
        lo = self.beta_min if self.beta_min is not None else 1e-4 * scale
        hi = self.beta_max if self.beta_max is not None else 0.02 * scale
        return lo, hi

    @property
    def betas(self) -> np.ndarray:
        return np.linspace(*self.bounds, self.T)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def check_t(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ContractViolation(f"timestep outside 1..{self.T}")


def q_sample(x0: np.ndarray, t, eps: np.ndarray, schedule: DiffusionSchedule) -> np.ndarray:
    """Closed-form forward noising sqrt(ab_t) x0 + sqrt(1 - ab_t) eps; ``t`` scalar or per row."""
    schedule.check_t(t)
    ab = schedule.alpha_bar[np.asarray(t) - 1]
    if np.ndim(ab):
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def posterior_step(x0_pred: np.ndarray, xt: np.ndarray, t: int, schedule: DiffusionSchedule, noise: np.ndarray) -> np.ndarray:
    """One ancestral step x_t -> x_{t-1} from a clean-sample prediction."""
    beta = schedule.betas[t - 1]
    ab_t = schedule.alpha_bar[t - 1]
    ab_prev = schedule.alpha_bar[t - 2] if t > 1 else 1.0
    c0 = math.sqrt(ab_prev) * beta / (1.0 - ab_t)
    ct = math.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab_t)
    mean = c0 * x0_pred + ct * xt
    if t == 1:
        return mean
    var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
    return mean + math.sqrt(var) * noise


# ----------------------------------------------------------------- generator


@dataclass(frozen=True)
class GeneratorConfig:
    seq_len: int = CANONICAL_LEN
    frame_dim: int = FRAME_DIM
    width: int = 256
    depth: int = 3
    n_labels: int = 4
    time_dim: int = 64
    label_dim: int = 64
    T: int = 100

    @property
    def motion_dim(self) -> int:
        return self.seq_len * self.frame_dim


class GeneratorModel:
    """Feed-forward denoiser (noisy motion, step, label) -> predicted clean motion.

    Works in a per-channel standardized space; ``mean``/``std`` map back to
    motion units and are fixed when the model is built from data.
    """

    def __init__(self, config: GeneratorConfig = GeneratorConfig(), seed: int = 0,
                 mean: np.ndarray | None = None, std: np.ndarray | None = None):
        self.config = c = config
        rng = np.random.default_rng(seed)
        D = c.motion_dim
        p = self.params = ParamSet()
        p.add("label_embed", rng.normal(0.0, 1.0, size=(c.n_labels, c.label_dim)))
        dims = [D + c.time_dim + c.label_dim] + [c.width] * c.depth
        for i in range(c.depth):
            p.add(f"h{i}.w", glorot(rng, dims[i], dims[i + 1]))
            p.add(f"h{i}.b", np.zeros(dims[i + 1]))
        p.add("out.w", glorot(rng, c.width, D) * 0.1)
        p.add("out.b", np.zeros(D))
        self.mean = np.zeros(c.frame_dim) if mean is None else np.asarray(mean, dtype=np.float64)
        self.std = np.ones(c.frame_dim) if std is None else np.asarray(std, dtype=np.float64)
        self.time_table = sinusoidal_table(c.T + 1, c.time_dim)

    def forward(self, xt, t: np.ndarray, labels: np.ndarray) -> Tensor:
        """Predicted standardized clean motion, (B, D)."""
        c, p = self.config, self.params
        xt = ad.as_tensor(xt)
        t = np.asarray(t, dtype=int)
        labels = np.asarray(labels, dtype=int)
        if xt.ndim != 2 or xt.shape[1] != c.motion_dim:
            raise ContractViolation(f"denoiser expects (B, {c.motion_dim}), got {xt.shape}")
        if np.any(labels < 0) or np.any(labels >= c.n_labels):
            raise ContractViolation("label outside vocabulary")
        temb = Tensor(self.time_table[t])
        lemb = p["label_embed"][labels]
        h = ad.concatenate([xt, temb, lemb], axis=1)
        for i in range(c.depth):
            h = ad.softplus(h @ p[f"h{i}.w"] + p[f"h{i}.b"])
        return h @ p["out.w"] + p["out.b"]

    def predict(self, xt: np.ndarray, t: int, labels: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.forward(Tensor(xt, _check=False), np.full(len(xt), t), labels).data

    # -------------------------------------------------------------- mapping

    def normalize(self, frames: np.ndarray) -> np.ndarray:
        """(B, L, F) motion frames -> (B, D) standardized vectors."""
        return ((frames - self.mean) / self.std).reshape(len(frames), -1)

    def denormalize(self, x):
        """(B, D) standardized -> (B, L, F) motion frames; works on arrays and Tensors."""
        c = self.config
        if isinstance(x, Tensor):
            return x.reshape(x.shape[0], c.seq_len, c.frame_dim) * self.std + self.mean
        return np.asarray(x).reshape(len(x), c.seq_len, c.frame_dim) * self.std + self.mean

    def to_clips(self, x: np.ndarray, labels: Sequence[int] | None = None) -> list[MotionClip]:
        frames = self.denormalize(x)
        labels = [None] * len(frames) if labels is None else list(labels)
        return [MotionClip.from_frames(f, label=int(lab) if lab is not None else None) for f, lab in zip(frames, labels)]

    # ----------------------------------------------------------- persistence

    def copy(self) -> GeneratorModel:
        other = GeneratorModel(self.config, mean=self.mean, std=self.std)
        other.params.set_arrays([a.copy() for a in self.params.arrays()])
        return other

    def save(self, path: str | Path, metadata: dict | None = None) -> None:
        path = Path(path)
        bundle = ParamSet()
        for name, t in self.params.items():
            bundle.add(name, t.data)
        bundle.add("norm.mean", self.mean)
        bundle.add("norm.std", self.std)
        with path.open("wb") as fh:
            write_checkpoint(fh, CHECKPOINT_MAGIC, asdict(self.config), bundle)
        if metadata is not None:
            path.with_suffix(path.suffix + ".json").write_text(json.dumps(metadata, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> GeneratorModel:
        config, arrays = read_checkpoint(Path(path).read_bytes(), CHECKPOINT_MAGIC)
        mean, std = arrays.pop("norm.mean"), arrays.pop("norm.std")
        model = cls(GeneratorConfig(**config), mean=mean, std=std)
        if list(arrays) != model.params.names():
            raise ContractViolation("checkpoint parameters do not match the config")
        model.params.set_arrays(list(arrays.values()))
        return model


def fit_normalizer(frames: np.ndarray, floor: float = 1e-2) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and (floored) std over clips and frames."""
    flat = frames.reshape(-1, frames.shape[-1])
    return flat.mean(axis=0), np.maximum(flat.std(axis=0), floor)


# ------------------------------------------------------------------- sampling


def ddpm_sample(
    gen: GeneratorModel,
    labels: np.ndarray,
    schedule: DiffusionSchedule,
    seed: int,
    stop_at: int = 0,
) -> np.ndarray:
    """Ancestral sampling from pure noise down to step ``stop_at`` (no gradients).

    Returns standardized vectors (B, D); ``stop_at = T`` gives the initial draw.
    """
    if not 0 <= stop_at <= schedule.T:
        raise ContractViolation("stop_at outside 0..T")
    labels = np.asarray(labels, dtype=int)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((len(labels), gen.config.motion_dim))
    for t in range(schedule.T, stop_at, -1):
        x0 = gen.predict(x, t, labels)
        x = posterior_step(x0, x, t, schedule, rng.standard_normal(x.shape))
    return x


def mdm_loss(gen: GeneratorModel, x0: np.ndarray, labels: np.ndarray, schedule: DiffusionSchedule,
             rng: np.random.Generator) -> Tensor:
    """Mean squared error of the clean-sample prediction at uniformly drawn steps."""
    if len(x0) == 0:
        raise ContractViolation("empty batch")
    t = rng.integers(1, schedule.T + 1, size=len(x0))
    eps = rng.standard_normal(x0.shape)
    xt = q_sample(x0, t, eps, schedule)
    diff = gen.forward(Tensor(xt), t, labels) - Tensor(x0)
    return (diff * diff).mean()


def critic_to_loss(s, tau: float) -> Tensor:
    """sigmoid(tau - s): falls as the score rises and flattens once s passes tau."""
    return ad.sigmoid(ad.sub(tau, s))


def kl_reg(x0_pred, x0_prev) -> Tensor:
    """Half mean squared gap to the (detached) previous prediction.

    This is the KL divergence between unit-variance Gaussians centred on the
    two predictions, averaged per element.
    """
    x0_pred = ad.as_tensor(x0_pred)
    prev = np.asarray(x0_prev.data if isinstance(x0_prev, Tensor) else x0_prev)
    if x0_pred.shape != prev.shape:
        raise ContractViolation(f"shape mismatch {x0_pred.shape} vs {prev.shape}")
    d = x0_pred - Tensor(prev)
    return (d * d).mean() * 0.5


# ------------------------------------------------------------------ training


class MotionDataset:
    """Standardized ground-truth motions with action labels."""

    def __init__(self, x0: np.ndarray, labels: np.ndarray):
        if len(x0) != len(labels) or len(x0) == 0:
            raise ContractViolation("dataset needs matching, nonempty motions and labels")
        self.x0 = np.asarray(x0, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=int)

    @classmethod
    def from_clips(cls, gen: GeneratorModel, clips: Sequence[MotionClip]) -> MotionDataset:
        frames = np.stack([c.frames() for c in clips])
        labels = np.array([c.label or 0 for c in clips])
        return cls(gen.normalize(frames), labels)

    def batch(self, seed: int, iteration: int, size: int) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(derive_seed(seed, iteration, 1))
        idx = rng.choice(len(self.x0), size=min(size, len(self.x0)), replace=False)
        return self.x0[idx], self.labels[idx]


def mdm_update(gen: GeneratorModel, opt: Adam, data: MotionDataset, schedule: DiffusionSchedule,
               seed: int, iteration: int, batch_size: int) -> float:
    """One plain denoising-loss step; randomness keyed on (seed, iteration)."""
    x0, labels = data.batch(seed, iteration, batch_size)
    rng = np.random.default_rng(derive_seed(seed, iteration, 2))
    loss = mdm_loss(gen, x0, labels, schedule, rng)
    opt.step(ad.forward_backward(loss, opt.params))
    return loss.item()


def train_generator(gen: GeneratorModel, data: MotionDataset, schedule: DiffusionSchedule, steps: int,
                    lr: float = 1e-3, batch_size: int = 64, seed: int = 0, log=None) -> list[float]:
    """Plain denoising-loss training; returns the loss per step."""
    opt = Adam(list(gen.params), lr=lr)
    losses = []
    for it in range(steps):
        losses.append(mdm_update(gen, opt, data, schedule, seed, it, batch_size))
        if log and (it + 1) % 100 == 0:
            log(f"step {it + 1}/{steps} mdm loss {np.mean(losses[-100:]):.4f}")
    return losses


@dataclass(frozen=True)
class FinetuneConfig:
    tau: float = 12.0
    lam: float = 1e-3
    mu: float = 1.0
    window: tuple[int, int] | None = None  # defaults to (0.7 T, 0.9 T)
    lr: float = 1e-5
    iterations: int = 800
    batch_size: int = 64
    sample_batch: int = 16
    single_step_mode: bool = False
    seed: int = 0

    def resolve_window(self, T: int) -> tuple[int, int]:
        lo, hi = self.window if self.window is not None else (int(round(0.7 * T)), int(round(0.9 * T)))
        if not 1 <= lo <= hi < T:
            raise ContractViolation(f"window [{lo}, {hi}] must satisfy 1 <= T1 <= T2 < T")
        return lo, hi

    def __post_init__(self):
        if self.lam < 0 or self.mu < 0 or self.lr <= 0 or self.iterations < 0:
            raise ContractViolation("scales must be >= 0, lr > 0, iterations >= 0")


@dataclass
class Diagnostics:
    iteration: int
    t: int
    mdm_loss: float
    critic_loss: float
    kl_loss: float | None
    mean_score: float
    total: float


@dataclass
class FinetuneState:
    mdm_opt: Adam
    ft_opt: Adam
    prev_x0: np.ndarray | None = None
    iteration: int = 0
    history: list[Diagnostics] = field(default_factory=list)

    @classmethod
    def fresh(cls, gen: GeneratorModel, config: FinetuneConfig) -> FinetuneState:
        params = list(gen.params)
        return cls(Adam(params, lr=config.lr), Adam(params, lr=config.lr))


def sample_window_t(rng: np.random.Generator, window: tuple[int, int]) -> int:
    return int(rng.integers(window[0], window[1] + 1))


def finetune_step(gen: GeneratorModel, critic: CriticModel, data: MotionDataset, config: FinetuneConfig,
                  state: FinetuneState, schedule: DiffusionSchedule) -> Diagnostics:
    if not critic.frozen:
        raise ContractViolation("critic must be frozen before fine-tuning")
    it = state.iteration
    mdm = mdm_update(gen, state.mdm_opt, data, schedule, config.seed, it, config.batch_size)

    rng = np.random.default_rng(derive_seed(config.seed, it, 3))
    window = config.resolve_window(schedule.T)
    n = config.sample_batch
    labels = rng.integers(0, gen.config.n_labels, size=n)
    if config.single_step_mode:
        t = schedule.T
        xt = rng.standard_normal((n, gen.config.motion_dim))
    else:
        t = sample_window_t(rng, window)
        xt = ddpm_sample(gen, labels, schedule, derive_seed(config.seed, it, 4), stop_at=t)

    x0_pred = gen.forward(Tensor(xt), np.full(n, t), labels)
    scores = critic.forward(gen.denormalize(x0_pred))
    critic_loss = critic_to_loss(scores, config.tau).mean()
    objective = critic_loss * config.lam
    kl_val = None
    if state.prev_x0 is not None and state.prev_x0.shape == x0_pred.shape:
        kl = kl_reg(x0_pred, state.prev_x0)
        kl_val = kl.item()
        objective = objective + kl * config.mu
    if not np.isfinite(objective.data).all():
        raise NumericFault("non-finite fine-tuning loss", objective.id)
    state.ft_opt.step(ad.forward_backward(objective, state.ft_opt.params))
    state.prev_x0 = x0_pred.data.copy()
    state.iteration += 1

    c_val = critic_loss.item()
    diag = Diagnostics(
        iteration=it,
        t=t,
        mdm_loss=mdm,
        critic_loss=c_val,
        kl_loss=kl_val,
        mean_score=float(scores.data.mean()),
        total=mdm + config.lam * c_val + config.mu * (kl_val or 0.0),
    )
    state.history.append(diag)
    return diag


def finetune(gen: GeneratorModel, critic: CriticModel, data: MotionDataset, config: FinetuneConfig,
             schedule: DiffusionSchedule, run_dir: str | Path | None = None, checkpoint_every: int = 0,
             log=None) -> FinetuneState:
    """Run ``config.iterations`` fine-tuning steps in place on ``gen``.

    With ``run_dir`` set, writes config.json, diagnostics.csv and periodic
    MGEN checkpoints; on a numeric fault the current generator is dumped to
    ``fault_state.mgen`` before re-raising.
    """
    state = FinetuneState.fresh(gen, config)
    run = Path(run_dir) if run_dir is not None else None
    if run is not None:
        run.mkdir(parents=True, exist_ok=True)
        (run / "config.json").write_text(json.dumps(asdict(config), indent=2, sort_keys=True))
    try:
        for _ in range(config.iterations):
            diag = finetune_step(gen, critic, data, config, state, schedule)
            if log and (diag.iteration + 1) % 25 == 0:
                log(f"iter {diag.iteration + 1} t={diag.t} mdm={diag.mdm_loss:.4f} "
                    f"critic={diag.critic_loss:.4f} score={diag.mean_score:.3f}")
            if run is not None and checkpoint_every and (diag.iteration + 1) % checkpoint_every == 0:
                gen.save(run / f"gen_{diag.iteration + 1:05d}.mgen")
    except NumericFault:
        if run is not None:
            gen.save(run / "fault_state.mgen")
            write_diagnostics(state.history, run / "diagnostics.csv")
        raise
    if run is not None:
        write_diagnostics(state.history, run / "diagnostics.csv")
    return state


def write_diagnostics(history: Sequence[Diagnostics], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "t", "mdm_loss", "critic_loss", "kl_loss", "mean_score", "total"])
        for d in history:
            w.writerow([d.iteration, d.t, repr(d.mdm_loss), repr(d.critic_loss),
                        "" if d.kl_loss is None else repr(d.kl_loss), repr(d.mean_score), repr(d.total)])


def score_vs_denoising_curve(gen: GeneratorModel, critic: CriticModel, schedule: DiffusionSchedule,
                             seeds: Sequence[int], batch: int = 16) -> np.ndarray:
    """Mean critic score of the clean-motion prediction at every step t = T..1.

    Entry ``i`` of the result belongs to step ``T - i``.
    """
    curve = np.zeros(schedule.T)
    count = 0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, gen.config.n_labels, size=batch)
        x = rng.standard_normal((batch, gen.config.motion_dim))
        for i, t in enumerate(range(schedule.T, 0, -1)):
            x0 = gen.predict(x, t, labels)
            with no_grad():
                curve[i] += critic.forward(Tensor(gen.denormalize(x0))).data.sum()
            x = posterior_step(x0, x, t, schedule, rng.standard_normal(x.shape))
        count += batch
    return curve / count


def sample_scores(gen: GeneratorModel, critic: CriticModel, schedule: DiffusionSchedule, n: int, seed: int) -> np.ndarray:
    """Critic scores of ``n`` fresh samples with uniformly drawn labels."""
    labels = np.random.default_rng(seed).integers(0, gen.config.n_labels, size=n)
    x = ddpm_sample(gen, labels, schedule, seed)
    with no_grad():
        return critic.forward(Tensor(gen.denormalize(x))).data.copy()
