"""Desk-scale synthetic experiments shared by ``scripts/`` and the acceptance suite.

Each experiment has a frozen config dataclass whose defaults are the seeds
and sizes used in-repo, and returns a plain result dataclass.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .analysis import ENSEMBLE_METHODS, SweepRow, ensemble_eval, ensemble_train, sensitivity_sweep
from .autodiff import no_grad
from .critic import CriticConfig, CriticModel, TrainHyper, calibrate, eval_critic, score_many, train_critic
from .diffusion import (
    DiffusionSchedule,
    FinetuneConfig,
    GeneratorConfig,
    GeneratorModel,
    MotionDataset,
    finetune,
    fit_normalizer,
    mdm_loss,
    sample_scores,
    train_generator,
)
from .metrics import HIGHER_BETTER, compute_metric, evaluate_metric
from .motion import forward_kinematics
from .preference import PerturbationSpec, labelled_pool, make_pairs, synth_pool

DESK_CRITIC = CriticConfig(embed_dim=32, ff_dim=64)
ENSEMBLE_FEATURES = ("critic", "acceleration", "jerk", "ground_contact", "pfc")


# ----------------------------------------------------------- critic training


@dataclass(frozen=True)
class CriticExperiment:
    n_clips: int = 2000
    kind: str = "gaussian_jitter"
    scale: float = 0.2
    pool_seed: int = 7
    pair_seed: int = 11
    epochs: int = 30
    config: CriticConfig = DESK_CRITIC


@dataclass
class CriticResult:
    model: CriticModel
    heldout_accuracy: list[float]
    train_loss: list[float]
    seconds: float


def run_critic_experiment(exp: CriticExperiment = CriticExperiment(), log=None) -> CriticResult:
    start = time.perf_counter()
    pool = synth_pool(exp.n_clips, seed=exp.pool_seed)
    pairs, perturbed = make_pairs(pool, [PerturbationSpec(exp.kind, exp.scale)], seed=exp.pair_seed)
    model, hist = train_critic(pairs, {**pool, **perturbed}, exp.config, TrainHyper(epochs=exp.epochs), log=log)
    return CriticResult(model, hist.heldout_accuracy, hist.train_loss, time.perf_counter() - start)


# ------------------------------------------------------------------- sweep


@dataclass(frozen=True)
class SweepExperiment:
    n_clips: int = 200
    pool_seed: int = 99
    scales: tuple[float, ...] = (0.02, 0.05, 0.1, 0.2)
    seeds: tuple[int, ...] = (0,)


def run_sweep(model: CriticModel, exp: SweepExperiment = SweepExperiment()) -> list[SweepRow]:
    pool = synth_pool(exp.n_clips, seed=exp.pool_seed, prefix="s")
    return sensitivity_sweep(lambda clips: score_many(model, clips), pool, exp.scales, seeds=exp.seeds)


# --------------------------------------------------------------- fine-tune


@dataclass(frozen=True)
class FinetuneExperiment:
    n_clips: int = 1024
    pool_seed: int = 3
    gen_seed: int = 0
    pretrain_steps: int = 2000
    pretrain_lr: float = 1e-3
    calibration_quantile: float = 0.95
    finetune: FinetuneConfig = FinetuneConfig(lr=1e-4, iterations=300)
    n_samples: int = 128
    sample_seed: int = 2024
    eval_seed: int = 123
    run_control: bool = True


@dataclass
class FinetuneResult:
    baseline_score: float
    tuned_score: float
    control_score: float | None
    baseline_mdm: float
    tuned_mdm: float
    calibration_shift: float
    seconds: float
    history: list = field(default_factory=list, repr=False)

    @property
    def gain(self) -> float:
        return self.tuned_score - self.baseline_score

    @property
    def gain_over_control(self) -> float | None:
        return None if self.control_score is None else self.tuned_score - self.control_score


def heldout_mdm(gen: GeneratorModel, data: MotionDataset, schedule: DiffusionSchedule, seed: int,
                batch: int = 128) -> float:
    """Denoising loss over the whole dataset with a fixed noise stream."""
    rng = np.random.default_rng(seed)
    with no_grad():
        losses = [mdm_loss(gen, data.x0[i:i + batch], data.labels[i:i + batch], schedule, rng).item()
                  for i in range(0, len(data.x0), batch)]
    return float(np.mean(losses))


def run_finetune_experiment(critic: CriticModel, exp: FinetuneExperiment = FinetuneExperiment(),
                            log=None) -> FinetuneResult:
    """Pretrain a toy generator, then fine-tune it against a calibrated copy of ``critic``.

    With ``run_control`` a second copy runs the same iterations with the
    critic term switched off, separating the critic's effect from the extra
    denoising-loss steps.
    """
    start = time.perf_counter()
    pool = labelled_pool(exp.n_clips, seed=exp.pool_seed)
    clips = [pool[k] for k in sorted(pool)]
    judge = CriticModel(critic.config)
    judge.params.set_arrays(critic.snapshot())
    shift = calibrate(judge, clips, exp.finetune.tau, exp.calibration_quantile)
    judge.freeze()

    mean, std = fit_normalizer(np.stack([c.frames() for c in clips]))
    gen = GeneratorModel(GeneratorConfig(), seed=exp.gen_seed, mean=mean, std=std)
    data = MotionDataset.from_clips(gen, clips)
    schedule = DiffusionSchedule(gen.config.T)
    train_generator(gen, data, schedule, exp.pretrain_steps, lr=exp.pretrain_lr, seed=exp.gen_seed, log=log)

    baseline = sample_scores(gen, judge, schedule, exp.n_samples, exp.sample_seed).mean()
    base_mdm = heldout_mdm(gen, data, schedule, exp.eval_seed)
    control_score = None
    if exp.run_control:
        control = gen.copy()
        finetune(control, judge, data, replace(exp.finetune, lam=0.0), schedule)
        control_score = float(sample_scores(control, judge, schedule, exp.n_samples, exp.sample_seed).mean())
    state = finetune(gen, judge, data, exp.finetune, schedule, log=log)
    tuned = sample_scores(gen, judge, schedule, exp.n_samples, exp.sample_seed).mean()
    return FinetuneResult(
        baseline_score=float(baseline),
        tuned_score=float(tuned),
        control_score=control_score,
        baseline_mdm=base_mdm,
        tuned_mdm=heldout_mdm(gen, data, schedule, exp.eval_seed),
        calibration_shift=shift,
        seconds=time.perf_counter() - start,
        history=state.history,
    )


# ---------------------------------------------------------------- ensemble


@dataclass(frozen=True)
class EnsembleExperiment:
    critic: CriticExperiment = CriticExperiment(kind="joint_distortion", scale=0.5, pool_seed=31, pair_seed=32)
    n_clips: int = 1500
    pool_seed: int = 41
    pair_seed: int = 42
    train_fraction: float = 0.7
    split_seed: int = 0


@dataclass
class EnsembleResult:
    critic_accuracy: float
    with_critic: dict[str, float]
    without_critic: dict[str, float]
    coefficients: dict[str, float]


def feature_table(model: CriticModel, clips: dict) -> dict[str, np.ndarray]:
    names = sorted(clips)
    crit = score_many(model, [clips[n] for n in names])
    table = {}
    for n, c in zip(names, crit):
        pos = forward_kinematics(clips[n])
        table[n] = np.array([c] + [compute_metric(m, clips[n], positions=pos) for m in ENSEMBLE_FEATURES[1:]])
    return table


def run_ensemble_experiment(model: CriticModel, exp: EnsembleExperiment = EnsembleExperiment()) -> EnsembleResult:
    pool = synth_pool(exp.n_clips, seed=exp.pool_seed, prefix="e")
    pairs, perturbed = make_pairs(pool, [PerturbationSpec(exp.critic.kind, exp.critic.scale)], seed=exp.pair_seed)
    table = feature_table(model, {**pool, **perturbed})
    order = np.random.default_rng(exp.split_seed).permutation(len(pairs))
    n_train = int(exp.train_fraction * len(pairs))
    train = [pairs[i] for i in order[:n_train]]
    test = [pairs[i] for i in order[n_train:]]
    feats = list(ENSEMBLE_FEATURES)
    critic_acc = evaluate_metric("critic", {k: float(v[0]) for k, v in table.items()}, HIGHER_BETTER, test).accuracy
    with_c, without_c, coef = {}, {}, {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for method in ENSEMBLE_METHODS:
            full = ensemble_train(feats, table, train, method)
            bare = ensemble_train(feats, table, train, method, use=feats[1:])
            with_c[method] = ensemble_eval(full, feats, table, test).accuracy
            without_c[method] = ensemble_eval(bare, feats, table, test).accuracy
            if method == "logistic":
                coef = full.coefficients()
    return EnsembleResult(critic_acc, with_c, without_c, coef)


def critic_pair_accuracy(model: CriticModel, kind: str, scale: float, n_clips: int = 200, seed: int = 77) -> float:
    pool = synth_pool(n_clips, seed=seed, prefix="k")
    pairs, made = make_pairs(pool, [PerturbationSpec(kind, scale)], seed=seed + 1)
    return eval_critic(model, pairs, {**pool, **made}).accuracy
