"""Adversarial training loop: paradigms, regularizers, probes, CO handling.

Paradigms:
    minmax      cross-entropy on x+delta (single- or multi-step attack),
                optionally + l_stable + l_co + l_align
    regression  cross-entropy on x plus a logit-consistency norm to x+delta
    noise_aug   cross-entropy on x+delta_0 (uniform noise only)
    superposed  cross-entropy on x+delta+delta_0
    clean       plain cross-entropy on x

Every epoch records train loss, clean/probe-robust accuracy on a held-out
slice, per-node V_act at the training budget, and the l_stable value; CO
events are detected on the probe trace and can trigger early stopping.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import torch

from .attacks import (AttackConfig, PerturbationPrior, apply_perturbation, fgsm,
                      pgd, prior_fgsm, uniform_noise)
from .data import Dataset
from .diagnostics import ChannelSet, CoEvent, detect_co, select_top_channels, t_act, v_act_nodes
from .model import Batch, Model, ModelSpec, accuracy, build_model, forward, per_sample_loss
from .regularizers import RegularizerConfig, l_align, l_co_parts, l_stable

PARADIGMS = ("minmax", "regression", "noise_aug", "superposed", "clean")
REGRESSION_NORMS = ("sq_l2", "l2", "l1")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch_index: int):
        self.epoch = epoch
        self.batch_index = batch_index
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch_index}")


@dataclass(frozen=True)
class TrainConfig:
    paradigm: str = "minmax"
    model: ModelSpec = field(default_factory=ModelSpec)
    attack: AttackConfig = field(default_factory=AttackConfig)
    regularizers: RegularizerConfig = field(default_factory=RegularizerConfig)
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.05
    lr_decay_epochs: Optional[tuple[int, ...]] = None  # default: 50% and 75% of epochs
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    grad_clip: float = 1.0  # global grad-norm cap; 0 disables
    seed: int = 0
    early_stop: bool = False
    co_drop_threshold: float = 20.0
    co_window: int = 3
    probe: Optional[AttackConfig] = None  # default: PGD-10 at the training budget
    probe_size: int = 512
    probe_seed: int = 1234
    regression_norm: str = "sq_l2"
    channel_select_size: int = 512

    def __post_init__(self):
        if self.paradigm not in PARADIGMS:
            raise ValueError(f"paradigm must be one of {PARADIGMS}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.regression_norm not in REGRESSION_NORMS:
            raise ValueError(f"regression_norm must be one of {REGRESSION_NORMS}")
        reg = self.regularizers
        if self.paradigm != "minmax" and (reg.alpha_3 > 0 or reg.gamma > 0 or reg.l_co_active):
            raise ValueError("regularizers are defined for the minmax paradigm only")

    def probe_attack(self) -> AttackConfig:
        if self.probe is not None:
            return self.probe
        xi = self.attack.budget
        return AttackConfig(budget=xi, step_size=xi / 4, steps=10, init="uniform_random")

    def lr_at(self, epoch: int) -> float:
        decays = self.lr_decay_epochs
        if decays is None:
            decays = (math.floor(self.epochs * 0.5), math.floor(self.epochs * 0.75))
        k = sum(1 for d in decays if epoch >= d)
        return self.lr * self.lr_decay_factor ** k


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    clean_acc: float
    robust_acc: float
    v_act: dict[str, float]
    l_stable: float
    wall_time: float
    lr: float

    def to_record(self, deterministic: bool = True) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "clean_acc": self.clean_acc,
            "robust_acc": self.robust_acc,
            "v_act": dict(self.v_act),
            "l_stable": self.l_stable,
            "wall_time": None if deterministic else self.wall_time,
            "lr": self.lr,
        }


@dataclass
class StepMetrics:
    ce: float
    l_stable: float
    l_co: float
    l_align: float

    @property
    def total(self) -> float:
        return self.ce + self.l_stable + self.l_co + self.l_align

    def to_dict(self) -> dict:
        return {"ce": self.ce, "l_stable": self.l_stable, "l_co": self.l_co,
                "l_align": self.l_align, "total": self.total}


@dataclass
class RunArtifacts:
    model: Model
    records: list[EpochRecord]
    co_events: list[CoEvent]
    best_params: dict[str, torch.Tensor]
    best_epoch: int
    last_params: dict[str, torch.Tensor]
    prior: Optional[PerturbationPrior] = None
    converged: bool = True

    def best_model(self) -> Model:
        m = build_model(self.model.spec, dtype=self.model.dtype)
        m.load_params(self.best_params)
        return m

    def robust_history(self) -> list[float]:
        return [r.robust_acc for r in self.records]


def sgd_init(params: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    return {k: torch.zeros_like(v) for k, v in params.items()}


def sgd_apply(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor],
              velocity: dict[str, torch.Tensor], lr: float,
              momentum: float = 0.0, weight_decay: float = 0.0) -> None:
    """One SGD update in place: v <- m*v + (g + wd*p); p <- p - lr*v."""
    with torch.no_grad():
        for k, p in params.items():
            g = grads[k]
            if weight_decay:
                g = g + weight_decay * p
            velocity[k] = momentum * velocity[k] + g if momentum else g
            params[k] = (p - lr * velocity[k]).detach().requires_grad_(p.requires_grad)


def _make_adversarial(model: Model, batch: Batch, config: TrainConfig,
                      prior: Optional[PerturbationPrior], attack_seed, noise_seed):
    attack = config.attack
    if attack.init == "prior":
        if prior is None:
            raise ValueError("attack.init='prior' needs a PerturbationPrior")
        return prior_fgsm(model, batch, attack, prior, seed=noise_seed)
    seed = noise_seed if attack.init == "uniform_random" else attack_seed
    if attack.steps > 1:
        pert, _ = pgd(model, batch, attack, seed=seed)
        return pert
    return fgsm(model, batch, attack, seed=seed)


def train_step(model: Model, batch: Batch, config: TrainConfig,
               prior: Optional[PerturbationPrior] = None,
               opt_state: Optional[dict] = None, lr: Optional[float] = None,
               channel_set: Optional[ChannelSet] = None,
               step_seed=0) -> tuple[dict[str, torch.Tensor], StepMetrics]:
    """One optimizer update of the paradigm loss; returns (params, decomposition)."""
    reg = config.regularizers
    for p in model.params.values():
        p.requires_grad_(True)
    x, y = batch.images, batch.labels
    attack_seed = (config.seed, 11, step_seed) if not isinstance(step_seed, tuple) else step_seed
    noise_seed = tuple(attack_seed) + (1,)

    need_rand = config.paradigm in ("noise_aug", "superposed") or (
        config.paradigm == "minmax" and (reg.alpha_3 > 0 or reg.gamma > 0 or reg.l_co_active))
    delta0 = None
    if need_rand:
        delta0 = uniform_noise(x.shape, config.attack.budget, noise_seed,
                               role="random_init", dtype=x.dtype).delta

    zero = torch.zeros((), dtype=model.dtype)
    ce = ls = lco = la = zero
    if config.paradigm == "clean":
        logits, _ = forward(model, x)
        ce = per_sample_loss(logits, y, "cross_entropy").mean()
    elif config.paradigm == "noise_aug":
        logits, _ = forward(model, apply_perturbation(x, delta0))
        ce = per_sample_loss(logits, y, "cross_entropy").mean()
    elif config.paradigm == "regression":
        delta = _make_adversarial(model, batch, config, prior, attack_seed, noise_seed).delta
        logits_clean, _ = forward(model, x)
        logits_adv, _ = forward(model, apply_perturbation(x, delta))
        ce = per_sample_loss(logits_clean, y, "cross_entropy").mean()
        diff = logits_adv - logits_clean
        if config.regression_norm == "sq_l2":
            penalty = (diff ** 2).sum(dim=1).mean()
        elif config.regression_norm == "l2":
            penalty = torch.linalg.vector_norm(diff, dim=1).mean()
        else:
            penalty = diff.abs().sum(dim=1).mean()
        ce = ce + penalty
    elif config.paradigm == "superposed":
        delta = _make_adversarial(model, batch, config, prior, attack_seed, noise_seed).delta
        logits, _ = forward(model, apply_perturbation(x, delta + delta0))
        ce = per_sample_loss(logits, y, "cross_entropy").mean()
    else:  # minmax
        delta = _make_adversarial(model, batch, config, prior, attack_seed, noise_seed).delta
        logits_adv, cap_adv = forward(model, apply_perturbation(x, delta))
        ce = per_sample_loss(logits_adv, y, "cross_entropy").mean()
        if reg.alpha_3 > 0 or reg.gamma > 0:
            logits_rand, cap_rand = forward(model, apply_perturbation(x, delta0))
            if reg.alpha_3 > 0:
                ls = l_stable(cap_adv, cap_rand, reg.node, reg.alpha_3)
            if reg.gamma > 0:
                la = l_align(logits_adv, logits_rand, reg.gamma)
        if reg.l_co_active:
            if channel_set is None:
                raise ValueError("l_co is active but no channel set was selected")
            ce_masked, stable_part = l_co_parts(model, batch, delta, delta0, channel_set, reg)
            lco = ce_masked - reg.co_weight * stable_part

    total = ce + ls + lco + la
    if not bool(torch.isfinite(total)):
        raise TrainingDiverged(-1, -1)

    params = model.params
    grads = torch.autograd.grad(total, list(params.values()), allow_unused=True)
    grads = {k: (g if g is not None else torch.zeros_like(params[k]))
             for k, g in zip(params.keys(), grads)}
    if config.grad_clip:
        norm = torch.sqrt(sum((g ** 2).sum() for g in grads.values()))
        if float(norm) > config.grad_clip:
            grads = {k: g * (config.grad_clip / norm) for k, g in grads.items()}
    if opt_state is None:
        opt_state = sgd_init(params)
    sgd_apply(params, grads, opt_state,
              lr=config.lr if lr is None else lr,
              momentum=config.momentum, weight_decay=config.weight_decay)
    return params, StepMetrics(ce=float(ce.detach()), l_stable=float(ls.detach()),
                               l_co=float(lco.detach()), l_align=float(la.detach()))


def _probe_robust_accuracy(model: Model, probe: Batch, attack: AttackConfig, seed) -> float:
    pert, _ = pgd(model, probe, attack, seed=seed)
    return accuracy(model, apply_perturbation(probe.images, pert.delta), probe.labels)


def train(config: TrainConfig, dataset: Dataset,
          probe_dataset: Optional[Dataset] = None) -> RunArtifacts:
    """Run the configured paradigm; deterministic per config and dataset."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    model = build_model(config.model)
    for p in model.params.values():
        p.requires_grad_(True)

    probe_src = probe_dataset if probe_dataset is not None else dataset
    probe_ds = probe_src.head(config.probe_size, tag=getattr(probe_src, "tag", "probe"))
    probe = probe_ds.full_batch()
    probe_attack = config.probe_attack()

    prior = None
    if config.attack.init == "prior":
        prior = PerturbationPrior.zeros(len(dataset), config.model.input_shape)

    opt_state = sgd_init(model.params)
    records: list[EpochRecord] = []
    co_events: list[CoEvent] = []
    best_acc, best_epoch = -1.0, -1
    best_params = model.clone_params()
    reg = config.regularizers
    # diagnostics regenerate single-step attacks, so a prior-initialized
    # training attack falls back to zero init there
    diag_attack = config.attack if config.attack.init != "prior" else replace(config.attack, init="zero")

    for epoch in range(config.epochs):
        t0 = time.monotonic()
        lr = config.lr_at(epoch)
        channel_set = None
        if config.paradigm == "minmax" and reg.l_co_active:
            stats_slice = dataset.head(config.channel_select_size)
            src = lambda m, b: fgsm(m, b, diag_attack, seed=(config.seed, 7, epoch))
            stats = t_act(model, stats_slice, src, reg.node)
            channel_set = select_top_channels(stats, reg.p)

        order_rng = np.random.default_rng((config.seed, 5, epoch))
        step_totals, step_stables = [], []
        for bi, batch in enumerate(dataset.batches(config.batch_size, rng=order_rng)):
            try:
                _, metrics = train_step(model, batch, config, prior=prior,
                                        opt_state=opt_state, lr=lr,
                                        channel_set=channel_set,
                                        step_seed=(config.seed, 11, epoch, bi))
            except TrainingDiverged:
                raise TrainingDiverged(epoch, bi) from None
            step_totals.append(metrics.total)
            step_stables.append(metrics.l_stable)

        with torch.no_grad():
            frozen = Model(model.spec, model.clone_params())
        clean_acc = accuracy(frozen, probe.images, probe.labels)
        robust_acc = _probe_robust_accuracy(frozen, probe, probe_attack, seed=config.probe_seed)
        v_act = v_act_nodes(frozen, probe_ds,
                            lambda m, b: fgsm(m, b, diag_attack, seed=(config.probe_seed, 3, epoch)))
        records.append(EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean(step_totals)),
            clean_acc=clean_acc,
            robust_acc=robust_acc,
            v_act=v_act,
            l_stable=float(np.mean(step_stables)),
            wall_time=time.monotonic() - t0,
            lr=lr,
        ))

        if robust_acc > best_acc:
            best_acc, best_epoch = robust_acc, epoch
            best_params = model.clone_params()

        co_events = detect_co([r.robust_acc for r in records],
                              config.co_drop_threshold, config.co_window)
        if co_events and config.early_stop:
            break

    final = Model(model.spec, model.clone_params())
    return RunArtifacts(
        model=final,
        records=records,
        co_events=co_events,
        best_params=best_params,
        best_epoch=best_epoch,
        last_params=model.clone_params(),
        prior=prior,
        converged=True,
    )
