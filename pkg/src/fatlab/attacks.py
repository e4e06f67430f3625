"""Adversarial and random perturbation generators (l-inf threat model).

All emitted perturbations satisfy the budget exactly: the clamp bound is
the largest dtype-representable value not exceeding the requested budget,
and when image-range clipping is on, deltas are nudged by ulps so that
x + delta lands inside [0, 1] under the delta's own dtype arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np
import torch

from .model import Batch, Model, NonFiniteLossError, loss_input_gradient

ROLES = ("adversarial", "random_init", "inference_noise")
INITS = ("zero", "uniform_random", "prior")


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    budget: float = 8 / 255
    step_size: float = 2 / 255
    steps: int = 1
    init: str = "zero"
    loss_kind: str = "cross_entropy"
    clip_to_image_range: bool = True

    def __post_init__(self):
        if not (0.0 < self.budget <= 1.0):
            raise ValueError(f"budget must be in (0, 1], got {self.budget}")
        if self.step_size <= 0.0:
            raise ValueError("step_size must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}")


@dataclass
class PerturbationBatch:
    delta: torch.Tensor
    role: str
    budget: float
    scale: Optional[float] = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}")
        if self.delta.numel() and float(self.delta.abs().max()) > self.budget + 1e-12:
            raise ValueError("perturbation exceeds budget")

    def __len__(self) -> int:
        return len(self.delta)


@dataclass
class PerturbationPrior:
    """Per-training-sample perturbation store for prior-initialized FGSM."""

    deltas: torch.Tensor
    momentum: float = 1.0
    budget: float = 0.0

    def entry(self, indices: np.ndarray) -> torch.Tensor:
        return self.deltas[torch.as_tensor(np.asarray(indices), dtype=torch.long)]

    def write(self, indices: np.ndarray, delta: torch.Tensor, budget: float) -> None:
        self.deltas[torch.as_tensor(np.asarray(indices), dtype=torch.long)] = delta.detach().to(self.deltas.dtype)
        self.budget = budget

    @staticmethod
    def zeros(num_samples: int, image_shape: tuple[int, int, int],
              momentum: float = 1.0, dtype: torch.dtype = torch.float32) -> "PerturbationPrior":
        return PerturbationPrior(torch.zeros((num_samples, *image_shape), dtype=dtype), momentum=momentum)


def _budget_bound(budget: float, dtype: torch.dtype) -> float:
    """Largest dtype value <= budget, so clamping can never exceed the f64 budget."""
    b = float(torch.tensor(budget, dtype=dtype))
    while b > budget:
        b = float(torch.nextafter(torch.tensor(b, dtype=dtype), torch.tensor(0.0, dtype=dtype)))
    return b


def _snap_into_image_range(x: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
    """Shrink delta by ulps until x + delta is inside [0, 1] exactly."""
    zero = torch.zeros((), dtype=delta.dtype)
    for _ in range(4):
        s = x + delta
        bad = (s < 0.0) | (s > 1.0)
        if not bool(bad.any()):
            return delta
        delta = torch.where(bad, torch.nextafter(delta, zero), delta)
    raise AttackError("could not snap perturbation into image range")


def _project(x: torch.Tensor, x_adv: torch.Tensor, budget: float, clip: bool) -> torch.Tensor:
    bound = _budget_bound(budget, x.dtype)
    delta = torch.clamp(x_adv - x, -bound, bound)
    if clip:
        delta = torch.clamp(x + delta, 0.0, 1.0) - x
        delta = torch.clamp(delta, -bound, bound)
        delta = _snap_into_image_range(x, delta)
    return delta


def _uniform(shape, bound: float, seed, dtype: torch.dtype) -> torch.Tensor:
    rng = np.random.default_rng(seed)
    draw = torch.from_numpy(rng.uniform(-bound, bound, size=tuple(shape))).to(dtype)
    return torch.clamp(draw, -_budget_bound(bound, dtype), _budget_bound(bound, dtype))


def uniform_noise(shape, a: float, seed, role: str = "inference_noise",
                  dtype: torch.dtype = torch.float32) -> PerturbationBatch:
    """U(-a, a) noise, deterministic per seed."""
    if a <= 0.0:
        raise ValueError("uniform noise bound must be positive")
    return PerturbationBatch(_uniform(shape, a, seed, dtype), role=role, budget=a)


def gaussian_noise(shape, sigma: float, seed, role: str = "inference_noise",
                   dtype: torch.dtype = torch.float32) -> PerturbationBatch:
    """Mean-0 Gaussian noise; unbounded, so the budget is infinite and
    x + delta is clipped to [0, 1] at application time."""
    if sigma <= 0.0:
        raise ValueError("sigma must be positive")
    rng = np.random.default_rng(seed)
    draw = torch.from_numpy(rng.normal(0.0, sigma, size=tuple(shape))).to(dtype)
    return PerturbationBatch(draw, role=role, budget=float("inf"))


def apply_perturbation(images: torch.Tensor, pert: PerturbationBatch | torch.Tensor) -> torch.Tensor:
    """x + delta, clipped to the valid image range."""
    delta = pert.delta if isinstance(pert, PerturbationBatch) else pert
    return torch.clamp(images + delta, 0.0, 1.0)


def fgnm_scale(delta: PerturbationBatch | torch.Tensor) -> float:
    """Scale factor of the non-sign gradient method: ||sign(d)||_2 / ||d||_2."""
    d = delta.delta if isinstance(delta, PerturbationBatch) else delta
    norm = float(torch.linalg.vector_norm(d.double()))
    if norm == 0.0:
        raise ValueError("fgnm scale undefined for a zero perturbation")
    return float(torch.linalg.vector_norm(torch.sign(d).double())) / norm


def _init_delta(x: torch.Tensor, config: AttackConfig, seed,
                prior: PerturbationPrior | None, indices) -> torch.Tensor:
    if config.init == "zero":
        return torch.zeros_like(x)
    if config.init == "uniform_random":
        if seed is None:
            raise AttackError("init='uniform_random' needs a seed")
        return uniform_noise(x.shape, config.budget, seed, role="random_init", dtype=x.dtype).delta
    if prior is None:
        raise AttackError("init='prior' needs a PerturbationPrior")
    if indices is None:
        raise AttackError("init='prior' needs batch sample indices")
    stored = prior.entry(indices).to(x.dtype)
    if prior.momentum >= 1.0:
        blended = stored
    else:
        if seed is None:
            raise AttackError("prior momentum < 1 needs a seed for the uniform blend")
        fresh = uniform_noise(x.shape, config.budget, seed, role="random_init", dtype=x.dtype).delta
        blended = prior.momentum * stored + (1.0 - prior.momentum) * fresh
    bound = _budget_bound(config.budget, x.dtype)
    return torch.clamp(blended, -bound, bound)


def _iterate(model: Model, batch: Batch, config: AttackConfig, steps: int, step_size: float,
             seed=None, prior: PerturbationPrior | None = None,
             noise_sampler: Optional[Callable[[int, torch.Size], torch.Tensor]] = None,
             ) -> tuple[PerturbationBatch, list[torch.Tensor]]:
    x = batch.images
    delta = _init_delta(x, config, seed, prior, batch.indices)
    if config.clip_to_image_range and not bool(delta.eq(0).all()):
        delta = _project(x, x + delta, config.budget, clip=True)
    trace: list[torch.Tensor] = []
    for step in range(steps):
        x_cur = x + delta
        if noise_sampler is not None:
            x_cur = apply_perturbation(x_cur, noise_sampler(step, x.shape))
        try:
            grad = loss_input_gradient(model, x_cur, batch.labels, config.loss_kind)
        except NonFiniteLossError as e:
            raise AttackError(f"non-finite loss at attack step {step} (sample {e.sample_index})") from e
        if not bool(torch.isfinite(grad).all()):
            raise AttackError(f"non-finite gradient at attack step {step}")
        delta = _project(x, x + delta + step_size * torch.sign(grad), config.budget,
                         config.clip_to_image_range)
        trace.append(delta.detach().clone())
    return PerturbationBatch(delta.detach(), role="adversarial", budget=config.budget), trace


def fgsm(model: Model, batch: Batch, config: AttackConfig, seed=None) -> PerturbationBatch:
    """Single signed-gradient step of size budget (steps/step_size ignored)."""
    pert, _ = _iterate(model, batch, config, steps=1, step_size=config.budget, seed=seed)
    return pert


def pgd(model: Model, batch: Batch, config: AttackConfig, seed=None,
        noise_sampler: Optional[Callable[[int, torch.Size], torch.Tensor]] = None,
        ) -> tuple[PerturbationBatch, list[torch.Tensor]]:
    """Iterated signed steps with per-step projection; trace has one delta per step.

    noise_sampler, when given, adds fresh noise to the iterate before each
    gradient evaluation (expectation-over-transformation style adaptive mode).
    """
    return _iterate(model, batch, config, steps=config.steps, step_size=config.step_size,
                    seed=seed, noise_sampler=noise_sampler)


def prior_fgsm(model: Model, batch: Batch, config: AttackConfig,
               prior: PerturbationPrior, seed=None) -> PerturbationBatch:
    """FGSM initialized at the momentum-blended stored delta; writes back the result."""
    if batch.indices is None:
        raise AttackError("prior_fgsm needs batch sample indices")
    cfg = replace(config, init="prior")
    pert, _ = _iterate(model, batch, cfg, steps=1, step_size=config.budget, seed=seed, prior=prior)
    prior.write(batch.indices, pert.delta, config.budget)
    return pert
