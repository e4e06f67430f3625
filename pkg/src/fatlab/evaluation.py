"""Clean/robust accuracy measurement with masking, inference noise, transfer.

The evaluation discipline follows the obfuscation protocol: adversarial
examples are generated against the unnoised, unmasked model, and the very
same inputs (hash-logged) are then fed to masked or noise-wrapped
variants.  delta_R is sampled fresh per input per trial, added after the
adversarial delta, and the sum is clamped to [0, 1].
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .attacks import AttackConfig, apply_perturbation, fgsm, gaussian_noise, pgd, uniform_noise
from .diagnostics import ChannelStats, channel_variance, mask_from_threshold
from .model import Batch, ChannelMask, Model, forward

NOISE_KINDS = ("none", "uniform", "gaussian")


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "none"
    a: float = 0.0
    sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"noise kind must be one of {NOISE_KINDS}")
        if self.kind == "uniform" and self.a <= 0.0:
            raise ValueError("uniform noise needs a > 0")
        if self.kind == "gaussian" and self.sigma <= 0.0:
            raise ValueError("gaussian noise needs sigma > 0")

    @property
    def enabled(self) -> bool:
        return self.kind != "none"

    @staticmethod
    def parse(text: str) -> "NoiseSpec":
        """'none', 'uniform:16/255', or 'gaussian:0.05'."""
        text = text.strip()
        if text in ("", "none"):
            return NoiseSpec()
        kind, _, value = text.partition(":")
        num = value.strip()
        x = float(num.split("/")[0]) / float(num.split("/")[1]) if "/" in num else float(num)
        if kind == "uniform":
            return NoiseSpec("uniform", a=x)
        if kind in ("gaussian", "gauss"):
            return NoiseSpec("gaussian", sigma=x)
        raise ValueError(f"cannot parse noise spec {text!r}")


@dataclass(frozen=True)
class EvalConfig:
    attack: Optional[AttackConfig] = None
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    noise_seed: int = 0
    mask: Optional[ChannelMask] = None
    trials: int = 1
    adaptive: bool = False
    attack_seed: int = 99
    batch_size: int = 256

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")


@dataclass
class EvalReport:
    clean_acc: float
    robust_acc: Optional[float]
    clean_per_trial: list[float]
    robust_per_trial: list[float]
    adv_hash: Optional[str]
    config_echo: dict
    seeds: dict

    def to_record(self) -> dict:
        return {
            "clean_acc": self.clean_acc,
            "robust_acc": self.robust_acc,
            "clean_per_trial": self.clean_per_trial,
            "robust_per_trial": self.robust_per_trial,
            "adv_hash": self.adv_hash,
            "config_echo": self.config_echo,
            "seeds": self.seeds,
        }


def _noise_delta(noise: NoiseSpec, shape, seed, dtype) -> torch.Tensor | None:
    if not noise.enabled:
        return None
    if noise.kind == "uniform":
        return uniform_noise(shape, noise.a, seed, dtype=dtype).delta
    return gaussian_noise(shape, noise.sigma, seed, dtype=dtype).delta


def _attack_batch(model: Model, batch: Batch, config: EvalConfig) -> torch.Tensor:
    """Adversarial inputs for one batch, generated per the eval discipline."""
    attack = config.attack
    noise_sampler = None
    if config.adaptive and config.noise.enabled:
        def noise_sampler(step, shape):
            return _noise_delta(config.noise, shape,
                                (config.noise_seed, 7, step), batch.images.dtype)
    if attack.steps == 1 and noise_sampler is None:
        pert = fgsm(model, batch, attack, seed=config.attack_seed)
    else:
        pert, _ = pgd(model, batch, attack, seed=config.attack_seed, noise_sampler=noise_sampler)
    return apply_perturbation(batch.images, pert.delta)


def _accuracy_under_noise(model: Model, images: torch.Tensor, labels: torch.Tensor,
                          config: EvalConfig, tag: int, batch_index: int) -> list[int]:
    """Per-trial correct counts for one batch of (possibly adversarial) inputs."""
    counts = []
    for trial in range(config.trials):
        x = images
        noise = _noise_delta(config.noise, images.shape,
                             (config.noise_seed, tag, trial, batch_index), images.dtype)
        if noise is not None:
            x = apply_perturbation(x, noise)
        with torch.no_grad():
            logits, _ = forward(model, x, config.mask)
        counts.append(int((logits.argmax(dim=1) == labels).sum()))
    return counts


def evaluate(model: Model, dataset, config: EvalConfig,
             attack_model: Optional[Model] = None) -> EvalReport:
    """Clean and robust accuracy under the configured noise/mask/attack.

    attack_model, when given, is the surrogate the adversarial examples
    are generated against (transfer evaluation); defaults to model.
    """
    from .diagnostics import _as_tensors

    images, labels = _as_tensors(dataset)
    surrogate = attack_model if attack_model is not None else model
    if config.mask is not None:
        config.mask.validate(model.spec)
    clean_counts = np.zeros(config.trials, dtype=np.int64)
    robust_counts = np.zeros(config.trials, dtype=np.int64)
    hasher = hashlib.sha256() if config.attack is not None else None

    for bi, start in enumerate(range(0, len(images), config.batch_size)):
        sl = slice(start, start + config.batch_size)
        batch = Batch(images[sl], labels[sl])
        clean_counts += _accuracy_under_noise(model, batch.images, batch.labels, config, 0, bi)
        if config.attack is not None:
            x_adv = _attack_batch(surrogate, batch, config)
            hasher.update(x_adv.numpy().tobytes())
            robust_counts += _accuracy_under_noise(model, x_adv, batch.labels, config, 1, bi)

    m = len(images)
    clean_per_trial = [100.0 * c / m for c in clean_counts]
    robust_per_trial = [100.0 * c / m for c in robust_counts]
    return EvalReport(
        clean_acc=float(np.mean(clean_per_trial)),
        robust_acc=float(np.mean(robust_per_trial)) if config.attack is not None else None,
        clean_per_trial=clean_per_trial,
        robust_per_trial=robust_per_trial,
        adv_hash=hasher.hexdigest() if hasher is not None else None,
        config_echo=_echo(config),
        seeds={"noise_seed": config.noise_seed, "attack_seed": config.attack_seed},
    )


def masked_evaluate(model: Model, dataset, stats: ChannelStats, alpha_2: float,
                    attack: Optional[AttackConfig], noise: NoiseSpec = NoiseSpec(),
                    noise_seed: int = 0) -> EvalReport:
    """Threshold-mask the model and evaluate; attacks target the unmasked model."""
    mask = mask_from_threshold(stats, alpha_2)
    config = EvalConfig(attack=attack, noise=noise, noise_seed=noise_seed, mask=mask)
    report = evaluate(model, dataset, config, attack_model=model)
    report.config_echo["alpha_2"] = alpha_2
    report.config_echo["mask_size"] = mask.size()
    return report


def variance_matched_mask(model: Model, dataset, stats: ChannelStats, alpha_2: float,
                          attack: AttackConfig, attack_seed: int = 99,
                          batch_size: int = 256) -> ChannelMask:
    """High-variance comparison mask of the same size as the threshold mask.

    Variance is computed over adversarial-example features at the stats
    node, matching the size of mask_from_threshold(stats, alpha_2).
    """
    from .diagnostics import _as_tensors

    size = mask_from_threshold(stats, alpha_2).size()
    images, labels = _as_tensors(dataset)
    n = model.spec.node_shapes()[stats.node][0]
    count = 0
    moments = np.zeros((2, n))
    for start in range(0, len(images), batch_size):
        sl = slice(start, start + batch_size)
        batch = Batch(images[sl], labels[sl])
        pert = fgsm(model, batch, attack, seed=attack_seed) if attack.steps == 1 \
            else pgd(model, batch, attack, seed=attack_seed)[0]
        with torch.no_grad():
            _, cap = forward(model, apply_perturbation(batch.images, pert.delta))
        feats = cap.node(stats.node).double().permute(1, 0, 2, 3).reshape(n, -1)
        moments[0] += feats.sum(dim=1).numpy()
        moments[1] += (feats ** 2).sum(dim=1).numpy()
        count += feats.shape[1]
    var = moments[1] / count - (moments[0] / count) ** 2
    top = sorted(range(n), key=lambda k: (-var[k], k))[:size]
    return ChannelMask({stats.node: tuple(sorted(top))})


def transfer_evaluate(source_model: Model, target_model: Model, dataset,
                      attack: AttackConfig, noise: NoiseSpec = NoiseSpec(),
                      noise_seed: int = 0) -> EvalReport:
    """Generate adversarial examples on source, measure accuracy on target."""
    if source_model.spec.input_shape != target_model.spec.input_shape or \
            source_model.spec.num_classes != target_model.spec.num_classes:
        raise ValueError("source and target models must share input/output shapes")
    config = EvalConfig(attack=attack, noise=noise, noise_seed=noise_seed)
    return evaluate(target_model, dataset, config, attack_model=source_model)


def _echo(config: EvalConfig) -> dict:
    return {
        "attack": None if config.attack is None else {
            "budget": config.attack.budget,
            "step_size": config.attack.step_size,
            "steps": config.attack.steps,
            "init": config.attack.init,
            "loss_kind": config.attack.loss_kind,
        },
        "noise": {"kind": config.noise.kind, "a": config.noise.a, "sigma": config.noise.sigma},
        "mask_size": 0 if config.mask is None else config.mask.size(),
        "trials": config.trials,
        "adaptive": config.adaptive,
    }
