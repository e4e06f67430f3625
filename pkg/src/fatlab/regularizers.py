"""Training-time losses that suppress or amplify activation differences.

l_stable pulls adversarial features toward randomly-perturbed features at
one node (suppressing CO); l_co combines a masked-model classification
term with a negated, channel-restricted l_stable (inducing CO); l_align
is the logit-consistency term between the two perturbed views.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch

from .diagnostics import ChannelSet, channel_sq_diffs
from .model import ActivationCapture, Batch, Model, forward, per_sample_loss


@dataclass(frozen=True)
class RegularizerConfig:
    alpha_3: float = 0.0
    gamma: float = 0.0
    node: str = "B"
    p: Optional[float] = None
    co_weight: float = 1.0
    co_full_normalizer: bool = True

    def __post_init__(self):
        if self.alpha_3 < 0.0:
            raise ValueError("alpha_3 must be >= 0")
        if self.gamma < 0.0:
            raise ValueError("gamma must be >= 0")
        if self.p is not None and not (0.0 < self.p <= 100.0):
            raise ValueError("p must lie in (0, 100] when l_co is active")

    @property
    def l_co_active(self) -> bool:
        return self.p is not None


def l_stable(capture_adv: ActivationCapture, capture_rand: ActivationCapture,
             node: str, alpha_3: float, channels: tuple[int, ...] | None = None,
             full_normalizer: bool = True) -> torch.Tensor:
    """alpha_3 / (N*H*W) times the summed per-channel squared feature
    differences between the two captures, averaged over the batch.

    channels restricts the channel sum; the divisor stays N*H*W unless
    full_normalizer is False (then |channels|*H*W).
    """
    if node not in capture_adv.features or node not in capture_rand.features:
        raise ValueError(f"both captures must contain node {node!r}")
    sq = channel_sq_diffs(capture_adv, capture_rand, node)  # [B, N]
    n_full, h, w = capture_adv.node(node).shape[1:]
    if channels is not None:
        sq = sq[:, list(channels)]
    n_norm = n_full if full_normalizer or channels is None else len(channels)
    per_sample = sq.sum(dim=1) / (n_norm * h * w)
    return alpha_3 * per_sample.mean()


def l_align(output_adv: torch.Tensor, output_rand: torch.Tensor, gamma: float) -> torch.Tensor:
    """gamma * batch-mean squared 2-norm of the logit difference."""
    if output_adv.shape != output_rand.shape:
        raise ValueError("logit shapes differ")
    return gamma * ((output_adv - output_rand) ** 2).sum(dim=1).mean()


def l_co_parts(model: Model, batch: Batch, delta_adv: torch.Tensor,
               delta_rand: torch.Tensor, channel_set: ChannelSet,
               config: RegularizerConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """(masked cross-entropy, restricted l_stable) making up l_co.

    The classification term masks the selected channels; the stability
    term is computed on the unmasked model so its negation can push the
    selected channels' differences up.
    """
    if len(channel_set) == 0:
        raise ValueError("empty channel set")
    x = batch.images
    logits_masked, _ = forward(model, torch.clamp(x + delta_adv, 0.0, 1.0), channel_set.as_mask())
    ce_masked = per_sample_loss(logits_masked, batch.labels, "cross_entropy").mean()
    _, cap_adv = forward(model, torch.clamp(x + delta_adv, 0.0, 1.0))
    _, cap_rand = forward(model, torch.clamp(x + delta_rand, 0.0, 1.0))
    stable = l_stable(cap_adv, cap_rand, channel_set.node, config.alpha_3,
                      channels=channel_set.indices, full_normalizer=config.co_full_normalizer)
    return ce_masked, stable


def l_co(model: Model, batch: Batch, delta_adv: torch.Tensor, delta_rand: torch.Tensor,
         channel_set: ChannelSet, config: RegularizerConfig) -> torch.Tensor:
    """Masked classification loss minus the channel-restricted stability term."""
    ce_masked, stable = l_co_parts(model, batch, delta_adv, delta_rand, channel_set, config)
    return ce_masked - config.co_weight * stable
