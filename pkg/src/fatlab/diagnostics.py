"""Activation-difference statistics and CO detection.

V_act quantifies how far adversarial features drift from clean features,
per node (mean of per-sample 2-norms) or per channel (squared 2-norms).
T_act squashes the aggregated per-channel drift through tanh(alpha * .)
to rank channels; masks and top-p% channel sets derive from it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence, Union

import numpy as np
import torch

from .attacks import PerturbationBatch, apply_perturbation, pgd
from .model import ActivationCapture, Batch, ChannelMask, Model, forward

AGGREGATIONS = ("sum_over_dataset", "mean_over_dataset")

# largest double below 1: tanh saturates to 1.0 for large arguments, the
# stats contract keeps t-values strictly below 1
_ONE_MINUS = float(np.nextafter(1.0, 0.0))

PerturbationSource = Union[PerturbationBatch, Callable[[Model, Batch], PerturbationBatch]]


@dataclass(frozen=True)
class ChannelStats:
    node: str
    raw: tuple[float, ...]
    t_values: tuple[float, ...]
    alpha: float
    aggregation: str
    dataset_tag: str = "test"

    def __post_init__(self):
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
        if any(not (0.0 <= t < 1.0) for t in self.t_values):
            raise ValueError("t_values must lie in [0, 1)")

    @property
    def num_channels(self) -> int:
        return len(self.t_values)

    def to_record(self) -> dict:
        return {
            "node": self.node,
            "raw": list(self.raw),
            "t_values": list(self.t_values),
            "alpha": self.alpha,
            "aggregation": self.aggregation,
            "dataset_tag": self.dataset_tag,
        }

    @staticmethod
    def from_record(rec: dict) -> "ChannelStats":
        return ChannelStats(rec["node"], tuple(rec["raw"]), tuple(rec["t_values"]),
                            rec["alpha"], rec["aggregation"], rec["dataset_tag"])


@dataclass(frozen=True)
class ChannelSet:
    node: str
    indices: tuple[int, ...]

    def __post_init__(self):
        idxs = tuple(int(i) for i in self.indices)
        if len(set(idxs)) != len(idxs):
            raise ValueError("channel indices must be distinct")
        object.__setattr__(self, "indices", idxs)

    def __len__(self) -> int:
        return len(self.indices)

    def as_mask(self) -> ChannelMask:
        return ChannelMask({self.node: self.indices})


@dataclass(frozen=True)
class CoEvent:
    epoch: int
    before: float
    after: float

    @property
    def drop(self) -> float:
        return self.before - self.after

    def to_record(self) -> dict:
        return {"epoch": self.epoch, "before": self.before, "after": self.after, "drop": self.drop}


def _dataset_batches(images: torch.Tensor, batch_size: int) -> Iterable[slice]:
    for start in range(0, len(images), batch_size):
        yield slice(start, min(start + batch_size, len(images)))


def channel_sq_diffs(capture_a: ActivationCapture, capture_b: ActivationCapture,
                     node: str) -> torch.Tensor:
    """Per-sample, per-channel squared 2-norm of the feature difference: [B, N]."""
    a, b = capture_a.node(node), capture_b.node(node)
    if a.shape != b.shape:
        raise ValueError(f"capture shapes differ at node {node}: {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).sum(dim=(2, 3))


def v_act_channel(capture_a: ActivationCapture, capture_b: ActivationCapture,
                  node: str, k: int) -> float:
    """Squared 2-norm of the channel-k feature difference."""
    a = capture_a.node(node)
    if not (0 <= k < a.shape[1]):
        raise IndexError(f"channel {k} out of range at node {node} ({a.shape[1]} channels)")
    return float(channel_sq_diffs(capture_a, capture_b, node)[:, k].sum().double())


def _resolve_deltas(source: PerturbationSource, model: Model, batch: Batch,
                    sl: slice) -> torch.Tensor:
    if isinstance(source, PerturbationBatch):
        return source.delta[sl]
    return source(model, batch).delta


def v_act_node(model: Model, dataset, perturbations: PerturbationSource, node: str,
               batch_size: int = 256) -> float:
    """Mean over the dataset of ||M_i(x) - M_i(x+delta)||_2 (flattened per sample)."""
    images, labels = _as_tensors(dataset)
    if isinstance(perturbations, PerturbationBatch) and len(perturbations.delta) != len(images):
        raise ValueError("need exactly one perturbation per sample")
    return v_act_nodes(model, dataset, perturbations, [node], batch_size)[node]


def v_act_nodes(model: Model, dataset, perturbations: PerturbationSource,
                nodes: Sequence[str] | None = None, batch_size: int = 256) -> dict[str, float]:
    """V_act for several nodes from one pass over the dataset."""
    images, labels = _as_tensors(dataset)
    nodes = list(nodes) if nodes is not None else list(model.spec.node_names)
    totals = {n: 0.0 for n in nodes}
    for sl in _dataset_batches(images, batch_size):
        batch = Batch(images[sl], labels[sl])
        delta = _resolve_deltas(perturbations, model, batch, sl)
        with torch.no_grad():
            _, cap_clean = forward(model, images[sl])
            _, cap_pert = forward(model, apply_perturbation(images[sl], delta))
        for n in nodes:
            diff = cap_clean.node(n) - cap_pert.node(n)
            norms = torch.linalg.vector_norm(diff.reshape(len(diff), -1).double(), dim=1)
            totals[n] += float(norms.sum())
    m = len(images)
    return {n: totals[n] / m for n in nodes}


def t_act(model: Model, dataset, perturbation_source: PerturbationSource, node: str,
          alpha: float = 100.0, aggregation: str = "mean_over_dataset",
          batch_size: int = 256) -> ChannelStats:
    """tanh(alpha * aggregated normalized channel difference) per channel."""
    if alpha <= 0.0:
        raise ValueError("alpha must be positive")
    if aggregation not in AGGREGATIONS:
        raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
    images, labels = _as_tensors(dataset)
    if len(images) == 0:
        raise ValueError("empty dataset")
    n, h, w = model.spec.node_shapes()[node]
    acc = torch.zeros(n, dtype=torch.float64)
    for sl in _dataset_batches(images, batch_size):
        batch = Batch(images[sl], labels[sl])
        delta = _resolve_deltas(perturbation_source, model, batch, sl)
        with torch.no_grad():
            _, cap_clean = forward(model, images[sl])
            _, cap_pert = forward(model, apply_perturbation(images[sl], delta))
        acc += channel_sq_diffs(cap_clean, cap_pert, node).double().sum(dim=0)
    raw = acc.numpy() / (n * h * w)
    if aggregation == "mean_over_dataset":
        raw = raw / len(images)
    t = np.minimum(np.tanh(alpha * raw), _ONE_MINUS)
    return ChannelStats(node=node, raw=tuple(float(v) for v in raw),
                        t_values=tuple(float(v) for v in t), alpha=alpha,
                        aggregation=aggregation, dataset_tag=getattr(dataset, "tag", "test"))


def mask_from_threshold(stats: ChannelStats, alpha_2: float) -> ChannelMask:
    """Channels whose t-value strictly exceeds alpha_2."""
    if not (0.0 <= alpha_2 <= 1.0):
        raise ValueError("alpha_2 must lie in [0, 1]")
    return ChannelMask({stats.node: tuple(k for k, t in enumerate(stats.t_values) if t > alpha_2)})


def select_top_channels(stats: ChannelStats, p: float) -> ChannelSet:
    """ceil(p% of N) channels with the largest t-values; ties favor lower index."""
    if not (0.0 < p <= 100.0):
        raise ValueError("p must lie in (0, 100]")
    n = stats.num_channels
    count = int(np.ceil(p * n / 100.0))
    order = sorted(range(n), key=lambda k: (-stats.t_values[k], k))
    return ChannelSet(stats.node, tuple(sorted(order[:count])))


def channel_variance(capture: ActivationCapture, node: str) -> np.ndarray:
    """Per-channel activation variance over samples and spatial positions."""
    feats = capture.node(node)
    if feats.numel() == 0:
        raise ValueError("empty capture")
    per_channel = feats.detach().double().permute(1, 0, 2, 3).reshape(feats.shape[1], -1)
    return per_channel.var(dim=1, unbiased=False).numpy()


def activation_increments(model: Model, dataset, attack_config, node: str,
                          seed=0, batch_size: int = 256) -> np.ndarray:
    """Per-attack-step, per-channel normalized squared feature drift: [steps, N].

    Entries sum over the dataset (the visualization convention for
    per-step increments), using the multi-step attack trace.
    """
    images, labels = _as_tensors(dataset)
    n, h, w = model.spec.node_shapes()[node]
    out = np.zeros((attack_config.steps, n))
    for bi, sl in enumerate(_dataset_batches(images, batch_size)):
        batch = Batch(images[sl], labels[sl])
        _, trace = pgd(model, batch, attack_config, seed=(seed, bi))
        with torch.no_grad():
            _, cap_clean = forward(model, images[sl])
            for j, delta in enumerate(trace):
                _, cap_step = forward(model, apply_perturbation(images[sl], delta))
                out[j] += channel_sq_diffs(cap_clean, cap_step, node).double().sum(dim=0).numpy()
    return out / (n * h * w)


def detect_co(history: Sequence[float], drop_threshold: float = 20.0,
              window: int = 3) -> list[CoEvent]:
    """Epochs where robust accuracy falls below (recent max - drop_threshold)."""
    if drop_threshold <= 0.0:
        raise ValueError("drop_threshold must be positive")
    if window < 1:
        raise ValueError("window must be >= 1")
    if len(history) == 0:
        raise ValueError("empty history")
    events = []
    for e in range(1, len(history)):
        prev = history[max(0, e - window):e]
        best = max(prev)
        if history[e] < best - drop_threshold:
            events.append(CoEvent(epoch=e, before=float(best), after=float(history[e])))
    return events


def _as_tensors(dataset) -> tuple[torch.Tensor, torch.Tensor]:
    """Accepts a Dataset, a Batch, or an (images, labels) pair."""
    if isinstance(dataset, Batch):
        return dataset.images, dataset.labels
    if hasattr(dataset, "images") and hasattr(dataset, "labels"):
        images, labels = dataset.images, dataset.labels
        if isinstance(images, np.ndarray):
            images = torch.from_numpy(images)
        if isinstance(labels, np.ndarray):
            labels = torch.from_numpy(labels).long()
        return images, labels
    images, labels = dataset
    return torch.as_tensor(images), torch.as_tensor(labels).long()
