"""Small convolutional classifier with named activation nodes.

The network is a 5-stage stand-in for the ResNet18 used in the original
CO studies: a stem conv, two stride-2 residual blocks, one stride-1
residual block, and a final conv, each followed by a ReLU whose output is
captured as a named node (A..E by default).  Global average pooling and a
linear head produce logits.  Normalization is a learnable per-channel
affine (no running statistics), so forward passes are pure functions of
(parameters, inputs, mask).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

DEFAULT_NODES = ("A", "B", "C", "D", "E")
LOSS_KINDS = ("cross_entropy", "cw_margin")

# stem, block, block, block, final-conv strides of the reference net
_STAGE_STRIDES = (1, 2, 2, 1, 1)


class ModelConfigError(ValueError):
    """Invalid architecture specification."""


class NonFiniteLossError(RuntimeError):
    """Loss became non-finite; carries the first offending sample index."""

    def __init__(self, sample_index: int, message: str | None = None):
        self.sample_index = sample_index
        super().__init__(message or f"non-finite loss at sample {sample_index}")


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, int, int] = (3, 16, 16)
    num_classes: int = 10
    stage_widths: tuple[int, ...] = (8, 16, 16, 32, 32)
    node_names: tuple[str, ...] = DEFAULT_NODES
    seed: int = 0

    def __post_init__(self):
        c, h, w = self.input_shape
        if c < 1 or h < 4 or w < 4:
            raise ModelConfigError(f"input_shape {self.input_shape} too small (need >=4x4 spatial)")
        if self.num_classes < 1:
            raise ModelConfigError("num_classes must be positive")
        widths = tuple(int(x) for x in self.stage_widths)
        names = tuple(self.node_names)
        object.__setattr__(self, "stage_widths", widths)
        object.__setattr__(self, "node_names", names)
        object.__setattr__(self, "input_shape", (int(c), int(h), int(w)))
        if any(x <= 0 for x in widths):
            raise ModelConfigError("stage_widths must all be positive")
        if len(names) != len(set(names)):
            raise ModelConfigError("node_names must be unique")
        if len(widths) != 5 or len(names) != 5:
            raise ModelConfigError("reference architecture is 5-stage: need 5 widths and 5 node names")

    def node_width(self, node: str) -> int:
        return self.stage_widths[self.node_index(node)]

    def node_index(self, node: str) -> int:
        try:
            return self.node_names.index(node)
        except ValueError:
            raise KeyError(f"unknown activation node {node!r}") from None

    def node_shapes(self) -> dict[str, tuple[int, int, int]]:
        """Per-node (channels, height, width) of the captured feature maps."""
        _, h, w = self.input_shape
        shapes = {}
        for name, width, stride in zip(self.node_names, self.stage_widths, _STAGE_STRIDES):
            if stride == 2:
                h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
            shapes[name] = (width, h, w)
        return shapes


@dataclass
class Model:
    spec: ModelSpec
    params: dict[str, torch.Tensor]

    @property
    def dtype(self) -> torch.dtype:
        return self.params["head.w"].dtype

    def parameter_vector(self) -> torch.Tensor:
        return torch.cat([p.reshape(-1) for _, p in sorted(self.params.items())])

    def clone_params(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.params.items()}

    def load_params(self, params: Mapping[str, torch.Tensor]) -> None:
        if set(params) != set(self.params):
            raise ModelConfigError("parameter name mismatch")
        for k, v in params.items():
            if tuple(v.shape) != tuple(self.params[k].shape):
                raise ModelConfigError(f"shape mismatch for parameter {k}")
            self.params[k] = v.detach().clone().to(self.params[k].dtype)


@dataclass
class Batch:
    images: torch.Tensor
    labels: torch.Tensor
    indices: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError("images must be [batch, channel, height, width]")
        if self.labels.ndim != 1 or len(self.labels) != len(self.images):
            raise ValueError("labels must be one class index per image")
        lo = float(self.images.min()) if self.images.numel() else 0.0
        hi = float(self.images.max()) if self.images.numel() else 0.0
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"pixel values outside [0, 1]: range [{lo}, {hi}]")

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class ActivationCapture:
    features: dict[str, torch.Tensor]

    def node(self, name: str) -> torch.Tensor:
        if name not in self.features:
            raise KeyError(f"no capture for node {name!r}")
        return self.features[name]

    def detach(self) -> "ActivationCapture":
        return ActivationCapture({k: v.detach() for k, v in self.features.items()})


@dataclass(frozen=True)
class ChannelMask:
    """Channels to zero out at each node, applied at the node and downstream."""

    channels: Mapping[str, tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        canon = {}
        for node, idxs in self.channels.items():
            idxs = tuple(sorted(set(int(i) for i in idxs)))
            if idxs:
                canon[str(node)] = idxs
        object.__setattr__(self, "channels", canon)

    @property
    def is_empty(self) -> bool:
        return not self.channels

    def at(self, node: str) -> tuple[int, ...]:
        return self.channels.get(node, ())

    def size(self) -> int:
        return sum(len(v) for v in self.channels.values())

    def union(self, other: "ChannelMask") -> "ChannelMask":
        nodes = set(self.channels) | set(other.channels)
        return ChannelMask({n: self.at(n) + other.at(n) for n in nodes})

    def validate(self, spec: ModelSpec) -> None:
        for node, idxs in self.channels.items():
            width = spec.node_width(node)
            if any(i < 0 or i >= width for i in idxs):
                raise ValueError(f"mask index out of range at node {node} (width {width})")


def _fan_in_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int,
                    gain: float = 1.0) -> np.ndarray:
    bound = gain / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=tuple(shape))


def build_model(spec: ModelSpec, dtype: torch.dtype = torch.float32) -> Model:
    """Construct a model with fan-in-scaled uniform parameters fixed by spec.seed."""
    rng = np.random.default_rng(spec.seed)
    c_in = spec.input_shape[0]
    w = spec.stage_widths
    raw: dict[str, np.ndarray] = {}

    def conv(name: str, cout: int, cin: int, k: int):
        # ReLU-gain uniform: keeps activation scale roughly constant per stage
        raw[f"{name}.w"] = _fan_in_uniform(rng, (cout, cin, k, k), cin * k * k, gain=math.sqrt(6.0))

    def affine(name: str, cout: int):
        raw[f"{name}.g"] = np.ones(cout)
        raw[f"{name}.b"] = np.zeros(cout)

    conv("stem.conv", w[0], c_in, 3)
    affine("stem.affine", w[0])
    for i, (cin, cout) in enumerate(zip(w[:3], w[1:4]), start=1):
        conv(f"block{i}.conv1", cout, cin, 3)
        affine(f"block{i}.affine1", cout)
        conv(f"block{i}.conv2", cout, cout, 3)
        affine(f"block{i}.affine2", cout)
        stride = _STAGE_STRIDES[i]
        if stride != 1 or cin != cout:
            conv(f"block{i}.shortcut", cout, cin, 1)
    conv("final.conv", w[4], w[3], 3)
    affine("final.affine", w[4])
    raw["head.w"] = _fan_in_uniform(rng, (spec.num_classes, w[4]), w[4])
    raw["head.b"] = _fan_in_uniform(rng, (spec.num_classes,), w[4])

    params = {k: torch.from_numpy(v).to(dtype) for k, v in raw.items()}
    return Model(spec=spec, params=params)


def _affine(x: torch.Tensor, params: Mapping[str, torch.Tensor], name: str) -> torch.Tensor:
    g = params[f"{name}.g"].view(1, -1, 1, 1)
    b = params[f"{name}.b"].view(1, -1, 1, 1)
    return x * g + b


def _apply_mask(x: torch.Tensor, idxs: tuple[int, ...]) -> torch.Tensor:
    if not idxs:
        return x
    keep = torch.ones(x.shape[1], dtype=x.dtype, device=x.device)
    keep[list(idxs)] = 0.0
    return x * keep.view(1, -1, 1, 1)


def forward(
    model: Model,
    batch: Batch | torch.Tensor,
    mask: ChannelMask | None = None,
) -> tuple[torch.Tensor, ActivationCapture]:
    """Forward pass capturing every activation node (post-mask values).

    Accepts a Batch or a raw image tensor; gradients flow through both the
    images and the parameters, so callers may differentiate either way.
    """
    x = batch.images if isinstance(batch, Batch) else batch
    spec = model.spec
    if tuple(x.shape[1:]) != tuple(spec.input_shape):
        raise ValueError(f"image shape {tuple(x.shape[1:])} does not match spec {spec.input_shape}")
    if isinstance(batch, Batch) and len(batch.labels) and int(batch.labels.max()) >= spec.num_classes:
        raise ValueError("label outside [0, num_classes)")
    if mask is not None:
        mask.validate(spec)
    masks = mask.channels if mask is not None else {}
    p = model.params
    x = x.to(model.dtype)
    caps: dict[str, torch.Tensor] = {}
    names = spec.node_names

    # fixed centering: all-positive pixel inputs condition the stem badly
    h = F.conv2d(x - 0.5, p["stem.conv.w"], padding=1)
    h = torch.relu(_affine(h, p, "stem.affine"))
    h = _apply_mask(h, masks.get(names[0], ()))
    caps[names[0]] = h

    for i in range(1, 4):
        stride = _STAGE_STRIDES[i]
        main = F.conv2d(h, p[f"block{i}.conv1.w"], stride=stride, padding=1)
        main = torch.relu(_affine(main, p, f"block{i}.affine1"))
        main = F.conv2d(main, p[f"block{i}.conv2.w"], padding=1)
        main = _affine(main, p, f"block{i}.affine2")
        if f"block{i}.shortcut.w" in p:
            short = F.conv2d(h, p[f"block{i}.shortcut.w"], stride=stride)
        else:
            short = h
        h = torch.relu(main + short)
        h = _apply_mask(h, masks.get(names[i], ()))
        caps[names[i]] = h

    h = F.conv2d(h, p["final.conv.w"], padding=1)
    h = torch.relu(_affine(h, p, "final.affine"))
    h = _apply_mask(h, masks.get(names[4], ()))
    caps[names[4]] = h

    pooled = h.mean(dim=(2, 3))
    logits = pooled @ p["head.w"].T + p["head.b"]
    return logits, ActivationCapture(caps)


def per_sample_loss(logits: torch.Tensor, labels: torch.Tensor, loss_kind: str) -> torch.Tensor:
    if loss_kind == "cross_entropy":
        return F.cross_entropy(logits, labels, reduction="none")
    if loss_kind == "cw_margin":
        # max_{j != y} z_j - z_y
        true = logits.gather(1, labels.view(-1, 1)).squeeze(1)
        masked = logits.clone()
        masked.scatter_(1, labels.view(-1, 1), float("-inf"))
        return masked.max(dim=1).values - true
    raise ValueError(f"unknown loss_kind {loss_kind!r}")


def loss_input_gradient(
    model: Model,
    images: torch.Tensor,
    labels: torch.Tensor,
    loss_kind: str = "cross_entropy",
    mask: ChannelMask | None = None,
) -> torch.Tensor:
    """Gradient of the mean loss w.r.t. the input pixels (no [0,1] check)."""
    x = images.detach().to(model.dtype).requires_grad_(True)
    logits, _ = forward(model, x, mask)
    losses = per_sample_loss(logits, labels, loss_kind)
    finite = torch.isfinite(losses)
    if not bool(finite.all()):
        raise NonFiniteLossError(int((~finite).nonzero()[0, 0]))
    (grad,) = torch.autograd.grad(losses.mean(), x)
    return grad.detach()


def input_gradient(
    model: Model,
    batch: Batch,
    loss_kind: str = "cross_entropy",
    mask: ChannelMask | None = None,
) -> torch.Tensor:
    return loss_input_gradient(model, batch.images, batch.labels, loss_kind, mask)


def accuracy(model: Model, images: torch.Tensor, labels: torch.Tensor,
             mask: ChannelMask | None = None, batch_size: int = 512) -> float:
    """Percent correct, evaluated without gradients in deterministic order."""
    correct = 0
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            logits, _ = forward(model, images[start:start + batch_size], mask)
            pred = logits.argmax(dim=1)
            correct += int((pred == labels[start:start + batch_size]).sum())
    return 100.0 * correct / max(len(images), 1)
