"""Network building blocks for the simplifier and discriminator.

A network is described declaratively by a :class:`NetworkSpec` (an ordered
list of :class:`LayerSpec`) and realized as a :class:`SpecNet` torch module.
Three convolution flavors are used: down-convolutions (stride 2, halving
resolution), flat-convolutions (stride 1) and up-convolutions (4x4 transposed
convolutions with stride 1/2, doubling resolution). Batch normalization can be
folded into the preceding convolution for inference (:func:`fold_batchnorm`).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

DOWN = "down-conv"
FLAT = "flat-conv"
UP = "up-conv"
DROPOUT = "dropout"
FC = "fully-connected"

HALF = 0.5  # stride of up-convolutions

BN_EPS = 1e-5
BN_MOMENTUM = 0.1  # torch convention: running = (1-m)*running + m*batch

CONV_KINDS = (DOWN, FLAT, UP)


class SpecError(ValueError):
    """Structural or configuration error in a network description."""


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a network.

    ``stride`` is 2 (down), 1 (flat) or 0.5 (up). Down/flat convolutions pad
    so the spatial extent is preserved before striding; up-convolutions use a
    4x4 kernel with padding 1 so resolution doubles exactly on even inputs.
    """

    kind: str
    kernel_size: int = 0
    stride: float = 1
    padding: int = 0
    in_channels: int = 0
    out_channels: int = 0
    activation: str = "none"  # relu | sigmoid | none
    has_batchnorm: bool = False
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.kind not in (*CONV_KINDS, DROPOUT, FC):
            raise SpecError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ("relu", "sigmoid", "none"):
            raise SpecError(f"unknown activation {self.activation!r}")
        if self.kind in CONV_KINDS:
            expected = {DOWN: 2, FLAT: 1, UP: HALF}[self.kind]
            if self.stride != expected:
                raise SpecError(
                    f"{self.kind} requires stride {expected}, got {self.stride}")
            if self.kind == UP:
                if self.kernel_size != 4 or self.padding != 1:
                    raise SpecError("up-conv requires kernel 4 and padding 1")
            else:
                if self.kernel_size % 2 == 0 or self.kernel_size < 1:
                    raise SpecError("down/flat convolutions need an odd kernel")
                if self.padding != (self.kernel_size - 1) // 2:
                    raise SpecError(
                        "down/flat convolutions must pad to preserve extent: "
                        f"kernel {self.kernel_size} needs padding "
                        f"{(self.kernel_size - 1) // 2}, got {self.padding}")
            if self.in_channels < 1 or self.out_channels < 1:
                raise SpecError("convolutions need positive channel counts")
        elif self.kind == DROPOUT:
            if not 0.0 <= self.dropout_rate < 1.0:
                raise SpecError("dropout_rate must be in [0, 1)")
        elif self.kind == FC:
            if self.in_channels < 1 or self.out_channels < 1:
                raise SpecError("fully-connected layer needs positive sizes")


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer list plus input/output contract.

    ``output_arity`` is "image" (per-pixel output) or "scalar" (single
    probability, final layer fully-connected).
    """

    layers: tuple[LayerSpec, ...]
    input_channels: int
    output_arity: str  # image | scalar

    def __post_init__(self):
        if self.output_arity not in ("image", "scalar"):
            raise SpecError(f"unknown output arity {self.output_arity!r}")
        if self.output_arity == "scalar":
            last = self.layers[-1]
            if last.kind != FC or last.activation != "sigmoid":
                raise SpecError(
                    "scalar networks must end with a sigmoid fully-connected "
                    "layer")

    def to_dict(self) -> dict:
        return {
            "input_channels": self.input_channels,
            "output_arity": self.output_arity,
            "layers": [dataclasses.asdict(l) for l in self.layers],
        }

    @staticmethod
    def from_dict(d: dict) -> "NetworkSpec":
        return NetworkSpec(
            layers=tuple(LayerSpec(**l) for l in d["layers"]),
            input_channels=int(d["input_channels"]),
            output_arity=d["output_arity"],
        )


@dataclass(frozen=True)
class CropRecord:
    """Amount of padding added by :func:`pad_to_multiple` (bottom-right)."""

    pad_top: int = 0
    pad_bottom: int = 0
    pad_left: int = 0
    pad_right: int = 0

    def crop(self, image: np.ndarray) -> np.ndarray:
        h, w = image.shape[-2:]
        return image[..., self.pad_top:h - self.pad_bottom or None,
                     self.pad_left:w - self.pad_right or None]


# ---------------------------------------------------------------------------
# Network constructors

# 23-layer hourglass template: layer kinds by index.
_SIMPLIFIER_DOWN = (0, 3, 6)
_SIMPLIFIER_UP = (14, 17, 20)
SIMPLIFIER_DEPTH = 23


def default_simplifier_channels(base: int = 32, cap: int = 256) -> tuple[int, ...]:
    """Per-layer output widths for the 23-layer hourglass.

    Widths double at each downsample stage (capped at ``cap``) and mirror on
    the way back up; the full-resolution decoder stage uses half the base
    width and the final layer outputs a single channel.
    """
    c1 = min(base, cap)
    c2 = min(2 * base, cap)
    c3 = min(4 * base, cap)
    c0 = max(base // 2, 1)
    return (c1, c1, c1, c2, c2, c2,
            c3, c3, c3, c3, c3, c3, c3, c3,
            c2, c2, c2, c1, c1, c1,
            c0, c0, 1)


def build_simplification_network(
        channels_schedule: tuple[int, ...] | None = None,
        input_channels: int = 1,
        batchnorm: bool = True) -> NetworkSpec:
    """Hourglass network: three stride-2 stages down to 1/8 resolution,
    seven flat convolutions, then three up-convolutions back to full size.

    The first layer uses a 5x5 kernel with 2x2 padding; the final layer is a
    single-channel sigmoid. All other activations are ReLU.
    """
    if channels_schedule is None:
        channels_schedule = default_simplifier_channels()
    channels_schedule = tuple(int(c) for c in channels_schedule)
    if len(channels_schedule) != SIMPLIFIER_DEPTH:
        raise SpecError(
            f"channels_schedule must have {SIMPLIFIER_DEPTH} entries, got "
            f"{len(channels_schedule)}")
    if channels_schedule[-1] != 1:
        raise SpecError("final layer must output a single channel")

    layers = []
    in_ch = input_channels
    for i, out_ch in enumerate(channels_schedule):
        last = i == SIMPLIFIER_DEPTH - 1
        if i in _SIMPLIFIER_DOWN:
            kind, stride = DOWN, 2
            kernel = 5 if i == 0 else 3
            padding = (kernel - 1) // 2
        elif i in _SIMPLIFIER_UP:
            kind, stride, kernel, padding = UP, HALF, 4, 1
        else:
            kind, stride, kernel, padding = FLAT, 1, 3, 1
        layers.append(LayerSpec(
            kind=kind, kernel_size=kernel, stride=stride, padding=padding,
            in_channels=in_ch, out_channels=out_ch,
            activation="sigmoid" if last else "relu",
            has_batchnorm=batchnorm))
        in_ch = out_ch
    return NetworkSpec(tuple(layers), input_channels, "image")


def build_discriminator(input_size: int = 384,
                        base_channels: int = 16,
                        input_channels: int = 1,
                        batchnorm: bool = True) -> NetworkSpec:
    """Shallow classifier: a 5x5 stride-2 conv then stride-2 3x3 convs that
    double the channel count down to 1/64 resolution, one flat 3x3 stage,
    50% dropout after the last two convolutions, and a fully-connected
    sigmoid output.

    The fully-connected layer fixes the accepted input resolution, which must
    be divisible by 64.
    """
    if input_size % 64 != 0:
        raise SpecError("discriminator input size must be divisible by 64")
    layers = []
    in_ch = input_channels
    out_ch = base_channels
    for i in range(6):
        kernel = 5 if i == 0 else 3
        layers.append(LayerSpec(
            kind=DOWN, kernel_size=kernel, stride=2,
            padding=(kernel - 1) // 2, in_channels=in_ch, out_channels=out_ch,
            activation="relu", has_batchnorm=batchnorm))
        in_ch = out_ch
        if i < 5:
            out_ch *= 2
    layers.append(LayerSpec(kind=DROPOUT, dropout_rate=0.5))
    layers.append(LayerSpec(
        kind=FLAT, kernel_size=3, stride=1, padding=1,
        in_channels=in_ch, out_channels=in_ch, activation="relu",
        has_batchnorm=batchnorm))
    layers.append(LayerSpec(kind=DROPOUT, dropout_rate=0.5))
    spatial = input_size // 64
    layers.append(LayerSpec(
        kind=FC, in_channels=in_ch * spatial * spatial, out_channels=1,
        activation="sigmoid"))
    return NetworkSpec(tuple(layers), input_channels, "scalar")


# ---------------------------------------------------------------------------
# Functional primitives

def _activate(x: torch.Tensor, activation: str) -> torch.Tensor:
    if activation == "relu":
        return F.relu(x)
    if activation == "sigmoid":
        return torch.sigmoid(x)
    return x


def conv_forward(x: torch.Tensor, layer: LayerSpec,
                 weight: torch.Tensor,
                 bias: torch.Tensor | None = None,
                 layer_index: int = 0) -> torch.Tensor:
    """Single convolution layer: affine map plus activation.

    ``x`` is (B, C, H, W) or (C, H, W). Stride 2 halves spatial dims (odd
    dims round up), stride 1/2 doubles them. Weight shape is checked against
    the layer spec; mismatches raise :class:`SpecError` naming the layer.
    """
    if layer.kind not in CONV_KINDS:
        raise SpecError(f"layer {layer_index}: not a convolution")
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    if x.shape[1] != layer.in_channels:
        raise SpecError(
            f"layer {layer_index}: expected {layer.in_channels} input "
            f"channels, got {x.shape[1]}")
    k = layer.kernel_size
    if layer.kind == UP:
        expected_shape = (layer.in_channels, layer.out_channels, k, k)
    else:
        expected_shape = (layer.out_channels, layer.in_channels, k, k)
    if tuple(weight.shape) != expected_shape:
        raise SpecError(
            f"layer {layer_index}: weight shape {tuple(weight.shape)} does "
            f"not match spec {expected_shape}")
    if layer.kind == UP:
        y = F.conv_transpose2d(x, weight, bias, stride=2, padding=1)
    else:
        stride = int(layer.stride)
        if min(x.shape[-2:]) + 2 * layer.padding < k:
            raise SpecError(
                f"layer {layer_index}: input {tuple(x.shape[-2:])} smaller "
                f"than kernel footprint")
        y = F.conv2d(x, weight, bias, stride=stride, padding=layer.padding)
    y = _activate(y, layer.activation)
    return y.squeeze(0) if squeeze else y


# ---------------------------------------------------------------------------
# Torch realization

class SpecNet(nn.Module):
    """Torch module realizing a :class:`NetworkSpec`.

    Parameter tensors are reachable per layer index through ``convs``,
    ``bns`` and ``fc``; the checkpoint module relies on that layout.
    """

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        convs: dict[str, nn.Module] = {}
        bns: dict[str, nn.Module] = {}
        self.fc: nn.Linear | None = None
        in_ch = spec.input_channels
        for i, layer in enumerate(spec.layers):
            if layer.kind in CONV_KINDS:
                if layer.in_channels != in_ch:
                    raise SpecError(
                        f"layer {i}: in_channels {layer.in_channels} does not "
                        f"chain from previous layer ({in_ch})")
                if layer.kind == UP:
                    conv = nn.ConvTranspose2d(
                        layer.in_channels, layer.out_channels, 4,
                        stride=2, padding=1)
                else:
                    conv = nn.Conv2d(
                        layer.in_channels, layer.out_channels,
                        layer.kernel_size, stride=int(layer.stride),
                        padding=layer.padding)
                self._init_conv(conv, layer)
                convs[str(i)] = conv
                if layer.has_batchnorm:
                    bns[str(i)] = nn.BatchNorm2d(
                        layer.out_channels, eps=BN_EPS, momentum=BN_MOMENTUM)
                in_ch = layer.out_channels
            elif layer.kind == FC:
                self.fc = nn.Linear(layer.in_channels, layer.out_channels)
                nn.init.xavier_normal_(self.fc.weight)
                nn.init.zeros_(self.fc.bias)
        self.convs = nn.ModuleDict(convs)
        self.bns = nn.ModuleDict(bns)

    @staticmethod
    def _init_conv(conv: nn.Module, layer: LayerSpec) -> None:
        if layer.activation == "relu":
            nn.init.kaiming_normal_(conv.weight, mode="fan_in",
                                    nonlinearity="relu")
        else:
            nn.init.xavier_normal_(conv.weight)
        nn.init.zeros_(conv.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        if x.shape[1] != self.spec.input_channels:
            raise SpecError(
                f"input has {x.shape[1]} channels, network expects "
                f"{self.spec.input_channels}")
        if self.spec.output_arity == "image":
            factor = downscale_factor(self.spec)
            if x.shape[-1] % factor or x.shape[-2] % factor:
                raise SpecError(
                    f"input dims {tuple(x.shape[-2:])} must be divisible by "
                    f"{factor}; use pad_to_multiple first")
        for i, layer in enumerate(self.spec.layers):
            if layer.kind in CONV_KINDS:
                conv = self.convs[str(i)]
                x = conv(x)
                bn = self.bns[str(i)] if str(i) in self.bns else None
                if bn is not None:
                    x = bn(x)
                x = _activate(x, layer.activation)
            elif layer.kind == DROPOUT:
                x = F.dropout(x, layer.dropout_rate, training=self.training)
            elif layer.kind == FC:
                flat = x.flatten(1)
                if flat.shape[1] != self.fc.in_features:
                    raise SpecError(
                        f"layer {i}: fully-connected layer expects "
                        f"{self.fc.in_features} features, got {flat.shape[1]} "
                        f"(wrong input resolution?)")
                x = _activate(self.fc(flat), layer.activation)
        if self.spec.output_arity == "scalar":
            x = x.squeeze(1)
        return x.squeeze(0) if squeeze else x


def make_net(spec: NetworkSpec, seed: int | None = None) -> SpecNet:
    """Build a :class:`SpecNet`, optionally with deterministic initialization."""
    if seed is not None:
        torch.manual_seed(seed)
    return SpecNet(spec)


def downscale_factor(spec: NetworkSpec) -> int:
    """Net downscale of the encoder path; input dims must be divisible by it."""
    num = 1.0
    worst = 1.0
    for layer in spec.layers:
        if layer.kind in CONV_KINDS:
            num *= layer.stride
            worst = max(worst, num)
    return int(worst)


# ---------------------------------------------------------------------------
# Batch-norm folding

def fold_batchnorm(net: SpecNet) -> SpecNet:
    """Absorb batch-norm statistics into the preceding convolutions.

    Returns a new network whose eval-mode outputs match the input network's;
    ``has_batchnorm`` is cleared on every layer. Idempotent once folded.
    """
    new_layers = tuple(dataclasses.replace(l, has_batchnorm=False)
                       for l in net.spec.layers)
    folded = SpecNet(dataclasses.replace(net.spec, layers=new_layers))
    with torch.no_grad():
        for i, layer in enumerate(net.spec.layers):
            if layer.kind not in CONV_KINDS:
                continue
            src = net.convs[str(i)]
            dst = folded.convs[str(i)]
            bn = net.bns[str(i)] if str(i) in net.bns else None
            if bn is None:
                dst.weight.copy_(src.weight)
                dst.bias.copy_(src.bias)
                continue
            if bn.running_var.min() <= 0:
                raise SpecError(f"layer {i}: non-positive running variance")
            scale = bn.weight / torch.sqrt(bn.running_var + bn.eps)
            if layer.kind == UP:
                # transposed conv weight is (in, out, k, k)
                dst.weight.copy_(src.weight * scale.view(1, -1, 1, 1))
            else:
                dst.weight.copy_(src.weight * scale.view(-1, 1, 1, 1))
            dst.bias.copy_(bn.bias + (src.bias - bn.running_mean) * scale)
        if net.fc is not None:
            folded.fc.weight.copy_(net.fc.weight)
            folded.fc.bias.copy_(net.fc.bias)
    folded.eval()
    return folded


# ---------------------------------------------------------------------------
# Padding and receptive field

def pad_to_multiple(image: np.ndarray, factor: int = 8
                    ) -> tuple[np.ndarray, CropRecord]:
    """Mirror-pad ``image`` (H, W) at the bottom/right so both dims are
    divisible by ``factor``. The returned :class:`CropRecord` inverts the
    padding exactly via ``record.crop``.
    """
    if image.size == 0:
        raise ValueError("cannot pad an empty image")
    h, w = image.shape[-2:]
    pad_b = (-h) % factor
    pad_r = (-w) % factor
    record = CropRecord(0, pad_b, 0, pad_r)
    if pad_b == 0 and pad_r == 0:
        return image, record
    pad_width = [(0, 0)] * (image.ndim - 2) + [(0, pad_b), (0, pad_r)]
    return np.pad(image, pad_width, mode="symmetric"), record


def receptive_field(spec: NetworkSpec, layer_index: int) -> int:
    """Side length of the input region influencing one unit at ``layer_index``.

    A 3x3 convolution at half resolution covers a 5x5 input area; stride-2
    layers double the jump of every later layer. Dropout layers do not grow
    the field; the fully-connected layer sees the whole input and is not
    meaningful here.
    """
    if not 0 <= layer_index < len(spec.layers):
        raise SpecError(f"layer index {layer_index} out of range")
    r = 1.0
    jump = 1.0
    for layer in spec.layers[:layer_index + 1]:
        if layer.kind not in CONV_KINDS:
            continue
        if layer.kind == UP:
            # each output pixel of a 4x4 stride-2 transposed conv depends on
            # ceil(k/2) = 2 input pixels
            r += (math.ceil(layer.kernel_size / 2) - 1) * jump
            jump /= 2
        else:
            r += (layer.kernel_size - 1) * jump
            jump *= layer.stride
    return int(math.ceil(r))
