"""2D and 3D complementary segmentation networks (CompNets).

A CompNet has one shared encoder feeding two mirrored decoders: one predicts
the object mask, the other its complement. A third, smaller encoder-decoder
reconstructs the input image from the two predictions and the full
resolution decoder features.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn as nn


class ArchitectureError(ValueError):
    """Raised when a spec cannot be turned into a valid network."""


@dataclass(frozen=True)
class CompNet2DSpec:
    input_hw: tuple[int, int] = (512, 512)
    block_widths: tuple[int, ...] = (32, 32, 64, 128, 256)
    transition_width: int = 512
    kernel: int = 3
    pool_factor: int = 2
    dropout_rate: float = 0.3
    l2: float = 2e-4
    batch_norm: bool = True
    output_prior: float | None = None

    ndim = 2

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.input_hw)


@dataclass(frozen=True)
class CompNet3DSpec:
    input_dhw: tuple[int, int, int] = (32, 32, 32)
    block_widths: tuple[int, ...] = (64, 128, 256)
    transition_width: int = 512
    kernel: int = 3
    pool_factor: int = 2
    dropout_rate: float = 0.3
    l2: float = 2e-4
    batch_norm: bool = True
    output_prior: float | None = None

    ndim = 3

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.input_dhw)


CompNetSpec = CompNet2DSpec | CompNet3DSpec


class CompNetOutputs(NamedTuple):
    seg: torch.Tensor
    comp: torch.Tensor
    recon: torch.Tensor


def validate_spec(spec: CompNetSpec) -> None:
    if not spec.block_widths or any(w <= 0 for w in spec.block_widths):
        raise ArchitectureError(f"block widths must be positive, got {spec.block_widths}")
    if spec.transition_width <= 0:
        raise ArchitectureError("transition width must be positive")
    if spec.kernel < 1 or spec.kernel % 2 == 0:
        raise ArchitectureError(f"kernel must be odd, got {spec.kernel}")
    if spec.pool_factor < 2:
        raise ArchitectureError("pool factor must be at least 2")
    if not 0.0 <= spec.dropout_rate < 1.0:
        raise ArchitectureError(f"dropout rate out of range: {spec.dropout_rate}")
    if spec.output_prior is not None and not 0.0 < spec.output_prior < 1.0:
        raise ArchitectureError(f"output prior must be in (0, 1), got {spec.output_prior}")
    div = spec.pool_factor ** len(spec.block_widths)
    shape = spec.input_shape
    if len(shape) != spec.ndim:
        raise ArchitectureError(f"expected {spec.ndim} spatial dims, got {shape}")
    for n in shape:
        if n <= 0 or n % div:
            raise ArchitectureError(
                f"input size {shape} not divisible by {spec.pool_factor}^{len(spec.block_widths)} = {div}"
            )


def transition_size(spec: CompNetSpec) -> tuple[int, ...]:
    div = spec.pool_factor ** len(spec.block_widths)
    return tuple(n // div for n in spec.input_shape)


def _layers(ndim: int):
    if ndim == 2:
        return nn.Conv2d, nn.ConvTranspose2d, nn.BatchNorm2d, nn.MaxPool2d
    return nn.Conv3d, nn.ConvTranspose3d, nn.BatchNorm3d, nn.MaxPool3d


class ConvBlock(nn.Sequential):
    """Two conv + batch-norm + ReLU layers."""

    def __init__(self, ndim: int, cin: int, cout: int, kernel: int, batch_norm: bool):
        conv, _, bn, _ = _layers(ndim)
        layers: list[nn.Module] = []
        for c in (cin, cout):
            layers.append(conv(c, cout, kernel, padding=kernel // 2, bias=not batch_norm))
            if batch_norm:
                layers.append(bn(cout))
            layers.append(nn.ReLU(inplace=True))
        super().__init__(*layers)


class Encoder(nn.Module):
    def __init__(self, spec: CompNetSpec, cin: int):
        super().__init__()
        _, _, _, pool = _layers(spec.ndim)
        self.blocks = nn.ModuleList()
        c = cin
        for w in spec.block_widths:
            self.blocks.append(ConvBlock(spec.ndim, c, w, spec.kernel, spec.batch_norm))
            c = w
        self.pool = pool(spec.pool_factor)
        self.drop = nn.Dropout(spec.dropout_rate)

    def forward(self, x):
        skips = []
        for block in self.blocks:
            x = block(x)
            skips.append(x)
            x = self.drop(self.pool(x))
        return x, skips


class Decoder(nn.Module):
    def __init__(self, spec: CompNetSpec, cin: int):
        super().__init__()
        _, upconv, _, _ = _layers(spec.ndim)
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        c = cin
        for w in reversed(spec.block_widths):
            self.ups.append(upconv(c, w, spec.pool_factor, stride=spec.pool_factor))
            self.blocks.append(ConvBlock(spec.ndim, 2 * w, w, spec.kernel, spec.batch_norm))
            c = w
        self.drop = nn.Dropout(spec.dropout_rate)

    def forward(self, x, skips):
        for up, block, skip in zip(self.ups, self.blocks, reversed(skips)):
            x = self.drop(up(x))
            x = block(torch.cat([x, skip], dim=1))
        return x


class CompNet(nn.Module):
    """Segmentation, complement and reconstruction branches over a shared encoder.

    Inputs are ``(N, 1, *spatial)`` tensors. After each forward pass the
    spatial shape of the bottleneck activation is kept in
    ``transition_spatial`` for inspection.
    """

    def __init__(self, spec: CompNetSpec):
        super().__init__()
        validate_spec(spec)
        self.spec = spec
        conv, _, _, _ = _layers(spec.ndim)
        w0, wl = spec.block_widths[0], spec.block_widths[-1]

        self.encoder = Encoder(spec, 1)
        self.transition = ConvBlock(spec.ndim, wl, spec.transition_width, spec.kernel, spec.batch_norm)
        self.seg_decoder = Decoder(spec, spec.transition_width)
        self.comp_decoder = Decoder(spec, spec.transition_width)
        self.seg_head = conv(w0, 1, 1)
        self.comp_head = conv(w0, 1, 1)
        if spec.output_prior is not None:
            # start seg near the foreground prior and comp near its complement
            logit = math.log(spec.output_prior / (1.0 - spec.output_prior))
            nn.init.constant_(self.seg_head.bias, logit)
            nn.init.constant_(self.comp_head.bias, -logit)

        self.rec_encoder = Encoder(spec, 2 * w0 + 2)
        self.rec_transition = ConvBlock(spec.ndim, wl, spec.transition_width, spec.kernel, spec.batch_norm)
        self.rec_decoder = Decoder(spec, spec.transition_width)
        self.rec_head = conv(w0, 1, 1)

        self.transition_spatial: tuple[int, ...] | None = None

    def forward(self, x: torch.Tensor) -> CompNetOutputs:
        expected = tuple(self.spec.input_shape)
        if x.ndim != self.spec.ndim + 2 or x.shape[1] != 1 or tuple(x.shape[2:]) != expected:
            raise ArchitectureError(
                f"expected input (N, 1, {', '.join(map(str, expected))}), got {tuple(x.shape)}"
            )
        h, skips = self.encoder(x)
        h = self.transition(h)
        self.transition_spatial = tuple(h.shape[2:])

        seg_feat = self.seg_decoder(h, skips)
        comp_feat = self.comp_decoder(h, skips)
        seg = torch.sigmoid(self.seg_head(seg_feat))
        comp = torch.sigmoid(self.comp_head(comp_feat))

        r, rskips = self.rec_encoder(torch.cat([seg, comp, seg_feat, comp_feat], dim=1))
        r = self.rec_transition(r)
        r = self.rec_head(self.rec_decoder(r, rskips))
        dims = tuple(range(1, x.ndim))
        lo = x.amin(dim=dims, keepdim=True)
        hi = x.amax(dim=dims, keepdim=True)
        recon = torch.maximum(torch.minimum(r, hi), lo)
        return CompNetOutputs(seg, comp, recon)


def build_compnet2d(spec: CompNet2DSpec | None = None) -> CompNet:
    return CompNet(spec or CompNet2DSpec())


def build_compnet3d(spec: CompNet3DSpec | None = None) -> CompNet:
    return CompNet(spec or CompNet3DSpec())


def forward(model: CompNet, batch) -> CompNetOutputs:
    """Run ``model`` on ``batch`` in whatever train/eval mode it is in.

    ``batch`` may be a tensor or array shaped ``(N, *spatial)`` or
    ``(N, 1, *spatial)``.
    """
    x = torch.as_tensor(batch, dtype=torch.float32)
    if x.ndim == model.spec.ndim + 1:
        x = x.unsqueeze(1)
    return model(x)


def conv_kernels(model: nn.Module) -> list[torch.Tensor]:
    """Convolution kernels subject to weight decay (biases and norms excluded)."""
    kinds = (nn.Conv2d, nn.Conv3d, nn.ConvTranspose2d, nn.ConvTranspose3d)
    return [m.weight for m in model.modules() if isinstance(m, kinds)]


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def _spec_to_dict(spec: CompNetSpec) -> dict:
    d = asdict(spec)
    d["ndim"] = spec.ndim
    return d


def spec_from_dict(d: dict) -> CompNetSpec:
    d = dict(d)
    ndim = d.pop("ndim")
    tuples = {k: tuple(v) for k, v in d.items() if isinstance(v, list)}
    d.update(tuples)
    return CompNet2DSpec(**d) if ndim == 2 else CompNet3DSpec(**d)


def save_checkpoint(model: CompNet, path: str | Path, extra: dict | None = None) -> None:
    payload = {"spec": _spec_to_dict(model.spec), "state_dict": model.state_dict()}
    if extra:
        payload["extra"] = extra
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> CompNet:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    model = CompNet(spec_from_dict(payload["spec"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model
