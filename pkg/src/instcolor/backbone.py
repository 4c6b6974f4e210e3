"""Encoder-decoder colorization backbone with per-layer feature taps.

The same architecture serves as the full-image branch and the instance
branch; only the parameters differ. Each of the configured layers produces
one tappable feature map, and an optional hook may replace a layer's output
before it is fed forward (this is how fusion plugs in).
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

ORIGINAL_CHANNELS = [64, 128, 256, 512, 512, 512, 512, 256, 256, 128, 128, 128, 128]
PAPER_SCALE_PROFILE = [1, 2, 4, 8, 8, 8, 8, 4, 4, 2, 2, 1, 1]

FULL_IMAGE = "full_image"
INSTANCE = "instance"
ROLES = (FULL_IMAGE, INSTANCE)
# leaky activations keep narrow toy layers from dying under large learning rates
LEAK = 0.1


class ConfigError(ValueError):
    pass


def default_scale_profile(n_layers: int) -> list[int]:
    """Downsample factors per layer: halve resolution over the first half
    (down to 1/8), then come back up."""
    n_enc = (n_layers + 1) // 2
    enc = [2 ** min(i, 3) for i in range(n_enc)]
    peak = enc[-1]
    dec = [max(1, peak >> (k + 1)) for k in range(n_layers - n_enc)]
    return enc + dec


@dataclass
class BackboneConfig:
    layer_channels: list[int] = field(default_factory=lambda: list(ORIGINAL_CHANNELS))
    base_resolution: int = 256
    scale_profile: list[int] | None = None
    fusion_layers: list[int] | None = None
    seed: int = 0
    paper_faithful: bool = False

    def __post_init__(self):
        self.layer_channels = [int(c) for c in self.layer_channels]
        if self.scale_profile is None:
            self.scale_profile = (list(PAPER_SCALE_PROFILE) if self.paper_faithful
                                  else default_scale_profile(len(self.layer_channels)))
        self.scale_profile = [int(s) for s in self.scale_profile]
        if self.fusion_layers is None:
            self.fusion_layers = list(range(len(self.layer_channels)))
        self.fusion_layers = sorted({int(j) for j in self.fusion_layers})
        self.validate()

    @classmethod
    def original(cls, **kw) -> "BackboneConfig":
        return cls(layer_channels=list(ORIGINAL_CHANNELS), paper_faithful=True, **kw)

    @classmethod
    def toy(cls, layer_channels=(8, 16, 16, 8), base_resolution: int = 64, **kw):
        return cls(layer_channels=list(layer_channels), base_resolution=base_resolution, **kw)

    def validate(self):
        n = len(self.layer_channels)
        if self.paper_faithful and self.layer_channels != ORIGINAL_CHANNELS:
            raise ConfigError(f"paper_faithful mode requires channels {ORIGINAL_CHANNELS}")
        if n < 2:
            raise ConfigError("a backbone needs at least 2 layers")
        if any(c < 1 for c in self.layer_channels):
            raise ConfigError("channel counts must be positive")
        if len(self.scale_profile) != n:
            raise ConfigError("scale_profile length must equal the number of layers")
        prev = 1
        for f in self.scale_profile:
            if f < 1 or f & (f - 1):
                raise ConfigError(f"scale factors must be powers of two, got {f}")
            if f not in (prev // 2, prev, prev * 2):
                raise ConfigError(f"scale profile {self.scale_profile} changes by more than 2x")
            prev = f
        if any(j < 0 or j >= n for j in self.fusion_layers):
            raise ConfigError(f"fusion layer index out of range 0..{n - 1}")
        if self.base_resolution % self.max_factor:
            raise ConfigError(
                f"base_resolution {self.base_resolution} not divisible by {self.max_factor}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_channels)

    @property
    def max_factor(self) -> int:
        return max(self.scale_profile)

    @property
    def encoder_layers(self) -> list[int]:
        """Layers up to and including the last one at the coarsest scale."""
        last_peak = max(j for j, f in enumerate(self.scale_profile) if f == self.max_factor)
        return list(range(last_peak + 1))

    @property
    def decoder_layers(self) -> list[int]:
        return list(range(len(self.encoder_layers), self.n_layers))

    def layer_shapes(self, height: int, width: int | None = None) -> list[tuple[int, int, int]]:
        width = height if width is None else width
        return [(c, height // f, width // f)
                for c, f in zip(self.layer_channels, self.scale_profile)]

    def architecture(self) -> dict:
        """The fields that determine parameter shapes."""
        return {"layer_channels": self.layer_channels, "scale_profile": self.scale_profile}

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.architecture(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class _Layer(nn.Module):
    def __init__(self, c_in, c_out, mode, dilation=1, skip_channels=None):
        super().__init__()
        self.mode = mode
        stride = 2 if mode == "down" else 1
        self.conv = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=dilation,
                              dilation=dilation)
        self.skip = nn.Conv2d(skip_channels, c_out, 3, padding=1) if skip_channels else None

    def forward(self, x, skip=None):
        if self.mode == "up":
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        y = self.conv(x)
        if self.skip is not None:
            y = y + self.skip(skip)
        return F.leaky_relu(y, LEAK)


Hook = Callable[[int, torch.Tensor], torch.Tensor]


class ColorizationNetwork(nn.Module):
    """L plane (B, 1, H, W) -> normalized ab (B, 2, H, W), with per-layer taps."""

    def __init__(self, config: BackboneConfig, role: str = FULL_IMAGE):
        super().__init__()
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        self.config = config
        self.role = role
        chans, prof = config.layer_channels, config.scale_profile
        self.skip_source: list[int | None] = []
        layers = []
        latest_at_scale: dict[int, int] = {}
        prev_c, prev_f = 1, 1
        for j, (c, f) in enumerate(zip(chans, prof)):
            skip = None
            if f == 2 * prev_f:
                mode, dil = "down", 1
            elif f == prev_f:
                mode = "same"
                # dilate in the bottleneck to widen the receptive field
                dil = 2 if (f == config.max_factor and f > 1 and j in config.encoder_layers) else 1
            else:
                mode, dil = "up", 1
                skip = latest_at_scale.get(f)
            self.skip_source.append(skip)
            layers.append(_Layer(prev_c, c, mode, dil,
                                 skip_channels=chans[skip] if skip is not None else None))
            if j in config.encoder_layers:
                latest_at_scale[f] = j
            prev_c, prev_f = c, f
        self.layers = nn.ModuleList(layers)
        self.out = nn.Conv2d(prev_c, 2, 1)
        self.out_factor = prev_f

    def forward(self, x: torch.Tensor, hook: Hook | None = None):
        f = self.config.max_factor
        if x.dim() != 4 or x.shape[1] != 1:
            raise ValueError(f"expected input of shape (B, 1, H, W), got {tuple(x.shape)}")
        if x.shape[-1] % f or x.shape[-2] % f:
            raise ValueError(f"input side {tuple(x.shape[-2:])} not divisible by {f}")
        taps = []
        h = x
        for j, layer in enumerate(self.layers):
            src = self.skip_source[j]
            h = layer(h, taps[src] if src is not None else None)
            if hook is not None:
                h = hook(j, h)
            taps.append(h)
        y = self.out(h)
        if self.out_factor > 1:
            y = F.interpolate(y, scale_factor=self.out_factor, mode="bilinear",
                              align_corners=False)
        return torch.tanh(y), taps

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_backbone(config: BackboneConfig, role: str = FULL_IMAGE) -> ColorizationNetwork:
    """Build a network with fan-in scaled init drawn from ``config.seed``."""
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        net = ColorizationNetwork(config, role)
    return net


def as_batch(L) -> torch.Tensor:
    t = torch.as_tensor(L)
    if t.dim() == 2:
        return t[None, None]
    if t.dim() == 3:
        return t[None]
    return t


def forward_with_taps(net: ColorizationNetwork, L):
    """Plain forward pass. Returns ``(ab, taps)``; ``taps[j]`` is layer j's output."""
    x = as_batch(L).to(next(net.parameters()).dtype)
    return net(x)


def transfer_weights(src: ColorizationNetwork, dst_role: str = INSTANCE,
                     dst: ColorizationNetwork | None = None) -> ColorizationNetwork:
    """Copy ``src`` parameters into a new network (or into ``dst``) with role ``dst_role``."""
    if dst is None:
        out = copy.deepcopy(src)
    else:
        if dst.config.architecture() != src.config.architecture():
            raise ConfigError("cannot transfer weights between different architectures")
        out = dst
        with torch.no_grad():
            for p_dst, p_src in zip(out.parameters(), src.parameters()):
                p_dst.copy_(p_src)
    if dst_role not in ROLES:
        raise ValueError(f"unknown role {dst_role!r}")
    out.role = dst_role
    return out
