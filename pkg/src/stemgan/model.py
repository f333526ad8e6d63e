"""Networks: a two-stream (spatial + temporal-shift) encoder over a wide
residual backbone, a channel-attention deconvolution decoder with skip
connections, and a patch-grid critic.

Feature maps through the temporal branch are 5-axis: (batch, time,
channels, height, width). The generator is fully convolutional, so one set
of weights serves any square input whose side is divisible by
2**encoder_stages.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn

BASE_WIDTH = 32


def temporal_shift(x: torch.Tensor, fraction: float) -> torch.Tensor:
    """Shift the first ``fraction`` of channels one step forward in time.

    For a (N, T, C, H, W) tensor, output[:, t, :k] = input[:, t-1, :k] with
    zeros at t = 0; the remaining channels pass through unchanged.
    """
    if x.ndim != 5:
        raise ValueError(f"expected (N, T, C, H, W) tensor, got shape {tuple(x.shape)}")
    c = x.shape[2]
    k_exact = fraction * c
    k = round(k_exact)
    if abs(k_exact - k) > 1e-9:
        raise ValueError(f"fraction {fraction} of {c} channels is not an integer")
    if not 0 <= k <= c:
        raise ValueError(f"shift fraction {fraction} outside [0, 1]")
    if k == 0:
        return x
    out = torch.zeros_like(x)
    out[:, 1:, :k] = x[:, :-1, :k]
    out[:, :, k:] = x[:, :, k:]
    return out


class ChannelAttention(nn.Module):
    """Squeeze-excitation gate: per-channel sigmoid weights from pooled stats."""

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        if channels < reduction:
            raise ValueError(f"channels ({channels}) must be >= reduction ({reduction})")
        if channels % reduction:
            raise ValueError(f"channels ({channels}) not divisible by reduction ({reduction})")
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.squeeze = nn.Conv2d(channels, channels // reduction, kernel_size=1)
        self.excite = nn.Conv2d(channels // reduction, channels, kernel_size=1)
        self.act = nn.ReLU(inplace=True)

    def gates(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.excite(self.act(self.squeeze(self.pool(x)))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gates(x)


class TemporalShift(nn.Module):
    """Module wrapper around :func:`temporal_shift` with a fixed fraction.

    The shift is out-of-place, so the unshifted features stay available to
    the spatial stream; nothing is destroyed by the move.
    """

    def __init__(self, fraction: float):
        super().__init__()
        self.fraction = fraction

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return temporal_shift(x, self.fraction)


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
        )
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )
        else:
            self.shortcut = nn.Identity()
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.act(self.body(x) + self.shortcut(x))


@dataclass
class GeneratorConfig:
    backbone_width_scale: float = 1.0
    encoder_stages: int = 4
    decoder_stages: int = 4
    shift_fraction: float = 0.125
    attention_reduction: int = 16
    window_frames: int = 4  # conditioning frames per window
    in_channels: int = 3

    def stage_widths(self) -> List[int]:
        return [
            max(4, int(round(BASE_WIDTH * (2 ** i) * self.backbone_width_scale)))
            for i in range(self.encoder_stages)
        ]

    def decoder_widths(self) -> List[int]:
        widths = self.stage_widths()
        return list(reversed(widths))[1:] + [widths[0]]

    def validate(self):
        if self.encoder_stages < 1:
            raise ValueError("encoder_stages must be >= 1")
        if self.decoder_stages != self.encoder_stages:
            raise ValueError(
                "decoder_stages must equal encoder_stages (skips pair one-to-one)"
            )
        if not 0 <= self.shift_fraction < 1:
            raise ValueError("shift_fraction must be in [0, 1)")
        if self.window_frames < 1:
            raise ValueError("window_frames must be >= 1")
        c_last = self.stage_widths()[-1]
        if abs(self.shift_fraction * c_last - round(self.shift_fraction * c_last)) > 1e-9:
            raise ValueError(
                f"shift_fraction {self.shift_fraction} of {c_last} channels is not integral"
            )
        for width in self.decoder_widths():
            if width < self.attention_reduction or width % self.attention_reduction:
                raise ValueError(
                    f"decoder width {width} incompatible with attention_reduction "
                    f"{self.attention_reduction}"
                )
        return self

    def min_input_size(self) -> int:
        return 2 ** self.encoder_stages * 4


class Encoder(nn.Module):
    """Per-frame wide-residual backbone split into spatial and temporal streams.

    The spatial stream concatenates the frames' final features along
    channels; the temporal stream passes them through a residual temporal
    shift first. Per-stage features (frames concatenated along channels)
    are recorded as skips for the decoder.
    """

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        widths = cfg.stage_widths()
        self.stem = nn.Sequential(
            nn.Conv2d(cfg.in_channels, widths[0], 3, padding=1, bias=False),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(inplace=True),
        )
        stages = []
        prev = widths[0]
        for width in widths:
            stages.append(ResidualBlock(prev, width, stride=2))
            prev = width
        self.stages = nn.ModuleList(stages)
        self.temporal = TemporalShift(cfg.shift_fraction)
        self.out_channels = 2 * cfg.window_frames * widths[-1]

    def skip_channels(self) -> List[int]:
        widths = self.cfg.stage_widths()
        per_frame = [widths[0]] + widths[:-1]
        return [c * self.cfg.window_frames for c in per_frame]

    def forward(self, frames: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        if frames.ndim != 5:
            raise ValueError(f"expected (N, T, C, H, W) input, got {tuple(frames.shape)}")
        n, t, c, h, w = frames.shape
        if t != self.cfg.window_frames:
            raise ValueError(f"expected {self.cfg.window_frames} frames, got {t}")
        if h != w:
            raise ValueError(f"frames must be square, got {h}x{w}")
        if h % (2 ** self.cfg.encoder_stages) or h < self.cfg.min_input_size():
            raise ValueError(
                f"frame size {h} must be a multiple of {2 ** self.cfg.encoder_stages} "
                f"and at least {self.cfg.min_input_size()}"
            )
        x = frames.reshape(n * t, c, h, w)
        x = self.stem(x)
        skips = [self._merge_frames(x, n, t)]
        for stage in self.stages[:-1]:
            x = stage(x)
            skips.append(self._merge_frames(x, n, t))
        x = self.stages[-1](x)
        per_frame = x.reshape(n, t, *x.shape[1:])
        spatial = self._merge_frames(x, n, t)
        temporal = self.temporal(per_frame).reshape(n, -1, *x.shape[2:])
        return torch.cat([spatial, temporal], dim=1), skips

    @staticmethod
    def _merge_frames(x: torch.Tensor, n: int, t: int) -> torch.Tensor:
        return x.reshape(n, t * x.shape[1], *x.shape[2:])


class DecoderBlock(nn.Module):
    """Deconvolution -> batch norm -> activation -> channel attention."""

    def __init__(self, in_ch: int, out_ch: int, reduction: int):
        super().__init__()
        self.deconv = nn.ConvTranspose2d(in_ch, out_ch, 4, stride=2, padding=1, bias=False)
        self.norm = nn.BatchNorm2d(out_ch)
        self.act = nn.ReLU(inplace=True)
        self.attention = ChannelAttention(out_ch, reduction)

    def forward(self, x):
        return self.attention(self.act(self.norm(self.deconv(x))))


class Decoder(nn.Module):
    """Upsamples the spatio-temporal map back to frame resolution.

    A 1x1 convolution first reduces the concatenated map, then each block
    doubles the resolution and its output is concatenated with the paired
    encoder skip before the next block. A tanh head bounds the output frame
    to [-1, 1].
    """

    def __init__(self, cfg: GeneratorConfig, map_channels: int, skip_channels: Sequence[int]):
        super().__init__()
        if len(skip_channels) != cfg.decoder_stages:
            raise ValueError(
                f"{len(skip_channels)} skips for {cfg.decoder_stages} decoder stages"
            )
        widths = cfg.stage_widths()
        self.reduce = nn.Conv2d(map_channels, widths[-1], kernel_size=1)
        blocks = []
        in_ch = widths[-1]
        skips_rev = list(reversed(skip_channels))
        for out_ch, skip_ch in zip(cfg.decoder_widths(), skips_rev):
            blocks.append(DecoderBlock(in_ch, out_ch, cfg.attention_reduction))
            in_ch = out_ch + skip_ch
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Conv2d(in_ch, cfg.in_channels, 3, padding=1)

    def forward(self, feature_map: torch.Tensor, skips: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(skips) != len(self.blocks):
            raise ValueError(f"{len(skips)} skips for {len(self.blocks)} decoder stages")
        x = self.reduce(feature_map)
        for block, skip in zip(self.blocks, reversed(list(skips))):
            x = block(x)
            if x.shape[2:] != skip.shape[2:]:
                raise ValueError(
                    f"skip spatial size {tuple(skip.shape[2:])} does not match "
                    f"decoder stage output {tuple(x.shape[2:])}"
                )
            x = torch.cat([x, skip], dim=1)
        return torch.tanh(self.head(x))


class Generator(nn.Module):
    """Future-frame predictor: encode a window, decode the next frame."""

    def __init__(self, cfg: Optional[GeneratorConfig] = None):
        super().__init__()
        self.cfg = (cfg or GeneratorConfig()).validate()
        self.encoder = Encoder(self.cfg)
        self.decoder = Decoder(self.cfg, self.encoder.out_channels, self.encoder.skip_channels())
        self.apply(_init_weights)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        feature_map, skips = self.encoder(frames)
        return self.decoder(feature_map, skips)

    @torch.no_grad()
    def generate(self, frames: torch.Tensor) -> torch.Tensor:
        """Deterministic inference: predicted next frame for each window."""
        was_training = self.training
        self.eval()
        try:
            return self(frames)
        finally:
            self.train(was_training)


class PatchDiscriminator(nn.Module):
    """Convolutional critic emitting an N x N grid of per-patch realness scores.

    Four stride-2 conv stages shrink the input 16x, so a 160px frame yields
    a 10x10 grid and 64px the minimum 4x4. Inputs smaller than 16 * 4 px
    are rejected: the grid would fall under 4x4.
    """

    MIN_GRID = 4

    def __init__(self, in_channels: int = 3, base_width: int = 64, width_scale: float = 1.0):
        super().__init__()
        widths = [max(4, int(round(base_width * (2 ** i) * width_scale))) for i in range(4)]
        layers = [
            nn.Conv2d(in_channels, widths[0], 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        ]
        prev = widths[0]
        for width in widths[1:]:
            layers += [
                nn.Conv2d(prev, width, 4, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(width),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            prev = width
        layers.append(nn.Conv2d(prev, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)
        self.downscale = 2 ** 4
        self.apply(_init_weights)

    def forward(self, frame: torch.Tensor) -> torch.Tensor:
        if frame.ndim == 3:
            frame = frame.unsqueeze(0)
        if frame.ndim != 4:
            raise ValueError(f"expected (N, C, H, W) input, got {tuple(frame.shape)}")
        h, w = frame.shape[2:]
        if min(h, w) < self.downscale * self.MIN_GRID:
            raise ValueError(
                f"input {h}x{w} smaller than the critic receptive field "
                f"({self.downscale * self.MIN_GRID}px minimum)"
            )
        return torch.sigmoid(self.net(frame))


def _init_weights(module: nn.Module):
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.normal_(module.weight, 0.0, 0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.BatchNorm2d):
        nn.init.normal_(module.weight, 1.0, 0.02)
        nn.init.zeros_(module.bias)


def windows_to_tensors(windows, device=None, dtype=torch.float32):
    """Stack FrameWindows into (inputs, targets) tensors in NCHW layout."""
    if len(windows) == 0:
        raise ValueError("empty batch of windows")
    inputs = torch.stack(
        [torch.from_numpy(w.inputs.transpose(0, 3, 1, 2).copy()) for w in windows]
    ).to(dtype)
    targets = torch.stack(
        [torch.from_numpy(w.target.transpose(2, 0, 1).copy()) for w in windows]
    ).to(dtype)
    if device is not None:
        inputs = inputs.to(device)
        targets = targets.to(device)
    return inputs, targets
