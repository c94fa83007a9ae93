"""PMNet: residual encoder-decoder with atrous convolution for pathloss maps.

The network maps a two-channel image (obstacle map, TX one-hot) to a
single-channel normalized pathloss map. The encoder is a bottleneck-residual
stack whose deepest stage uses multi-grid dilated convolutions; the decoder
upsamples back to full resolution, concatenating encoder features (and
finally the raw input) at matching resolutions. The default configuration
reproduces this stage contract for 256x256 inputs:

    enc1  64x65x65    dec6  (512+512)x17x17
    enc2  256x65x65   dec5  (512+512)x33x33
    enc3  512x33x33   dec4  (256+256)x65x65
    enc4  512x17x17   dec3  (256+256)x65x65
    enc5  1024x17x17  dec2  (256+64)x65x65
    enc6  512x17x17   dec1  (128+2)x256x256
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


def atrous_conv2d(
    f: np.ndarray,
    w: np.ndarray,
    r: int = 1,
    stride: int = 1,
    padding: int = 0,
) -> np.ndarray:
    """Dilated 2D convolution over a (C_in, H, W) feature map.

    Kernel taps sample the input at spacing ``r``; r=1 is the standard
    convolution. Reference implementation used to pin down the semantics the
    torch layers must match.
    """
    f = np.asarray(f, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if r < 1:
        raise ValueError("atrous rate must be >= 1")
    if f.ndim != 3 or w.ndim != 4:
        raise ValueError("expected f (C_in,H,W) and w (C_out,C_in,k,k)")
    c_out, c_in, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ValueError("kernel must be square with odd size")
    if f.shape[0] != c_in:
        raise ValueError(f"channel mismatch: input {f.shape[0]} vs kernel {c_in}")
    fp = np.pad(f, ((0, 0), (padding, padding), (padding, padding)))
    span = r * (k - 1) + 1
    h_out = (fp.shape[1] - span) // stride + 1
    w_out = (fp.shape[2] - span) // stride + 1
    if h_out <= 0 or w_out <= 0:
        raise ValueError("kernel span exceeds padded input")
    out = np.zeros((c_out, h_out, w_out))
    for m in range(k):
        for n in range(k):
            patch = fp[
                :,
                m * r : m * r + (h_out - 1) * stride + 1 : stride,
                n * r : n * r + (w_out - 1) * stride + 1 : stride,
            ]
            out += np.tensordot(w[:, :, m, n], patch, axes=(1, 0))
    return out


@dataclass(frozen=True)
class PmnetConfig:
    input_channels: int = 2
    output_channels: int = 1
    input_size: int = 256
    output_stride: int = 8
    atrous_rates: tuple[int, ...] = (1, 2, 4)
    reslayer_block_counts: tuple[int, ...] = (3, 4, 6, 3)
    base_width: int = 64

    def __post_init__(self):
        if self.output_stride not in (8, 16):
            raise ValueError("output_stride must be 8 or 16")
        if len(self.reslayer_block_counts) != 4:
            raise ValueError("reslayer_block_counts must have 4 entries")
        if self.input_size % 4 != 0:
            raise ValueError("input_size must be divisible by 4")

    @classmethod
    def paper(cls) -> "PmnetConfig":
        return cls()

    @classmethod
    def desk(cls) -> "PmnetConfig":
        """Reduced profile for CPU-scale experiments."""
        return cls(input_size=128, base_width=16, reslayer_block_counts=(2, 2, 3, 2))

    @classmethod
    def tiny(cls) -> "PmnetConfig":
        """Minimal profile for numerical checks."""
        return cls(input_size=64, base_width=8, reslayer_block_counts=(1, 1, 1, 1))


def expected_trace(cfg: PmnetConfig) -> list[tuple[str, tuple[int, int, int]]]:
    """Stage-by-stage output shapes implied by a configuration."""
    n = cfg.input_size
    w = cfg.base_width
    s1 = n // 4 + 1
    if cfg.output_stride == 8:
        s3 = (s1 - 1) // 2 + 1
    else:
        s3 = (s1 - 1) // 4 + 1
    s4 = (s3 - 1) // 2 + 1
    return [
        ("input", (cfg.input_channels, n, n)),
        ("enc1", (w, s1, s1)),
        ("enc2", (4 * w, s1, s1)),
        ("enc3", (8 * w, s3, s3)),
        ("enc4", (8 * w, s4, s4)),
        ("enc5", (16 * w, s4, s4)),
        ("enc6", (8 * w, s4, s4)),
        ("dec6", (8 * w + 8 * w, s4, s4)),
        ("dec5", (8 * w + 8 * w, s3, s3)),
        ("dec4", (4 * w + 4 * w, s1, s1)),
        ("dec3", (4 * w + 4 * w, s1, s1)),
        ("dec2", (4 * w + w, s1, s1)),
        ("dec1", (2 * w + cfg.input_channels, n, n)),
        ("output", (cfg.output_channels, n, n)),
    ]


class ShapeContractError(RuntimeError):
    """Raised when a built network cannot reproduce its stage shape table."""


class Bottleneck(nn.Module):
    """1x1 / 3x3 / 1x1 residual block with identity shortcut."""

    expansion = 4

    def __init__(self, in_ch: int, planes: int, stride: int = 1, dilation: int = 1):
        super().__init__()
        out_ch = planes * self.expansion
        self.conv1 = nn.Conv2d(in_ch, planes, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(
            planes, planes, 3, stride=stride, padding=dilation, dilation=dilation, bias=False
        )
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv3 = nn.Conv2d(planes, out_ch, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + self.shortcut(x))


def _res_layer(in_ch, planes, blocks, stride=1, dilations=None):
    dils = list(dilations or [1]) or [1]
    layers = [Bottleneck(in_ch, planes, stride=stride, dilation=dils[0])]
    for i in range(1, blocks):
        layers.append(Bottleneck(planes * Bottleneck.expansion, planes, dilation=dils[i % len(dils)]))
    return nn.Sequential(*layers)


def _upsample_spec(src: int, dst: int) -> tuple[int, int, int]:
    """(kernel, stride, padding) for a transposed conv mapping src -> dst."""
    if src < 2 or dst <= src:
        raise ShapeContractError(f"cannot upsample {src} -> {dst}")
    stride = max(1, (dst - 1) // (src - 1))
    q = dst - (src - 1) * stride
    if q < 0:
        raise ShapeContractError(f"cannot upsample {src} -> {dst}")
    return q + 2, stride, 1


class _DecoderUp(nn.Module):
    def __init__(self, in_ch, out_ch, src, dst):
        super().__init__()
        k, s, p = _upsample_spec(src, dst)
        self.up = nn.ConvTranspose2d(in_ch, out_ch, k, stride=s, padding=p, bias=False)
        self.bn = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.relu(self.bn(self.up(x)))


def _conv_bn_relu(in_ch, out_ch, k=3):
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, k, padding=k // 2, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class PMNet(nn.Module):
    def __init__(self, cfg: PmnetConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.base_width
        blocks = cfg.reslayer_block_counts
        s3_stride = 2 if cfg.output_stride == 8 else 4

        self.stem = nn.Sequential(
            nn.Conv2d(cfg.input_channels, w, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(w),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1, ceil_mode=True),
        )
        self.layer1 = _res_layer(w, w, blocks[0])
        self.layer2 = _res_layer(4 * w, 2 * w, blocks[1], stride=s3_stride)
        self.layer3 = _res_layer(8 * w, 2 * w, blocks[2], stride=2)
        self.layer4 = _res_layer(8 * w, 4 * w, blocks[3], dilations=cfg.atrous_rates)

        # bottleneck head: local features plus a pooled global-context branch
        self.neck_conv = _conv_bn_relu(16 * w, 8 * w)
        self.neck_pool = nn.AdaptiveAvgPool2d(1)
        self.neck_ctx = nn.Conv2d(8 * w, 8 * w, 1)

        sizes = dict(expected_trace(cfg))
        s1, s3, s4 = sizes["enc1"][1], sizes["enc3"][1], sizes["enc4"][1]
        self.dec6 = _conv_bn_relu(8 * w, 8 * w)
        self.dec5 = _DecoderUp(16 * w, 8 * w, s4, s3)
        self.dec4 = _DecoderUp(16 * w, 4 * w, s3, s1)
        self.dec3 = _conv_bn_relu(8 * w, 4 * w)
        self.dec2 = _conv_bn_relu(8 * w, 4 * w)
        self.dec1 = _conv_bn_relu(5 * w, 2 * w)
        self.head = nn.Conv2d(2 * w + cfg.input_channels, cfg.output_channels, 1)

    def _stages(self, x):
        e1 = self.stem(x)
        e2 = self.layer1(e1)
        e3 = self.layer2(e2)
        e4 = self.layer3(e3)
        e5 = self.layer4(e4)
        feat = self.neck_conv(e5)
        ctx = F.relu(self.neck_ctx(self.neck_pool(feat)))
        e6 = feat + ctx.expand_as(feat)

        d6 = torch.cat([self.dec6(e6), e4], dim=1)
        d5 = torch.cat([self.dec5(d6), e3], dim=1)
        d4 = torch.cat([self.dec4(d5), e2], dim=1)
        d3 = torch.cat([self.dec3(d4), e2], dim=1)
        d2 = torch.cat([self.dec2(d3), e1], dim=1)
        up = F.interpolate(
            self.dec1(d2), size=x.shape[-2:], mode="bilinear", align_corners=False
        )
        d1 = torch.cat([up, x], dim=1)
        out = F.hardsigmoid(self.head(d1))
        return out, [
            ("input", x),
            ("enc1", e1),
            ("enc2", e2),
            ("enc3", e3),
            ("enc4", e4),
            ("enc5", e5),
            ("enc6", e6),
            ("dec6", d6),
            ("dec5", d5),
            ("dec4", d4),
            ("dec3", d3),
            ("dec2", d2),
            ("dec1", d1),
            ("output", out),
        ]

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.cfg.input_channels:
            raise ValueError(f"expected (B,{self.cfg.input_channels},H,W) input, got {tuple(x.shape)}")
        out, _ = self._stages(x)
        return out

    @torch.no_grad()
    def forward_trace(self, x=None):
        """Shape trace of every stage for a single input."""
        if x is None:
            x = torch.zeros(1, self.cfg.input_channels, self.cfg.input_size, self.cfg.input_size)
        was_training = self.training
        self.eval()
        _, stages = self._stages(x)
        if was_training:
            self.train()
        return [(name, tuple(t.shape[1:])) for name, t in stages]

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_pmnet(cfg: PmnetConfig | None = None, seed: int | None = None) -> PMNet:
    """Construct a PMNet and verify it honors the stage shape contract."""
    cfg = cfg or PmnetConfig()
    if seed is not None:
        torch.manual_seed(seed)
    model = PMNet(cfg)
    trace = model.forward_trace()
    expected = expected_trace(cfg)
    mismatches = [
        f"  {name}: built {got} != expected {want}"
        for (name, got), (_, want) in zip(trace, expected)
        if got != want
    ]
    if mismatches:
        report = "\n".join(
            ["stage shape contract violated:"]
            + mismatches
            + ["full trace:"]
            + [f"  {n}: {s}" for n, s in trace]
        )
        raise ShapeContractError(report)
    return model


CHECKPOINT_FORMAT = "pmnet-checkpoint-v1"


def save_checkpoint(model: PMNet, path, meta: dict | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.cfg),
        "state_dict": model.state_dict(),
        "meta": meta or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[PMNet, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unrecognized checkpoint format in {path}")
    raw = dict(payload["config"])
    raw["atrous_rates"] = tuple(raw["atrous_rates"])
    raw["reslayer_block_counts"] = tuple(raw["reslayer_block_counts"])
    cfg = PmnetConfig(**raw)
    model = PMNet(cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload["meta"]


def checkpoint_config(path) -> PmnetConfig:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    raw = dict(payload["config"])
    raw["atrous_rates"] = tuple(raw["atrous_rates"])
    raw["reslayer_block_counts"] = tuple(raw["reslayer_block_counts"])
    return PmnetConfig(**raw)
