"""
Desk-scale stand-in for a ViT-encoder segmentation model.

Every module that matters for tuning plans carries `sac_tags`; the tags of a
parameter are the union of the tags on the modules along its path (see
selection.describe_model).
"""

import os
import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .common import ConfigurationError, data_file, load_json
from .primitives import NORM_KINDS, AffineNorm

logger = logging.getLogger(__name__)

# dark-line detectors of the last decoder stage fire above this many normalized units
DETAIL_THRESHOLD = 1.2
CONTEXT_HEAD_SCALE = 0.1


def tag(module: nn.Module, *tags: str) -> nn.Module:
    """Attach selection tags to a module (merged with any existing ones)."""
    module.sac_tags = frozenset(getattr(module, "sac_tags", frozenset()) | set(tags))
    return module


@dataclass
class ToySegmenterSpec:
    input_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: int = 4
    decoder_channels: Tuple[int, ...] = (32, 16)
    decoder_norms: Tuple[str, ...] = ("group", "batch")
    decoder_groups: int = 4
    encoder_norm: str = "layer"
    in_channels: int = 3

    def __post_init__(self):
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        self.decoder_norms = tuple(self.decoder_norms)

    def validate(self):
        problems = []
        if min(self.input_size, self.patch_size, self.embed_dim, self.depth, self.num_heads, self.mlp_ratio) < 1:
            problems.append("sizes, depth, heads and mlp_ratio must be positive")
        elif self.input_size % self.patch_size:
            problems.append(f"input_size {self.input_size} is not a multiple of patch_size {self.patch_size}")
        if self.embed_dim % max(self.num_heads, 1):
            problems.append(f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")
        if not self.decoder_channels or min(self.decoder_channels) < 1:
            problems.append("decoder_channels must list at least one positive width")
        if len(self.decoder_norms) != len(self.decoder_channels):
            problems.append("decoder_norms needs one entry per decoder stage")
        for kind in (self.encoder_norm,) + self.decoder_norms:
            if kind not in NORM_KINDS:
                problems.append(f"unknown norm kind '{kind}'")
        for width, kind in zip(self.decoder_channels, self.decoder_norms):
            if kind == "group" and width % max(self.decoder_groups, 1):
                problems.append(f"decoder width {width} is not divisible by {self.decoder_groups} groups")
        if problems:
            raise ConfigurationError("Invalid toy segmenter spec: " + "; ".join(problems))
        return self

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["decoder_channels"] = list(self.decoder_channels)
        d["decoder_norms"] = list(self.decoder_norms)
        return d

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ToySegmenterSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"Unknown toy segmenter fields: {sorted(unknown)}")
        return cls(**data).validate()

    @classmethod
    def load(cls, path: str) -> "ToySegmenterSpec":
        if not os.path.exists(path) and os.path.exists(data_file(path + ".json")):
            path = data_file(path + ".json")
        return cls.from_dict(load_json(path))


# --- Encoder ---

class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = tag(nn.Linear(dim, dim * 3), "attention-qkv")
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, length, dim = x.shape
        qkv = self.qkv(x).reshape(n, length, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * (self.head_dim ** -0.5)
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(n, length, dim))


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = tag(nn.Linear(hidden, dim), "mlp-linear2")

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block: exactly two normalization layers."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: int, norm_kind: str, index: int):
        super().__init__()
        self.norm1 = AffineNorm(dim, kind=norm_kind)
        self.attn = Attention(dim, num_heads)
        self.norm2 = AffineNorm(dim, kind=norm_kind)
        self.mlp = Mlp(dim, dim * mlp_ratio)
        tag(self, f"block:{index}")

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class Encoder(nn.Module):
    def __init__(self, spec: ToySegmenterSpec):
        super().__init__()
        grid = spec.input_size // spec.patch_size
        self.patch_embed = nn.Conv2d(spec.in_channels, spec.embed_dim,
                                     kernel_size=spec.patch_size, stride=spec.patch_size)
        self.pos_embed = nn.Parameter(torch.randn(1, grid * grid, spec.embed_dim) * 0.02)
        self.blocks = nn.ModuleList([
            Block(spec.embed_dim, spec.num_heads, spec.mlp_ratio, spec.encoder_norm, i)
            for i in range(spec.depth)
        ])
        tag(self, "encoder")

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = self.patch_embed(images)
        n, dim, gh, gw = x.shape
        x = x.flatten(2).transpose(1, 2) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return x.transpose(1, 2).reshape(n, dim, gh, gw)


# --- Decoder ---

class DecoderStage(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, norm_kind: str, groups: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1)
        self.norm = AffineNorm(out_ch, kind=norm_kind, groups=groups if norm_kind == "group" else 1)
        self.act = nn.ReLU()

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class Decoder(nn.Module):
    """
    Progressive x2 upsampling; the last stage runs at input resolution and sees
    the input image through a skip connection.

    The last stage does not start from noise: half of its channels are dark-line
    detectors (a centre-surround filter over the image, blind to the encoder
    context) that the head reads with unit weight, and the head bias makes them
    fire above DETAIL_THRESHOLD normalized units. The remaining context channels
    keep their random init and enter the head at CONTEXT_HEAD_SCALE. Whether the
    detectors fire depends on the statistics and affine of the stage's norm.
    """

    def __init__(self, spec: ToySegmenterSpec):
        super().__init__()
        stages: List[nn.Module] = []
        in_ch = spec.embed_dim
        last = len(spec.decoder_channels) - 1
        for i, (width, kind) in enumerate(zip(spec.decoder_channels, spec.decoder_norms)):
            skip = spec.in_channels if i == last else 0
            stages.append(DecoderStage(in_ch + skip, width, kind, spec.decoder_groups))
            context_ch = in_ch
            in_ch = width
        self.stages = nn.ModuleList(stages)
        self.head = nn.Conv2d(in_ch, 1, kernel_size=1)
        self._init_detail(context_ch, spec.in_channels)
        tag(self, "decoder")

    @torch.no_grad()
    def _init_detail(self, context_ch: int, image_ch: int):
        stage = self.stages[-1]
        n_detail = max(stage.conv.out_channels // 2, 1)
        kernel = torch.full((3, 3), 1.0 / 8)
        kernel[1, 1] = -1.0
        stage.conv.weight[:n_detail] = 0.0
        stage.conv.weight[:n_detail, context_ch:] = kernel / image_ch
        stage.conv.bias[:n_detail] = 0.0
        self.head.weight[0, n_detail:] *= CONTEXT_HEAD_SCALE
        self.head.weight[0, :n_detail] = 1.0
        self.head.bias.fill_(-DETAIL_THRESHOLD * n_detail)

    def forward(self, features: torch.Tensor, images: torch.Tensor) -> torch.Tensor:
        x = features
        last = len(self.stages) - 1
        for i, stage in enumerate(self.stages):
            if i == last:
                x = F.interpolate(x, size=images.shape[-2:], mode="bilinear", align_corners=False)
                x = torch.cat([x, images], dim=1)
            else:
                x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = stage(x)
        return self.head(x)


class ToySegmenter(nn.Module):
    """Maps (N, 3, H, W) images in [0, 1] to (N, H, W) crack probabilities."""

    def __init__(self, spec: ToySegmenterSpec):
        super().__init__()
        self.spec = spec.validate()
        self.encoder = Encoder(spec)
        self.decoder = Decoder(spec)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        logits = self.decoder(self.encoder(images), images)
        return torch.sigmoid(logits).squeeze(1)

    @torch.no_grad()
    def predict(self, image: np.ndarray) -> np.ndarray:
        """Probability map (H x W) for a single H x W x 3 image."""
        was_training = self.training
        self.eval()
        batch = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1).unsqueeze(0)
        prob = self(batch)[0].numpy()
        self.train(was_training)
        return prob


def build_toy_segmenter(spec: ToySegmenterSpec, seed: int = 0) -> ToySegmenter:
    """Construct a toy segmenter with parameters fully determined by (spec, seed)."""
    spec.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ToySegmenter(spec)
    n_params = sum(p.numel() for p in model.parameters())
    logger.info(f"Built toy segmenter: depth={spec.depth}, dim={spec.embed_dim}, {n_params:,} parameters")
    return model
