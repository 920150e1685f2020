"""Per-modality encoders, classification heads, and freezing rules.

Two encoder families map a ``[batch, 2 * channels, intervals, bins]``
spectrogram tensor to a fixed-width embedding: a convolutional-recurrent
branch (per-interval convolutions over frequency, then a GRU across
intervals) and a windowed self-attention branch (patch embedding, shifted
non-overlapping window attention, patch merging).  A multimodal encoder
holds one branch per modality; embeddings from all branches share the same
width and the same shared/private coordinate split.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .datamodel import (
    EmbeddingBundle,
    EncoderKind,
    HeadKind,
    ModalitySpec,
    Stage,
)
from .errors import DimMismatch, NonFinite
from .seeding import derive_seed


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture hyperparameters shared by all modality branches."""

    kind: EncoderKind = EncoderKind.DEEPSENSE
    embedding_dim: int = 128
    shared_dim: int = 64
    param_seed: int = 0
    # convolutional-recurrent branch
    conv_channels: tuple[int, int] = (16, 32)
    conv_kernels: tuple[int, int] = (8, 4)
    conv_strides: tuple[int, int] = (8, 4)
    rnn_input_dim: int = 64
    rnn_hidden: int = 128
    rnn_layers: int = 2
    # windowed-attention branch
    swin_embed_dim: int = 32
    swin_depths: tuple[int, ...] = (2, 2)
    swin_heads: tuple[int, ...] = (2, 4)
    swin_window: int = 5
    swin_target_grid: int = 10
    swin_mlp_ratio: float = 2.0
    # supervised fusion head
    fusion_hidden: int = 128

    def __post_init__(self) -> None:
        if not 0 < self.shared_dim < self.embedding_dim:
            raise DimMismatch(
                f"shared_dim {self.shared_dim} not in (0, {self.embedding_dim})"
            )
        if len(self.swin_depths) != len(self.swin_heads):
            raise ValueError("swin_depths and swin_heads must have equal length")


def _conv_out(width: int, kernel: int, stride: int) -> int:
    return (width - kernel) // stride + 1


class DeepSenseBranch(nn.Module):
    """Per-interval frequency convolutions followed by a GRU over intervals."""

    def __init__(self, spec: ModalitySpec, cfg: EncoderConfig) -> None:
        super().__init__()
        planes = 2 * spec.channels
        width = spec.spectral_bins
        layers: list[nn.Module] = []
        in_ch = planes
        for out_ch, k, s in zip(cfg.conv_channels, cfg.conv_kernels, cfg.conv_strides):
            k = min(k, width)
            s = min(s, k)
            layers += [nn.Conv2d(in_ch, out_ch, kernel_size=(1, k), stride=(1, s)), nn.ReLU()]
            width = _conv_out(width, k, s)
            in_ch = out_ch
        self.conv = nn.Sequential(*layers)
        self.flat_dim = in_ch * width
        self.interval_proj = nn.Sequential(
            nn.Linear(self.flat_dim, cfg.rnn_input_dim), nn.ReLU()
        )
        self.rnn = nn.GRU(
            cfg.rnn_input_dim,
            cfg.rnn_hidden,
            num_layers=cfg.rnn_layers,
            batch_first=True,
        )
        self.out_proj = nn.Linear(cfg.rnn_hidden, cfg.embedding_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: [B, planes, intervals, bins]
        b, _, intervals, _ = x.shape
        h = self.conv(x)  # [B, ch, intervals, width]
        h = h.permute(0, 2, 1, 3).reshape(b, intervals, self.flat_dim)
        h = self.interval_proj(h)  # [B, intervals, rnn_in]
        h, _ = self.rnn(h)  # [B, intervals, hidden]
        return self.out_proj(h.mean(dim=1))  # [B, D]


def window_partition(x: torch.Tensor, wh: int, ww: int) -> torch.Tensor:
    """[B, H, W, C] -> [B * num_windows, wh * ww, C], row-major windows."""
    b, h, w, c = x.shape
    x = x.view(b, h // wh, wh, w // ww, ww, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, wh * ww, c)


def window_reverse(windows: torch.Tensor, wh: int, ww: int, h: int, w: int) -> torch.Tensor:
    """Inverse of :func:`window_partition` back to [B, H, W, C]."""
    b = windows.shape[0] // ((h // wh) * (w // ww))
    x = windows.view(b, h // wh, w // ww, wh, ww, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, -1)


class WindowAttention(nn.Module):
    """Multi-head self-attention inside one window with relative bias."""

    def __init__(self, dim: int, window: tuple[int, int], num_heads: int) -> None:
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        wh, ww = window
        self.bias_table = nn.Parameter(
            torch.zeros((2 * wh - 1) * (2 * ww - 1), num_heads)
        )
        coords = torch.stack(
            torch.meshgrid(torch.arange(wh), torch.arange(ww), indexing="ij")
        ).flatten(1)
        rel = coords[:, :, None] - coords[:, None, :]
        rel = rel.permute(1, 2, 0).contiguous()
        rel[:, :, 0] += wh - 1
        rel[:, :, 1] += ww - 1
        rel[:, :, 0] *= 2 * ww - 1
        self.register_buffer("bias_index", rel.sum(-1), persistent=False)
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        nn.init.trunc_normal_(self.bias_table, std=0.02)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
        bw, n, c = x.shape
        qkv = (
            self.qkv(x)
            .reshape(bw, n, 3, self.num_heads, c // self.num_heads)
            .permute(2, 0, 3, 1, 4)
        )
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)  # [bw, heads, n, n]
        bias = self.bias_table[self.bias_index.view(-1)].view(n, n, -1)
        attn = attn + bias.permute(2, 0, 1).unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(bw // nw, nw, self.num_heads, n, n) + mask.unsqueeze(1).unsqueeze(0)
            attn = attn.view(bw, self.num_heads, n, n)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bw, n, c)
        return self.proj(out)


class SwinBlock(nn.Module):
    """One (optionally shifted) window-attention block with an MLP."""

    def __init__(
        self,
        dim: int,
        grid: tuple[int, int],
        num_heads: int,
        window: int,
        shift: bool,
        mlp_ratio: float,
    ) -> None:
        super().__init__()
        h, w = grid
        self.grid = grid
        self.wh = min(window, h)
        self.ww = min(window, w)
        self.sh = self.wh // 2 if shift and h > self.wh else 0
        self.sw = self.ww // 2 if shift and w > self.ww else 0
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, (self.wh, self.ww), num_heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        self.register_buffer("attn_mask", self._build_mask(), persistent=False)

    def _padded(self) -> tuple[int, int]:
        h, w = self.grid
        hp = int(math.ceil(h / self.wh)) * self.wh
        wp = int(math.ceil(w / self.ww)) * self.ww
        return hp, wp

    def _build_mask(self) -> torch.Tensor | None:
        """Label every padded-grid cell so two cells in one window may
        attend iff their original contents were spatially adjacent (no
        cyclic wrap between them) and neither cell holds padding.

        Along each axis a cell at rolled position ``p`` carries content
        ``(p + shift) mod padded``; the wrap discontinuity sits at
        ``padded - shift`` and padding is wherever the content index lands
        past the true extent.
        """
        h, w = self.grid
        hp, wp = self._padded()
        if self.sh == 0 and self.sw == 0 and hp == h and wp == w:
            return None
        ph = torch.arange(hp)
        pw = torch.arange(wp)
        wrap_h = (ph >= hp - self.sh).long() if self.sh else torch.zeros(hp, dtype=torch.long)
        wrap_w = (pw >= wp - self.sw).long() if self.sw else torch.zeros(wp, dtype=torch.long)
        pad_h = ((ph + self.sh) % hp >= h).long()
        pad_w = ((pw + self.sw) % wp >= w).long()
        ids = (wrap_h + 2 * pad_h)[:, None] * 16 + (wrap_w + 2 * pad_w)[None, :]
        ids = ids[None, :, :, None].float()
        windows = window_partition(ids, self.wh, self.ww).squeeze(-1)  # [nw, n]
        mask = windows.unsqueeze(1) - windows.unsqueeze(2)
        return mask.masked_fill(mask != 0, -100.0).masked_fill(mask == 0, 0.0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: [B, H*W, C]
        b, _, c = x.shape
        h, w = self.grid
        hp, wp = self._padded()
        shortcut = x
        x = self.norm1(x).view(b, h, w, c)
        if hp != h or wp != w:
            x = F.pad(x, (0, 0, 0, wp - w, 0, hp - h))
        if self.sh or self.sw:
            x = torch.roll(x, shifts=(-self.sh, -self.sw), dims=(1, 2))
        windows = window_partition(x, self.wh, self.ww)
        windows = self.attn(windows, self.attn_mask)
        x = window_reverse(windows, self.wh, self.ww, hp, wp)
        if self.sh or self.sw:
            x = torch.roll(x, shifts=(self.sh, self.sw), dims=(1, 2))
        x = x[:, :h, :w, :].reshape(b, h * w, c)
        x = shortcut + x
        return x + self.mlp(self.norm2(x))


class PatchMerging(nn.Module):
    """Concatenate 2x2 neighborhoods and project to double width."""

    def __init__(self, dim: int, grid: tuple[int, int]) -> None:
        super().__init__()
        self.grid = grid
        self.norm = nn.LayerNorm(4 * dim)
        self.reduce = nn.Linear(4 * dim, 2 * dim, bias=False)

    @property
    def out_grid(self) -> tuple[int, int]:
        h, w = self.grid
        return (h + 1) // 2, (w + 1) // 2

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, _, c = x.shape
        h, w = self.grid
        x = x.view(b, h, w, c)
        if h % 2 or w % 2:
            x = F.pad(x, (0, 0, 0, w % 2, 0, h % 2))
        quads = torch.cat(
            [x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]],
            dim=-1,
        )
        quads = quads.view(b, -1, 4 * c)
        return self.reduce(self.norm(quads))


class SwinBranch(nn.Module):
    """Patch embedding, window-attention stages, pooled projection."""

    def __init__(self, spec: ModalitySpec, cfg: EncoderConfig) -> None:
        super().__init__()
        planes = 2 * spec.channels
        patch_w = max(1, spec.spectral_bins // cfg.swin_target_grid)
        self.patch_embed = nn.Conv2d(
            planes, cfg.swin_embed_dim, kernel_size=(1, patch_w), stride=(1, patch_w)
        )
        grid = (spec.num_intervals, _conv_out(spec.spectral_bins, patch_w, patch_w))
        dim = cfg.swin_embed_dim
        stages: list[nn.Module] = []
        for s, (depth, heads) in enumerate(zip(cfg.swin_depths, cfg.swin_heads)):
            for i in range(depth):
                stages.append(
                    SwinBlock(dim, grid, heads, cfg.swin_window, shift=bool(i % 2), mlp_ratio=cfg.swin_mlp_ratio)
                )
            if s + 1 < len(cfg.swin_depths):
                merge = PatchMerging(dim, grid)
                stages.append(merge)
                grid = merge.out_grid
                dim *= 2
        self.stages = nn.Sequential(*stages)
        self.norm = nn.LayerNorm(dim)
        self.out_proj = nn.Linear(dim, cfg.embedding_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.patch_embed(x)  # [B, dim, I, W']
        h = h.flatten(2).transpose(1, 2)  # [B, tokens, dim]
        h = self.stages(h)
        return self.out_proj(self.norm(h).mean(dim=1))


class MultimodalEncoder(nn.Module):
    """One branch per modality; all branches share embedding geometry."""

    def __init__(self, cfg: EncoderConfig, specs: Mapping[str, ModalitySpec]) -> None:
        super().__init__()
        self.cfg = cfg
        branch = {EncoderKind.DEEPSENSE: DeepSenseBranch, EncoderKind.SWIN: SwinBranch}[
            EncoderKind(cfg.kind)
        ]
        self.branches = nn.ModuleDict(
            {name: branch(spec, cfg) for name, spec in sorted(specs.items())}
        )

    def forward(self, inputs: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
        out = {}
        for name in sorted(inputs):
            emb = self.branches[name](inputs[name])
            if not bool(torch.isfinite(emb).all()):
                raise NonFinite(f"{name}: encoder produced NaN or Inf activations")
            out[name] = emb
        return out

    def encode_bundle(self, inputs: Mapping[str, torch.Tensor]) -> EmbeddingBundle:
        return EmbeddingBundle(self.forward(inputs), shared_dim=self.cfg.shared_dim)

    @property
    def feature_dim(self) -> int:
        return self.cfg.embedding_dim * len(self.branches)


class LinearProbeHead(nn.Module):
    """A single affine readout over concatenated modality embeddings."""

    def __init__(self, in_dim: int, num_classes: int) -> None:
        super().__init__()
        self.linear = nn.Linear(in_dim, num_classes)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.linear(features)


class FusionHead(nn.Module):
    """Hidden fusion layer over concatenated embeddings, then a readout."""

    def __init__(self, in_dim: int, hidden: int, num_classes: int) -> None:
        super().__init__()
        self.fuse = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU())
        self.linear = nn.Linear(hidden, num_classes)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.linear(self.fuse(features))


class SensingClassifier(nn.Module):
    """Encoder plus head; the unit the training stages operate on."""

    def __init__(
        self,
        encoder: MultimodalEncoder,
        head_kind: HeadKind,
        num_classes: int,
    ) -> None:
        super().__init__()
        self.encoder = encoder
        self.head_kind = HeadKind(head_kind)
        self.num_classes = num_classes
        in_dim = encoder.feature_dim
        if self.head_kind is HeadKind.LINEAR_PROBE:
            self.head: nn.Module = LinearProbeHead(in_dim, num_classes)
        else:
            self.head = FusionHead(in_dim, encoder.cfg.fusion_hidden, num_classes)

    def features(self, inputs: Mapping[str, torch.Tensor]) -> torch.Tensor:
        emb = self.encoder(inputs)
        return torch.cat([emb[m] for m in sorted(emb)], dim=-1)

    def forward(self, inputs: Mapping[str, torch.Tensor]) -> torch.Tensor:
        return self.head(self.features(inputs))


def build_encoder(cfg: EncoderConfig, specs: Mapping[str, ModalitySpec]) -> MultimodalEncoder:
    """Construct an encoder with weights seeded from ``cfg.param_seed``."""
    torch.manual_seed(derive_seed(cfg.param_seed, "encoder", EncoderKind(cfg.kind).value))
    return MultimodalEncoder(cfg, specs)


def build_classifier(
    cfg: EncoderConfig,
    specs: Mapping[str, ModalitySpec],
    num_classes: int,
    head_kind: HeadKind,
    *,
    encoder: MultimodalEncoder | None = None,
) -> SensingClassifier:
    """Construct a classifier; reuse ``encoder`` if given (probe setups)."""
    if encoder is None:
        encoder = build_encoder(cfg, specs)
    torch.manual_seed(
        derive_seed(cfg.param_seed, "head", HeadKind(head_kind).value, num_classes)
    )
    return SensingClassifier(encoder, head_kind, num_classes)


def reinit_final_layer(model: SensingClassifier, seed: int) -> None:
    """Re-draw the final readout weights (frozen-baseline fine-tuning)."""
    torch.manual_seed(derive_seed(seed, "reinit-final"))
    layer = model.head.linear
    nn.init.kaiming_uniform_(layer.weight, a=math.sqrt(5))
    bound = 1 / math.sqrt(layer.weight.shape[1])
    nn.init.uniform_(layer.bias, -bound, bound)


def set_trainable(model: SensingClassifier, stage: Stage) -> None:
    """Apply the stage's freezing rule in place.

    Frozen modules are also switched to eval mode so nothing inside them
    updates during fitting.
    """
    stage = Stage(stage)
    for p in model.parameters():
        p.requires_grad = True
    if stage in (Stage.FINETUNE, Stage.SUPERVISED_FINETUNE):
        for p in model.encoder.parameters():
            p.requires_grad = False
        model.encoder.eval()
    if stage is Stage.SUPERVISED_FINETUNE:
        for name, p in model.head.named_parameters():
            if not name.startswith("linear."):
                p.requires_grad = False


def count_trainable_params(model: SensingClassifier, stage: Stage) -> int:
    """Parameter count that the stage's freezing rule leaves trainable."""
    stage = Stage(stage)
    encoder_ids = {id(p) for p in model.encoder.parameters()}
    final_ids = (
        {id(p) for p in model.head.linear.parameters()}
        if hasattr(model.head, "linear")
        else set()
    )
    total = 0
    for p in model.parameters():
        if stage in (Stage.FINETUNE, Stage.SUPERVISED_FINETUNE) and id(p) in encoder_ids:
            continue
        if stage is Stage.SUPERVISED_FINETUNE and id(p) not in final_ids and id(p) not in encoder_ids:
            continue
        total += p.numel()
    return total
