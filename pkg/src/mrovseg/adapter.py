"""Trainable Multi-Res Adapter.

Learnable queries are joined with the stem slice tokens and run through
plain ViT blocks. Before selected blocks a Multi-Res Fusion (MRF) feature is
added to the visual token positions; each MRF restores the slice tokens of
one backbone layer to a single grid, filters them with a depthwise-separable
convolution and blends them with the global view through a sigmoid scale
attention.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import functional as F
from .backbone import MultiResFeatures, parse_layer
from .errors import ConfigError, ShapeError
from .geometry import SliceLayout, grid_to_stream, restore_grid, restore_stream
from .nn import MLP, Block, Linear
from .tensor import Tensor, concat, zeros


@dataclass
class AdapterConfig:
    blocks: int = 6
    heads: int = 12
    dim: int = 768
    queries: int = 100
    fusion_layers: tuple = ("stem", 3, 6, 9, 12)
    fusion_enabled: bool = True
    fusion_at_high_res: bool = False
    init_std: float = 0.02

    def __post_init__(self):
        self.fusion_layers = tuple(parse_layer(t) for t in self.fusion_layers)
        if self.dim % self.heads:
            raise ConfigError(f"adapter dim {self.dim} not divisible by {self.heads} heads")
        if len(self.fusion_layers) > self.blocks:
            raise ConfigError(f"{len(self.fusion_layers)} fusion layers but only "
                              f"{self.blocks} adapter blocks to inject into")
        if self.queries < 0:
            raise ConfigError("query count must be non-negative")


def injection_schedule(n_fusion: int, n_blocks: int) -> list[int]:
    """0-based block index in front of which each fusion feature is added."""
    if n_fusion > n_blocks:
        raise ConfigError(f"cannot place {n_fusion} fusion layers in {n_blocks} blocks")
    return [(j * n_blocks) // n_fusion for j in range(n_fusion)]


@dataclass
class FusedFeature:
    F: Tensor        # [h, w, dim]
    a: Tensor        # scale attention in [0, 1], same grid as F


class MRFModule:
    """Multi-Res Fusion for one backbone layer."""

    def __init__(self, store, name: str, d_in: int, dim: int, rng: np.random.Generator,
                 at_high_res: bool = False):
        self.dim = dim
        self.at_high_res = at_high_res
        self.proj = Linear(store, f"{name}.proj", d_in, dim, rng)
        if d_in == dim:
            self.proj.weight.data[...] = np.eye(dim)
        # DConv: depthwise 3x3 + pointwise 1x1
        self.dw = store.add(f"{name}.dconv.depthwise", _dirac3(dim, rng))
        self.pw = store.add(f"{name}.dconv.pointwise", np.eye(dim) + rng.normal(0, 0.02, (dim, dim)))
        self.pw_b = store.add(f"{name}.dconv.bias", np.zeros(dim))
        # scale attention decoder f_A
        self.att_dw = store.add(f"{name}.scale_attn.depthwise", _dirac3(dim, rng))
        self.att_pw = store.add(f"{name}.scale_attn.pointwise", rng.normal(0, 0.02, (dim, dim)))
        self.att_b = store.add(f"{name}.scale_attn.bias", np.zeros(dim))

    def dconv(self, x_chw) -> Tensor:
        y = F.depthwise_conv2d(x_chw, self.dw, 1, 1)
        return F.pointwise_conv2d(y, self.pw) + self.pw_b.reshape(self.dim, 1, 1)

    def scale_logits(self, x_chw) -> Tensor:
        y = F.depthwise_conv2d(x_chw, self.att_dw, 1, 1)
        return F.pointwise_conv2d(y, self.att_pw) + self.att_b.reshape(self.dim, 1, 1)

    def __call__(self, slice_feats: list, global_feat, layout: Optional[SliceLayout],
                 global_hw: tuple[int, int], patch: int) -> FusedFeature:
        gh, gw = global_hw[0] // patch, global_hw[1] // patch
        if global_feat.shape[0] != gh * gw:
            raise ShapeError(f"global feature has {global_feat.shape[0]} tokens, expected {gh * gw}")
        low = F.grid_to_chw(self.proj(global_feat).reshape(gh, gw, self.dim))
        if layout is None:
            high = low
        else:
            high = F.grid_to_chw(restore_grid([self.proj(t) for t in slice_feats], layout))
        return self.fuse(high, low)

    def fuse(self, high, low) -> FusedFeature:
        """Blend a restored high-res ``[dim, H, W]`` grid with a low-res one."""
        _, hh, hw = high.shape
        _, lh, lw = low.shape
        if hh < lh or hw < lw:
            raise ShapeError(f"high-res grid {hh}x{hw} smaller than low-res {lh}x{lw}")
        detail = self.dconv(high)
        logits = self.scale_logits(high)
        if self.at_high_res:
            a = F.sigmoid(logits)
            ctx = F.resize_bilinear(low, hh, hw)
            fused = a * detail + (1.0 - a) * ctx
        else:
            a = F.sigmoid(F.adaptive_avg_pool2d(logits, lh, lw))
            fused = a * F.adaptive_avg_pool2d(detail, lh, lw) + (1.0 - a) * low
        return FusedFeature(F.chw_to_grid(fused), F.chw_to_grid(a))


def _dirac3(dim: int, rng: np.random.Generator) -> np.ndarray:
    k = rng.normal(0, 0.02, (dim, 3, 3))
    k[:, 1, 1] += 1.0
    return k


class MultiResAdapter:
    def __init__(self, cfg: AdapterConfig, backbone_dim: int, tokens_per_slice: int, store,
                 rng: np.random.Generator):
        self.cfg = cfg
        s = store.scoped("adapter")
        std = cfg.init_std
        self.query = s.add("query", rng.normal(0, std, (cfg.queries, cfg.dim))) if cfg.queries else None
        # shared by every slice; slice position is restored by the MRF modules
        self.pos = s.add("pos_embed", rng.normal(0, std, (tokens_per_slice, cfg.dim)))
        self.entry = Linear(s, "entry", backbone_dim, cfg.dim, rng)
        if backbone_dim == cfg.dim:
            self.entry.weight.data[...] = np.eye(cfg.dim)
        self.blocks = [Block(s, f"blocks.{i}", cfg.dim, cfg.heads, rng, std=std)
                       for i in range(cfg.blocks)]
        self.mrf = {l: MRFModule(s, f"mrf.{l}", backbone_dim, cfg.dim, rng, cfg.fusion_at_high_res)
                    for l in cfg.fusion_layers}
        self.schedule = injection_schedule(len(cfg.fusion_layers), cfg.blocks)
        self.query_mlp = MLP(s, "query_mlp", cfg.dim, cfg.dim, cfg.dim, rng) if cfg.queries else None

    def project_queries(self, q) -> Tensor:
        """Query features ``Q_f = MLP^Q(Q)``."""
        return self.query_mlp(q)

    def fused_features(self, feats: MultiResFeatures, patch: int) -> list[FusedFeature]:
        out = []
        for l in self.cfg.fusion_layers:
            if l not in feats.global_tokens:
                raise ConfigError(f"fusion layer {l} was not tapped from the backbone")
            if not self.cfg.fusion_enabled:
                out.append(self._disabled(feats, patch))
                continue
            out.append(self.mrf[l](feats.slice_tokens.get(l, []), feats.global_tokens[l],
                                   feats.layout, feats.global_hw, patch))
        return out

    def _disabled(self, feats: MultiResFeatures, patch: int) -> FusedFeature:
        """Ablation stand-in: F := 0 (and a := 0) at the size MRF would produce."""
        if self.cfg.fusion_at_high_res and feats.layout is not None:
            h, w = feats.layout.grid_hw
        else:
            h, w = feats.global_hw[0] // patch, feats.global_hw[1] // patch
        z = zeros((h, w, self.cfg.dim))
        return FusedFeature(z, z)

    def visual_stream(self, feats: MultiResFeatures) -> Tensor:
        """Entry-projected stem tokens (slices, or the global view) plus position."""
        toks = [feats.global_tokens[0]] if feats.layout is None else feats.slice_tokens[0]
        if toks[0].shape[0] != self.pos.shape[0]:
            raise ShapeError(f"adapter built for {self.pos.shape[0]} tokens per slice, "
                             f"got {toks[0].shape[0]}")
        if len(toks) == 1:
            return self.entry(toks[0]) + self.pos
        return self.entry(concat(toks, axis=0)) + _tile(self.pos, len(toks))

    def _injection(self, fused: FusedFeature, feats: MultiResFeatures, grid_hw) -> Tensor:
        f = fused.F
        if f.shape[:2] != tuple(grid_hw):
            f = F.chw_to_grid(F.resize_bilinear(F.grid_to_chw(f), *grid_hw))
        if feats.layout is None:
            return f.reshape(grid_hw[0] * grid_hw[1], self.cfg.dim)
        return grid_to_stream(f, feats.layout)

    def forward(self, feats: MultiResFeatures, patch: int):
        """Return ``(Q_f, fused features, H)``; ``H`` is ``[gh, gw, dim]``."""
        cfg = self.cfg
        fused = self.fused_features(feats, patch)
        vis = self.visual_stream(feats)
        if feats.layout is None:
            grid_hw = (feats.global_hw[0] // patch, feats.global_hw[1] // patch)
        else:
            grid_hw = feats.layout.grid_hw
        n = cfg.queries
        x = concat([self.query, vis], axis=0) if n else vis
        inject = {b: j for j, b in enumerate(self.schedule)}
        for b, block in enumerate(self.blocks):
            if b in inject:
                add = self._injection(fused[inject[b]], feats, grid_hw)
                x = concat([x[:n], x[n:] + add], axis=0) if n else x + add
            x = block(x)
        q_out = x[:n] if n else None
        v_out = x[n:] if n else x
        if feats.layout is None:
            H = v_out.reshape(grid_hw[0], grid_hw[1], cfg.dim)
        else:
            H = restore_stream(v_out, feats.layout)
        q_f = self.project_queries(q_out) if n else None
        return q_f, fused, H


def _tile(t: Tensor, reps: int) -> Tensor:
    return concat([t] * reps, axis=0)
