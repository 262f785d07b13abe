"""Toy frozen vision encoder standing in for a pretrained CLIP ViT.

Weights are drawn from a seeded normal distribution and registered as
frozen. The same weights encode the low-resolution global view and every
high-resolution slice.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import functional as F
from .errors import ConfigError, ContractError, ShapeError
from .geometry import (SliceLayout, downsample_pad, padding_mask, slice_image)
from .nn import Block, ParameterStore
from .tensor import Tensor, concat, no_grad

STEM = 0


def parse_layer(layer) -> int:
    if layer == "stem":
        return STEM
    return int(layer)


def layer_name(layer: int) -> str:
    return "stem" if layer == STEM else str(layer)


@dataclass
class BackboneConfig:
    patch: int = 16
    dim: int = 768
    heads: int = 12
    depth: int = 12
    tap_layers: tuple = ("stem", 3, 6, 9, 12)
    cls_tap: int = 9
    native_window: int = 320
    embed_dim: int = 512
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        self.tap_layers = tuple(parse_layer(t) for t in self.tap_layers)
        if self.dim % self.heads:
            raise ConfigError(f"backbone dim {self.dim} not divisible by {self.heads} heads")
        if not 1 <= self.cls_tap <= self.depth:
            raise ConfigError(f"cls_tap {self.cls_tap} outside 1..{self.depth}")
        bad = [t for t in self.tap_layers if not 0 <= t <= self.depth]
        if bad:
            raise ConfigError(f"tap layers {bad} outside stem..{self.depth}")
        if self.native_window % self.patch:
            raise ConfigError(f"native window {self.native_window} not divisible by patch {self.patch}")

    @property
    def native_grid(self) -> int:
        return self.native_window // self.patch


@dataclass
class MultiResFeatures:
    """Backbone outputs for one image: global and slice tokens per tap layer."""

    global_tokens: dict[int, Tensor]
    slice_tokens: dict[int, list[Tensor]]
    cls: Tensor
    layout: Optional[SliceLayout]
    global_hw: tuple[int, int]
    pad_mask: np.ndarray = field(repr=False, default=None)

    @property
    def single_resolution(self) -> bool:
        return self.layout is None


class ToyCLIPVisual:
    """Seeded-random ViT: patch embedding, CLS token, pre-norm blocks."""

    def __init__(self, cfg: BackboneConfig, store: Optional[ParameterStore] = None):
        self.cfg = cfg
        self.store = store if store is not None else ParameterStore()
        rng = np.random.default_rng(cfg.seed)
        s = self.store.scoped("backbone")
        d, std = cfg.dim, cfg.init_std
        self.patch_w = s.add("patch_embed.weight", rng.normal(0, std, (3 * cfg.patch ** 2, d)), True)
        self.patch_b = s.add("patch_embed.bias", np.zeros(d), True)
        self.cls_token = s.add("cls_token", rng.normal(0, std, d), True)
        self.pos_embed = s.add("pos_embed", rng.normal(0, std, (cfg.native_grid ** 2 + 1, d)), True)
        self.blocks = [Block(s, f"blocks.{i + 1}", d, cfg.heads, rng, std=std, frozen=True)
                       for i in range(cfg.depth)]
        self.proj = s.add("proj", rng.normal(0, std, (d, cfg.embed_dim)), True)

    # -- helpers -------------------------------------------------------
    def _positional(self, gh: int, gw: int) -> np.ndarray:
        n = self.cfg.native_grid
        pos = self.pos_embed.data
        grid = pos[1:]
        if (gh, gw) != (n, n):
            chw = grid.reshape(n, n, -1).transpose(2, 0, 1)
            ry, rx = F.bilinear_matrix(n, gh, pos.dtype), F.bilinear_matrix(n, gw, pos.dtype)
            grid = np.einsum("oh,chw,pw->opc", ry, chw, rx).reshape(gh * gw, -1)
        return np.concatenate([pos[:1], grid], axis=0)

    def patchify(self, img: np.ndarray) -> np.ndarray:
        _, h, w = img.shape
        p = self.cfg.patch
        if h % p or w % p:
            raise ShapeError(f"view {h}x{w} not divisible by patch {p}")
        x = img.reshape(3, h // p, p, w // p, p).transpose(1, 3, 0, 2, 4)
        return x.reshape((h // p) * (w // p), 3 * p * p)

    def encode_view(self, img: np.ndarray, taps) -> tuple[dict[int, Tensor], Tensor]:
        """Run one view; return tokens (CLS excluded) at ``taps`` and CLS at cls_tap."""
        cfg = self.cfg
        taps = set(taps)
        _, h, w = img.shape
        gh, gw = h // cfg.patch, w // cfg.patch
        patches = Tensor(self.patchify(img), dtype=self.patch_w.dtype)
        tokens = F.linear(patches, self.patch_w, self.patch_b)
        pos = Tensor(self._positional(gh, gw), dtype=tokens.dtype)
        x = concat([self.cls_token.reshape(1, cfg.dim), tokens], axis=0) + pos
        out: dict[int, Tensor] = {}
        cls = None
        if STEM in taps:
            out[STEM] = x[1:]
        last = max(taps | {cfg.cls_tap})
        for i, block in enumerate(self.blocks[:last], start=1):
            x = block(x)
            if i in taps:
                out[i] = x[1:]
            if i == cfg.cls_tap:
                cls = x[:1]
        return out, cls

    def encode_multires(self, img: np.ndarray, layout: Optional[SliceLayout],
                        extra_taps=()) -> MultiResFeatures:
        """Encode the downsampled global view and every slice with shared weights.

        ``layout=None`` selects single-resolution mode: only the global view.
        """
        cfg = self.cfg
        taps = set(cfg.tap_layers) | {cfg.cls_tap} | set(extra_taps)
        native = (cfg.native_window, cfg.native_window)
        with no_grad():
            glob = downsample_pad(img, native)
            g_tokens, cls = self.encode_view(glob, taps)
            s_tokens: dict[int, list[Tensor]] = {t: [] for t in taps}
            if layout is not None:
                if layout.patch != cfg.patch:
                    raise ShapeError(f"layout patch {layout.patch} != backbone patch {cfg.patch}")
                for view in slice_image(img, layout):
                    toks, _ = self.encode_view(view, taps)  # per-slice CLS is discarded
                    for t in taps:
                        s_tokens[t].append(toks[t])
        pad = padding_mask(img.shape[1:], native, cfg.patch)
        return MultiResFeatures(g_tokens, s_tokens, cls, layout, native, pad)

    def frozen_block_weights(self, layer: int) -> dict[str, Tensor]:
        """Frozen projections of a block after the CLS tap, for proposal cross-attention."""
        if not self.cfg.cls_tap < layer <= self.cfg.depth:
            raise ContractError(f"layer {layer} is not after cls_tap {self.cfg.cls_tap} "
                                f"(valid: {self.cfg.cls_tap + 1}..{self.cfg.depth})")
        return self.blocks[layer - 1].weights()

    def proposal_blocks(self) -> list[Block]:
        return self.blocks[self.cfg.cls_tap:]

    def visual_projection(self, x) -> Tensor:
        """Bias-free linear map into the shared vision-language space."""
        return F.linear(x, self.proj)
