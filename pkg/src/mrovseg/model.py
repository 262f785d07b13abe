"""End-to-end open-vocabulary segmentation model."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import functional as F
from .adapter import AdapterConfig, FusedFeature, MultiResAdapter
from .backbone import BackboneConfig, MultiResFeatures, ToyCLIPVisual
from .classifier import (ClassifierConfig, DecoupledMasks, MaskClassifier, SegmentationOutput,
                         compose_segmentation, multigrained_masked_attention)
from .decoder import DecoderConfig, MaskDecoder
from .errors import ConfigError, ContractError
from .geometry import SliceLayout, check_image, plan_layout, restore_grid
from .nn import ParameterStore
from .tensor import Tensor, mac_scope, no_grad
from .text import TEMPLATES, HashTextEncoder


@dataclass
class ModelConfig:
    image_size: tuple = (640, 640)
    p: float = 0.5
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    mask_padding: bool = False
    condition_text: bool = True
    init_seed: int = 1
    text_seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        if len(self.image_size) != 2 or min(self.image_size) <= 0:
            raise ConfigError(f"image_size must be two positive ints, got {self.image_size}")
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"p must lie in [0, 1], got {self.p}")
        missing = set(self.adapter.fusion_layers) - set(self.backbone.tap_layers)
        if missing:
            raise ConfigError(f"fusion layers {sorted(missing)} are not backbone tap layers")
        if 0 not in self.backbone.tap_layers:
            raise ConfigError("backbone must tap the stem to feed the adapter")
        if self.backbone.cls_tap == self.backbone.depth:
            raise ConfigError("cls_tap must leave at least one block for masked attention")


@dataclass
class ModelOutput:
    mask_logits: Tensor          # [N, h, w]
    class_logits: Tensor         # [N, K + 1], last column = no-object
    q_f: Tensor
    fused: list[FusedFeature]
    H: Tensor
    masks: DecoupledMasks
    proposals: Tensor


def model_layout(cfg: ModelConfig) -> Optional[SliceLayout]:
    """Slice layout for ``cfg``; ``None`` (p = 0) means single-resolution mode."""
    return plan_layout(cfg.image_size, cfg.p, cfg.backbone.patch) if cfg.p > 0 else None


def low_grid(cfg: ModelConfig) -> tuple[int, int]:
    g = cfg.backbone.native_grid
    return g, g


def high_grid(cfg: ModelConfig, layout: Optional[SliceLayout]) -> tuple[int, int]:
    return layout.grid_hw if layout is not None else low_grid(cfg)


class MROVSeg:
    """Frozen toy VLM + Multi-Res Adapter + mask decoder + mask classifier."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.store = ParameterStore()
        self.backbone = ToyCLIPVisual(cfg.backbone, self.store)
        bcfg = cfg.backbone
        self.layout = model_layout(cfg)
        tps = self.layout.tokens_per_slice if self.layout else bcfg.native_grid ** 2
        rng = np.random.default_rng(cfg.init_seed)
        acfg = cfg.adapter
        self.adapter = MultiResAdapter(acfg, bcfg.dim, tps, self.store, rng)
        self.decoder = MaskDecoder(cfg.decoder, acfg.dim, acfg.dim, self.store, rng)
        self.classifier = MaskClassifier(cfg.classifier, self.backbone, acfg.dim, acfg.dim,
                                         acfg.queries, self.store, rng)
        self.text_encoder = HashTextEncoder(bcfg.embed_dim, cfg.text_seed)

    # -- shapes --------------------------------------------------------
    @property
    def low_hw(self) -> tuple[int, int]:
        return low_grid(self.cfg)

    @property
    def grid_hw(self) -> tuple[int, int]:
        return high_grid(self.cfg, self.layout)

    @property
    def mask_hw(self) -> tuple[int, int]:
        k = 2 ** self.cfg.decoder.ladder_steps
        return self.grid_hw[0] * k, self.grid_hw[1] * k

    # -- pipeline ------------------------------------------------------
    def encode(self, img) -> MultiResFeatures:
        img = check_image(img)
        if img.shape[1:] != self.cfg.image_size:
            raise ContractError(f"image is {img.shape[1]}x{img.shape[2]}, model expects "
                                f"{self.cfg.image_size[0]}x{self.cfg.image_size[1]}")
        with mac_scope("backbone"):
            return self.backbone.encode_multires(img, self.layout)

    def embed_text(self, names: Sequence[str], templates=TEMPLATES) -> np.ndarray:
        if len(names) == 0:
            raise ContractError("vocabulary is empty")
        return self.text_encoder.embed_vocabulary(list(names), templates)

    def _hr_tokens(self, feats: MultiResFeatures) -> Optional[Tensor]:
        if feats.layout is None:
            return None
        with no_grad():
            grid = restore_grid(feats.slice_tokens[self.cfg.backbone.cls_tap], feats.layout)
        gh, gw, d = grid.shape
        return grid.reshape(gh * gw, d)

    def forward(self, feats: MultiResFeatures, text_embeds) -> ModelOutput:
        cfg = self.cfg
        with mac_scope("adapter"):
            q_f, fused, H = self.adapter.forward(feats, cfg.backbone.patch)
        with mac_scope("decoder"):
            pred = self.decoder(H, [f.F for f in fused], q_f)
        with mac_scope("classifier"):
            masks = self.classifier.decode_attention_masks(H, q_f, self.low_hw,
                                                           high_res=feats.layout is not None)
            if cfg.mask_padding and feats.pad_mask is not None and feats.pad_mask.any():
                pad = np.where(feats.pad_mask, F.MASK_SENTINEL, 0.0)[None, None, :]
                masks = DecoupledMasks(masks.global_ + Tensor(pad, dtype=masks.global_.dtype), masks.local)
            x = self.classifier.init_proposals(feats.cls)
            with mac_scope("masked_attention"):
                x = multigrained_masked_attention(
                    x, feats.global_tokens[cfg.backbone.cls_tap], self._hr_tokens(feats),
                    masks, self.backbone.proposal_blocks())
            text = Tensor(np.asarray(text_embeds, dtype=x.dtype))
            if cfg.condition_text:
                text = self.classifier.condition_text(text, H, self.low_hw)
            logits = self.classifier.class_logits(x, text, with_void=True)
        return ModelOutput(pred.masks, logits, q_f, fused, H, masks, x)

    def segment(self, img, class_names: Sequence[str], mode: str = "semantic",
                templates=TEMPLATES, feats: Optional[MultiResFeatures] = None,
                text: Optional[np.ndarray] = None) -> SegmentationOutput:
        """Full inference; mask logits are resized to the input resolution."""
        if text is None:
            text = self.embed_text(class_names, templates)
        if feats is None:
            feats = self.encode(img)
        with no_grad():
            out = self.forward(feats, text)
        masks = upsample_logits(out.mask_logits.data, self.cfg.image_size)
        return compose_segmentation(out.class_logits.data, masks, class_names, mode=mode,
                                    has_void=True)


def upsample_logits(masks: np.ndarray, hw: Sequence[int]) -> np.ndarray:
    """Bilinear resize of ``[N, h, w]`` logits to ``hw``."""
    n, h, w = masks.shape
    if (h, w) == tuple(hw):
        return masks
    ry = F.bilinear_matrix(h, hw[0], masks.dtype)
    rx = F.bilinear_matrix(w, hw[1], masks.dtype)
    return np.einsum("oh,nhw,pw->nop", ry, masks, rx)
