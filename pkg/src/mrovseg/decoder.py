"""Hierarchical mask decoding.

Fused adapter features are upsampled into a pyramid; the adapter's visual
grid climbs a ladder of concatenate-then-transposed-conv steps, is mapped
to pixel features by an MLP and decoded into per-query mask logits by an
inner product with the query features.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import functional as F
from .errors import ConfigError, ShapeError
from .nn import MLP
from .tensor import Tensor, as_tensor, concat, matmul


@dataclass
class DecoderConfig:
    pyramid_width: int = 256
    pixel_hidden: int = 256
    ladder_steps: int = 3

    def __post_init__(self):
        if self.ladder_steps < 1:
            raise ConfigError("ladder_steps must be >= 1")


@dataclass
class MaskPrediction:
    masks: Tensor   # [N, H_out, W_out] raw logits
    pixel: Tensor   # [H_out, W_out, d_q]


def masks_to_probability(mask_logits) -> Tensor:
    return F.sigmoid(mask_logits)


class MaskDecoder:
    def __init__(self, cfg: DecoderConfig, dim: int, d_query: int, store, rng: np.random.Generator):
        self.cfg = cfg
        self.dim = dim
        s = store.scoped("decoder")
        w = cfg.pyramid_width
        # 1x1 reconciliation of each pyramid level to the pyramid width
        self.reconcile = [s.add(f"pyramid.{j}.weight", rng.normal(0, 1 / np.sqrt(dim), (w, dim)))
                          for j in range(cfg.ladder_steps)]
        self.ladder = []
        for j in range(cfg.ladder_steps):
            c_in = (dim if j == 0 else w) + w
            k = s.add(f"ladder.{j}.weight", rng.normal(0, 1 / np.sqrt(c_in), (c_in, w, 2, 2)))
            b = s.add(f"ladder.{j}.bias", np.zeros(w))
            self.ladder.append((k, b))
        self.pixel_mlp = MLP(s, "pixel_mlp", w, cfg.pixel_hidden, d_query, rng)

    def build_pyramid(self, fused: Sequence, base_hw: tuple[int, int] | None = None) -> list[Tensor]:
        """Upsampled ``[C, h, w]`` levels, one per ladder step.

        Level ``j`` has ``base_hw * 2**j`` cells; with ``base_hw`` defaulting
        to twice the first feature's grid the factors are 2x, 4x, 8x. When
        fewer features than ladder steps are given, the last one is reused.
        """
        if not fused:
            raise ShapeError("build_pyramid needs at least one fused feature")
        fused = [as_tensor(f) for f in fused]
        if base_hw is None:
            base_hw = (2 * fused[0].shape[0], 2 * fused[0].shape[1])
        levels = []
        for j in range(self.cfg.ladder_steps):
            f = fused[min(j, len(fused) - 1)]
            h, w = base_hw[0] * 2 ** j, base_hw[1] * 2 ** j
            chw = F.pointwise_conv2d(F.grid_to_chw(f), self.reconcile[j])
            levels.append(F.resize_bilinear(chw, h, w))
        return levels

    def decode_masks(self, H, pyramid: Sequence[Tensor], q_f) -> MaskPrediction:
        """Mask logits ``Q_f x H_pix`` at ``grid * 2**ladder_steps`` resolution."""
        H = as_tensor(H)
        cur = F.grid_to_chw(H)
        if len(pyramid) != self.cfg.ladder_steps:
            raise ShapeError(f"expected {self.cfg.ladder_steps} pyramid levels, got {len(pyramid)}")
        for (k, b), level in zip(self.ladder, pyramid):
            if level.shape[1:] != cur.shape[1:]:
                raise ShapeError(f"pyramid level {level.shape[1:]} does not match grid {cur.shape[1:]}")
            up = F.transposed_conv2d(concat([cur, level], axis=0), k, stride=2)
            cur = F.gelu(up + b.reshape(-1, 1, 1))
        c, h, w = cur.shape
        pix = self.pixel_mlp(F.chw_to_grid(cur).reshape(h * w, c))
        q_f = as_tensor(q_f)
        if q_f.shape[-1] != pix.shape[-1]:
            raise ShapeError(f"query features {q_f.shape} do not match pixel features {pix.shape}")
        masks = matmul(q_f, pix.T).reshape(q_f.shape[0], h, w)
        return MaskPrediction(masks, pix.reshape(h, w, -1))

    def __call__(self, H, fused: Sequence, q_f) -> MaskPrediction:
        H = as_tensor(H)
        pyramid = self.build_pyramid(fused, base_hw=H.shape[:2])
        return self.decode_masks(H, pyramid, q_f)
