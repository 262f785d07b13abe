"""Mask class recognition.

Proposal tokens start as copies of the backbone CLS token plus a learnable
positional offset and are refined by the frozen backbone blocks that follow
the CLS tap, cross-attending to the concatenated low- and high-resolution
tokens under additive per-head masks decoded from the adapter output.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import functional as F
from .errors import ConfigError, ContractError, ShapeError
from .nn import MLP, Attention, Block
from .tensor import Tensor, as_tensor, concat, exp, matmul

logger = logging.getLogger(__name__)


@dataclass
class ClassifierConfig:
    text_heads: int = 8
    logit_scale_init: float = 1.0 / 0.07
    mask_hidden: Optional[int] = None
    init_std: float = 0.02


@dataclass
class DecoupledMasks:
    global_: Tensor  # [heads, N, L]
    local: Optional[Tensor]  # [heads, N, G] (None in single-resolution mode)


def per_head_inner(q_f, feats, heads: int) -> Tensor:
    """``[heads, N, M]`` inner products of head-split ``q_f [N, d]`` and ``feats [M, d]``."""
    return matmul(F.split_heads(q_f, heads), F.transpose(F.split_heads(feats, heads), (0, 2, 1)))


def multigrained_masked_attention(x_prop, tokens_lr, tokens_hr, masks: DecoupledMasks,
                                  layers: Sequence[Block]) -> Tensor:
    """Refine proposals with masked cross-attention over ``[LR; HR]`` tokens.

    Keys and values come from the concatenated token stream using each
    layer's own (frozen) projections; ``[M_global, M_local]`` is added to the
    scores of every head before a single softmax over all keys.
    """
    x_prop = as_tensor(x_prop)
    if tokens_hr is None:
        memory, bias = as_tensor(tokens_lr), masks.global_
    else:
        memory = concat([tokens_lr, tokens_hr], axis=0)
        if masks.local is None:
            raise ShapeError("high-resolution tokens given without local masks")
        bias = concat([masks.global_, masks.local], axis=-1)
    if bias.shape[1:] != (x_prop.shape[0], memory.shape[0]):
        raise ShapeError(f"mask shape {bias.shape} does not match {x_prop.shape[0]} proposals "
                         f"x {memory.shape[0]} keys")
    for layer in layers:
        if bias.shape[0] != layer.heads:
            raise ShapeError(f"masks have {bias.shape[0]} heads, layer has {layer.heads}")
        x_prop = layer.cross(x_prop, memory, bias)
    return x_prop


def class_logits(proposals, text_embeds, project, logit_scale) -> Tensor:
    """Scaled cosine similarity between projected proposals and text embeddings."""
    if np.shape(text_embeds.data if isinstance(text_embeds, Tensor) else text_embeds)[0] == 0:
        raise ContractError("class_logits needs at least one class embedding")
    text_embeds = as_tensor(text_embeds)
    v = F.l2_normalize(project(proposals), axis=-1)
    t = F.l2_normalize(text_embeds, axis=-1)
    return matmul(v, t.T) * logit_scale


class MaskClassifier:
    def __init__(self, cfg: ClassifierConfig, backbone, dim: int, d_query: int, n_queries: int,
                 store, rng: np.random.Generator):
        self.cfg = cfg
        self.backbone = backbone
        self.heads = backbone.cfg.heads
        if d_query % self.heads:
            raise ConfigError(f"query feature size {d_query} not divisible by "
                              f"{self.heads} backbone heads")
        s = store.scoped("classifier")
        d_b = backbone.cfg.dim
        e = backbone.cfg.embed_dim
        hidden = cfg.mask_hidden or dim
        self.prop_pos = s.add("prop_pos", rng.normal(0, cfg.init_std, (n_queries, d_b)))
        self.mlp_local = MLP(s, "mask_local", dim, hidden, d_query, rng)
        self.mlp_global = MLP(s, "mask_global", dim, hidden, d_query, rng)
        self.log_scale = s.add("logit_scale", np.array([math.log(cfg.logit_scale_init)]))
        self.void = s.add("void_embed", rng.normal(0, 1 / np.sqrt(e), e))
        if e % cfg.text_heads:
            raise ConfigError(f"embed dim {e} not divisible by {cfg.text_heads} text heads")
        self.text_attn = Attention(s, "text_attn", e, cfg.text_heads, rng, d_kv=dim, zero_out=True)

    # -- pieces --------------------------------------------------------
    def init_proposals(self, cls) -> Tensor:
        """CLS token duplicated per query plus learnable positional embedding."""
        return as_tensor(cls).reshape(1, -1) + self.prop_pos

    def decode_attention_masks(self, H, q_f, low_hw: tuple[int, int],
                               high_res: bool = True) -> DecoupledMasks:
        H = as_tensor(H)
        gh, gw, d = H.shape
        h_bar = F.adaptive_max_pool2d(F.grid_to_chw(H), *low_hw)
        h_bar = F.chw_to_grid(h_bar).reshape(low_hw[0] * low_hw[1], d)
        m_global = per_head_inner(q_f, self.mlp_global(h_bar), self.heads)
        m_local = per_head_inner(q_f, self.mlp_local(H.reshape(gh * gw, d)), self.heads) \
            if high_res else None
        return DecoupledMasks(m_global, m_local)

    def logit_scale(self) -> Tensor:
        return exp(self.log_scale)

    def class_logits(self, proposals, text_embeds, with_void: bool = True) -> Tensor:
        text = as_tensor(text_embeds)
        if with_void:
            text = concat([text, self.void.reshape(1, -1)], axis=0)
        return class_logits(proposals, text, self.backbone.visual_projection, self.logit_scale())

    def condition_text(self, text_ori, H, low_hw: tuple[int, int]) -> Tensor:
        """Residual cross-attention from text embeddings to max-pooled visual features."""
        text_ori = as_tensor(text_ori)
        H = as_tensor(H)
        pooled = F.adaptive_max_pool2d(F.grid_to_chw(H), *low_hw)
        pooled = F.chw_to_grid(pooled).reshape(low_hw[0] * low_hw[1], H.shape[-1])
        return F.l2_normalize(text_ori + self.text_attn(text_ori, pooled), axis=-1)


# ---------------------------------------------------------------------------
# composition of the final map
# ---------------------------------------------------------------------------

@dataclass
class SegmentationOutput:
    mask_logits: np.ndarray          # [N, H, W]
    class_logits: np.ndarray         # [N, K] (plus a no-object column if present)
    class_names: list[str]
    scores: np.ndarray               # [K, H, W] semantic scores
    label_map: np.ndarray            # [H, W] argmax class
    segments: list[dict] = field(default_factory=list)
    panoptic_map: Optional[np.ndarray] = None


def _softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def compose_segmentation(C, M_mask, class_names: Optional[Sequence[str]] = None,
                         mode: str = "semantic", has_void: bool = False,
                         score_threshold: float = 0.5, min_area: int = 32) -> SegmentationOutput:
    """Combine class logits ``[N, K]`` and mask logits ``[N, H, W]`` into maps.

    Semantic scores are ``S[k] = sum_n softmax(C)[n, k] * sigmoid(M)[n]``.
    With ``has_void`` the last column of ``C`` is a no-object class that
    takes part in the softmax and is then dropped.
    """
    C = np.asarray(C.data if isinstance(C, Tensor) else C, dtype=np.float64)
    M = np.asarray(M_mask.data if isinstance(M_mask, Tensor) else M_mask, dtype=np.float64)
    if C.ndim != 2 or M.ndim != 3 or C.shape[0] != M.shape[0]:
        raise ShapeError(f"cannot compose class logits {C.shape} with masks {M.shape}")
    probs = _softmax_np(C, axis=-1)
    if has_void:
        probs = probs[:, :-1]
    k = probs.shape[1]
    names = list(class_names) if class_names is not None else [str(i) for i in range(k)]
    mask_probs = _sigmoid_np(M)
    scores = np.einsum("nk,nhw->khw", probs, mask_probs)
    labels = scores.argmax(axis=0)
    out = SegmentationOutput(M, C, names, scores, labels)
    if mode == "semantic":
        return out
    if mode != "panoptic":
        raise ContractError(f"unknown composition mode {mode!r}")
    q_score = probs.max(axis=1)
    q_class = probs.argmax(axis=1)
    if has_void:
        full = _softmax_np(C, axis=-1)
        keep = (q_score >= score_threshold) & (full.argmax(axis=1) < k)
    else:
        keep = q_score >= score_threshold
    fg = mask_probs >= 0.5
    keep &= fg.reshape(len(fg), -1).sum(axis=1) >= min_area
    pan = np.zeros(M.shape[1:], dtype=np.int64)
    kept = np.flatnonzero(keep)
    segments = []
    if kept.size:
        weighted = q_score[kept, None, None] * mask_probs[kept]
        weighted = np.where(fg[kept], weighted, -1.0)
        owner = weighted.argmax(axis=0)
        valid = weighted.max(axis=0) >= 0
        for j, q in enumerate(kept):
            area = int(np.sum(valid & (owner == j)))
            if area < min_area:
                continue
            seg_id = len(segments) + 1
            pan[valid & (owner == j)] = seg_id
            segments.append({"id": seg_id, "query": int(q), "class": int(q_class[q]),
                             "class_name": names[q_class[q]], "score": float(q_score[q]),
                             "area": area})
    out.segments = segments
    out.panoptic_map = pan
    return out
