"""Cost accounting: closed-form MAC counts, measured counts and parameter ledger.

Only multiply-accumulates of matrix products and convolutions are counted;
interpolation, pooling and normalisation are treated as free in both the
closed forms and the runtime counter.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .model import MROVSeg, ModelConfig, high_grid, low_grid, model_layout
from .tensor import count_macs, no_grad


def block_macs(n: int, d: int, mlp_ratio: int = 4) -> int:
    """Self-attention ViT block over ``n`` tokens of width ``d``."""
    return 4 * n * d * d + 2 * n * n * d + 2 * mlp_ratio * n * d * d


def masked_attention_layer_macs(n_query: int, n_keys: int, d: int, mlp_ratio: int = 4) -> int:
    """One frozen block used as masked cross-attention.

    q/out projections ``2 N D^2``, k/v projections ``2 K D^2``, scores and
    weighted values ``2 N K D``, MLP ``2 r N D^2``.
    """
    return (2 * n_query * n_keys * d + 2 * n_keys * d * d + 2 * n_query * d * d
            + 2 * mlp_ratio * n_query * d * d)


def _shapes(cfg: ModelConfig) -> dict:
    lay = model_layout(cfg)
    grid = high_grid(cfg, lay)
    return {
        "layout": lay,
        "S": lay.n_slices if lay else 0,
        "T_s": lay.tokens_per_slice if lay else 0,
        "L": cfg.backbone.native_grid ** 2,
        "low_hw": low_grid(cfg),
        "grid_hw": grid,
        "G": grid[0] * grid[1] if lay else 0,
    }


def analytic_macs(cfg: ModelConfig, n_classes: int) -> dict:
    """Closed-form MACs per module for one image and ``n_classes`` class names."""
    b, a, dec, cl = cfg.backbone, cfg.adapter, cfg.decoder, cfg.classifier
    sh = _shapes(cfg)
    S, T_s, L, G = sh["S"], sh["T_s"], sh["L"], sh["G"]
    D, d, N, E = b.dim, a.dim, a.queries, b.embed_dim
    multires = sh["layout"] is not None

    # backbone: global view plus every slice, blocks up to the deepest tap
    last = max(set(b.tap_layers) | {b.cls_tap})
    per_view = lambda t: t * 3 * b.patch ** 2 * D + last * block_macs(t + 1, D)
    backbone = per_view(L) + S * per_view(T_s)

    # adapter
    gh, gw = sh["grid_hw"]
    lh, lw = sh["low_hw"]
    hi_cells = gh * gw if multires else lh * lw
    mrf = 0
    if a.fusion_enabled:
        proj = L * D * d + (S * T_s * D * d if multires else 0)
        convs = 2 * (9 * d * hi_cells + d * d * hi_cells)
        mrf = len(a.fusion_layers) * (proj + convs)
    stream = S * T_s if multires else L
    entry = stream * D * d
    n_a = N + stream
    blocks = a.blocks * block_macs(n_a, d)
    query_mlp = 2 * N * d * d if N else 0
    adapter = mrf + entry + blocks + query_mlp

    # decoder
    if a.fusion_at_high_res and multires:
        f_cells = gh * gw
    else:
        f_cells = lh * lw
    w = dec.pyramid_width
    reconcile = dec.ladder_steps * w * d * f_cells
    ladder = 0
    for j in range(dec.ladder_steps):
        c_in = (d if j == 0 else w) + w
        ladder += c_in * w * (gh * 2 ** j) * (gw * 2 ** j) * 4
    P = gh * gw * 4 ** dec.ladder_steps
    pixel = P * (w * dec.pixel_hidden + dec.pixel_hidden * d)
    masks = N * d * P
    decoder = reconcile + ladder + pixel + masks

    # classifier
    h = cl.mask_hidden or d
    mask_mlps = 2 * L * d * h + (2 * G * d * h if multires else 0)
    inner = N * d * L + (N * d * G if multires else 0)
    n_layers = b.depth - b.cls_tap
    keys = L + G if multires else L
    masked = n_layers * masked_attention_layer_macs(N, keys, D)
    K = n_classes
    text = 0
    if cfg.condition_text:
        text = 2 * K * E * E + 2 * L * d * E + 2 * K * L * E
    logits = N * D * E + N * E * (K + 1)
    classifier = mask_mlps + inner + masked + text + logits
    return {
        "backbone": backbone,
        "adapter": adapter,
        "adapter.mrf": mrf,
        "decoder": decoder,
        "classifier": classifier,
        "masked_attention": masked,
        "masked_attention_per_layer": masked // max(n_layers, 1),
        "total": backbone + adapter + decoder + classifier,
    }


def measured_macs(model: MROVSeg, n_classes: int, seed: int = 0) -> dict:
    """Run one image through the model with the MAC counter on."""
    cfg = model.cfg
    rng = np.random.default_rng(seed)
    img = rng.random((3,) + tuple(cfg.image_size))
    text = rng.standard_normal((n_classes, cfg.backbone.embed_dim))
    with no_grad(), count_macs() as c:
        feats = model.encode(img)
        model.forward(feats, text)
    return {
        "backbone": c.under("backbone"),
        "adapter": c.under("adapter"),
        "decoder": c.under("decoder"),
        "classifier": c.under("classifier"),
        "masked_attention": c.under("classifier/masked_attention"),
        "total": c.total,
    }


def reference_complexity(cfg: ModelConfig) -> int:
    """Aggregate ``5 L^2 + 20 N_query L`` with ``L`` low-resolution tokens, for comparison."""
    L = cfg.backbone.native_grid ** 2
    return 5 * L * L + 20 * cfg.adapter.queries * L


PARAM_CATEGORIES = (
    ("Query & Positional Embedding", ("adapter.query", "adapter.pos_embed", "classifier.prop_pos")),
    ("ViT Blocks", ("adapter.blocks.", "adapter.entry.")),
    ("MRF Modules", ("adapter.mrf.",)),
    ("Mask Decoder", ("decoder.", "adapter.query_mlp.")),
    ("Mask Classifier", ("classifier.mask_local.", "classifier.mask_global.",
                         "classifier.text_attn.", "classifier.logit_scale",
                         "classifier.void_embed")),
)


def parameter_report(model: MROVSeg) -> dict:
    store = model.store
    counts = {}
    assigned = set()
    for label, prefixes in PARAM_CATEGORIES:
        n = 0
        for name, t in store.items():
            if name in store.frozen or name in assigned:
                continue
            # entries ending in "." are prefixes, the rest exact names
            if any(name == p or (p.endswith(".") and name.startswith(p)) for p in prefixes):
                n += t.data.size
                assigned.add(name)
        counts[label] = int(n)
    other = [n for n in store.trainable() if n not in assigned]
    if other:
        counts["Other"] = int(sum(store[n].data.size for n in other))
    counts["Total trainable"] = store.count(trainable_only=True)
    counts["Frozen backbone"] = int(sum(store[n].data.size for n in store.frozen))
    return counts


def cost_report(model: MROVSeg, n_classes: int, measure: bool = True) -> dict:
    cfg = model.cfg
    analytic = analytic_macs(cfg, n_classes)
    report = {
        "image_size": list(cfg.image_size),
        "p": cfg.p,
        "n_classes": n_classes,
        "analytic_macs": analytic,
        "masked_attention_closed_form": {
            "per_layer": analytic["masked_attention_per_layer"],
            "layers": cfg.backbone.depth - cfg.backbone.cls_tap,
            "total": analytic["masked_attention"],
        },
        "reference_aggregate": reference_complexity(cfg),
        "parameters": parameter_report(model),
    }
    if measure:
        measured = measured_macs(model, n_classes)
        report["measured_macs"] = measured
        report["analytic_matches_measured"] = all(
            measured[k] == analytic[k] for k in measured)
    return report
