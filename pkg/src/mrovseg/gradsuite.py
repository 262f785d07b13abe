"""The finite-difference suite over every differentiable operation and module.

Each case builds a scalar loss ``sum(op(inputs) * R)`` with a fixed random
``R`` so that no gradient vanishes by symmetry, and checks it against
central differences in 64-bit mode.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import functional as F
from . import tensor as T
from .errors import ContractError
from .gradcheck import GradCheckResult, check_gradients
from .tensor import Tensor, default_dtype, make_result, no_grad


def _leaf(rng, *shape, scale=1.0, positive=False) -> Tensor:
    d = rng.standard_normal(shape) * scale
    if positive:
        d = np.abs(d) + 0.5
    return Tensor(d, requires_grad=True)


def _probe(rng, out: Tensor) -> Tensor:
    return Tensor(rng.standard_normal(out.shape))


def _weighted(out: Tensor, r: Tensor) -> Tensor:
    return (out * r).sum()


def buggy_softmax(x, axis: int = -1) -> Tensor:
    """Softmax whose backward has the wrong sign (for mutation checks)."""
    x = T.as_tensor(x)
    with no_grad():
        y = F.softmax(x, axis).data

    def _bw(g):
        return (-(y * (g - (g * y).sum(axis=axis, keepdims=True))),)

    return make_result(y, (x,), _bw)


@dataclass
class Case:
    name: str
    build: Callable  # (rng, ops) -> (fn, inputs)
    max_entries: int = 0


def _op_case(name: str, make_inputs: Callable, op: Callable, max_entries: int = 0) -> Case:
    def build(rng, ops):
        inputs = make_inputs(rng)
        f = ops.get(name, op)
        r = _probe(rng, f(*inputs))
        return (lambda: _weighted(f(*inputs), r)), [t for t in inputs if isinstance(t, Tensor)
                                                    and t.requires_grad]
    return Case(name, build, max_entries)


def _tiny_model(seed: int, **adapter_kw):
    from .adapter import AdapterConfig
    from .backbone import BackboneConfig
    from .classifier import ClassifierConfig
    from .decoder import DecoderConfig
    from .model import ModelConfig, MROVSeg
    cfg = ModelConfig(
        image_size=(32, 32), p=0.5, init_seed=seed,
        backbone=BackboneConfig(patch=4, dim=16, heads=2, depth=3, tap_layers=("stem", 1, 2, 3),
                                cls_tap=2, native_window=16, embed_dim=8, seed=seed),
        adapter=AdapterConfig(blocks=2, heads=2, dim=8, queries=3, fusion_layers=("stem", 2),
                              **adapter_kw),
        decoder=DecoderConfig(pyramid_width=4, pixel_hidden=6, ladder_steps=1),
        classifier=ClassifierConfig(text_heads=2))
    return MROVSeg(cfg)


def _tiny_feats(model, rng):
    img = rng.random((3,) + model.cfg.image_size)
    return model.encode(img)


def _params(model, prefix: str) -> list[Tensor]:
    return [t for n, t in model.store.trainable().items() if n.startswith(prefix)]


def _mrf_case(rng, ops):
    model = _tiny_model(int(rng.integers(1 << 30)))
    feats = _tiny_feats(model, rng)
    mrf = model.adapter.mrf[2]
    high = _leaf(rng, 8, 8, 8)
    low = _leaf(rng, 8, 4, 4)

    def fn():
        out = mrf.fuse(high, low)
        return _weighted(out.F, r1) + _weighted(out.a, r2)

    r1 = Tensor(rng.standard_normal((4, 4, 8)))
    r2 = Tensor(rng.standard_normal((4, 4, 8)))
    params = _params(model, "adapter.mrf.2.")
    # the full MRF path (projection + restoration) as well
    slices = [Tensor(t.data) for t in feats.slice_tokens[2]]
    r3 = Tensor(rng.standard_normal((4, 4, 8)))

    def fn_full():
        out = mrf(slices, feats.global_tokens[2], feats.layout, feats.global_hw, 4)
        return fn() + _weighted(out.F, r3)

    return fn_full, [high, low] + params


def _adapter_case(rng, ops):
    model = _tiny_model(int(rng.integers(1 << 30)))
    feats = _tiny_feats(model, rng)
    q_f, fused, H = model.adapter.forward(feats, 4)
    rs = [Tensor(rng.standard_normal(q_f.shape)), Tensor(rng.standard_normal(H.shape))]

    def fn():
        q_f, fused, H = model.adapter.forward(feats, 4)
        return _weighted(q_f, rs[0]) + _weighted(H, rs[1])

    return fn, _params(model, "adapter.")


def _decoder_case(rng, ops):
    model = _tiny_model(int(rng.integers(1 << 30)))
    H = _leaf(rng, 8, 8, 8)
    fused = [_leaf(rng, 4, 4, 8), _leaf(rng, 4, 4, 8)]
    q_f = _leaf(rng, 3, 8)
    r = Tensor(rng.standard_normal((3, 16, 16)))

    def fn():
        return _weighted(model.decoder(H, fused, q_f).masks, r)

    return fn, [H, q_f] + fused + _params(model, "decoder.")


def _masked_attention_case(rng, ops):
    from .classifier import multigrained_masked_attention
    model = _tiny_model(int(rng.integers(1 << 30)))
    feats = _tiny_feats(model, rng)
    H = _leaf(rng, 8, 8, 8)
    q_f = _leaf(rng, 3, 8)
    hr = model._hr_tokens(feats)
    r = Tensor(rng.standard_normal((3, 16)))
    cls = model.classifier

    def fn():
        masks = cls.decode_attention_masks(H, q_f, model.low_hw)
        x = multigrained_masked_attention(cls.init_proposals(feats.cls), feats.global_tokens[2],
                                          hr, masks, model.backbone.proposal_blocks())
        return _weighted(x, r)

    params = [cls.prop_pos] + _params(model, "classifier.mask_")
    return fn, [H, q_f] + params


def _text_case(rng, ops):
    model = _tiny_model(int(rng.integers(1 << 30)))
    cls = model.classifier
    # move the zero-initialised output projection off zero so every path is live
    cls.text_attn.out.weight.data[...] = rng.standard_normal(cls.text_attn.out.weight.shape) * 0.3
    text = _leaf(rng, 4, 8)
    H = _leaf(rng, 8, 8, 8)
    r = Tensor(rng.standard_normal((4, 8)))

    def fn():
        return _weighted(cls.condition_text(text, H, model.low_hw), r)

    return fn, [text, H] + _params(model, "classifier.text_attn.")


def _class_logit_case(rng, ops):
    model = _tiny_model(int(rng.integers(1 << 30)))
    cls = model.classifier
    x = _leaf(rng, 3, 16)
    text = _leaf(rng, 4, 8)
    r = Tensor(rng.standard_normal((3, 5)))

    def fn():
        return _weighted(cls.class_logits(x, text), r)

    return fn, [x, text, cls.log_scale, cls.void]


def _query_case(rng, ops):
    model = _tiny_model(int(rng.integers(1 << 30)))
    q = _leaf(rng, 3, 8)
    r = Tensor(rng.standard_normal((3, 8)))
    return (lambda: _weighted(model.adapter.project_queries(q), r)), \
        [q] + _params(model, "adapter.query_mlp.")


def _loss_case(rng, ops):
    from .training import set_loss
    logits = _leaf(rng, 5, 4)
    masks = _leaf(rng, 5, 6, 6, scale=2.0)
    cls = rng.integers(0, 3, 3)
    tgt = rng.random((3, 6, 6)) > 0.5

    def fn():
        return set_loss(logits, masks, cls, tgt).total

    return fn, [logits, masks]


def _model_case(rng, ops):
    model = _tiny_model(int(rng.integers(1 << 30)))
    feats = _tiny_feats(model, rng)
    text = rng.standard_normal((3, 8))
    cls = rng.integers(0, 3, 2)
    tgt = rng.random((2, 16, 16)) > 0.5
    from .training import set_loss

    def fn():
        out = model.forward(feats, text)
        return set_loss(out.class_logits, out.mask_logits, cls, tgt).total

    params = list(model.store.trainable().values())
    return fn, params


def _attn_inputs(rng):
    q, k, v = _leaf(rng, 3, 4), _leaf(rng, 5, 4), _leaf(rng, 5, 4)
    bias = _leaf(rng, 2, 3, 5)
    return q, k, v, bias


def cases() -> list[Case]:
    ax = -1
    return [
        _op_case("add", lambda r: (_leaf(r, 3, 4), _leaf(r, 4)), T.add),
        _op_case("sub", lambda r: (_leaf(r, 3, 4), _leaf(r, 3, 1)), T.sub),
        _op_case("mul", lambda r: (_leaf(r, 3, 4), _leaf(r, 1, 4)), T.mul),
        _op_case("div", lambda r: (_leaf(r, 3, 4), _leaf(r, 3, 4, positive=True)), T.div),
        _op_case("neg", lambda r: (_leaf(r, 3, 4),), T.neg),
        _op_case("power", lambda r: (_leaf(r, 3, 4, positive=True),), lambda x: T.power(x, 1.7)),
        _op_case("exp", lambda r: (_leaf(r, 3, 4),), T.exp),
        _op_case("log", lambda r: (_leaf(r, 3, 4, positive=True),), T.log),
        _op_case("sqrt", lambda r: (_leaf(r, 3, 4, positive=True),), T.sqrt),
        _op_case("matmul", lambda r: (_leaf(r, 2, 3, 5), _leaf(r, 5, 4)), T.matmul),
        _op_case("sum", lambda r: (_leaf(r, 3, 4),), lambda x: T.tsum(x, axis=1, keepdims=True)),
        _op_case("mean", lambda r: (_leaf(r, 3, 4),), lambda x: T.mean(x, axis=0)),
        _op_case("reshape", lambda r: (_leaf(r, 3, 4),), lambda x: T.reshape(x, (2, 6))),
        _op_case("transpose", lambda r: (_leaf(r, 2, 3, 4),), lambda x: T.transpose(x, (2, 0, 1))),
        _op_case("getitem", lambda r: (_leaf(r, 5, 4),),
                 lambda x: T.getitem(x, np.array([0, 2, 2, 4]))),
        _op_case("concat", lambda r: (_leaf(r, 2, 4), _leaf(r, 3, 4)),
                 lambda a, b: T.concat([a, b], axis=0)),
        _op_case("stack", lambda r: (_leaf(r, 2, 4), _leaf(r, 2, 4)),
                 lambda a, b: T.stack([a, b], axis=1)),
        _op_case("sigmoid", lambda r: (_leaf(r, 3, 4, scale=3.0),), F.sigmoid),
        _op_case("softplus", lambda r: (_leaf(r, 3, 4, scale=3.0),), F.softplus),
        _op_case("gelu", lambda r: (_leaf(r, 3, 4),), F.gelu),
        _op_case("relu", lambda r: (_leaf(r, 3, 4),), F.relu),
        _op_case("softmax", lambda r: (_leaf(r, 3, 5),), lambda x: F.softmax(x, ax)),
        _op_case("log_softmax", lambda r: (_leaf(r, 3, 5),), lambda x: F.log_softmax(x, ax)),
        _op_case("layer_norm", lambda r: (_leaf(r, 3, 6), _leaf(r, 6), _leaf(r, 6)), F.layer_norm),
        _op_case("l2_normalize", lambda r: (_leaf(r, 3, 6),), F.l2_normalize),
        _op_case("linear", lambda r: (_leaf(r, 3, 4), _leaf(r, 4, 5), _leaf(r, 5)), F.linear),
        _op_case("gather_rows", lambda r: (_leaf(r, 4, 3),),
                 lambda x: F.gather_rows(x, np.array([3, 0, 0, 2, 1]))),
        _op_case("scatter_mean_rows", lambda r: (_leaf(r, 6, 3),),
                 lambda x: F.scatter_mean_rows(x, np.array([0, 1, 1, 2, 2, 2]), 3)),
        _op_case("depthwise_conv2d", lambda r: (_leaf(r, 2, 5, 5), _leaf(r, 2, 3, 3)),
                 lambda x, k: F.depthwise_conv2d(x, k, 1, 1)),
        _op_case("depthwise_conv2d_stride2", lambda r: (_leaf(r, 2, 6, 6), _leaf(r, 2, 3, 3)),
                 lambda x, k: F.depthwise_conv2d(x, k, 2, 0)),
        _op_case("pointwise_conv2d", lambda r: (_leaf(r, 3, 4, 4), _leaf(r, 2, 3)),
                 F.pointwise_conv2d),
        _op_case("transposed_conv2d", lambda r: (_leaf(r, 3, 3, 4), _leaf(r, 3, 2, 2, 2)),
                 F.transposed_conv2d),
        _op_case("max_pool2d", lambda r: (_leaf(r, 2, 4, 4),), lambda x: F.max_pool2d(x, 2, 2)),
        _op_case("adaptive_max_pool2d", lambda r: (_leaf(r, 2, 5, 7),),
                 lambda x: F.adaptive_max_pool2d(x, 2, 3)),
        _op_case("adaptive_avg_pool2d", lambda r: (_leaf(r, 2, 5, 7),),
                 lambda x: F.adaptive_avg_pool2d(x, 2, 3)),
        _op_case("resize_bilinear", lambda r: (_leaf(r, 2, 3, 4),),
                 lambda x: F.resize_bilinear(x, 5, 7)),
        _op_case("scaled_dot_attention", _attn_inputs,
                 lambda q, k, v, b: F.scaled_dot_attention(q, k, v, 2, b)),
        _op_case("cross_entropy", lambda r: (_leaf(r, 4, 3),),
                 lambda x: F.cross_entropy(x, np.array([0, 2, 1, 2]), np.array([1, .1, 1, .5]))),
        Case("mrf", _mrf_case, 40),
        Case("adapter", _adapter_case, 6),
        Case("mask_decoder", _decoder_case, 20),
        Case("masked_attention", _masked_attention_case, 20),
        Case("condition_text", _text_case, 20),
        Case("class_logits", _class_logit_case, 20),
        Case("project_queries", _query_case, 20),
        Case("set_loss", _loss_case, 0),
        Case("model", _model_case, 3),
    ]


@dataclass
class SuiteResult:
    name: str
    rel_errors: list
    tol: float
    seconds: float

    @property
    def worst(self) -> float:
        return max(self.rel_errors)

    @property
    def passed(self) -> bool:
        return all(np.isfinite(e) and e < self.tol for e in self.rel_errors)

    def to_dict(self) -> dict:
        return {"name": self.name, "max_rel_error": self.worst, "rel_errors": self.rel_errors,
                "tol": self.tol, "passed": self.passed, "seconds": round(self.seconds, 3)}


def run_suite(seeds: Sequence[int] = (0, 1, 2, 3, 4), tol: float = 1e-4,
              inject: Optional[str] = None, only: Optional[Sequence[str]] = None) -> list[SuiteResult]:
    """Run every case for every seed; ``inject="softmax-sign"`` plants a known bug."""
    ops = {}
    if inject == "softmax-sign":
        ops["softmax"] = lambda x: buggy_softmax(x, -1)
    elif inject is not None:
        raise ContractError(f"unknown fault {inject!r}")
    results = []
    with default_dtype(np.float64):
        for case in cases():
            if only and case.name not in only:
                continue
            t0 = time.perf_counter()
            errs = []
            for seed in seeds:
                rng = np.random.default_rng(seed)
                fn, inputs = case.build(rng, ops)
                res: GradCheckResult = check_gradients(fn, inputs, case.name, tol=tol,
                                                       max_entries=case.max_entries)
                errs.append(res.rel_error)
            results.append(SuiteResult(case.name, errs, tol, time.perf_counter() - t0))
    return results
