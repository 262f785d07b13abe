"""Set-prediction training on synthetic scenes."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import functional as F
from .errors import ContractError, NumericError
from .metrics import ConfusionAccumulator
from .tensor import Tensor, as_tensor, backward, getitem

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

COLORS = {
    "red": (0.9, 0.15, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.85, 0.1),
    "magenta": (0.85, 0.1, 0.8),
    "cyan": (0.1, 0.85, 0.9),
}
SHAPES = ("rectangle", "ellipse")
BACKGROUND = "background"


def class_buckets(n_classes: int) -> list[tuple[str, str]]:
    """``(color, shape)`` for classes ``1..n_classes-1``; class 0 is background.

    Consecutive classes differ in both color and shape where possible.
    """
    colors = list(COLORS)
    nc, ns = len(colors), len(SHAPES)
    if not 2 <= n_classes <= nc * ns + 1:
        raise ContractError(f"n_classes must lie in 2..{nc * ns + 1}, got {n_classes}")
    return [(colors[i % nc], SHAPES[(i // nc + i) % ns]) for i in range(n_classes - 1)]


def class_names(n_classes: int) -> list[str]:
    return [BACKGROUND] + [f"{c} {s}" for c, s in class_buckets(n_classes)]


@dataclass
class ToySample:
    image: np.ndarray                                    # [3, H, W] in [0, 1]
    instances: list = field(default_factory=list)       # (class id, bool mask [H, W])

    def semantic_map(self) -> np.ndarray:
        """Per-pixel class id, 0 where no instance is drawn."""
        out = np.zeros(self.image.shape[1:], dtype=np.int64)
        for cls, mask in self.instances:
            out[mask] = cls
        return out

    def segments(self) -> tuple[np.ndarray, np.ndarray]:
        """Training targets: background plus every instance, ``(classes [G], masks [G, H, W])``."""
        bg = np.ones(self.image.shape[1:], dtype=bool)
        for _, m in self.instances:
            bg &= ~m
        classes = [0] + [c for c, _ in self.instances]
        masks = [bg] + [m for _, m in self.instances]
        keep = [i for i, m in enumerate(masks) if m.any()]
        return np.array([classes[i] for i in keep]), np.stack([masks[i] for i in keep])


def _shape_mask(shape: str, hw, box) -> np.ndarray:
    h, w = hw
    y0, x0, bh, bw = box
    mask = np.zeros((h, w), dtype=bool)
    if shape == "rectangle":
        mask[y0:y0 + bh, x0:x0 + bw] = True
    else:
        yy, xx = np.mgrid[0:h, 0:w]
        cy, cx = y0 + (bh - 1) / 2, x0 + (bw - 1) / 2
        mask = ((yy - cy) / (bh / 2)) ** 2 + ((xx - cx) / (bw / 2)) ** 2 <= 1.0
    return mask


def _texture(rng: np.random.Generator, hw) -> np.ndarray:
    h, w = hw
    coarse = rng.random((3, max(2, h // 16), max(2, w // 16)))
    ry, rx = F.bilinear_matrix(coarse.shape[1], h), F.bilinear_matrix(coarse.shape[2], w)
    smooth = np.einsum("oh,chw,pw->cop", ry, coarse, rx)
    base = 0.35 + 0.2 * smooth.mean(axis=0, keepdims=True) + 0.05 * (smooth - 0.5)
    return np.clip(base + 0.03 * rng.standard_normal((3, h, w)), 0.0, 1.0)


def make_toy_dataset(seed: int, n_images: int, hw=(128, 128), n_classes: int = 4,
                     max_instances: int = 4, max_tries: int = 200) -> list[ToySample]:
    """Colored rectangles and ellipses on a textured background.

    Each image holds 1 to ``max_instances`` non-overlapping instances placed
    by rejection sampling; class ``k >= 1`` is one (color, shape) bucket.
    """
    rng = np.random.default_rng(seed)
    buckets = class_buckets(n_classes)
    h, w = hw
    out = []
    for _ in range(n_images):
        img = _texture(rng, hw)
        occupied = np.zeros(hw, dtype=bool)
        instances = []
        want = int(rng.integers(1, max_instances + 1))
        tries = 0
        while len(instances) < want and tries < max_tries:
            tries += 1
            bh = int(rng.integers(h // 6, h // 3 + 1))
            bw = int(rng.integers(w // 6, w // 3 + 1))
            y0, x0 = int(rng.integers(0, h - bh + 1)), int(rng.integers(0, w - bw + 1))
            cls = int(rng.integers(1, n_classes))
            color, shape = buckets[cls - 1]
            mask = _shape_mask(shape, hw, (y0, x0, bh, bw))
            grown = np.zeros_like(occupied)
            grown[max(0, y0 - 2):y0 + bh + 2, max(0, x0 - 2):x0 + bw + 2] = True
            if (grown & occupied).any():
                continue
            occupied |= grown
            rgb = np.clip(np.array(COLORS[color]) + rng.normal(0, 0.03, 3), 0, 1)
            shade = 1.0 + 0.04 * rng.standard_normal((h, w))
            img[:, mask] = np.clip(rgb[:, None] * shade[mask][None, :], 0.0, 1.0)
            instances.append((cls, mask))
        if not instances:
            raise ContractError("could not place any instance; image too small")
        out.append(ToySample(img, instances))
    return out


# ---------------------------------------------------------------------------
# matching and loss
# ---------------------------------------------------------------------------

@dataclass
class LossWeights:
    cls: float = 2.0
    bce: float = 5.0
    dice: float = 5.0
    void: float = 0.1


def hungarian_match(cost) -> list[tuple[int, int]]:
    """Min-cost assignment of every target column to a distinct query row."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ContractError(f"cost must be 2-D, got shape {cost.shape}")
    n, g = cost.shape
    if g > n:
        raise ContractError(f"{g} targets cannot be matched to {n} queries")
    if g == 0:
        return []
    if not np.all(np.isfinite(cost)):
        raise ContractError("matching cost contains non-finite entries")
    rows, cols = linear_sum_assignment(cost)
    return sorted(zip(rows.tolist(), cols.tolist()), key=lambda rc: rc[1])


def resize_nearest(masks: np.ndarray, hw) -> np.ndarray:
    """Nearest-neighbour resample of ``[G, H, W]`` (pixel centres)."""
    _, h, w = masks.shape
    oh, ow = hw
    ys = np.minimum(((np.arange(oh) + 0.5) * h / oh).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(ow) + 0.5) * w / ow).astype(np.int64), w - 1)
    return masks[:, ys][:, :, xs]


def _np_softplus(x):
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def matching_cost(class_logits: np.ndarray, mask_logits: np.ndarray, tgt_classes: np.ndarray,
                  tgt_masks: np.ndarray, w: LossWeights = LossWeights()) -> np.ndarray:
    """``[N, G]`` cost mirroring the loss: -class prob, mean BCE and dice."""
    n = class_logits.shape[0]
    if len(tgt_classes) == 0:
        return np.zeros((n, 0))
    z = class_logits - class_logits.max(axis=1, keepdims=True)
    prob = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    x = mask_logits.reshape(n, -1).astype(np.float64)
    t = tgt_masks.reshape(len(tgt_masks), -1).astype(np.float64)
    px = x.shape[1]
    bce = (_np_softplus(x).sum(1)[:, None] - x @ t.T) / px
    p = 1.0 / (1.0 + np.exp(-x))
    dice = 1.0 - (2.0 * p @ t.T + 1.0) / (p.sum(1)[:, None] + t.sum(1)[None, :] + 1.0)
    return -w.cls * prob[:, tgt_classes] + w.bce * bce + w.dice * dice


@dataclass
class LossTerms:
    total: Tensor
    ce: float
    bce: float
    dice: float
    assignment: list


def set_loss(class_logits, mask_logits, tgt_classes, tgt_masks,
             weights: LossWeights = LossWeights()) -> LossTerms:
    """Matched set loss; targets must already be at mask-logit resolution.

    ``class_logits`` is ``[N, K + 1]`` with the no-object class last.
    """
    class_logits, mask_logits = as_tensor(class_logits), as_tensor(mask_logits)
    n, k1 = class_logits.shape
    tgt_classes = np.asarray(tgt_classes, dtype=np.int64)
    tgt_masks = np.asarray(tgt_masks)
    if tgt_masks.shape[1:] != mask_logits.shape[1:]:
        raise ContractError(f"target masks {tgt_masks.shape[1:]} do not match predictions "
                            f"{mask_logits.shape[1:]}")
    if len(tgt_classes) and tgt_classes.max() >= k1 - 1:
        raise ContractError(f"target class {tgt_classes.max()} outside 0..{k1 - 2}")
    cost = matching_cost(class_logits.data, mask_logits.data, tgt_classes, tgt_masks, weights)
    pairs = hungarian_match(cost)
    labels = np.full(n, k1 - 1, dtype=np.int64)
    cw = np.full(n, weights.void)
    for q, g in pairs:
        labels[q] = tgt_classes[g]
        cw[q] = 1.0
    ce = F.cross_entropy(class_logits, labels, cw)
    total = ce * weights.cls
    bce_v = dice_v = 0.0
    if pairs:
        q_idx = np.array([q for q, _ in pairs])
        g_idx = np.array([g for _, g in pairs])
        m = len(pairs)
        x = getitem(mask_logits, q_idx).reshape(m, -1)
        t = Tensor(tgt_masks[g_idx].reshape(m, -1), dtype=x.dtype)
        bce = (F.softplus(x) - x * t).mean()
        p = F.sigmoid(x)
        num = (p * t).sum(axis=1) * 2.0 + 1.0
        den = p.sum(axis=1) + t.sum(axis=1) + 1.0
        dice = (1.0 - num / den).mean()
        total = total + bce * weights.bce + dice * weights.dice
        bce_v, dice_v = float(bce.data), float(dice.data)
    return LossTerms(total, float(ce.data), bce_v, dice_v, pairs)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

def poly_lr(step: int, total: int, base: float = 2e-4, power: float = 0.9) -> float:
    if total <= 0:
        raise ContractError("total steps must be positive")
    if step >= total:
        return 0.0
    return base * (1.0 - step / total) ** power


class AdamW:
    """Adam with decoupled weight decay over the trainable part of a store."""

    def __init__(self, store, total_steps: int, base_lr: float = 2e-4, weight_decay: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8, power: float = 0.9,
                 clip_norm: Optional[float] = 1.0):
        self.store = store
        self.total_steps = total_steps
        self.base_lr = base_lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.power = power
        self.clip_norm = clip_norm
        self.t = 0
        self.state: dict[str, dict[str, np.ndarray]] = {
            name: {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
            for name, p in store.trainable().items()}

    def lr(self, step: Optional[int] = None) -> float:
        return poly_lr(self.t if step is None else step, self.total_steps, self.base_lr, self.power)

    def step(self) -> dict:
        """Apply one update from the ``.grad`` fields; returns diagnostics."""
        params = self.store.trainable()
        for name in self.store.frozen:
            if self.store[name].grad is not None:
                raise ContractError(f"frozen parameter {name} received a gradient")
        sq = 0.0
        for name, p in params.items():
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient in {name} at step {self.t}")
            sq += float(np.sum(np.square(p.grad, dtype=np.float64)))
        norm = math.sqrt(sq)
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / (norm + 1e-12)
        lr = self.lr()
        b1, b2 = self.betas
        self.t += 1
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad * scale
            s = self.state[name]
            s["m"] = b1 * s["m"] + (1 - b1) * g
            s["v"] = b2 * s["v"] + (1 - b2) * g * g
            p.data *= 1.0 - lr * self.weight_decay
            p.data -= (lr * (s["m"] / c1) / (np.sqrt(s["v"] / c2) + self.eps)).astype(p.data.dtype)
        return {"lr": lr, "grad_norm": norm}


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 600
    batch_size: int = 2
    base_lr: float = 2e-4
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    data_seed: int = 0
    n_images: int = 8
    n_classes: int = 4
    loss: LossWeights = field(default_factory=LossWeights)
    log_every: int = 1


@dataclass
class TrainResult:
    losses: list
    train_miou: float
    seconds: float
    log_rows: list


class Trainer:
    def __init__(self, model, cfg: TrainConfig, samples: Sequence[ToySample],
                 names: Sequence[str]):
        self.model = model
        self.cfg = cfg
        self.samples = list(samples)
        self.names = list(names)
        self.text = model.embed_text(self.names)
        # the backbone is frozen, so its features are computed once per image
        self.feats = [model.encode(s.image) for s in self.samples]
        hw = model.mask_hw
        self.targets = []
        for s in self.samples:
            cls, masks = s.segments()
            self.targets.append((cls, resize_nearest(masks, hw)))
        self.opt = AdamW(model.store, cfg.steps, cfg.base_lr, cfg.weight_decay,
                         clip_norm=cfg.clip_norm)
        self.rng = np.random.default_rng(cfg.data_seed + 1)

    def _order(self):
        while True:
            yield from self.rng.permutation(len(self.samples)).tolist()

    def train_step(self, batch: Sequence[int]) -> dict:
        store = self.model.store
        store.zero_grad()
        terms = {"loss": 0.0, "ce": 0.0, "bce": 0.0, "dice": 0.0}
        for i in batch:
            out = self.model.forward(self.feats[i], self.text)
            cls, masks = self.targets[i]
            lt = set_loss(out.class_logits, out.mask_logits, cls, masks, self.cfg.loss)
            loss = lt.total * (1.0 / len(batch))
            if not np.isfinite(loss.data).all():
                raise NumericError(f"non-finite loss at step {self.opt.t}")
            backward(loss)
            terms["loss"] += float(loss.data)
            terms["ce"] += lt.ce / len(batch)
            terms["bce"] += lt.bce / len(batch)
            terms["dice"] += lt.dice / len(batch)
        diag = self.opt.step()
        return {"step": self.opt.t, "lr": diag["lr"], **terms, "grad_norm": diag["grad_norm"]}

    def fit(self, log_path=None, callback: Optional[Callable[[dict], None]] = None) -> TrainResult:
        t0 = time.perf_counter()
        order = self._order()
        rows = []
        for _ in range(self.cfg.steps):
            batch = [next(order) for _ in range(self.cfg.batch_size)]
            row = self.train_step(batch)
            rows.append(row)
            if callback is not None:
                callback(row)
            if row["step"] % max(1, self.cfg.log_every) == 0:
                logger.debug("step %d loss %.4f", row["step"], row["loss"])
        if log_path is not None:
            write_log(log_path, rows)
        return TrainResult([r["loss"] for r in rows], self.evaluate(), time.perf_counter() - t0, rows)

    def evaluate(self) -> float:
        acc = ConfusionAccumulator(len(self.names))
        for s, f in zip(self.samples, self.feats):
            seg = self.model.segment(s.image, self.names, feats=f, text=self.text)
            acc.update(seg.label_map, s.semantic_map())
        return acc.miou().miou


def write_log(path, rows: Sequence[dict]) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
