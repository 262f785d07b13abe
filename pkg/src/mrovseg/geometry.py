"""Sliding-window decomposition of a high-resolution image.

A :class:`SliceLayout` records how an ``H x W`` input is cut into ``m x n``
windows of ``p`` times its size, and how the per-slice token grids map back
onto one spatial grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from . import functional as F
from .errors import ContractError, LayoutError, ShapeError
from .tensor import Tensor, as_tensor, concat


@dataclass(frozen=True)
class SliceLayout:
    input_hw: tuple[int, int]
    p: float
    window_hw: tuple[int, int]
    stride_hw: tuple[int, int]
    grid_mn: tuple[int, int]
    overlap: bool
    patch: int

    @property
    def n_slices(self) -> int:
        return self.grid_mn[0] * self.grid_mn[1]

    @property
    def token_hw(self) -> tuple[int, int]:
        """Token grid of one slice."""
        return self.window_hw[0] // self.patch, self.window_hw[1] // self.patch

    @property
    def tokens_per_slice(self) -> int:
        h, w = self.token_hw
        return h * w

    @property
    def grid_hw(self) -> tuple[int, int]:
        """Token grid of the restored high-resolution feature."""
        return self.input_hw[0] // self.patch, self.input_hw[1] // self.patch

    def origins(self) -> list[tuple[int, int]]:
        """Pixel origins of the slices in row-major order."""
        m, n = self.grid_mn
        sy, sx = self.stride_hw
        return [(i * sy, j * sx) for i in range(m) for j in range(n)]

    @cached_property
    def token_index(self) -> np.ndarray:
        """Flat restored-grid index of every slice token, slices concatenated."""
        th, tw = self.token_hw
        gh, gw = self.grid_hw
        parts = []
        for oy, ox in self.origins():
            ty, tx = oy // self.patch, ox // self.patch
            rows = (ty + np.arange(th))[:, None]
            cols = (tx + np.arange(tw))[None, :]
            parts.append((rows * gw + cols).reshape(-1))
        idx = np.concatenate(parts)
        assert idx.max() < gh * gw
        return idx

    def coverage(self) -> np.ndarray:
        """Number of slice tokens landing on each restored-grid cell."""
        gh, gw = self.grid_hw
        return np.bincount(self.token_index, minlength=gh * gw).reshape(gh, gw)


def _nearest_valid_p(size: int, p: float, patch: int) -> float:
    best = None
    for w in range(patch, size + 1, patch):
        q = w / size
        ok = q > 0.5 or size % w == 0
        if ok and (best is None or abs(q - p) < abs(best - p)):
            best = q
    return best if best is not None else 1.0


def plan_layout(input_hw: Sequence[int], p: float, patch: int) -> SliceLayout:
    """Plan the slicing of an ``input_hw`` image at crop ratio ``p``.

    ``p <= 0.5`` tiles the image with ``round(1/p)`` windows per axis and no
    overlap; ``0.5 < p < 1`` uses a 2x2 grid whose last window ends flush
    with the border (stride ``input - window``); ``p == 1`` is one window.
    """
    h, w = int(input_hw[0]), int(input_hw[1])
    if not 0.0 < p <= 1.0:
        raise LayoutError(f"crop ratio must satisfy 0 < p <= 1, got {p}")
    window = (int(round(p * h)), int(round(p * w)))
    for size, win in zip((h, w), window):
        if win % patch:
            raise LayoutError(
                f"window {win}px for p={p} on {size}px is not divisible by patch {patch}; "
                f"nearest valid p is {_nearest_valid_p(size, p, patch):.6g}")
    if p <= 0.5:
        k = int(round(1.0 / p))
        grid = (k, k)
        for size, win in zip((h, w), window):
            if k * win != size:
                raise LayoutError(
                    f"p={p} does not tile {size}px exactly ({k} x {win}px); "
                    f"nearest valid p is {_nearest_valid_p(size, p, patch):.6g}")
        stride = window
        overlap = False
    elif p < 1.0:
        grid = (2, 2)
        stride = (h - window[0], w - window[1])
        overlap = True
        for s in stride:
            if s % patch:
                raise LayoutError(f"overlap stride {s}px is not divisible by patch {patch}")
    else:
        grid = (1, 1)
        stride = (0, 0)
        overlap = False
    return SliceLayout((h, w), float(p), window, stride, grid, overlap, patch)


def check_image(img) -> np.ndarray:
    """Validate an RGB image ``[3, H, W]`` with finite values in ``[0, 1]``."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ShapeError(f"expected an image of shape [3, H, W], got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError("image contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ContractError("image values must lie in [0, 1]")
    return arr


def slice_image(img: np.ndarray, layout: SliceLayout) -> list[np.ndarray]:
    if tuple(img.shape[1:]) != layout.input_hw:
        raise LayoutError(f"layout planned for {layout.input_hw}, image is {img.shape[1:]}")
    wh, ww = layout.window_hw
    return [img[:, y:y + wh, x:x + ww] for y, x in layout.origins()]


def downsample_pad(img: np.ndarray, target_hw: Sequence[int]) -> np.ndarray:
    """Aspect-preserving bilinear downscale, then zero-pad bottom/right to ``target_hw``."""
    _, h, w = img.shape
    th, tw = int(target_hw[0]), int(target_hw[1])
    if h < th and w < tw:
        raise ContractError(f"target {th}x{tw} larger than input {h}x{w}")
    scale = min(th / h, tw / w)
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    if (nh, nw) == (h, w):
        small = img
    else:
        ry = F.bilinear_matrix(h, nh)
        rx = F.bilinear_matrix(w, nw)
        small = np.einsum("oh,chw,pw->cop", ry, img, rx)
    out = np.zeros((img.shape[0], th, tw), dtype=img.dtype)
    out[:, :nh, :nw] = small
    return out


def padding_mask(input_hw: Sequence[int], target_hw: Sequence[int], patch: int) -> np.ndarray:
    """Boolean ``[th/patch * tw/patch]``: True where a global token is pure padding."""
    h, w = input_hw
    th, tw = target_hw
    scale = min(th / h, tw / w)
    nh, nw = int(round(h * scale)), int(round(w * scale))
    rows = np.arange(th // patch) * patch >= nh
    cols = np.arange(tw // patch) * patch >= nw
    return (rows[:, None] | cols[None, :]).reshape(-1)


def restore_grid(slice_tokens: Sequence, layout: SliceLayout) -> Tensor:
    """Place per-slice tokens ``S x [L, D]`` onto one ``[gh, gw, D]`` grid.

    Overlapping cells are averaged over every slice that covers them.
    """
    if len(slice_tokens) != layout.n_slices:
        raise ShapeError(f"expected {layout.n_slices} slices, got {len(slice_tokens)}")
    for t in slice_tokens:
        if t.shape[0] != layout.tokens_per_slice:
            raise ShapeError(f"slice has {t.shape[0]} tokens, layout expects "
                             f"{layout.tokens_per_slice}")
    stream = slice_tokens[0] if len(slice_tokens) == 1 else concat(list(slice_tokens), axis=0)
    return restore_stream(stream, layout)


def restore_stream(stream, layout: SliceLayout) -> Tensor:
    """Like :func:`restore_grid` for slice tokens already concatenated ``[S*L, D]``."""
    stream = as_tensor(stream)
    gh, gw = layout.grid_hw
    if stream.shape[0] != layout.n_slices * layout.tokens_per_slice:
        raise ShapeError(f"stream of {stream.shape[0]} tokens does not match layout "
                         f"({layout.n_slices} x {layout.tokens_per_slice})")
    flat = F.scatter_mean_rows(stream, layout.token_index, gh * gw)
    return flat.reshape(gh, gw, stream.shape[1])


def grid_to_stream(grid, layout: SliceLayout) -> Tensor:
    """Read a ``[gh, gw, D]`` grid back out in slice-token order ``[S*L, D]``."""
    grid = as_tensor(grid)
    gh, gw, d = grid.shape
    if (gh, gw) != layout.grid_hw:
        raise ShapeError(f"grid {gh}x{gw} does not match layout grid {layout.grid_hw}")
    return F.gather_rows(grid.reshape(gh * gw, d), layout.token_index)

