"""Box algebra, overlap measures, bilinear sampling and sinusoidal codes.

Boxes are normalized ``(cx, cy, w, h)`` arrays with a trailing axis of 4.
Feature maps are channel-last (``H×W×d``).  Continuous feature coordinates
place the centre of cell ``j`` at ``j + 0.5``; samples that fall outside the
map read zeros.
"""

from __future__ import annotations

import math

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .tensor import Tensor

DEFAULT_TEMPERATURE = 10000.0


class ConfigError(ValueError):
    pass


# -- plain box algebra ----------------------------------------------------------

def to_xyxy(box) -> np.ndarray:
    b = np.asarray(box, dtype=np.float64)
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def to_cxcywh(xyxy) -> np.ndarray:
    b = np.asarray(xyxy, dtype=np.float64)
    x0, y0, x1, y1 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], axis=-1)


def is_valid_box(box) -> bool:
    cx, cy, w, h = (float(v) for v in box)
    return 0.0 <= cx <= 1.0 and 0.0 <= cy <= 1.0 and 0.0 < w <= 1.0 and 0.0 < h <= 1.0


def clip_box(box) -> np.ndarray:
    """Clip corners to the unit square (I/O boundary only)."""
    return to_cxcywh(np.clip(to_xyxy(box), 0.0, 1.0))


def _inter_union(a: np.ndarray, b: np.ndarray):
    ax, bx = to_xyxy(a), to_xyxy(b)
    iw = np.clip(np.minimum(ax[..., 2], bx[..., 2]) - np.maximum(ax[..., 0], bx[..., 0]), 0.0, None)
    ih = np.clip(np.minimum(ax[..., 3], bx[..., 3]) - np.maximum(ax[..., 1], bx[..., 1]), 0.0, None)
    inter = iw * ih
    # areas from the same corners as the intersection, so iou(a, a) == 1 exactly
    area_a = (ax[..., 2] - ax[..., 0]) * (ax[..., 3] - ax[..., 1])
    area_b = (bx[..., 2] - bx[..., 0]) * (bx[..., 3] - bx[..., 1])
    return inter, area_a + area_b - inter, ax, bx


def iou(a, b) -> np.ndarray | float:
    """Intersection over union; broadcasts over leading axes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    inter, union, _, _ = _inter_union(a, b)
    out = inter / union
    return float(out) if out.ndim == 0 else out


def giou(a, b) -> np.ndarray | float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    inter, union, ax, bx = _inter_union(a, b)
    hull = (np.maximum(ax[..., 2], bx[..., 2]) - np.minimum(ax[..., 0], bx[..., 0])) * (
        np.maximum(ax[..., 3], bx[..., 3]) - np.minimum(ax[..., 1], bx[..., 1])
    )
    # the penalty is nonnegative in exact arithmetic; clamping keeps giou <= iou under rounding
    out = inter / union - np.maximum(hull - union, 0.0) / hull
    return float(out) if out.ndim == 0 else out


def pairwise_iou(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    return np.asarray(iou(a[:, None, :], b[None, :, :])).reshape(len(a), len(b))


def pairwise_giou(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    return np.asarray(giou(a[:, None, :], b[None, :, :])).reshape(len(a), len(b))


def giou_tensor(pred: Tensor, target: np.ndarray) -> Tensor:
    """Differentiable GIoU between predicted boxes (k×4 Tensor) and fixed targets."""
    target = np.asarray(target, dtype=np.float64)
    cx, cy, w, h = (pred[:, i] for i in range(4))
    px0, py0, px1, py1 = cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5
    tx = to_xyxy(target)
    tx0, ty0, tx1, ty1 = (Tensor(tx[:, i]) for i in range(4))
    iw = T.clamp(T.minimum(px1, tx1) - T.maximum(px0, tx0), 0.0)
    ih = T.clamp(T.minimum(py1, ty1) - T.maximum(py0, ty0), 0.0)
    inter = iw * ih
    t_area = (tx[:, 2] - tx[:, 0]) * (tx[:, 3] - tx[:, 1])
    union = (px1 - px0) * (py1 - py0) + Tensor(t_area) - inter
    hull = (T.maximum(px1, tx1) - T.minimum(px0, tx0)) * (T.maximum(py1, ty1) - T.minimum(py0, ty0))
    return inter / union - (hull - union) / hull


# -- bilinear machinery ------------------------------------------------------------

def _bilinear_corners(u: np.ndarray, v: np.ndarray, W: int, H: int):
    """Corner indices, weights and validity for continuous index coords (u, v)."""
    x0 = np.floor(u)
    y0 = np.floor(v)
    fx = u - x0
    fy = v - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    corners = []
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi = x0 + dx
            yi = y0 + dy
            valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            corners.append((np.clip(yi, 0, H - 1), np.clip(xi, 0, W - 1), wy * wx * valid, valid, dx, dy))
    return corners, fx, fy


def roi_sample_coords(boxes: np.ndarray, H: int, W: int, S: int):
    """Continuous index coordinates of the S×S sub-cell centres of each box."""
    boxes = np.asarray(boxes, dtype=np.float64)
    xy = to_xyxy(boxes)
    t = (np.arange(S) + 0.5) / S
    xs = xy[..., 0:1] + t * (xy[..., 2:3] - xy[..., 0:1])  # (..., S)
    ys = xy[..., 1:2] + t * (xy[..., 3:4] - xy[..., 1:2])
    return xs * W - 0.5, ys * H - 0.5


def roi_align(feat: Tensor, boxes, S: int) -> Tensor:
    """RoIAlign with one bilinear sample at the centre of each of S×S sub-cells.

    ``feat`` is ``H×W×d`` with boxes ``(4,)`` or ``(N, 4)``, or batched
    ``B×H×W×d`` with boxes ``(B, N, 4)``.  Output is ``[B,] [N,] S×S×d``.
    Differentiable with respect to ``feat`` only.
    """
    feat = T.as_tensor(feat)
    boxes = np.asarray(boxes, dtype=np.float64)
    batched = feat.ndim == 4
    fd = feat.data if batched else feat.data[None]
    bx = boxes if batched else boxes[None]
    single_box = bx.ndim == 2
    if single_box:
        bx = bx[:, None, :]
    B, H, W, d = fd.shape
    N = bx.shape[1]
    u, v = roi_sample_coords(bx, H, W, S)  # (B, N, S)
    uu = np.broadcast_to(u[:, :, None, :], (B, N, S, S))
    vv = np.broadcast_to(v[:, :, :, None], (B, N, S, S))
    corners, _, _ = _bilinear_corners(uu, vv, W, H)
    n_out = B * N * S * S
    rows = np.tile(np.arange(n_out), 4)
    bidx = np.broadcast_to(np.arange(B)[:, None, None, None], (B, N, S, S))
    cols = np.concatenate([(bidx * H * W + yi * W + xi).reshape(-1) for yi, xi, *_ in corners])
    vals = np.concatenate([w.reshape(-1) for _, _, w, *_ in corners])
    M = sp.csr_matrix((vals, (rows, cols)), shape=(n_out, B * H * W))
    out = (M @ fd.reshape(B * H * W, d)).reshape(B, N, S, S, d)
    if single_box:
        out = out[:, 0]
    if not batched:
        out = out[0]

    def bw(g):
        gflat = M.T @ g.reshape(n_out, d)
        return (gflat.reshape(feat.shape),)

    return Tensor.make(np.ascontiguousarray(out), (feat,), bw)


def sample_points(grids: Tensor, pts: Tensor, heads: int = 1) -> Tensor:
    """Bilinear reads from region grids at box-relative points.

    ``grids`` is ``M×S×S×d``; ``pts`` is ``M×heads×2`` with (x, y) in [0,1].
    Point ``h`` reads channel slice ``h·d/heads:(h+1)·d/heads``; the result is
    ``M×d`` (slices concatenated in head order).  Points beyond the outermost
    sample centres read the edge values.  Differentiable with respect to both
    the grids and the points.
    """
    grids = T.as_tensor(grids)
    pts = T.as_tensor(pts)
    M, S, S2, d = grids.shape
    if S != S2:
        raise ConfigError("region grids must be square")
    if d % heads:
        raise ConfigError(f"channel count {d} not divisible by {heads} heads")
    dh = d // heads
    g5 = grids.data.reshape(M, S, S, heads, dh)
    # sample j sits at relative (j + 0.5)/S; reads past the outer samples replicate the edge
    u_raw = pts.data[..., 0] * S - 0.5  # (M, heads)
    v_raw = pts.data[..., 1] * S - 0.5
    u = np.clip(u_raw, 0.0, S - 1.0)
    v = np.clip(v_raw, 0.0, S - 1.0)
    corners, _, _ = _bilinear_corners(u, v, S, S)
    mi = np.broadcast_to(np.arange(M)[:, None], (M, heads))
    hi = np.broadcast_to(np.arange(heads)[None, :], (M, heads))
    vals = [g5[mi, yi, xi, hi] * valid[..., None] for yi, xi, _, valid, _, _ in corners]  # (M,heads,dh)
    out = sum(w[..., None] * val for (_, _, w, *_), val in zip(corners, vals))
    fx = u - np.floor(u)
    fy = v - np.floor(v)

    def bw(g):
        g3 = g.reshape(M, heads, dh)
        ggrid = None
        if grids.requires_grad:
            ggrid = np.zeros_like(g5)
            for yi, xi, w, valid, _, _ in corners:
                np.add.at(ggrid, (mi, yi, xi, hi), g3 * (w * valid)[..., None])
            ggrid = ggrid.reshape(grids.shape)
        gpts = None
        if pts.requires_grad:
            du = np.zeros((M, heads))
            dv = np.zeros((M, heads))
            for (_, _, _, _, dx, dy), val in zip(corners, vals):
                proj = (g3 * val).sum(-1)
                wx = fx if dx else 1.0 - fx
                wy = fy if dy else 1.0 - fy
                du += proj * wy * (1.0 if dx else -1.0)
                dv += proj * wx * (1.0 if dy else -1.0)
            du *= (u_raw == u) * S
            dv *= (v_raw == v) * S
            gpts = np.stack([du, dv], axis=-1)
        return ggrid, gpts

    return Tensor.make(out.reshape(M, d), (grids, pts), bw)


def bilinear_sample(grid: Tensor, pt) -> Tensor:
    """Sample an ``S×S×d`` grid at one box-relative point (x, y) ∈ [0,1]²."""
    grid = T.as_tensor(grid)
    pt = T.as_tensor(pt)
    return sample_points(T.reshape(grid, (1,) + grid.shape), T.reshape(pt, (1, 1, 2)), 1).reshape(
        grid.shape[-1]
    )


# -- sinusoidal codes -------------------------------------------------------------

def _frequencies(n: int, temperature: float) -> np.ndarray:
    return 1.0 / temperature ** (np.arange(n) / n)


def sine_code(coords: Tensor, dim: int, temperature: float = DEFAULT_TEMPERATURE,
              scale: float = 1.0) -> Tensor:
    """Encode ``(..., k)`` coordinates into ``(..., dim)``.

    Each coordinate gets ``dim/(2k)`` frequencies, laid out as
    ``[sin(c·f_0..), cos(c·f_0..)]`` per coordinate in order.
    """
    coords = T.as_tensor(coords)
    k = coords.shape[-1]
    if dim % (2 * k):
        raise ConfigError(f"embedding dim {dim} not divisible by {2 * k}")
    freqs = _frequencies(dim // (2 * k), temperature) * scale
    arg = T.reshape(coords, coords.shape + (1,)) * Tensor(freqs)  # (..., k, nf)
    code = T.concat([T.sin(arg), T.cos(arg)], axis=-1)  # (..., k, 2nf)
    return T.reshape(code, coords.shape[:-1] + (dim,))


def absolute_points(boxes: np.ndarray, pts: Tensor) -> Tensor:
    """Map box-relative points (..., P, 2) into image coordinates."""
    boxes = np.asarray(boxes, dtype=np.float64)
    xy = to_xyxy(boxes)
    origin = xy[..., None, 0:2]
    size = boxes[..., None, 2:4]
    return T.as_tensor(pts) * Tensor(size) + Tensor(origin)


def sinusoidal_embed(box, pts, d_h: int, temperature: float = DEFAULT_TEMPERATURE,
                     scale: float = 1.0) -> Tensor:
    """Sine/cosine code of salient points in absolute image coordinates.

    ``box`` is ``(..., 4)``, ``pts`` is ``(..., P, 2)`` relative to that box;
    returns ``(..., P, d_h)``.  ``d_h`` must be divisible by 4.
    """
    if d_h % 4:
        raise ConfigError(f"d_h={d_h} must be divisible by 4")
    return sine_code(absolute_points(box, pts), d_h, temperature, scale)


def grid_positions(H: int, W: int) -> np.ndarray:
    """Normalized (x, y) centres of an H×W feature grid, row-major, shape (H·W, 2)."""
    ys, xs = np.meshgrid((np.arange(H) + 0.5) / H, (np.arange(W) + 0.5) / W, indexing="ij")
    return np.stack([xs.reshape(-1), ys.reshape(-1)], axis=-1)


def grid_position_code(H: int, W: int, d_model: int, heads: int,
                       temperature: float = DEFAULT_TEMPERATURE, scale: float = 1.0) -> np.ndarray:
    """2-D position code of a feature grid, one per-head code tiled across heads.

    Tiling puts the same code on every head slice so a head's salient-point
    embedding is compared against keys in a matching coordinate system.
    """
    dh = d_model // heads
    code = sine_code(Tensor(grid_positions(H, W)), dh, temperature, scale).data
    return np.tile(code, (1, heads))


def box_code(boxes, dim: int, temperature: float = DEFAULT_TEMPERATURE, scale: float = 2 * math.pi) -> np.ndarray:
    """Sine code of the four box coordinates (used as self-attention query position)."""
    return sine_code(Tensor(np.asarray(boxes, dtype=np.float64)), dim, temperature, scale).data
