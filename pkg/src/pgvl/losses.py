"""Visual-language matching loss and heatmap regression."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import (Array, ShapeError, cross_entropy_rows, gather_rows, matmul, mse, mul, scale, transpose)


@dataclass
class JointBatch:
    """Ground truth for one scene or a stacked batch of scenes.

    ``positions`` are (row, col) in token-grid units.  ``visibility`` marks
    joints that carry a usable label (inside the grid); ``occluded`` marks
    labelled joints hidden in the rendered input.
    """

    positions: np.ndarray
    visibility: np.ndarray
    heatmaps: np.ndarray
    occluded: np.ndarray | None = None

    def __post_init__(self):
        if self.occluded is None:
            self.occluded = np.zeros_like(self.visibility, dtype=bool)

    @property
    def grid(self) -> tuple[int, int]:
        return self.heatmaps.shape[-2:]

    @classmethod
    def stack(cls, items: list[JointBatch]) -> JointBatch:
        return cls(np.stack([j.positions for j in items]), np.stack([j.visibility for j in items]),
                   np.stack([j.heatmaps for j in items]), np.stack([j.occluded for j in items]))


def gaussian_heatmaps(positions: np.ndarray, height: int, width: int, sigma: float) -> np.ndarray:
    rows = np.arange(height, dtype=np.float64)[:, None]
    cols = np.arange(width, dtype=np.float64)[None, :]
    pos = np.asarray(positions, dtype=np.float64)
    d2 = (rows - pos[..., 0, None, None]) ** 2 + (cols - pos[..., 1, None, None]) ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma))


def sample_joint_features(f_v: Array, joints: JointBatch, mode: str = "nearest") -> Array:
    """Read one visual feature row per joint at its ground-truth position."""
    h, w = joints.grid
    if f_v.shape[-2] != h * w:
        raise ShapeError(f"visual tokens have {f_v.shape[-2]} rows, grid is {h}x{w}")
    pos = np.asarray(joints.positions, dtype=np.float64)
    vis = np.asarray(joints.visibility, dtype=bool)
    inside = (pos[..., 0] >= -0.5) & (pos[..., 0] <= h - 0.5) & (pos[..., 1] >= -0.5) & (pos[..., 1] <= w - 0.5)
    if np.any(vis & ~inside):
        raise ValueError("a visible joint lies outside the feature grid")
    if mode == "nearest":
        r = np.clip(np.rint(pos[..., 0]), 0, h - 1).astype(np.int64)
        c = np.clip(np.rint(pos[..., 1]), 0, w - 1).astype(np.int64)
        return gather_rows(f_v, r * w + c)
    if mode != "bilinear":
        raise ValueError(f"unknown sampling mode {mode!r}")
    r = np.clip(pos[..., 0], 0, h - 1)
    c = np.clip(pos[..., 1], 0, w - 1)
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(c).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr, fc = r - r0, c - c0
    out = None
    for rr, cc, wt in ((r0, c0, (1 - fr) * (1 - fc)), (r0, c1, (1 - fr) * fc),
                       (r1, c0, fr * (1 - fc)), (r1, c1, fr * fc)):
        term = mul(gather_rows(f_v, rr * w + cc), Array(wt[..., None].astype(f_v.dtype)))
        out = term if out is None else out + term
    return out


def correlation(f_joints: Array, f_l: Array) -> Array:
    if f_joints.shape != f_l.shape:
        raise ShapeError(f"joint features {f_joints.shape} vs language features {f_l.shape}")
    return matmul(f_joints, transpose(f_l))


def vlml_from_correlation(corr: Array, visibility=None) -> Array:
    """Symmetric cross-entropy of a K x K correlation against the identity.

    Joints outside ``visibility`` are dropped from both rows and columns.
    """
    k = corr.shape[-1]
    if corr.shape[-2] != k:
        raise ShapeError(f"correlation must be square, got {corr.shape}")
    target = np.broadcast_to(np.arange(k), corr.shape[:-1])
    vis = np.ones(corr.shape[:-1], dtype=bool) if visibility is None else np.asarray(visibility, dtype=bool)
    forward = cross_entropy_rows(corr, target, vis, vis)
    reverse = cross_entropy_rows(transpose(corr), target, vis, vis)
    return scale(forward + reverse, 0.5)


def vlml(f_joints: Array, f_l: Array, visibility=None, normalize: bool = False,
         temperature: float = 1.0) -> Array:
    if normalize:
        f_joints, f_l = _row_normalize(f_joints), _row_normalize(f_l)
    corr = correlation(f_joints, f_l)
    if temperature != 1.0:
        corr = scale(corr, 1.0 / temperature)
    return vlml_from_correlation(corr, visibility)


def _row_normalize(x: Array) -> Array:
    # norms are treated as constants; this path is off by default
    norms = np.sqrt((x.data ** 2).sum(axis=-1, keepdims=True)) + 1e-8
    return mul(x, Array((1.0 / norms).astype(x.dtype)))


def heatmap_loss(pred: Array, joints: JointBatch) -> tuple[Array, bool]:
    """MSE over labelled joints' maps; the flag is False when none are labelled."""
    target = np.asarray(joints.heatmaps, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"heatmap prediction {pred.shape} vs target {target.shape}")
    mask = np.asarray(joints.visibility, dtype=pred.dtype)[..., None, None]
    return mse(pred, target, mask), bool(np.any(joints.visibility))
