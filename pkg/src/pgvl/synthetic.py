"""Occluded keypoint scenes on a small grid.

A fixed two-sided skeleton is rotated, scaled and shifted per scene, each
joint is rendered as a Gaussian blob carrying a joint-specific channel
signature, and an optional rectangle (placed near a random joint) blanks
part of the input.  Occluded joints keep their ground truth.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import JointBatch, gaussian_heatmaps

JOINT_NAMES = ("left shoulder", "right shoulder", "left elbow", "right elbow",
               "left wrist", "right wrist", "left hip", "right hip")

# (row, col) offsets from the skeleton centre at unit scale
_TEMPLATE = {
    "shoulder": (-3.5, 2.0),
    "elbow": (-0.5, 3.5),
    "wrist": (2.5, 4.5),
    "hip": (3.0, 1.5),
    "knee": (5.5, 1.8),
    "ankle": (7.5, 2.0),
    "eye": (-6.0, 0.8),
    "ear": (-5.5, 1.6),
}

_SIGNATURE_SEED = 20240531


@dataclass(frozen=True)
class SceneConfig:
    height: int = 16
    width: int = 16
    joints: tuple[str, ...] = JOINT_NAMES
    in_channels: int = 8
    rotation_deg: float = 25.0
    scale_min: float = 0.8
    scale_max: float = 1.15
    shift: float = 2.0
    joint_jitter: float = 0.3
    sigma_render: float = 0.8
    noise_std: float = 0.05
    p_occ: float = 0.5
    occ_min: int = 4
    occ_max: int = 7
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "joints", tuple(self.joints))
        for name in self.joints:
            if base_name(name) not in _TEMPLATE:
                raise ValueError(f"no skeleton offset for joint {name!r}")
        if not 0.0 <= self.p_occ <= 1.0:
            raise ValueError(f"p_occ must lie in [0, 1], got {self.p_occ}")
        if self.occ_min < 1 or self.occ_max < self.occ_min:
            raise ValueError(f"bad occluder size range [{self.occ_min}, {self.occ_max}]")

    @property
    def num_joints(self) -> int:
        return len(self.joints)


def base_name(name: str) -> str:
    for side in ("left ", "right "):
        if name.startswith(side):
            return name[len(side):]
    return name


def _side(name: str) -> float:
    if name.startswith("left "):
        return -1.0
    if name.startswith("right "):
        return 1.0
    return 0.0


def joint_signatures(cfg: SceneConfig) -> np.ndarray:
    """Unit-norm channel code per joint (K x Cin), fixed across seeds."""
    rng = np.random.default_rng(_SIGNATURE_SEED)
    sig = np.abs(rng.standard_normal((cfg.num_joints, cfg.in_channels)))
    return sig / np.linalg.norm(sig, axis=1, keepdims=True)


def skeleton(cfg: SceneConfig) -> np.ndarray:
    offs = []
    for name in cfg.joints:
        r, c = _TEMPLATE[base_name(name)]
        offs.append((r, c * _side(name)))
    return np.asarray(offs, dtype=np.float64)


@dataclass
class Scene:
    image: np.ndarray  # (Cin, H, W)
    joints: JointBatch
    mask: np.ndarray  # (H, W) True where the input was blanked


def generate_scene(cfg: SceneConfig, index: int) -> Scene:
    rng = np.random.default_rng([cfg.seed, index])
    h, w = cfg.height, cfg.width
    theta = np.deg2rad(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
    s = rng.uniform(cfg.scale_min, cfg.scale_max)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0]) + rng.uniform(-cfg.shift, cfg.shift, size=2)
    pos = centre + s * skeleton(cfg) @ rot.T
    pos = pos + rng.normal(0.0, cfg.joint_jitter, size=pos.shape)

    grid_r = np.rint(pos[:, 0]).astype(int)
    grid_c = np.rint(pos[:, 1]).astype(int)
    labelled = (grid_r >= 0) & (grid_r < h) & (grid_c >= 0) & (grid_c < w)

    blobs = gaussian_heatmaps(pos, h, w, cfg.sigma_render)
    image = np.einsum("kc,khw->chw", joint_signatures(cfg), blobs)
    image += rng.normal(0.0, cfg.noise_std, size=image.shape)

    mask = np.zeros((h, w), dtype=bool)
    occ_draw = rng.uniform()
    size = rng.integers(cfg.occ_min, cfg.occ_max + 1, size=2)
    target = rng.integers(cfg.num_joints)
    jitter = rng.uniform(-1.0, 1.0, size=2)
    if occ_draw < cfg.p_occ:
        candidates = np.flatnonzero(labelled)
        anchor = pos[candidates[target % len(candidates)]] if len(candidates) else centre
        anchor = anchor + jitter
        top = int(np.clip(np.rint(anchor[0] - size[0] / 2.0), 0, max(0, h - size[0])))
        left = int(np.clip(np.rint(anchor[1] - size[1] / 2.0), 0, max(0, w - size[1])))
        mask[top:top + size[0], left:left + size[1]] = True
        image[:, mask] = 0.0

    occluded = np.zeros(cfg.num_joints, dtype=bool)
    occluded[labelled] = mask[grid_r[labelled], grid_c[labelled]]
    heat = gaussian_heatmaps(pos, h, w, 1.0)
    return Scene(image.astype(np.float32), JointBatch(pos, labelled, heat, occluded), mask)


@dataclass
class SceneSet:
    images: np.ndarray  # (N, Cin, H, W)
    joints: JointBatch  # stacked over N

    def __len__(self) -> int:
        return len(self.images)

    def batch(self, idx, sigma_target: float | None = None) -> tuple[np.ndarray, JointBatch]:
        idx = np.asarray(idx)
        j = self.joints
        heat = j.heatmaps[idx]
        if sigma_target is not None and sigma_target != 1.0:
            heat = gaussian_heatmaps(j.positions[idx], heat.shape[-2], heat.shape[-1], sigma_target)
        return self.images[idx], JointBatch(j.positions[idx], j.visibility[idx], heat, j.occluded[idx])


def generate_scenes(cfg: SceneConfig, start: int, count: int) -> SceneSet:
    scenes = [generate_scene(cfg, i) for i in range(start, start + count)]
    return SceneSet(np.stack([s.image for s in scenes]), JointBatch.stack([s.joints for s in scenes]))
