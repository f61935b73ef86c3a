"""Training, evaluation, ablations and alignment maps on synthetic scenes."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .engine import Array, ParamStore, backward, scale
from .fusion import FusionTrace
from .losses import JointBatch, heatmap_loss, sample_joint_features, vlml
from .model import ARCHITECTURES, ModelSpec, init_model, model_forward
from .synthetic import SceneSet, generate_scenes

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, report: dict):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class LossConfig:
    lambda_vlml: float = 0.1
    sampling: str = "nearest"
    sigma_target: float = 1.0
    normalize: bool = False
    temperature: float = 1.0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    clip_norm: float = 0.0
    milestones: tuple[float, ...] = (170 / 210, 200 / 210)
    gamma: float = 0.1
    n_train: int = 2000
    n_eval: int = 500
    pck_radius: float = 2.0
    eval_every: int = 0
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)


@dataclass
class MetricsReport:
    architecture: str
    seed: int
    epochs: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- evaluation

def decode_peaks(heatmaps: np.ndarray) -> np.ndarray:
    """Argmax cell of each map as (row, col); ties go to the first cell."""
    h, w = heatmaps.shape[-2:]
    flat = heatmaps.reshape(heatmaps.shape[:-2] + (h * w,)).argmax(axis=-1)
    return np.stack([flat // w, flat % w], axis=-1).astype(np.float64)


def evaluate_pck(predictions: np.ndarray, positions: np.ndarray, radius: float, include=None) -> float:
    """Fraction of included joints whose decoded peak lies within ``radius`` cells."""
    peaks = decode_peaks(np.asarray(predictions))
    pos = np.asarray(positions, dtype=np.float64)
    if peaks.shape != pos.shape:
        raise ValueError(f"predictions decode to {peaks.shape}, ground truth is {pos.shape}")
    mask = np.ones(pos.shape[:-1], dtype=bool) if include is None else np.asarray(include, dtype=bool)
    if not mask.any():
        raise ValueError("evaluate_pck: no joints selected")
    hit = np.linalg.norm(peaks - pos, axis=-1) <= radius
    return float(hit[mask].mean())


def predict(spec: ModelSpec, params: ParamStore, scenes: SceneSet, batch_size: int = 64) -> np.ndarray:
    out = []
    for start in range(0, len(scenes), batch_size):
        images, _ = scenes.batch(np.arange(start, min(start + batch_size, len(scenes))))
        out.append(model_forward(spec, params, images).heatmaps.data)
    return np.concatenate(out)


def evaluate(spec: ModelSpec, params: ParamStore, scenes: SceneSet, radius: float) -> dict:
    pred = predict(spec, params, scenes)
    j = scenes.joints
    subsets = {"pck": j.visibility, "pck_visible": j.visibility & ~j.occluded,
               "pck_occluded": j.visibility & j.occluded}
    metrics = {}
    for key, mask in subsets.items():
        metrics[key] = evaluate_pck(pred, j.positions, radius, mask) if mask.any() else None
    metrics["n_joints"] = int(j.visibility.sum())
    metrics["n_occluded"] = int((j.visibility & j.occluded).sum())
    return metrics


# ---------------------------------------------------------------- training

def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Step decay at fractional milestones of the epoch budget."""
    drops = sum(epoch >= round(m * cfg.epochs) for m in cfg.milestones)
    return cfg.lr * cfg.gamma ** drops


def batch_loss(spec: ModelSpec, params: ParamStore, images: np.ndarray, joints: JointBatch,
               loss_cfg: LossConfig) -> tuple[Array, float, float]:
    out = model_forward(spec, params, images)
    hm, _ = heatmap_loss(out.heatmaps, joints)
    total = hm
    v = 0.0
    if loss_cfg.lambda_vlml:
        f_joints = sample_joint_features(out.fused_v, joints, loss_cfg.sampling)
        term = vlml(f_joints, out.fused_l, joints.visibility, loss_cfg.normalize, loss_cfg.temperature)
        v = term.item()
        total = hm + scale(term, loss_cfg.lambda_vlml)
    return total, hm.item(), v


class SGD:
    """Stochastic gradient descent with optional momentum, weight decay and
    global gradient-norm clipping (``clip_norm`` <= 0 disables it)."""

    def __init__(self, params: ParamStore, momentum: float = 0.0, weight_decay: float = 0.0,
                 clip_norm: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.velocity = {n: np.zeros_like(a) for n, a in params.arrays().items()}

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params.parameters():
            if p.value.grad is not None:
                g = p.value.grad.data
                total += float(np.vdot(g, g))
        return math.sqrt(total)

    def step(self, lr: float) -> None:
        factor = 1.0
        if self.clip_norm > 0:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                factor = self.clip_norm / norm
        for p in self.params.parameters():
            if p.value.grad is None:
                continue
            g = p.value.grad.data
            if factor != 1.0:
                g = g * np.asarray(factor, dtype=g.dtype)
            if self.weight_decay:
                g = g + self.weight_decay * p.value.data
            if self.momentum:
                v = self.velocity[p.name]
                v *= self.momentum
                v += g
                g = v
            p.value.data -= (lr * g).astype(p.value.dtype)


def train(spec: ModelSpec, cfg: TrainConfig, loss_cfg: LossConfig, seed: int, on_epoch=None,
          params: ParamStore | None = None) -> tuple[MetricsReport, ParamStore]:
    """Minibatch training on freshly generated scenes for one seed."""
    start_time = time.perf_counter()
    scene_cfg = replace(spec.scene, seed=seed)
    spec = replace(spec, scene=scene_cfg)
    train_set = generate_scenes(scene_cfg, 0, cfg.n_train)
    eval_set = generate_scenes(scene_cfg, cfg.n_train, cfg.n_eval)
    rng = np.random.default_rng([seed, 1])
    if params is None:
        params = init_model(spec, rng)
    opt = SGD(params, cfg.momentum, cfg.weight_decay, cfg.clip_norm)
    order_rng = np.random.default_rng([seed, 2])
    report = MetricsReport(spec.architecture, seed)
    for epoch in range(cfg.epochs):
        lr = learning_rate(cfg, epoch)
        order = order_rng.permutation(cfg.n_train)
        sums = np.zeros(3)
        steps = 0
        for b in range(0, cfg.n_train, cfg.batch_size):
            images, joints = train_set.batch(order[b:b + cfg.batch_size], loss_cfg.sigma_target)
            params.zero_grad()
            total, hm, v = batch_loss(spec, params, images, joints, loss_cfg)
            value = total.item()
            if not math.isfinite(value):
                diag = {"epoch": epoch, "step": steps, "loss": repr(value), "heatmap_loss": repr(hm),
                        "vlml": repr(v), "lr": lr, "history": report.epochs}
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {steps}", diag)
            backward(total)
            opt.step(lr)
            sums += (value, hm, v)
            steps += 1
        record = {"epoch": epoch + 1, "lr": lr, "loss": sums[0] / steps, "heatmap_loss": sums[1] / steps,
                  "vlml": sums[2] / steps}
        last = epoch + 1 == cfg.epochs
        if last or (cfg.eval_every and (epoch + 1) % cfg.eval_every == 0):
            record["eval"] = evaluate(spec, params, eval_set, cfg.pck_radius)
        report.epochs.append(record)
        log.info("%s seed %d epoch %d loss %.5f", spec.architecture, seed, epoch + 1, record["loss"])
        if on_epoch is not None:
            on_epoch(record)
    report.final = report.epochs[-1]["eval"]
    report.seconds = time.perf_counter() - start_time
    return report, params


# ---------------------------------------------------------------- ablations

METRICS = ("pck", "pck_visible", "pck_occluded")


def ablate(spec: ModelSpec, cfg: TrainConfig, loss_cfg: LossConfig, architectures=ARCHITECTURES,
           on_run=None) -> dict[str, list[MetricsReport]]:
    """Train every architecture on every seed; returns reports keyed by architecture."""
    results: dict[str, list[MetricsReport]] = {}
    for arch in architectures:
        arch_spec = replace(spec, architecture=arch)
        for seed in cfg.seeds:
            report, _ = train(arch_spec, cfg, loss_cfg, seed)
            results.setdefault(arch, []).append(report)
            if on_run is not None:
                on_run(report)
    return results


def summarize(results: dict[str, list[MetricsReport]]) -> list[dict]:
    rows = []
    for arch, reports in results.items():
        row = {"ablation": arch, "seeds": len(reports)}
        for m in METRICS:
            vals = np.array([r.final[m] for r in reports if r.final.get(m) is not None], dtype=np.float64)
            row[f"{m}_mean"] = float(vals.mean()) if vals.size else None
            row[f"{m}_std"] = float(vals.std()) if vals.size else None
        rows.append(row)
    return rows


# ---------------------------------------------------------------- alignment maps

def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    sim = (a / np.where(na > 0, na, 1.0)) @ (b / np.where(nb > 0, nb, 1.0)).T
    return np.clip(sim, -1.0, 1.0)


def alignment_maps(trace: FusionTrace | None, grid: tuple[int, int], sample: int = 0) -> np.ndarray:
    """Per-level joint/cell cosine similarity, shape (levels, K, H, W).

    Level 0 holds the leaves.  Each node contributes the similarity between
    its fused language rows and fused visual rows; nodes of a level are
    averaged.
    """
    if trace is None:
        raise ValueError("alignment maps need a fusion trace; enable tracing")
    graph = trace.graph
    h, w = grid
    levels = []
    for level in range(graph.levels):
        sims = []
        for node in graph.level_nodes(level):
            lang = trace.fused("language", node)
            vis = trace.fused("vision", node)
            if lang.ndim == 3:
                lang, vis = lang[sample], vis[sample]
            sims.append(cosine_matrix(lang, vis))
        levels.append(np.mean(sims, axis=0).reshape(-1, h, w))
    return np.stack(levels)
