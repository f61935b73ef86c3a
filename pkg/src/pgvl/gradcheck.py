"""Central finite-difference checks of the reverse-mode tape."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import engine as E
from .engine import Array
from .fusion import FusionOptions, init_fusion_params, pgvl_forward
from .losses import JointBatch, gaussian_heatmaps, heatmap_loss, sample_joint_features, vlml
from .parse_graph import DecompositionSpec, build_parse_graph
from .variants import VariantSpec, init_variant_params, variants_forward


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(|a|, |n|, 1), elementwise; absolute below unit magnitude."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(loss_fn: Callable[[], Array], inputs: dict[str, Array], eps: float = 1e-5,
                    max_entries: int | None = None, rng: np.random.Generator | None = None) -> dict[str, float]:
    """Compare backward() against central differences for each named input.

    ``max_entries`` caps the number of probed elements per input (chosen at
    random); the analytic gradient is still computed in full.
    """
    for a in inputs.values():
        a.grad = None
    loss = loss_fn()
    E.backward(loss)
    analytic = {n: (a.grad.data.copy() if a.grad is not None else np.zeros_like(a.data)) for n, a in inputs.items()}
    rng = rng or np.random.default_rng(0)
    errors = {}
    for name, arr in inputs.items():
        flat = arr.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn().item()
            flat[i] = orig - eps
            down = loss_fn().item()
            flat[i] = orig
            numeric[j] = (up - down) / (2 * eps)
        errors[name] = relative_error(analytic[name].reshape(-1)[idx], numeric)
    return errors


# ---------------------------------------------------------------- random composites

PRIMITIVES = ("matmul", "softmax", "concat", "split", "add", "mul", "scale", "transpose", "linear", "gather")


def _leaf(rng, shape) -> Array:
    return Array(rng.standard_normal(shape), requires_grad=True)


def random_composite(rng: np.random.Generator, steps: int = 4, max_dim: int = 6):
    """Build a random expression over the primitives; returns (loss_fn, leaves, ops used)."""
    dims = lambda: int(rng.integers(1, max_dim + 1))  # noqa: E731
    leaves: dict[str, Array] = {}
    plan = []
    base = (dims(), dims())
    leaves["x0"] = _leaf(rng, base)
    shapes = [base]
    for _ in range(steps):
        op = PRIMITIVES[rng.integers(len(PRIMITIVES))]
        src = int(rng.integers(len(shapes)))
        m, n = shapes[src]
        if op in ("matmul", "linear"):
            k = dims()
            leaves[f"w{len(leaves)}"] = _leaf(rng, (n, k))
            extra = {"w": f"w{len(leaves) - 1}"}
            if op == "linear":
                leaves[f"b{len(leaves)}"] = _leaf(rng, (k,))
                extra["b"] = f"b{len(leaves) - 1}"
            shape = (m, k)
        elif op == "concat":
            k = dims()
            axis = int(rng.integers(2))
            other = (m, k) if axis == 1 else (k, n)
            leaves[f"c{len(leaves)}"] = _leaf(rng, other)
            extra = {"other": f"c{len(leaves) - 1}", "axis": axis}
            shape = (m, n + k) if axis == 1 else (m + k, n)
        elif op == "split":
            if n < 2:
                op, extra, shape = "scale", {"c": float(rng.uniform(-2, 2))}, (m, n)
            else:
                cut = int(rng.integers(1, n))
                extra = {"sizes": [cut, n - cut], "pick": int(rng.integers(2))}
                shape = (m, extra["sizes"][extra["pick"]])
        elif op in ("add", "mul"):
            leaves[f"e{len(leaves)}"] = _leaf(rng, (m, n))
            extra = {"other": f"e{len(leaves) - 1}"}
            shape = (m, n)
        elif op == "scale":
            extra = {"c": float(rng.uniform(-2, 2))}
            shape = (m, n)
        elif op == "transpose":
            extra = {}
            shape = (n, m)
        elif op == "gather":
            k = dims()
            extra = {"index": rng.integers(0, m, size=k)}
            shape = (k, n)
        else:  # softmax
            extra = {}
            shape = (m, n)
        plan.append((op, src, extra))
        shapes.append(shape)
    final = shapes[-1]
    weights = rng.standard_normal(final)
    terminal = ("weighted", "mse", "xent")[int(rng.integers(3))]
    target = rng.standard_normal(final)
    classes = rng.integers(0, final[1], size=final[0])

    def loss_fn():
        values = [leaves["x0"]]
        for op, src, extra in plan:
            a = values[src]
            if op == "matmul":
                v = E.matmul(a, leaves[extra["w"]])
            elif op == "linear":
                v = E.linear(a, leaves[extra["w"]], leaves[extra["b"]])
            elif op == "concat":
                v = E.concat([a, leaves[extra["other"]]], axis=extra["axis"])
            elif op == "split":
                v = E.split(a, extra["sizes"], axis=1)[extra["pick"]]
            elif op == "add":
                v = a + leaves[extra["other"]]
            elif op == "mul":
                v = E.mul(a, leaves[extra["other"]])
            elif op == "scale":
                v = E.scale(a, extra["c"])
            elif op == "transpose":
                v = E.transpose(a)
            elif op == "gather":
                v = E.gather_rows(a, extra["index"])
            else:
                v = E.softmax_rows(a)
            values.append(v)
        out = values[-1]
        if terminal == "mse":
            return E.mse(out, target)
        if terminal == "xent":
            return E.cross_entropy_rows(out, classes)
        return E.sum_all(E.mul(out, Array(weights)))

    return loss_fn, leaves, [p[0] for p in plan] + [terminal]


# ---------------------------------------------------------------- suite

@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _fusion_case(branching, channels, rows_l, rows_v, rng, options=FusionOptions()):
    graph = build_parse_graph(DecompositionSpec(branching, channels))
    params = init_fusion_params(graph, rng, sigma=0.5, dtype=np.float64)
    # non-zero output projection so the fused path reaches the loss
    for mod in ("language", "vision"):
        params[f"output/{mod}/weight"].data[...] = rng.standard_normal((channels, channels)) * 0.5
    tl = Array(rng.standard_normal((rows_l, channels)), requires_grad=True)
    tv = Array(rng.standard_normal((rows_v, channels)), requires_grad=True)
    wl = Array(rng.standard_normal((rows_l, channels)))
    wv = Array(rng.standard_normal((rows_v, channels)))

    def loss_fn():
        fl, fv, _ = pgvl_forward(tl, tv, graph, params, options=options)
        return E.sum_all(E.mul(fl, wl)) + E.sum_all(E.mul(fv, wv))

    inputs = {n: params[n] for n in params.names()}
    inputs.update({"tokens_l": tl, "tokens_v": tv})
    return loss_fn, inputs


def _variant_case(rng):
    spec = VariantSpec((4, 8), (2,))
    params = init_variant_params(spec, 6, rng, sigma=0.5, dtype=np.float64)
    for name in params.names():
        if name.endswith("weight") and ("merge" in name or "output" in name):
            params[name].data[...] = rng.standard_normal(params[name].shape) * 0.5
    tl = Array(rng.standard_normal((3, 6)), requires_grad=True)
    tv = Array(rng.standard_normal((4, 6)), requires_grad=True)
    wl, wv = Array(rng.standard_normal((3, 6))), Array(rng.standard_normal((4, 6)))

    def loss_fn():
        fl, fv, _ = variants_forward(tl, tv, spec, params)
        return E.sum_all(E.mul(fl, wl)) + E.sum_all(E.mul(fv, wv))

    inputs = {n: params[n] for n in params.names()}
    inputs.update({"tokens_l": tl, "tokens_v": tv})
    return loss_fn, inputs


def _loss_case(rng, sampling):
    k, c, h, w = 4, 5, 3, 3
    pos = np.array([[0.0, 0.0], [1.0, 2.0], [2.0, 1.0], [1.5, 0.5]])
    vis = np.array([True, True, False, True])
    joints = JointBatch(pos, vis, gaussian_heatmaps(pos, h, w, 1.0))
    f_v = Array(rng.standard_normal((h * w, c)), requires_grad=True)
    f_l = Array(rng.standard_normal((k, c)), requires_grad=True)
    head = Array(rng.standard_normal((c, k)))

    def loss_fn():
        pred = E.reshape(E.transpose(E.matmul(f_v, head)), (k, h, w))
        hm, _ = heatmap_loss(pred, joints)
        return hm + E.scale(vlml(sample_joint_features(f_v, joints, sampling), f_l, vis), 0.1)

    return loss_fn, {"F_V_res": f_v, "F_L_res": f_l}


def run_suite(seed: int = 0, composites: int = 50, verbose: Callable[[str], None] | None = None,
              max_entries: int = 12) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []

    def note(res: CheckResult):
        results.append(res)
        if verbose:
            verbose(f"{'PASS' if res.passed else 'FAIL'} {res.name}: rel err {res.error:.2e} (< {res.tolerance:g})")

    for i in range(composites):
        loss_fn, leaves, ops = random_composite(rng)
        errs = check_gradients(loss_fn, leaves, rng=rng)
        note(CheckResult(f"composite {i:02d} [{' '.join(ops)}]", max(errs.values()), 1e-6))
    for branching, opts in (((2,), FusionOptions()), ((2, 2), FusionOptions()), ((3,), FusionOptions()),
                            ((2, 2), FusionOptions(context=False)), ((2, 2), FusionOptions(cross=False)),
                            ((2, 2), FusionOptions(guided=False)), ((2,), FusionOptions(heads=2))):
        loss_fn, inputs = _fusion_case(branching, 12 if 3 in branching else 8, 3, 4, rng, opts)
        errs = check_gradients(loss_fn, inputs, max_entries=max_entries, rng=rng)
        tag = ",".join(k for k, v in (("no_context", not opts.context), ("no_cross", not opts.cross),
                                      ("no_gm", not opts.guided), (f"heads={opts.heads}", opts.heads > 1)) if v)
        note(CheckResult(f"pgvl_forward G={list(branching)}{' ' + tag if tag else ''}", max(errs.values()), 1e-5))
    loss_fn, inputs = _variant_case(rng)
    note(CheckResult("variants_forward D=[4,8] G=[2]", max(check_gradients(loss_fn, inputs, max_entries=max_entries,
                                                                           rng=rng).values()), 1e-5))
    for sampling in ("nearest", "bilinear"):
        loss_fn, inputs = _loss_case(rng, sampling)
        note(CheckResult(f"heatmap + vlml ({sampling})", max(check_gradients(loss_fn, inputs).values()), 1e-5))
    return results


def main(verbose=print) -> bool:
    start = time.perf_counter()
    results = run_suite(verbose=verbose)
    failed = [r for r in results if not r.passed]
    verbose(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - start:.1f}s")
    return not failed
