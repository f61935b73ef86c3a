import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pgvl import engine as E
from pgvl.engine import Array, ShapeError
from pgvl.gradcheck import check_gradients
from pgvl.losses import (JointBatch, correlation, gaussian_heatmaps, heatmap_loss, sample_joint_features, vlml,
                         vlml_from_correlation)


def f64(x, grad=False):
    return Array(np.asarray(x, dtype=np.float64), requires_grad=grad)


def _joints(pos, vis=None, h=4, w=4):
    pos = np.asarray(pos, dtype=np.float64)
    vis = np.ones(len(pos), bool) if vis is None else np.asarray(vis)
    return JointBatch(pos, vis, gaussian_heatmaps(pos, h, w, 1.0))


# ---------------------------------------------------------------- vlml

@pytest.mark.parametrize("k", [1, 2, 8, 17])
def test_zero_correlation_gives_log_k(k):
    assert abs(vlml_from_correlation(f64(np.zeros((k, k)))).item() - math.log(k)) < 1e-9


def test_scaled_identity_closed_form():
    value = vlml_from_correlation(f64(10 * np.eye(2))).item()
    assert abs(value - math.log1p(math.exp(-10))) < 1e-12
    assert abs(value - 4.54e-5) < 1e-7


@given(st.integers(2, 6), st.integers(0, 1000))
def test_transpose_swap_symmetry_is_exact(k, seed):
    corr = np.random.default_rng(seed).standard_normal((k, k))
    assert vlml_from_correlation(f64(corr)).item() == vlml_from_correlation(f64(corr.T)).item()


def test_loss_falls_as_the_diagonal_grows():
    values = [vlml_from_correlation(f64(s * np.eye(4))).item() for s in (1, 5, 10)]
    assert values[0] > values[1] > values[2]


def test_invisible_joints_are_dropped():
    corr = np.random.default_rng(0).standard_normal((3, 3))
    vis = [True, False, True]
    sub = corr[np.ix_([0, 2], [0, 2])]
    np.testing.assert_allclose(vlml_from_correlation(f64(corr), vis).item(),
                               vlml_from_correlation(f64(sub)).item(), atol=1e-12)


def test_no_visible_joint_gives_zero():
    assert vlml_from_correlation(f64(np.ones((3, 3))), [False] * 3).item() == 0.0


def test_correlation_is_joint_by_prompt(rng):
    fj, fl = rng.standard_normal((3, 5)), rng.standard_normal((3, 5))
    np.testing.assert_allclose(correlation(f64(fj), f64(fl)).data, fj @ fl.T)
    with pytest.raises(ShapeError):
        correlation(f64(fj), f64(fl[:2]))


def test_vlml_gradient(rng):
    fj, fl = f64(rng.standard_normal((4, 6)), True), f64(rng.standard_normal((4, 6)), True)
    vis = [True, True, False, True]
    assert max(check_gradients(lambda: vlml(fj, fl, vis), {"j": fj, "l": fl}).values()) < 1e-6


def test_batched_vlml_averages_samples(rng):
    a, b = rng.standard_normal((2, 3, 3))
    both = vlml_from_correlation(f64(np.stack([a, b]))).item()
    one, two = vlml_from_correlation(f64(a)).item(), vlml_from_correlation(f64(b)).item()
    assert both == pytest.approx((one + two) / 2, abs=1e-12)


# ---------------------------------------------------------------- sampling

def test_nearest_sampling_picks_the_cell(rng):
    fv = rng.standard_normal((16, 3))
    out = sample_joint_features(f64(fv), _joints([[1.2, 2.7], [0, 0]])).data
    np.testing.assert_array_equal(out, fv[[1 * 4 + 3, 0]])


def test_bilinear_sampling_interpolates(rng):
    fv = rng.standard_normal((16, 3))
    out = sample_joint_features(f64(fv), _joints([[1.5, 2.0], [3.0, 3.0]]), "bilinear").data
    np.testing.assert_allclose(out[0], 0.5 * (fv[6] + fv[10]))
    np.testing.assert_allclose(out[1], fv[15])


def test_visible_joint_outside_grid_is_an_error(rng):
    with pytest.raises(ValueError):
        sample_joint_features(f64(rng.standard_normal((16, 3))), _joints([[5.0, 1.0]]))
    # unlabelled joints may sit anywhere
    sample_joint_features(f64(rng.standard_normal((16, 3))), _joints([[5.0, 1.0]], [False]))


def test_sampling_gradient(rng):
    fv = f64(rng.standard_normal((16, 3)), True)
    joints = _joints([[1.3, 2.6], [0.2, 3.0]])
    w = f64(rng.standard_normal((2, 3)))
    err = check_gradients(lambda: E.sum_all(E.mul(sample_joint_features(fv, joints, "bilinear"), w)), {"f": fv})
    assert err["f"] < 1e-6


# ---------------------------------------------------------------- heatmaps

def test_perfect_prediction_has_zero_loss():
    joints = _joints([[1, 1], [2, 3]])
    loss, has = heatmap_loss(f64(joints.heatmaps), joints)
    assert loss.item() == 0.0 and has


def test_unlabelled_joints_do_not_count():
    joints = _joints([[1, 1], [2, 3]], [True, False])
    pred = joints.heatmaps.copy()
    pred[1] += 5.0
    assert heatmap_loss(f64(pred), joints)[0].item() == 0.0


def test_no_labelled_joints_reports_flag():
    joints = _joints([[1, 1]], [False])
    loss, has = heatmap_loss(f64(np.ones((1, 4, 4))), joints)
    assert loss.item() == 0.0 and not has


def test_heatmap_shape_mismatch():
    with pytest.raises(ShapeError):
        heatmap_loss(f64(np.zeros((2, 3, 3))), _joints([[1, 1], [2, 2]]))


def test_gaussian_peak_is_one_at_the_joint():
    hm = gaussian_heatmaps(np.array([[2.0, 1.0]]), 4, 4, 1.0)
    assert hm[0, 2, 1] == 1.0 and hm[0].argmax() == 2 * 4 + 1
