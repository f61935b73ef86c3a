from dataclasses import replace

import numpy as np
import pytest

from pgvl.engine import Array
from pgvl.fusion import FusionTrace, init_fusion_params, pgvl_forward
from pgvl.harness import (LossConfig, TrainConfig, alignment_maps, cosine_matrix, decode_peaks, evaluate_pck,
                          learning_rate, summarize, train, MetricsReport)
from pgvl.model import ModelSpec, PromptTable, encode_language, encode_visual, init_model, model_forward
from pgvl.parse_graph import DecompositionSpec, build_parse_graph
from pgvl.synthetic import JOINT_NAMES, SceneConfig, generate_scene, generate_scenes, joint_signatures

TINY = TrainConfig(epochs=2, batch_size=8, lr=0.5, n_train=16, n_eval=8)


def small_spec(arch="full"):
    return ModelSpec(SceneConfig(height=8, width=8), channels=16, branching=(2,), dims=(16,), architecture=arch)


# ---------------------------------------------------------------- scenes

def test_scene_shapes_and_labels():
    cfg = SceneConfig()
    scene = generate_scene(cfg, 0)
    assert scene.image.shape == (8, 16, 16) and scene.image.dtype == np.float32
    assert scene.joints.positions.shape == (8, 2) and scene.joints.heatmaps.shape == (8, 16, 16)
    assert scene.joints.visibility.dtype == bool


def test_scenes_are_reproducible():
    a = generate_scene(SceneConfig(seed=3), 11)
    b = generate_scene(SceneConfig(seed=3), 11)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.joints.positions, b.joints.positions)
    c = generate_scene(SceneConfig(seed=4), 11)
    assert not np.array_equal(a.image, c.image)


def test_occluded_joints_keep_ground_truth_and_blank_input():
    cfg = SceneConfig(p_occ=1.0, noise_std=0.0)
    scenes = [generate_scene(cfg, i) for i in range(40)]
    hits = 0
    for s in scenes:
        assert s.mask.any()
        assert not s.image[:, s.mask].any()
        for k in np.flatnonzero(s.joints.occluded):
            hits += 1
            r, c = np.rint(s.joints.positions[k]).astype(int)
            assert s.mask[r, c] and s.joints.visibility[k]
    assert hits > 0


def test_no_occlusion_when_probability_is_zero():
    scenes = generate_scenes(SceneConfig(p_occ=0.0), 0, 20)
    assert not scenes.joints.occluded.any()


def test_occlusion_rate_roughly_matches_probability():
    cfg = SceneConfig(p_occ=0.5)
    rate = np.mean([generate_scene(cfg, i).mask.any() for i in range(400)])
    assert 0.4 < rate < 0.6


def test_joint_signatures_are_distinct_unit_vectors():
    sig = joint_signatures(SceneConfig())
    np.testing.assert_allclose(np.linalg.norm(sig, axis=1), 1.0)
    gram = sig @ sig.T
    assert (gram[~np.eye(8, dtype=bool)] < 0.999).all()


def test_bad_scene_configs():
    with pytest.raises(ValueError):
        SceneConfig(p_occ=1.5)
    with pytest.raises(ValueError):
        SceneConfig(joints=("left tail",))


# ---------------------------------------------------------------- encoders

def test_zero_image_with_zero_patch_gives_position_only(rng):
    spec = small_spec()
    params = init_model(spec, rng, dtype=np.float64)
    params["visual/patch/weight"].data[...] = 0
    params["visual/position"].data[...] = 0
    tok = encode_visual(np.zeros((2, 8, 8, 8)), params)
    assert tok.shape == (2, 64, 16) and not tok.data.any()


def test_prompt_table_with_and_without_direction():
    with_dir = PromptTable(JOINT_NAMES)
    assert len(with_dir.vocabulary) == 8
    without = PromptTable(JOINT_NAMES, direction_words=False)
    assert len(without.vocabulary) == 4
    rows = without.rows
    assert rows[0] == rows[1] and rows[4] == rows[5]


def test_language_tokens_share_rows_without_direction(rng):
    spec = small_spec("no_direction")
    params = init_model(spec, rng, dtype=np.float64)
    tok = encode_language(spec.prompt_table, params, 3)
    assert tok.shape == (3, 8, 16)
    np.testing.assert_array_equal(tok.data[:, 0], tok.data[:, 1])


@pytest.mark.parametrize("arch", ["full", "no_context", "no_cross", "no_gm", "no_direction", "no_pgvl",
                                  "global_cross_attention_baseline"])
def test_every_architecture_starts_as_the_backbone(rng, arch):
    spec = small_spec(arch)
    params = init_model(spec, np.random.default_rng(0), dtype=np.float64)
    images = rng.standard_normal((2, 8, 8, 8))
    out = model_forward(spec, params, images)
    assert out.heatmaps.shape == (2, 8, 8, 8)
    np.testing.assert_array_equal(out.fused_v.data, out.tokens_v.data)


def test_unknown_architecture():
    with pytest.raises(ValueError):
        small_spec("bigger")


# ---------------------------------------------------------------- PCK

def test_pck_perfect_prediction():
    pos = np.array([[[3.0, 4.0], [1.0, 1.0]]])
    heat = np.zeros((1, 2, 8, 8))
    heat[0, 0, 3, 4] = heat[0, 1, 1, 1] = 1
    assert evaluate_pck(heat, pos, 2.0) == 1.0


def test_pck_far_prediction():
    pos = np.array([[[0.0, 0.0]]])
    heat = np.zeros((1, 1, 8, 8))
    heat[0, 0, 7, 7] = 1
    assert evaluate_pck(heat, pos, 2.0) == 0.0


def test_pck_half_hits():
    pos = np.array([[[0.0, 0.0], [7.0, 7.0]]])
    heat = np.zeros((1, 2, 8, 8))
    heat[0, 0, 0, 1] = 1
    heat[0, 1, 0, 0] = 1
    assert evaluate_pck(heat, pos, 2.0) == 0.5


def test_pck_boundary_counts_as_hit_and_subset_filter():
    pos = np.array([[[0.0, 0.0], [0.0, 0.0]]])
    heat = np.zeros((1, 2, 8, 8))
    heat[0, 0, 0, 2] = 1
    heat[0, 1, 5, 5] = 1
    assert evaluate_pck(heat, pos, 2.0, include=[[True, False]]) == 1.0
    with pytest.raises(ValueError):
        evaluate_pck(heat, pos, 2.0, include=[[False, False]])


def test_decode_peaks():
    heat = np.zeros((2, 3, 4))
    heat[0, 1, 2] = heat[1, 2, 3] = 1
    np.testing.assert_array_equal(decode_peaks(heat), [[1, 2], [2, 3]])


# ---------------------------------------------------------------- alignment maps

def test_cosine_identical_and_orthogonal():
    a = np.array([[1.0, 2.0, 0.0]])
    assert cosine_matrix(a, a)[0, 0] == pytest.approx(1.0)
    assert cosine_matrix(a, np.array([[0.0, 0.0, 3.0]]))[0, 0] == 0.0
    assert cosine_matrix(np.zeros((1, 3)), a)[0, 0] == 0.0


def test_alignment_maps_shape_and_range(rng):
    graph = build_parse_graph(DecompositionSpec((2, 2), 8))
    params = init_fusion_params(graph, rng, sigma=0.5, dtype=np.float64)
    _, _, tr = pgvl_forward(Array(rng.standard_normal((5, 8))), Array(rng.standard_normal((12, 8))), graph,
                            params, trace=True)
    maps = alignment_maps(tr, (3, 4))
    assert maps.shape == (3, 5, 3, 4)
    assert (maps >= -1).all() and (maps <= 1).all()


def test_alignment_of_identical_features_is_one():
    graph = build_parse_graph(DecompositionSpec((2,), 4))
    tr = FusionTrace(graph)
    feat = np.array([[1.0, 0.0], [0.0, 1.0]])
    for node in range(3):
        width = graph.nodes[node].width
        f = np.tile(feat, (1, width // 2))
        tr.nodes[("language", node)] = {"combined" if node else "gm": f}
        tr.nodes[("vision", node)] = {"combined" if node else "gm": f}
    maps = alignment_maps(tr, (1, 2))
    np.testing.assert_allclose(maps[:, 0, 0, 0], 1.0)
    np.testing.assert_allclose(maps[:, 0, 0, 1], 0.0, atol=1e-15)


def test_alignment_needs_a_trace():
    with pytest.raises(ValueError):
        alignment_maps(None, (2, 2))


# ---------------------------------------------------------------- training

def test_learning_rate_steps_down():
    cfg = TrainConfig(epochs=21, lr=1.0)
    assert learning_rate(cfg, 0) == 1.0
    assert learning_rate(cfg, 17) == pytest.approx(0.1)
    assert learning_rate(cfg, 20) == pytest.approx(0.01)


def test_training_is_deterministic():
    spec = small_spec()
    a, pa = train(spec, TINY, LossConfig(), seed=5)
    b, pb = train(spec, TINY, LossConfig(), seed=5)
    assert a.epochs == b.epochs
    for name in pa.names():
        assert pa[name].data.tobytes() == pb[name].data.tobytes()


def test_no_pgvl_smoke():
    report, _ = train(small_spec("no_pgvl"), TINY, LossConfig(), seed=0)
    assert len(report.epochs) == 2
    assert all(np.isfinite(report.final[k]) for k in ("pck", "pck_visible"))


def test_training_reduces_loss():
    cfg = replace(TINY, epochs=4, n_train=32)
    report, _ = train(small_spec(), cfg, LossConfig(), seed=1)
    assert report.epochs[-1]["loss"] < report.epochs[0]["loss"]


def test_summarize_means():
    reports = [MetricsReport("full", s, final={"pck": p, "pck_visible": p, "pck_occluded": None})
               for s, p in enumerate([0.5, 0.7])]
    row = summarize({"full": reports})[0]
    assert row["pck_mean"] == pytest.approx(0.6) and row["pck_occluded_mean"] is None


def test_single_space_at_encoder_width_runs_plain_fusion(rng):
    spec = small_spec()
    assert not spec.uses_variants
    names = init_model(spec, rng).names()
    assert "pgvl/output/vision/weight" in names and not any(n.startswith("merge/") for n in names)


def test_other_widths_run_the_variants_path(rng):
    spec = replace(small_spec(), dims=(8, 16))
    assert spec.uses_variants
    params = init_model(spec, rng, dtype=np.float64)
    assert "merge/vision/weight" in params.names()
    out = model_forward(spec, params, rng.standard_normal((2, 8, 8, 8)), trace=True)
    assert len(out.traces) == 2
    np.testing.assert_array_equal(out.fused_v.data, out.tokens_v.data)
