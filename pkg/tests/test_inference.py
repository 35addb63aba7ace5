import math

import numpy as np
from numpy.testing import assert_allclose
import pytest

from inemo.errors import InvalidArgumentError, NoClassesError
from inemo.models import BackgroundBank, Pose
from inemo.services.geometry3d import pose_error, template_pose_grid
from inemo.services.inference import (
    ScoreField,
    build_templates,
    class_scores,
    classify,
    estimate_pose,
    evaluate_classification,
    evaluate_pose,
    init_pose,
    mean_task_accuracy,
    pose_accuracy,
    pose_report,
    reconstruction_loss,
    refine_pose,
    render_feature_map,
    soft_reconstruction_loss,
)
from inemo.services.memory import MeshStore
from inemo.services.training import ModelState, build_mesh
from inemo.services.benchgen import make_class_appearance

from conftest import make_mesh, random_poses, render_class, small_config


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _store(*meshes):
    store = MeshStore()
    for m in meshes:
        store.add(m)
    return store


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------


def test_pixel_matching_a_vertex_is_foreground():
    meshes = [make_mesh(class_id=c, target=26, dim=6, seed=c) for c in range(3)]
    f = meshes[2].theta[5]
    rng = np.random.default_rng(0)
    b = rng.normal(size=6)
    b -= (b @ f) * f
    bank = BackgroundBank(_unit(b)[None], np.zeros(1, dtype=np.int64))
    field = class_scores(f.reshape(1, 1, 6), _store(*meshes), bank)
    assert field.scores[2, 0, 0] == pytest.approx(1.0)
    assert field.foreground[0, 0]


def test_pixel_matching_the_bank_is_background():
    meshes = [make_mesh(class_id=c, target=26, dim=6, seed=c) for c in range(2)]
    for m in meshes:
        m.theta[:, 5] = 0.0
        m.theta[:] = _unit(m.theta)
    e = np.zeros(6)
    e[5] = 1.0
    bank = BackgroundBank(e[None], np.zeros(1, dtype=np.int64))
    field = class_scores(e.reshape(1, 1, 6), _store(*meshes), bank)
    assert not field.foreground[0, 0]


def test_scores_are_bounded_and_need_classes():
    meshes = [make_mesh(class_id=c, target=26, dim=6, seed=c) for c in range(2)]
    fmap = _unit(np.random.default_rng(1).normal(size=(5, 5, 6)))
    field = class_scores(fmap, _store(*meshes), BackgroundBank.random(8, 6, 0))
    assert field.scores.min() >= -1.0 and field.scores.max() <= 1.0
    with pytest.raises(NoClassesError):
        class_scores(fmap, MeshStore())


def _field(scores, foreground=True, ids=None):
    scores = np.asarray(scores, dtype=np.float64).reshape(len(scores), 1, -1)
    fg = np.full(scores.shape[1:], foreground)
    ids = np.arange(len(scores)) if ids is None else np.asarray(ids)
    return ScoreField(ids, scores, np.zeros(scores.shape[1:]), fg)


def test_classify_confusion_adjustment():
    assert classify(_field([[0.9], [0.2]], ids=[1, 2])) == (1, pytest.approx(0.6), False)
    tied = classify(_field([[0.5], [0.5]]))
    assert tied[1] == pytest.approx(-0.5)
    assert tied[0] == 0


def test_classify_without_the_confusion_term_uses_plain_scores():
    assert classify(_field([[0.9], [0.2]], ids=[1, 2]), confusion=False) == (1, pytest.approx(0.9), False)
    # class 3 only leads on a pixel where class 5 is a close second
    field = _field([[0.80, 0.1], [0.79, 0.6]], ids=[3, 5])
    assert classify(field, confusion=False)[0] == 3
    assert classify(field)[0] == 5


@pytest.mark.parametrize("confusion", [True, False])
def test_classify_ignores_a_constant_shift_of_all_scores(confusion):
    rng = np.random.default_rng(7)
    for _ in range(100):
        scores = rng.uniform(-1.0, 1.0, size=(4, 1, 12))
        foreground = rng.random((1, 12)) < 0.7
        shift = rng.uniform(-0.5, 0.5)
        field = ScoreField(np.arange(4), scores, np.zeros((1, 12)), foreground)
        moved = ScoreField(np.arange(4), scores + shift, np.zeros((1, 12)), foreground)
        base_id, base_score, _ = classify(field, confusion)
        moved_id, moved_score, _ = classify(moved, confusion)
        assert moved_id == base_id
        assert moved_score == pytest.approx(base_score + shift)


def test_classify_recovers_the_class_of_a_self_render(feature_camera):
    meshes = [make_mesh(class_id=c, seed=10 + c) for c in (2, 5, 9)]
    store = _store(*meshes)
    for mesh in meshes:
        for pose in random_poses(3, seed=mesh.class_id):
            fmap, _ = render_feature_map(mesh, pose, feature_camera)
            assert classify(class_scores(fmap, store))[0] == mesh.class_id
            assert classify(class_scores(fmap, store), confusion=False)[0] == mesh.class_id


def test_classify_single_class_and_empty_foreground():
    assert classify(_field([[0.3, -0.2]], ids=[4]))[0] == 4
    class_id, _, fallback = classify(_field([[0.1, 0.9], [0.4, 0.2]], foreground=False))
    assert fallback and class_id == 0


# ---------------------------------------------------------------------------
# pose
# ---------------------------------------------------------------------------


def test_feature_rendering_copies_vertex_features(smooth_mesh, feature_camera):
    fmap, render = render_feature_map(smooth_mesh, Pose(0.4, 0.2, 0.0), feature_camera)
    on = render.object_mask
    assert_allclose(fmap[on], smooth_mesh.theta[render.vertex_of_pixel[on]])
    assert not fmap[~on].any()


def test_template_self_retrieval(smooth_mesh, feature_camera):
    templates = build_templates(smooth_mesh, feature_camera, 144)
    assert templates.vertex_of_pixel.shape == (144, 32, 32)
    for j in (0, 37, 101):
        fmap, _ = render_feature_map(smooth_mesh, templates.poses[j], feature_camera)
        assert init_pose(fmap, smooth_mesh, templates)[1] == j


def test_template_init_on_noise_returns_a_grid_pose(smooth_mesh, feature_camera):
    templates = build_templates(smooth_mesh, feature_camera, 12)
    noise = _unit(np.random.default_rng(0).normal(size=(32, 32, 16)))
    pose, index = init_pose(noise, smooth_mesh, templates)
    assert pose == templates.poses[index]


def test_template_init_between_grid_poses_picks_a_neighbour(smooth_mesh, feature_camera):
    grid = template_pose_grid(144)
    templates = build_templates(smooth_mesh, feature_camera, 144)
    # azimuth 30deg, elevation 20deg, roll 0; shifted halfway to the next azimuth
    base = grid[19]
    target = Pose(base.azimuth + math.pi / 12, base.elevation, base.roll)
    fmap, _ = render_feature_map(smooth_mesh, target, feature_camera)
    pose, _ = init_pose(fmap, smooth_mesh, templates)
    assert min(pose_error(p, target) for p in grid) == pytest.approx(math.pi / 12, abs=1e-6)
    assert pose_error(pose, target) < math.pi / 4


def test_reconstruction_loss_is_lowest_at_the_rendered_pose(smooth_mesh, feature_camera):
    rng = np.random.default_rng(4)
    for truth in random_poses(5, seed=3):
        fmap, render = render_feature_map(smooth_mesh, truth, feature_camera)
        fg = render.object_mask
        at_truth = reconstruction_loss(fmap, smooth_mesh, truth, feature_camera, fg)
        assert at_truth == pytest.approx(-fg.sum())
        for _ in range(4):
            moved = truth.with_angles(truth.angles() + rng.normal(0.0, 0.2, 3))
            assert reconstruction_loss(fmap, smooth_mesh, moved, feature_camera, fg) >= at_truth - 1e-9


def test_reconstruction_loss_scores_uncovered_pixels_as_zero(smooth_mesh, feature_camera):
    truth = Pose(0.3, 0.1, 0.0)
    fmap, render = render_feature_map(smooth_mesh, truth, feature_camera)
    everywhere = np.ones_like(render.object_mask)
    assert reconstruction_loss(fmap, smooth_mesh, truth, feature_camera, everywhere) == pytest.approx(
        reconstruction_loss(fmap, smooth_mesh, truth, feature_camera, render.object_mask))
    assert reconstruction_loss(fmap, smooth_mesh, truth, feature_camera, np.zeros_like(everywhere)) == 0.0


def test_soft_loss_tends_to_the_reconstruction_loss(smooth_mesh, feature_camera):
    truth = Pose(1.1, 0.3, 0.1)
    fmap, render = render_feature_map(smooth_mesh, truth, feature_camera)
    fg = render.object_mask
    hard = reconstruction_loss(fmap, smooth_mesh, truth, feature_camera, fg)
    wide = soft_reconstruction_loss(fmap, smooth_mesh, truth, feature_camera, fg, sigma=4.0)
    narrow = soft_reconstruction_loss(fmap, smooth_mesh, truth, feature_camera, fg, sigma=0.05)
    assert hard <= narrow and hard <= wide < 0.0
    assert narrow == pytest.approx(hard, rel=0.05)


def test_refinement_from_the_truth_stays_there(smooth_mesh, feature_camera):
    for truth in random_poses(10, seed=2):
        fmap, render = render_feature_map(smooth_mesh, truth, feature_camera)
        est = refine_pose(fmap, smooth_mesh, truth, feature_camera, foreground=render.object_mask)
        assert pose_error(est.pose, truth) < 1e-3
        assert not est.failed
        assert est.loss == est.init_loss == reconstruction_loss(
            fmap, smooth_mesh, truth, feature_camera, render.object_mask)


def _recovery(mesh, camera, count, seed):
    cfg = small_config(refine_iterations=30)
    templates = build_templates(mesh, camera, 144)
    errors, improved = [], []
    for truth in random_poses(count, seed=seed):
        fmap, render = render_feature_map(mesh, truth, camera)
        est = estimate_pose(fmap, mesh, templates, camera, cfg, render.object_mask)
        errors.append(pose_error(est.pose, truth))
        improved.append(est.loss <= est.init_loss)
    return np.array(errors), improved


def test_pose_recovery_from_self_renders(smooth_mesh, feature_camera):
    errors, improved = _recovery(smooth_mesh, feature_camera, 10, seed=11)
    assert all(improved)
    assert np.mean(errors < math.pi / 18) >= 0.8
    assert np.mean(errors < math.pi / 6) >= 0.9


@pytest.mark.slow
def test_pose_recovery_full_size(feature_camera):
    errors, improved = [], []
    for c in range(2):
        mesh = make_mesh(class_id=c, dims=(1.0, 0.75 - 0.1 * c, 0.55), seed=c)
        e, i = _recovery(mesh, feature_camera, 50, seed=100 + c)
        errors.extend(e)
        improved.extend(i)
    errors = np.array(errors)
    assert all(improved)
    assert np.mean(errors < math.pi / 18) >= 0.9
    assert np.mean(errors < math.pi / 6) >= 0.98


# ---------------------------------------------------------------------------
# metrics and drivers
# ---------------------------------------------------------------------------


def test_pose_accuracy():
    gt = [Pose(), Pose()]
    assert pose_accuracy(gt, gt, math.pi / 6) == 1.0
    assert pose_accuracy([Pose(0.1), Pose(0.6)], gt, math.pi / 6) == 0.5
    assert pose_accuracy(gt, gt, 0.0) == 0.0
    with pytest.raises(InvalidArgumentError):
        pose_accuracy(gt, gt[:1], 0.1)
    assert pose_accuracy([], [], 0.1) == 0.0


def test_mean_task_accuracy():
    assert mean_task_accuracy([1.0, 0.8]) == pytest.approx(0.9)
    assert mean_task_accuracy([0.7]) == pytest.approx(0.7)
    assert mean_task_accuracy([0.2, 0.5, 0.9]) == pytest.approx(mean_task_accuracy([0.9, 0.2, 0.5]))
    with pytest.raises(InvalidArgumentError):
        mean_task_accuracy([])


def _state(classes):
    cfg = small_config(template_count=12, refine_iterations=3)
    state = ModelState.create(cfg)
    for c in classes:
        state.meshes.add(build_mesh(c, make_class_appearance(c, cfg.seed).dims, state.latent, cfg))
    return cfg, state


def test_evaluate_classification_report():
    cfg, state = _state([0, 1])
    samples = [s for c in (0, 1) for s in render_class(c, random_poses(2, seed=c), cfg.seed, cfg.image_size)]
    result = evaluate_classification(state, samples, threads=2)
    assert result["count"] == 4
    assert len(result["predictions"]) == 4
    assert set(result["predictions"]) <= {0, 1}
    assert sum(sum(row.values()) for row in result["confusion"].values()) == 4
    assert 0.0 <= result["accuracy"] <= 1.0


def test_evaluate_pose_and_report():
    cfg, state = _state([0, 1])
    samples = [s for c in (0, 1) for s in render_class(c, random_poses(2, seed=5 + c), cfg.seed, cfg.image_size)]
    estimates, errors = evaluate_pose(state, samples, cfg, self_render=True, threads=2)
    assert len(estimates) == 4 and errors.shape == (4,)
    assert np.all((errors >= 0) & (errors <= math.pi))
    report = pose_report(samples, estimates, errors, {"pi_6": math.pi / 6, "pi_18": math.pi / 18})
    assert set(report) == {"count", "median_error", "acc_pi_6", "acc_pi_18", "per_class", "refine_failures"}
    assert set(report["per_class"]) == {"0", "1"}
    assert report["per_class"]["0"]["count"] == 2
