"""Vertex-matching classification, template + render-and-compare pose estimation, and metrics."""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import logging
import math
from typing import List

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import softmax
from tqdm import tqdm

import config
from inemo.errors import InvalidArgumentError, NoClassesError, TrainingDivergedError
from inemo.models import Pose
from inemo.services.geometry3d import pose_error, project_vertices, rasterize, template_pose_grid
from inemo.services.optim import AdamState, adam_update

log = logging.getLogger(__name__)

_FD_STEP = 0.01


@dataclass
class ScoreField:
    class_ids: np.ndarray  # (C,)
    scores: np.ndarray  # (C, h, w)
    background: np.ndarray  # (h, w)
    foreground: np.ndarray  # (h, w) bool


@dataclass
class PoseEstimate:
    pose: Pose
    loss: float
    init_loss: float
    iterations: int
    template_index: int = -1
    failed: bool = False


@dataclass
class TemplateBank:
    class_id: int
    poses: List[Pose]
    vertex_of_pixel: np.ndarray  # (T, h, w)


def class_scores(feature_map, store, bank=None):
    """Per-pixel best vertex match for every stored class, and the best background match."""
    if len(store) == 0:
        raise NoClassesError("No neural meshes stored; train at least one task first")
    h, w, d = feature_map.shape
    f = feature_map.reshape(-1, d)
    scores = np.stack([(f @ mesh.theta.T).max(axis=1) for mesh in store.meshes()])
    if bank is not None and bank.capacity:
        background = (f @ bank.features.T).max(axis=1)
    else:
        background = np.full(h * w, -1.0)
    scores = np.clip(scores, -1.0, 1.0)
    background = np.clip(background, -1.0, 1.0)
    return ScoreField(
        class_ids=np.array(store.classes(), dtype=np.int64),
        scores=scores.reshape(-1, h, w),
        background=background.reshape(h, w),
        foreground=(scores > background).any(axis=0).reshape(h, w),
    )


def classify(field, confusion=True):
    """Confusion-adjusted vote: per pixel s_y - (1 - (max1 - max2)), then the max over F.

    With confusion=False the plain vertex-matching score s_y is used. With one stored
    class the runner-up score is taken as -1. Returns
    (class_id, score, fallback) where fallback means F was empty and all pixels were used.
    """
    c = len(field.class_ids)
    s = field.scores.reshape(c, -1)
    if c == 1:
        top, second = s[0], np.full(s.shape[1], -1.0)
    else:
        ranked = np.sort(s, axis=0)
        top, second = ranked[-1], ranked[-2]
    adjusted = s - (1.0 - (top - second)) if confusion else s
    mask = field.foreground.ravel()
    fallback = not mask.any()
    if fallback:
        log.warning("Empty foreground; classifying over all pixels")
        mask = np.ones_like(mask)
    per_class = adjusted[:, mask].max(axis=1)
    best = int(np.argmax(per_class))
    return int(field.class_ids[best]), float(per_class[best]), fallback


# ---------------------------------------------------------------------------
# pose
# ---------------------------------------------------------------------------


def render_feature_map(mesh, pose, camera):
    """Noise-free feature map: theta of the nearest visible vertex on object pixels, zero elsewhere."""
    render = rasterize(mesh.geometry, pose, camera)
    fmap = np.zeros(render.shape + (mesh.theta.shape[1],))
    on = render.vertex_of_pixel >= 0
    fmap[on] = mesh.theta[render.vertex_of_pixel[on]]
    return fmap, render


def build_templates(mesh, camera, count=144, distance=5.0):
    poses = template_pose_grid(count, distance)
    maps = np.stack([rasterize(mesh.geometry, p, camera).vertex_of_pixel for p in poses])
    return TemplateBank(class_id=mesh.class_id, poses=poses, vertex_of_pixel=maps)


def template_scores(feature_map, mesh, templates, foreground=None):
    d = feature_map.shape[2]
    sim = feature_map.reshape(-1, d) @ mesh.theta.T  # (P, K)
    vop = templates.vertex_of_pixel.reshape(len(templates.poses), -1)  # (T, P)
    valid = vop >= 0
    if foreground is not None:
        valid &= foreground.ravel()[None, :]
    pix = np.broadcast_to(np.arange(vop.shape[1]), vop.shape)
    gathered = sim[pix, np.maximum(vop, 0)]
    return np.where(valid, gathered, 0.0).sum(axis=1)


def init_pose(feature_map, mesh, templates, foreground=None):
    """Best grid pose by summed feature agreement over overlapping pixels. Returns (pose, index)."""
    scores = template_scores(feature_map, mesh, templates, foreground)
    best = int(np.argmax(scores))
    return templates.poses[best], best


def _target_pixels(feature_map, foreground):
    """Fixed pixel set scored by the reconstruction loss: F, or every non-zero feature pixel."""
    if foreground is not None:
        return np.asarray(foreground, dtype=bool)
    return np.linalg.norm(feature_map, axis=2) > 0


def reconstruction_loss(feature_map, mesh, pose, camera, foreground=None):
    """-sum over target pixels in F of f . theta of the vertex rendered there at `pose`.

    Pixels of F the mesh does not cover at `pose` score zero, so the pixel set is the
    same for every candidate pose.
    """
    fg = _target_pixels(feature_map, foreground)
    vop = rasterize(mesh.geometry, pose, camera).vertex_of_pixel[fg]
    covered = vop >= 0
    if not covered.any():
        return 0.0
    f = feature_map[fg][covered]
    return float(-np.sum(f * mesh.theta[vop[covered]]))


def soft_reconstruction_loss(feature_map, mesh, pose, camera, foreground=None, sigma=1.0):
    """Smooth stand-in for reconstruction_loss used for the pose gradient.

    Each target pixel takes a softmax-weighted mix of the visible vertices by squared screen
    distance to its centre; as sigma shrinks this becomes the nearest-vertex assignment.
    """
    fg = _target_pixels(feature_map, foreground)
    uv, _, _, visible, _ = project_vertices(mesh.geometry, pose, camera)
    idx = np.flatnonzero(visible)
    if len(idx) == 0 or not fg.any():
        return 0.0
    ys, xs = np.nonzero(fg)
    centres = np.stack([xs + 0.5, ys + 0.5], axis=1)
    weights = softmax(-cdist(centres, uv[idx], "sqeuclidean") / (2.0 * sigma ** 2), axis=1)
    agreement = feature_map[ys, xs] @ mesh.theta[idx].T
    return float(-np.sum(weights * agreement))


def refine_pose(feature_map, mesh, init, camera, iterations=30, lr=0.05, betas=(0.4, 0.6),
                foreground=None, sigma=1.0):
    """Adam over (azimuth, elevation, roll).

    Gradients are central differences of the soft loss; the returned pose is the iterate
    with the lowest reconstruction loss, and only a strict improvement replaces `init`.
    """
    def soft_at(angles):
        return soft_reconstruction_loss(feature_map, mesh, init.with_angles(angles), camera, foreground, sigma)

    def loss_at(angles):
        return reconstruction_loss(feature_map, mesh, init.with_angles(angles), camera, foreground)

    angles = init.angles()
    init_loss = loss_at(angles)
    best_angles, best_loss = angles.copy(), init_loss
    state = AdamState.zeros(3, beta1=betas[0], beta2=betas[1])
    used = 0
    try:
        for used in range(1, iterations + 1):
            grad = np.zeros(3)
            for i in range(3):
                step = np.zeros(3)
                step[i] = _FD_STEP
                grad[i] = (soft_at(angles + step) - soft_at(angles - step)) / (2 * _FD_STEP)
            if not np.all(np.isfinite(grad)):
                raise TrainingDivergedError("Non-finite pose gradient")
            angles = adam_update(angles, grad, state, lr)
            angles[1] = min(max(angles[1], -math.pi / 2), math.pi / 2)
            value = loss_at(angles)
            if not math.isfinite(value):
                raise TrainingDivergedError("Non-finite reconstruction loss")
            if value < best_loss:
                best_angles, best_loss = angles.copy(), value
    except TrainingDivergedError:
        log.warning("Pose refinement diverged; returning the initial pose")
        return PoseEstimate(init.canonical(), init_loss, init_loss, used, failed=True)
    return PoseEstimate(init.with_angles(best_angles).canonical(), best_loss, init_loss, used)


def estimate_pose(feature_map, mesh, templates, camera, cfg, foreground=None):
    init, index = init_pose(feature_map, mesh, templates, foreground)
    est = refine_pose(
        feature_map, mesh, init, camera,
        iterations=cfg.refine_iterations, lr=cfg.refine_lr,
        betas=(cfg.refine_beta1, cfg.refine_beta2), foreground=foreground, sigma=cfg.refine_sigma,
    )
    est.template_index = index
    return est



# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def pose_accuracy(estimates, ground_truths, threshold):
    """Fraction of poses whose rotation error is strictly below `threshold`."""
    if len(estimates) != len(ground_truths):
        raise InvalidArgumentError(f"{len(estimates)} estimates for {len(ground_truths)} ground truths")
    if not estimates:
        return 0.0
    errors = [pose_error(p, g) for p, g in zip(estimates, ground_truths)]
    return float(np.mean([e < threshold for e in errors]))


def mean_task_accuracy(per_task_accuracies):
    if len(per_task_accuracies) == 0:
        raise InvalidArgumentError("No task accuracies to average")
    return float(np.mean(per_task_accuracies))


# ---------------------------------------------------------------------------
# evaluation drivers
# ---------------------------------------------------------------------------


def _threads(threads):
    return max(1, int(threads or config.INEMO_THREADS))


def predict(state, sample, confusion=True):
    fmap = state.extractor.forward(sample.image)
    return classify(class_scores(fmap, state.meshes, state.bank), confusion)


def evaluate_classification(state, samples, threads=None, confusion=True):
    """Predictions plus accuracy, per-class confusion counts and fallback count."""
    with ThreadPoolExecutor(max_workers=_threads(threads)) as pool:
        results = list(pool.map(lambda s: predict(state, s, confusion), samples))
    classes = state.meshes.classes()
    table = {str(c): {} for c in classes}
    correct = 0
    for sample, (pred, _, _) in zip(samples, results):
        row = table.setdefault(str(sample.class_id), {})
        row[str(pred)] = row.get(str(pred), 0) + 1
        correct += int(pred == sample.class_id)
    return {
        "count": len(samples),
        "accuracy": correct / len(samples) if samples else 0.0,
        "fallbacks": int(sum(r[2] for r in results)),
        "confusion": table,
        "predictions": [int(r[0]) for r in results],
    }


def evaluate_pose(state, samples, cfg, self_render=False, threads=None, templates=None):
    """Pose estimation per sample using the ground-truth class's mesh.

    With self_render the target is the mesh's own noise-free feature rendering at the sample pose.
    """
    fcam = state.feature_camera
    templates = dict(templates or {})
    for class_id in sorted({s.class_id for s in samples}):
        if class_id not in templates:
            templates[class_id] = build_templates(state.meshes.get(class_id), fcam, cfg.template_count, cfg.distance)

    def run(sample):
        mesh = state.meshes.get(sample.class_id)
        if self_render:
            fmap, render = render_feature_map(mesh, sample.pose, fcam)
            foreground = render.object_mask
        else:
            fmap = state.extractor.forward(sample.image)
            foreground = class_scores(fmap, state.meshes, state.bank).foreground
        est = estimate_pose(fmap, mesh, templates[sample.class_id], fcam, cfg, foreground)
        return est, pose_error(est.pose, sample.pose)

    with ThreadPoolExecutor(max_workers=_threads(threads)) as pool:
        results = list(tqdm(pool.map(run, samples), total=len(samples), desc="pose", unit="sample", disable=None))
    return [r[0] for r in results], np.array([r[1] for r in results])


def pose_report(samples, estimates, errors, thresholds):
    """Accuracy at each threshold overall and per class, plus the median rotation error."""
    out = {"count": len(samples), "median_error": float(np.median(errors)) if len(errors) else None}
    for name, t in thresholds.items():
        out[f"acc_{name}"] = float(np.mean(errors < t)) if len(errors) else None
    per_class = {}
    for class_id in sorted({s.class_id for s in samples}):
        sel = np.array([s.class_id == class_id for s in samples])
        entry = {"count": int(sel.sum()), "median_error": float(np.median(errors[sel]))}
        for name, t in thresholds.items():
            entry[f"acc_{name}"] = float(np.mean(errors[sel] < t))
        per_class[str(class_id)] = entry
    out["per_class"] = per_class
    out["refine_failures"] = int(sum(e.failed for e in estimates))
    return out
