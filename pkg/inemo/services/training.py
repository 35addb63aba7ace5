"""Model state, the combined objective, vertex/background updates and the per-task training loop."""
from dataclasses import dataclass, field
import logging
import math
from typing import Callable, Dict, List, Optional

import numpy as np
from tqdm import tqdm

from inemo.errors import AlreadyAllocatedError, InvalidArgumentError, TrainingDivergedError
from inemo.models import BackgroundBank, Camera, ClassAppearance, NeuralMesh, Sample
from inemo.services.feature_net import FeatureExtractor
from inemo.services.geometry3d import build_cuboid, neighborhood_mask, rasterize
from inemo.services.latent_space import LatentPartition, allocate_class, allocate_random, default_population_size
from inemo.services.losses import gather_correspondences, loss_cont, loss_etf, loss_kd, scatter_to_map
from inemo.services.memory import MeshStore, ReplayBuffer, rebalance, select_exemplars

log = logging.getLogger(__name__)

TRACE_FIELDS = ("step", "epoch", "task", "l_cont", "l_etf", "l_kd", "total", "lr")


@dataclass
class ModelState:
    extractor: FeatureExtractor
    latent: LatentPartition
    meshes: MeshStore
    bank: BackgroundBank
    buffer: ReplayBuffer
    camera: Camera
    optimizer: object
    step: int = 0
    tasks_done: int = 0
    history: List[dict] = field(default_factory=list)

    @classmethod
    def create(cls, cfg):
        extractor = FeatureExtractor(dim=cfg.feature_dim, seed=cfg.seed)
        size = cfg.population_size or default_population_size(cfg.target_vertices, cfg.max_classes)
        return cls(
            extractor=extractor,
            latent=LatentPartition.create(cfg.feature_dim, cfg.max_classes, size, cfg.seed),
            meshes=MeshStore(),
            bank=BackgroundBank.random(cfg.bg_capacity, cfg.feature_dim, cfg.seed + 2),
            buffer=ReplayBuffer(cfg.buffer_capacity, cfg.azimuth_bins, cfg.seed),
            camera=Camera.for_resolution(cfg.image_size, viewport_scale=cfg.viewport_scale),
            optimizer=extractor.new_optimizer_state(),
        )

    @property
    def feature_camera(self):
        return self.camera.scaled(self.extractor.stride)


@dataclass
class TaskData:
    index: int
    class_ids: List[int]
    samples: List[Sample]
    appearances: Dict[int, ClassAppearance]
    load_sample: Optional[Callable[[str], Sample]] = None


def build_mesh(class_id, dims, latent, cfg):
    """Cuboid geometry, initial vertex features and the neighbourhood mask for one class.

    Features come from the class's latent partition, or from the whole sphere when
    cfg.latent_init is "random".
    """
    geometry = build_cuboid(dims, cfg.target_vertices)
    allocate = allocate_random if cfg.latent_init == "random" else allocate_class
    theta = allocate(latent, class_id, geometry.vertex_count, seed=cfg.seed)
    radius = cfg.neighborhood_scale * geometry.diagonal
    return NeuralMesh(class_id=int(class_id), geometry=geometry, theta=theta,
                      neighbor_mask=neighborhood_mask(geometry, radius))


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------


def sample_terms(state, cfg, class_id, fmap, render, teacher_fmap=None, prev_thetas=None, unused_sample=None):
    """Loss terms (sums over visible vertices) and the per-sample feature-map gradient.

    The per-sample objective is (L_cont + lambda_etf L_etf + lambda_kd L_kd) / visible count.
    """
    mesh = state.meshes.get(class_id)
    corr = gather_correspondences(fmap, render)
    terms = {"l_cont": 0.0, "l_etf": 0.0, "l_kd": 0.0, "total": 0.0}
    n = corr.visible_count
    if n == 0:
        return terms, np.zeros_like(fmap)

    others = state.meshes.stacked_thetas(exclude=class_id)
    value, grad = loss_cont(corr, mesh, others, state.bank.features, unused_sample, cfg.kappa1)
    terms["l_cont"] = value
    total = value
    if cfg.etf and cfg.lambda_etf > 0:
        value, g = loss_etf(corr, state.latent.centroids, class_id, cfg.kappa2)
        terms["l_etf"] = value
        total += cfg.lambda_etf * value
        grad = grad + cfg.lambda_etf * g
    if teacher_fmap is not None and prev_thetas is not None and len(prev_thetas) and cfg.lambda_kd > 0:
        corr_old = gather_correspondences(teacher_fmap, render)
        value, g = loss_kd(corr, corr_old, prev_thetas, cfg.kappa3)
        terms["l_kd"] = value
        total += cfg.lambda_kd * value
        grad = grad + cfg.lambda_kd * g
    terms = {k: v / n for k, v in terms.items()}
    terms["total"] = total / n
    return terms, scatter_to_map(corr, grad / n, fmap.shape)


def batch_objective(state, cfg, samples, renders, teacher=None, prev_thetas=None, unused_sample=None):
    """Mean objective over a batch, its parameter gradient, and the forward feature maps."""
    images = np.stack([s.image for s in samples])
    fmaps, cache = state.extractor.forward_with_cache(images)
    teacher_maps = teacher.forward(images) if teacher is not None else None
    grads = np.zeros_like(fmaps)
    sums = {"l_cont": 0.0, "l_etf": 0.0, "l_kd": 0.0, "total": 0.0}
    for i, (sample, render) in enumerate(zip(samples, renders)):
        terms, grads[i] = sample_terms(
            state, cfg, sample.class_id, fmaps[i], render,
            None if teacher_maps is None else teacher_maps[i], prev_thetas, unused_sample,
        )
        for k in sums:
            sums[k] += terms[k]
    b = len(samples)
    means = {k: v / b for k, v in sums.items()}
    param_grad = state.extractor.backward_from_cache(cache, grads / b)
    return means, param_grad, fmaps


def combined_loss(sample, state, cfg, render=None, teacher=None, prev_thetas=None, unused_sample=None):
    """Single-sample objective value and extractor parameter gradient."""
    if render is None:
        render = rasterize(state.meshes.get(sample.class_id).geometry, sample.pose, state.feature_camera)
    means, param_grad, _ = batch_objective(state, cfg, [sample], [render], teacher, prev_thetas, unused_sample)
    return means, param_grad


# ---------------------------------------------------------------------------
# vertex and background updates
# ---------------------------------------------------------------------------


def momentum_update(mesh, corr, eta):
    """theta <- normalize((1 - eta) f + eta theta) on visible vertices; others untouched."""
    if not 0.0 <= eta <= 1.0:
        raise InvalidArgumentError(f"eta must be in [0, 1], got {eta}")
    idx = corr.visible_index
    if len(idx) == 0:
        return mesh
    raw = (1.0 - eta) * corr.features[idx] + eta * mesh.theta[idx]
    norm = np.linalg.norm(raw, axis=1, keepdims=True)
    # f = -theta with eta = 0.5 cancels out; keep the old feature there
    keep = norm[:, 0] < 1e-12
    raw = np.where(keep[:, None], mesh.theta[idx], raw / np.where(keep[:, None], 1.0, norm))
    mesh.theta[idx] = raw
    return mesh


def background_features(fmap, render, count, rng):
    """Sample `count` features from pixels off the object; None when there are none."""
    ys, xs = np.nonzero(~render.object_mask)
    if len(ys) == 0 or count <= 0:
        return None
    pick = rng.choice(len(ys), size=int(count), replace=len(ys) < count)
    return fmap[ys[pick], xs[pick]]


def bank_insert(bank, features):
    """Replace the oldest entries (lowest index on ties) with `features`; survivors age by one."""
    features = np.asarray(features, dtype=np.float64)
    if len(features) > bank.capacity:
        features = features[-bank.capacity:]
    n = len(features)
    order = np.lexsort((np.arange(bank.capacity), -bank.ages))
    slots = np.sort(order[:n])
    new_features = bank.features.copy()
    new_ages = bank.ages + 1
    new_features[slots] = features
    new_ages[slots] = 0
    return BackgroundBank(features=new_features, ages=new_ages)


def bg_update(bank, fmap, render, n_new, rng):
    """Returns (bank, warned); warned is True when the render left no background pixels."""
    if n_new > bank.capacity:
        raise InvalidArgumentError(f"n_new {n_new} exceeds bank capacity {bank.capacity}")
    feats = background_features(fmap, render, n_new, rng)
    if feats is None:
        if n_new > 0:
            log.warning("No background pixels to refresh the bank from")
        return bank, n_new > 0
    return bank_insert(bank, feats), False


def bg_balance(bank, buffer, extractor, load_sample, meshes, camera, rng):
    """Refill the whole bank with background features drawn evenly from each class's exemplars.

    Returns (bank, per-class source counts).
    """
    classes = [c for c in buffer.classes() if buffer.class_exemplars(c)]
    if not classes:
        raise InvalidArgumentError("Cannot balance the background bank from an empty replay buffer")
    base, extra = divmod(bank.capacity, len(classes))
    rows, counts = [], {}
    for i, class_id in enumerate(classes):
        quota = base + (1 if i < extra else 0)
        counts[class_id] = 0
        if quota == 0:
            continue
        pool = []
        exemplars = buffer.class_exemplars(class_id)
        images = np.stack([load_sample(e.sample_id).image for e in exemplars])
        fmaps = extractor.forward(images)
        geometry = meshes.get(class_id).geometry
        for e, fmap in zip(exemplars, fmaps):
            mask = rasterize(geometry, e.pose, camera).object_mask
            pool.append(fmap[~mask])
        pool = np.concatenate(pool)
        if len(pool) == 0:
            log.warning("Exemplars of class %d have no background pixels", class_id)
            continue
        pick = rng.choice(len(pool), size=quota, replace=len(pool) < quota)
        rows.append(pool[pick])
        counts[class_id] = quota
    if not rows:
        return bank, counts
    feats = np.concatenate(rows)
    if len(feats) < bank.capacity:
        # slots no class could fill keep the youngest old entries
        youngest = np.argsort(bank.ages, kind="stable")[: bank.capacity - len(feats)]
        feats = np.concatenate([bank.features[youngest], feats])
    return BackgroundBank(features=feats, ages=np.zeros(bank.capacity, dtype=np.int64)), counts


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def epoch_means(trace):
    """Mean total loss per (task, epoch), in order."""
    out = {}
    for rec in trace:
        out.setdefault((rec["task"], rec["epoch"]), []).append(rec["total"])
    return [float(np.mean(v)) for v in out.values()]


def _check_finite(terms, state, on_diverged, record):
    if all(math.isfinite(v) for v in terms.values()):
        return
    dump = on_diverged(state) if on_diverged else None
    raise TrainingDivergedError(f"Non-finite loss at step {record['step']}: {record}", dump_path=dump)


def train_task(task, state, cfg, trace_sink=None, on_diverged=None, progress=True):
    """Train one task in place on `state`. Returns the per-step loss trace."""
    for class_id in task.class_ids:
        if class_id in state.meshes:
            raise AlreadyAllocatedError(f"Class {class_id} was already trained")

    prev_thetas, teacher = None, None
    if cfg.kd and len(state.meshes):
        prev_thetas = state.meshes.stacked_thetas().copy()
        teacher = state.extractor.snapshot()

    for class_id in task.class_ids:
        state.meshes.add(build_mesh(class_id, task.appearances[class_id].dims, state.latent, cfg))

    replay = []
    if cfg.replay and len(state.buffer):
        if task.load_sample is None:
            raise InvalidArgumentError("Replay needs a sample loader")
        replay = [task.load_sample(e.sample_id) for e in state.buffer.all()]
    stream = list(task.samples) + replay
    replay_ids = {s.sample_id for s in replay}
    log.info("Task %d: classes %s, %d samples (+%d replayed)",
             task.index, task.class_ids, len(task.samples), len(replay))

    fcam = state.feature_camera
    renders = {}
    rng = np.random.default_rng([cfg.seed, task.index])
    trace = []
    epochs = range(cfg.epochs_per_task)
    if progress:
        epochs = tqdm(epochs, desc=f"task {task.index}", unit="epoch", disable=None)
    for epoch in epochs:
        lr = cfg.lr * (0.5 if cfg.lr_halve_after and epoch >= cfg.lr_halve_after else 1.0)
        order = rng.permutation(len(stream))
        for start in range(0, len(order), cfg.batch_size):
            batch = [stream[i] for i in order[start:start + cfg.batch_size]]
            batch_renders = []
            for s in batch:
                if s.sample_id not in renders:
                    renders[s.sample_id] = rasterize(state.meshes.get(s.class_id).geometry, s.pose, fcam)
                batch_renders.append(renders[s.sample_id])
            unused = state.latent.sample_unused_pool(cfg.unused_pool_size, rng)
            terms, grad, fmaps = batch_objective(state, cfg, batch, batch_renders, teacher, prev_thetas, unused)
            state.step += 1
            record = {"step": state.step, "epoch": epoch, "task": task.index, **terms, "lr": lr}
            _check_finite(terms, state, on_diverged, record)
            try:
                state.extractor.optimizer_step(grad, state.optimizer, lr, cfg.weight_decay)
            except TrainingDivergedError as exc:
                exc.dump_path = on_diverged(state) if on_diverged else None
                raise

            fresh = []
            for s, fmap, render in zip(batch, fmaps, batch_renders):
                if s.sample_id not in replay_ids or cfg.replay_momentum:
                    momentum_update(state.meshes.get(s.class_id), gather_correspondences(fmap, render), cfg.eta)
                feats = background_features(fmap, render, cfg.bg_update, rng)
                if feats is not None:
                    fresh.append(feats)
            if fresh:
                state.bank = bank_insert(state.bank, np.concatenate(fresh))

            trace.append(record)
            if trace_sink is not None:
                trace_sink(record)

    if cfg.replay and cfg.buffer_capacity > 0:
        _update_replay(task, state, cfg, rng)
    state.tasks_done += 1
    return trace


def _update_replay(task, state, cfg, rng):
    all_ids = sorted(set(state.buffer.classes()) | set(task.class_ids))
    quotas = state.buffer.quotas(all_ids)
    for class_id in task.class_ids:
        own = [s for s in task.samples if s.class_id == class_id]
        if quotas[class_id] < 1 or not own:
            continue
        exemplars, _ = select_exemplars(own, quotas[class_id], cfg.azimuth_bins, seed=cfg.seed * 1000 + class_id)
        state.buffer.add_class(class_id, exemplars)
    rebalance(state.buffer, len(all_ids))

    lookup = {s.sample_id: s for s in task.samples}

    def load(sample_id):
        if sample_id in lookup:
            return lookup[sample_id]
        return task.load_sample(sample_id)

    if len(state.buffer):
        state.bank, counts = bg_balance(state.bank, state.buffer, state.extractor, load,
                                        state.meshes, state.feature_camera, rng)
        log.debug("Background bank rebalanced from exemplars: %s", counts)
