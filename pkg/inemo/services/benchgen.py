"""Synthetic benchmark: textured cuboid renders, procedural backgrounds, occluders, task splits."""
from dataclasses import dataclass, field
import logging
import math
import re
from typing import List

import numpy as np
from scipy.ndimage import zoom

from inemo.errors import GenerationError, InvalidArgumentError
from inemo.models import ClassAppearance, Pose, Sample
from inemo.services.geometry3d import build_cuboid, face_sides, pose_to_rotation, rasterize

log = logging.getLogger(__name__)

OCCLUSION_RANGES = {"l1": (0.2, 0.4), "l2": (0.4, 0.6), "l3": (0.6, 0.8)}
_MAX_OCCLUSION_ATTEMPTS = 100
_LIGHT = np.array([0.3, 0.4, -1.0]) / np.linalg.norm([0.3, 0.4, -1.0])
_BIASED_KAPPA = 2.0


def make_class_appearance(class_id, seed):
    """Deterministic per-(class, seed) extents, face colours and stripe parameters (3 decimals)."""
    rng = np.random.default_rng([int(seed), int(class_id)])
    r = lambda a: np.round(a, 3).tolist()
    return ClassAppearance(
        class_id=int(class_id),
        dims=r(rng.uniform(0.55, 1.0, 3)),
        face_colors=r(rng.uniform(0.1, 0.95, (6, 3))),
        stripe_freq=r(rng.uniform(1.5, 6.0, 6)),
        stripe_angle=r(rng.uniform(0.0, math.pi, 6)),
        stripe_phase=r(rng.uniform(0.0, 2 * math.pi, 6)),
    )


def _background(height, width, seed):
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(0.2, 0.8, (8, 8, 3))
    smooth = zoom(coarse, (height / 8, width / 8, 1), order=1, mode="nearest")
    return np.clip(smooth + rng.normal(0.0, 0.03, smooth.shape), 0.0, 1.0)


def _stripes(u, v, freq, angle, phase):
    return 0.5 + 0.5 * np.sin(2 * math.pi * freq * (math.cos(angle) * u + math.sin(angle) * v) + phase)


def render_sample(appearance, pose, camera, background_seed, noise_level=0.0, sample_id=None):
    """Full-resolution render of the textured cuboid over a procedural background."""
    mesh = build_cuboid(appearance.dims, 8)
    render = rasterize(mesh, pose, camera)
    h, w = render.shape
    image = _background(h, w, background_seed)

    ys, xs = np.nonzero(render.object_mask)
    if len(ys):
        # back-project pixel centres to object coordinates
        z = render.zbuffer[ys, xs]
        scale = camera.focal * camera.viewport
        cam = np.stack([(xs + 0.5 - w / 2) * z / scale, -(ys + 0.5 - h / 2) * z / scale, z], axis=1)
        rot = pose_to_rotation(pose)
        obj = (cam - np.array([0.0, 0.0, pose.distance])) @ rot
        sides = face_sides(mesh)[render.face_of_pixel[ys, xs]]
        colors = np.asarray(appearance.face_colors)
        for side in range(6):
            sel = sides == side
            if not np.any(sel):
                continue
            axis = side // 2
            u, v = obj[sel, (axis + 1) % 3], obj[sel, (axis + 2) % 3]
            pattern = _stripes(u, v, appearance.stripe_freq[side], appearance.stripe_angle[side],
                               appearance.stripe_phase[side])
            normal = np.zeros(3)
            normal[axis] = 1.0 if side % 2 else -1.0
            shade = 0.35 + 0.65 * max(0.0, float((rot @ normal) @ _LIGHT))
            image[ys[sel], xs[sel]] = colors[side] * (0.45 + 0.55 * pattern[:, None]) * shade

    if noise_level > 0:
        rng = np.random.default_rng([int(background_seed), 1])
        image = np.clip(image + rng.normal(0.0, noise_level, image.shape), 0.0, 1.0)
    return Sample(
        sample_id=sample_id or f"c{appearance.class_id:03d}",
        class_id=appearance.class_id,
        pose=pose,
        image=image,
        object_mask=render.object_mask.copy(),
        footprint=render.object_mask.copy(),
    )


def _occluder_patch(rng, height, width):
    color = rng.uniform(0.05, 0.95, 3)
    yy, xx = np.mgrid[0:height, 0:width] / 8.0
    pattern = _stripes(xx, yy, rng.uniform(0.5, 2.0), rng.uniform(0, math.pi), rng.uniform(0, 2 * math.pi))
    return color * (0.5 + 0.5 * pattern[..., None])


def occlude(sample, level, seed=0):
    """Superimpose textured rectangles until the occluded share of the object is in the level's range."""
    level = str(level).lower()
    if level not in OCCLUSION_RANGES:
        raise InvalidArgumentError(f"Occlusion level must be one of l1, l2, l3, got {level!r}")
    lo, hi = OCCLUSION_RANGES[level]
    footprint = sample.footprint if sample.footprint is not None else sample.object_mask
    area = int(footprint.sum())
    if area == 0:
        raise GenerationError(f"Sample {sample.sample_id} has no object pixels to occlude")
    ys, xs = np.nonzero(footprint)
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    bh, bw = y1 - y0, x1 - x0
    h, w = footprint.shape
    rng = np.random.default_rng([int(seed), 7])

    for _ in range(_MAX_OCCLUSION_ATTEMPTS):
        image = sample.image.copy()
        covered = np.zeros_like(footprint)
        fraction = 0.0
        while fraction < lo:
            rh = max(1, int(round(rng.uniform(0.15, 0.45) * bh)))
            rw = max(1, int(round(rng.uniform(0.15, 0.45) * bw)))
            cy = int(rng.integers(y0, y1))
            cx = int(rng.integers(x0, x1))
            top, left = max(0, cy - rh // 2), max(0, cx - rw // 2)
            bottom, right = min(h, top + rh), min(w, left + rw)
            image[top:bottom, left:right] = _occluder_patch(rng, bottom - top, right - left)
            covered[top:bottom, left:right] = True
            fraction = float((covered & footprint).sum()) / area
        if fraction <= hi:
            return Sample(
                sample_id=sample.sample_id,
                class_id=sample.class_id,
                pose=sample.pose,
                image=image,
                object_mask=footprint & ~covered,
                occlusion_level=level,
                occluded_fraction=fraction,
                footprint=footprint.copy(),
            )
        log.debug("Occlusion of %s overshot %s (%.2f); redrawing", sample.sample_id, level, fraction)
    raise GenerationError(
        f"Could not reach {level} occlusion ({lo:.0%}-{hi:.0%}) for {sample.sample_id} "
        f"in {_MAX_OCCLUSION_ATTEMPTS} attempts"
    )


# ---------------------------------------------------------------------------
# task splits
# ---------------------------------------------------------------------------

_SPLIT_RE = re.compile(r"^B(\d+)\+(\d+)$", re.IGNORECASE)


def split_classes(num_classes, split_spec):
    """Task sizes for "B{base}+{inc}" or an explicit comma list such as "4,2,2"."""
    spec = str(split_spec).replace(" ", "")
    m = _SPLIT_RE.match(spec)
    if m:
        base, inc = int(m.group(1)), int(m.group(2))
        rest = num_classes - base
        if inc < 1 or rest < 0 or rest % inc:
            raise InvalidArgumentError(f"Split {split_spec!r} does not fit {num_classes} classes")
        sizes = ([base] if base else []) + [inc] * (rest // inc)
    else:
        try:
            sizes = [int(t) for t in spec.split(",") if t]
        except ValueError:
            raise InvalidArgumentError(f"Unrecognised split spec {split_spec!r}") from None
        if sum(sizes) != num_classes or any(s < 1 for s in sizes):
            raise InvalidArgumentError(f"Split {split_spec!r} does not sum to {num_classes} classes")
    if not sizes:
        raise InvalidArgumentError(f"Split {split_spec!r} yields no tasks")
    return sizes


@dataclass(frozen=True)
class SampleSpec:
    sample_id: str
    class_id: int
    split: str
    pose: Pose
    background_seed: int


@dataclass
class Task:
    index: int
    class_ids: List[int]
    train_ids: List[str] = field(default_factory=list)
    test_ids: List[str] = field(default_factory=list)

    def to_dict(self):
        return {"index": self.index, "classes": self.class_ids,
                "train": self.train_ids, "test": self.test_ids}

    @classmethod
    def from_dict(cls, data):
        return cls(int(data["index"]), [int(c) for c in data["classes"]],
                   list(data["train"]), list(data["test"]))


@dataclass
class TaskSequence:
    tasks: List[Task]
    specs: List[SampleSpec]

    def classes_up_to(self, index):
        return [c for t in self.tasks[: index + 1] for c in t.class_ids]


def draw_pose(rng, distance=5.0, preferred_azimuth=None):
    if preferred_azimuth is None:
        azimuth = rng.uniform(0.0, 2 * math.pi)
    else:
        azimuth = rng.vonmises(preferred_azimuth, _BIASED_KAPPA)
    return Pose(
        float(azimuth),
        float(rng.uniform(-math.pi / 3, math.pi / 3)),
        float(rng.uniform(-math.pi / 6, math.pi / 6)),
        distance,
    ).canonical()


def build_task_sequence(num_classes, split_spec, per_class_train, per_class_test, seed,
                        azimuth_mode="uniform", distance=5.0):
    """Shuffle classes into tasks and draw every sample's pose and background seed."""
    sizes = split_classes(num_classes, split_spec)
    if azimuth_mode not in ("uniform", "biased"):
        raise InvalidArgumentError(f"Unknown azimuth mode {azimuth_mode!r}")
    rng = np.random.default_rng(seed)
    order = [int(c) for c in rng.permutation(num_classes)]
    tasks, specs, pos = [], [], 0
    for index, size in enumerate(sizes):
        task = Task(index, sorted(order[pos:pos + size]))
        pos += size
        for class_id in task.class_ids:
            crng = np.random.default_rng([int(seed), class_id, 11])
            preferred = crng.uniform(0, 2 * math.pi) if azimuth_mode == "biased" else None
            for split, count, ids in (("train", per_class_train, task.train_ids),
                                      ("test", per_class_test, task.test_ids)):
                for i in range(count):
                    sample_id = f"c{class_id:03d}-{split}-{i:04d}"
                    specs.append(SampleSpec(sample_id, class_id, split,
                                            draw_pose(crng, distance, preferred),
                                            int(crng.integers(0, 2 ** 31 - 1))))
                    ids.append(sample_id)
        tasks.append(task)
    return TaskSequence(tasks, specs)
