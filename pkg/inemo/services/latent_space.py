"""ETF class centroids and the partitioned unit-sphere population that seeds new meshes."""
from dataclasses import dataclass, field
import logging

import numpy as np

from inemo.errors import AllocationError, AlreadyAllocatedError, CheckpointMismatchError, InvalidArgumentError

log = logging.getLogger(__name__)

_TIE_TOL = 1e-12
_MAX_POPULATION = 2 ** 20


def _unit_rows(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def build_etf(max_classes, dim, seed, basis=None):
    """Simplex ETF: E = sqrt(N/(N-1)) U (I - 11^T/N). Returns centroids as rows (N, d).

    `basis` (d x N, orthonormal columns) overrides the seeded Gaussian + QR draw.
    """
    n, d = int(max_classes), int(dim)
    if n < 2:
        raise InvalidArgumentError(f"An ETF needs at least 2 classes, got {n}")
    if d < n:
        raise InvalidArgumentError(f"Feature dim {d} is smaller than max_classes {n}")
    if basis is None:
        rng = np.random.default_rng(seed)
        basis, _ = np.linalg.qr(rng.standard_normal((d, n)))
    basis = np.asarray(basis, dtype=np.float64)
    if basis.shape != (d, n):
        raise InvalidArgumentError(f"ETF basis must be {d}x{n}, got {basis.shape}")
    centering = np.eye(n) - np.ones((n, n)) / n
    etf = np.sqrt(n / (n - 1)) * basis @ centering
    # columns already have unit norm analytically; rescale away rounding
    return _unit_rows(etf.T)


def sample_population(count, dim, seed):
    """`count` draws uniform on the unit sphere (normalized isotropic Gaussian)."""
    if count < 1:
        raise InvalidArgumentError(f"Population size must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    return _unit_rows(rng.standard_normal((int(count), int(dim))))


def partition(population, centroids):
    """Nearest-centroid assignment by inner product; ties go to the lowest class index."""
    population = np.asarray(population, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    if population.shape[1] != centroids.shape[1]:
        raise InvalidArgumentError(
            f"Population dim {population.shape[1]} does not match centroid dim {centroids.shape[1]}"
        )
    scores = population @ centroids.T
    best = scores.max(axis=1, keepdims=True)
    # first column within tolerance of the maximum
    return np.argmax(scores >= best - _TIE_TOL, axis=1).astype(np.int64)


def default_population_size(expected_vertices, max_classes):
    return int(min(16 * int(expected_vertices) * int(max_classes), _MAX_POPULATION))


@dataclass
class LatentPartition:
    dim: int
    max_classes: int
    centroids: np.ndarray  # (N, d)
    population: np.ndarray  # (M, d)
    assignment: np.ndarray  # (M,)
    used_classes: set = field(default_factory=set)
    seed: int = 0

    @classmethod
    def create(cls, dim, max_classes, population_size, seed):
        centroids = build_etf(max_classes, dim, seed)
        population = sample_population(population_size, dim, seed + 1)
        return cls(
            dim=int(dim),
            max_classes=int(max_classes),
            centroids=centroids,
            population=population,
            assignment=partition(population, centroids),
            seed=int(seed),
        )

    def members(self, class_id):
        return self.population[self.assignment == class_id]

    def unused_mask(self):
        used = np.array(sorted(self.used_classes), dtype=np.int64)
        return ~np.isin(self.assignment, used)

    def unused_pool(self):
        """H-bar: population vectors whose class has not been handed out yet."""
        return self.population[self.unused_mask()]

    def sample_unused_pool(self, size, rng):
        """Per-step subsample of H-bar (all of it when smaller than `size`)."""
        idx = np.flatnonzero(self.unused_mask())
        if size <= 0 or len(idx) == 0:
            return np.zeros((0, self.dim))
        if len(idx) > size:
            idx = np.sort(rng.choice(idx, size=int(size), replace=False))
        return self.population[idx]

    def class_sizes(self):
        return np.bincount(self.assignment, minlength=self.max_classes)

    def to_meta(self):
        """Everything needed to regenerate the partition; the population itself is not stored."""
        return {
            "dim": self.dim,
            "max_classes": self.max_classes,
            "population_size": int(len(self.population)),
            "used_classes": sorted(int(c) for c in self.used_classes),
            "seed": self.seed,
            "class_sizes": [int(n) for n in self.class_sizes()],
        }

    @classmethod
    def from_meta(cls, meta):
        latent = cls.create(meta["dim"], meta["max_classes"], meta["population_size"], meta["seed"])
        if [int(n) for n in latent.class_sizes()] != list(meta["class_sizes"]):
            raise CheckpointMismatchError("Regenerated latent partition does not match the stored class sizes")
        latent.used_classes = set(int(c) for c in meta["used_classes"])
        return latent


def allocate_class(latent, class_id, vertex_count, seed=None):
    """Hand out `vertex_count` features drawn from the class's partition and mark it used.

    Draws without replacement when the partition is large enough, with replacement otherwise.
    """
    class_id = int(class_id)
    if not 0 <= class_id < latent.max_classes:
        raise InvalidArgumentError(f"Class {class_id} outside [0, {latent.max_classes})")
    if class_id in latent.used_classes:
        raise AlreadyAllocatedError(f"Class {class_id} already has vertex features")
    members = latent.members(class_id)
    if vertex_count == 0:
        latent.used_classes.add(class_id)
        return np.zeros((0, latent.dim))
    if len(members) == 0:
        raise AllocationError(f"Latent partition for class {class_id} is empty")
    rng = np.random.default_rng([latent.seed if seed is None else int(seed), class_id])
    replace = len(members) < vertex_count
    if replace:
        log.debug("Partition %d has %d vectors for %d vertices; sampling with replacement",
                  class_id, len(members), vertex_count)
    idx = rng.choice(len(members), size=int(vertex_count), replace=replace)
    latent.used_classes.add(class_id)
    return members[idx].copy()


def allocate_random(latent, class_id, vertex_count, seed=None):
    """Unit-sphere vertex features ignoring the class partition; still marks the class used."""
    class_id = int(class_id)
    if not 0 <= class_id < latent.max_classes:
        raise InvalidArgumentError(f"Class {class_id} outside [0, {latent.max_classes})")
    if class_id in latent.used_classes:
        raise AlreadyAllocatedError(f"Class {class_id} already has vertex features")
    latent.used_classes.add(class_id)
    if vertex_count == 0:
        return np.zeros((0, latent.dim))
    rng = np.random.default_rng([latent.seed if seed is None else int(seed), class_id, 1])
    return _unit_rows(rng.standard_normal((int(vertex_count), latent.dim)))
