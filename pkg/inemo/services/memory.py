"""Pose-aware exemplar replay and the growing store of per-class neural meshes."""
import logging
import math

import numpy as np

from inemo.errors import AlreadyAllocatedError, InvalidArgumentError, NotFoundError
from inemo.models import TWO_PI, Exemplar

log = logging.getLogger(__name__)

DEFAULT_BINS = 8


def azimuth_bin(azimuth, bins):
    b = int(math.floor((azimuth % TWO_PI) / (TWO_PI / bins)))
    return min(b, bins - 1)


def _as_exemplar(item, bins):
    pose = item.pose.canonical()
    return Exemplar(str(item.sample_id), int(item.class_id), pose, azimuth_bin(pose.azimuth, bins))


def _bin_groups(counts, per):
    """Greedily merge short bins with their right neighbours; a short tail wraps into the first group."""
    b = len(counts)
    groups, i = [], 0
    while i < b:
        group, total, j = [i], counts[i], i + 1
        while total < per and j < b:
            group.append(j)
            total += counts[j]
            j += 1
        groups.append(group)
        i = j
    if len(groups) > 1 and sum(counts[k] for k in groups[-1]) < per:
        groups[0] = groups.pop() + groups[0]
    return groups


def select_exemplars(class_samples, slots, bins=DEFAULT_BINS, seed=0):
    """Pick `slots` exemplars spread evenly over equal-width azimuth bins.

    Returns (exemplars, short) where `short` flags that fewer than `slots` samples existed.
    """
    if slots < 1 or bins < 1:
        raise InvalidArgumentError(f"Need slots >= 1 and bins >= 1, got {slots}, {bins}")
    items = [_as_exemplar(s, bins) for s in class_samples]
    if len(items) <= slots:
        short = len(items) < slots
        if short:
            log.warning("Only %d samples for %d exemplar slots; keeping all", len(items), slots)
        return items, short

    rng = np.random.default_rng(seed)
    members = [[i for i, e in enumerate(items) if e.bin == b] for b in range(bins)]
    per = slots // bins
    chosen = set()
    if per > 0:
        for group in _bin_groups([len(m) for m in members], per):
            pool = [i for b in group for i in members[b]]
            take = min(per * len(group), len(pool))
            chosen.update(int(i) for i in rng.choice(pool, size=take, replace=False))

    # remainder: at most one extra per bin first, then anywhere
    spare_bins = [b for b in range(bins) if any(i not in chosen for i in members[b])]
    order = rng.permutation(len(spare_bins))
    for pos in order:
        if len(chosen) >= slots:
            break
        pool = [i for i in members[spare_bins[pos]] if i not in chosen]
        chosen.add(int(rng.choice(pool)))
    if len(chosen) < slots:
        rest = [i for i in range(len(items)) if i not in chosen]
        chosen.update(int(i) for i in rng.choice(rest, size=slots - len(chosen), replace=False))
    return [items[i] for i in sorted(chosen)], False


def bin_counts(exemplars, bins):
    counts = np.zeros(bins, dtype=np.int64)
    for e in exemplars:
        counts[e.bin] += 1
    return counts


class ReplayBuffer:
    """Fixed total capacity divided equally among the classes seen so far."""

    def __init__(self, capacity, bins=DEFAULT_BINS, seed=0):
        if capacity < 0 or bins < 1:
            raise InvalidArgumentError(f"Invalid replay buffer capacity {capacity} / bins {bins}")
        self.capacity = int(capacity)
        self.bins = int(bins)
        self.seed = int(seed)
        self.exemplars = {}

    def __len__(self):
        return sum(len(v) for v in self.exemplars.values())

    def classes(self):
        return sorted(self.exemplars)

    def class_exemplars(self, class_id):
        return list(self.exemplars.get(int(class_id), []))

    def all(self):
        return [e for c in self.classes() for e in self.exemplars[c]]

    def add_class(self, class_id, exemplars):
        class_id = int(class_id)
        if class_id in self.exemplars:
            raise AlreadyAllocatedError(f"Replay buffer already holds class {class_id}")
        self.exemplars[class_id] = list(exemplars)

    def quotas(self, class_ids, num_classes=None):
        """capacity // n slots per class, remainder to the lowest class ids."""
        ids = sorted(int(c) for c in class_ids)
        if not ids:
            return {}
        base, extra = divmod(self.capacity, max(len(ids), num_classes or 0))
        return {c: base + (1 if i < extra else 0) for i, c in enumerate(ids)}

    def to_manifest(self):
        return {
            "capacity": self.capacity,
            "bins": self.bins,
            "seed": self.seed,
            "exemplars": [e.to_dict() for e in self.all()],
        }

    @classmethod
    def from_manifest(cls, data):
        buf = cls(data["capacity"], data["bins"], data.get("seed", 0))
        for item in data["exemplars"]:
            e = Exemplar.from_dict(item)
            buf.exemplars.setdefault(e.class_id, []).append(e)
        return buf


def reduce_class(buffer, class_id, new_count):
    """Drop exemplars from the fullest azimuth bin (lowest bin on ties), random within the bin."""
    class_id = int(class_id)
    current = buffer.exemplars.get(class_id, [])
    if new_count > len(current):
        raise InvalidArgumentError(f"Cannot grow class {class_id} from {len(current)} to {new_count}")
    rng = np.random.default_rng([buffer.seed, class_id, len(current), int(new_count)])
    kept = list(current)
    while len(kept) > new_count:
        counts = bin_counts(kept, buffer.bins)
        target = int(np.argmax(counts))
        in_bin = [i for i, e in enumerate(kept) if e.bin == target]
        kept.pop(int(rng.choice(in_bin)))
    buffer.exemplars[class_id] = kept
    return buffer


def rebalance(buffer, num_classes=None):
    """Shrink every stored class to its equal share of the capacity."""
    ids = buffer.classes()
    if num_classes is not None and num_classes < 1:
        raise InvalidArgumentError(f"num_classes must be >= 1, got {num_classes}")
    if not ids:
        return buffer
    for class_id, quota in buffer.quotas(ids, num_classes).items():
        if len(buffer.exemplars[class_id]) > quota:
            reduce_class(buffer, class_id, quota)
    return buffer


class MeshStore:
    """Per-class neural meshes, keyed by class id; only ever grows."""

    def __init__(self):
        self._meshes = {}

    def __len__(self):
        return len(self._meshes)

    def __contains__(self, class_id):
        return int(class_id) in self._meshes

    def add(self, mesh):
        if mesh.class_id in self._meshes:
            raise AlreadyAllocatedError(f"Mesh for class {mesh.class_id} already stored")
        self._meshes[int(mesh.class_id)] = mesh

    def get(self, class_id):
        try:
            return self._meshes[int(class_id)]
        except KeyError:
            raise NotFoundError(f"No mesh stored for class {class_id}") from None

    def classes(self):
        return sorted(self._meshes)

    def meshes(self):
        return [self._meshes[c] for c in self.classes()]

    def stacked_thetas(self, exclude=None, only=None):
        """All vertex features of the selected classes stacked row-wise, in class order."""
        rows = [m.theta for m in self.meshes()
                if (exclude is None or m.class_id != exclude) and (only is None or m.class_id in only)]
        if not rows:
            dim = self.meshes()[0].theta.shape[1] if self._meshes else 0
            return np.zeros((0, dim))
        return np.concatenate(rows)


def mesh_store_add(store, mesh):
    store.add(mesh)
    return store


def mesh_store_get(store, class_id):
    return store.get(class_id)
