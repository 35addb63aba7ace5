"""Dataset directory: dataset.yaml, manifest.jsonl and samples/<id>.raster (see file-formats.md)."""
from functools import lru_cache
import hashlib
import json
import logging
from pathlib import Path
import struct

import numpy as np
import yaml

from inemo.errors import InvalidArgumentError, NotFoundError
from inemo.models import ClassAppearance, Pose, Sample
from inemo.services.benchgen import Task

log = logging.getLogger(__name__)

RASTER_MAGIC = b"INRS"
RASTER_VERSION = 1
DATASET_VERSION = "inemo-data/1"
DEFAULT_CACHE_SIZE = 2048
_HEADER = struct.Struct("<4I")


def write_raster(path, image, mask):
    """Channel-major little-endian float32: RGB planes then the object mask plane."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    planes = np.concatenate([image.transpose(2, 0, 1), np.asarray(mask, dtype=np.float64)[None]])
    with open(path, "wb") as f:
        f.write(RASTER_MAGIC)
        f.write(_HEADER.pack(RASTER_VERSION, h, w, planes.shape[0]))
        f.write(planes.astype("<f4").tobytes())


def read_raster(path):
    data = Path(path).read_bytes()
    if data[:4] != RASTER_MAGIC:
        raise InvalidArgumentError(f"{path} is not a raster file")
    version, h, w, c = _HEADER.unpack_from(data, 4)
    if version != RASTER_VERSION or c != 4:
        raise InvalidArgumentError(f"{path}: unsupported raster version {version} / {c} channels")
    body = np.frombuffer(data, dtype="<f4", offset=4 + _HEADER.size)
    if body.size != c * h * w:
        raise InvalidArgumentError(f"{path}: truncated raster ({body.size} of {c * h * w} values)")
    planes = body.reshape(c, h, w).astype(np.float64)
    return planes[:3].transpose(1, 2, 0), planes[3] > 0.5


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class DatasetWriter:
    def __init__(self, root, meta):
        self.root = Path(root)
        self.meta = dict(meta)
        self.records = []

    def __enter__(self):
        (self.root / "samples").mkdir(parents=True, exist_ok=True)
        return self

    def add(self, sample, split, task):
        name = sample.sample_id if not sample.occlusion_level else f"{sample.sample_id}-{sample.occlusion_level}"
        rel = f"samples/{name}.raster"
        write_raster(self.root / rel, sample.image, sample.object_mask)
        record = sample.to_record(rel)
        record.update({"id": name, "source": sample.sample_id, "split": split, "task": int(task)})
        self.records.append(record)
        return record

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            return False
        self.records.sort(key=lambda r: r["id"])
        with open(self.root / "manifest.jsonl", "w", encoding="utf-8") as f:
            for r in self.records:
                f.write(json.dumps(r, sort_keys=True) + "\n")
        meta = {"version": DATASET_VERSION, **self.meta, "sample_count": len(self.records)}
        with open(self.root / "dataset.yaml", "w", encoding="utf-8") as f:
            yaml.safe_dump(meta, f, sort_keys=False, default_flow_style=False)
        return False


class Dataset:
    """Read side of a generated dataset; samples are loaded lazily.

    The most recently used `cache_size` samples stay in memory; 0 disables caching.
    """

    def __init__(self, root, cache_size=DEFAULT_CACHE_SIZE):
        self.root = Path(root)
        meta_path = self.root / "dataset.yaml"
        manifest_path = self.root / "manifest.jsonl"
        if not meta_path.exists() or not manifest_path.exists():
            raise NotFoundError(f"No dataset at {self.root} (dataset.yaml / manifest.jsonl missing)")
        with open(meta_path, encoding="utf-8") as f:
            self.meta = yaml.safe_load(f) or {}
        if self.meta.get("version") != DATASET_VERSION:
            raise InvalidArgumentError(f"Unsupported dataset version {self.meta.get('version')!r}")
        with open(manifest_path, encoding="utf-8") as f:
            self.records = [json.loads(line) for line in f if line.strip()]
        self._by_id = {r["id"]: r for r in self.records}
        if cache_size < 0:
            raise InvalidArgumentError(f"cache_size must be >= 0, got {cache_size}")
        self._cached_read = lru_cache(maxsize=int(cache_size))(self._read_sample)

    @property
    def tasks(self):
        return [Task.from_dict(t) for t in self.meta["tasks"]]

    @property
    def appearances(self):
        return {int(a["class_id"]): ClassAppearance.from_dict(a) for a in self.meta["appearances"]}

    @property
    def manifest_digest(self):
        return file_digest(self.root / "manifest.jsonl")

    def select(self, split=None, classes=None, occlusion=None):
        """Record ids filtered by split, class set and occlusion level ("" for clean)."""
        out = []
        for r in self.records:
            if split is not None and r["split"] != split:
                continue
            if classes is not None and r["class_id"] not in classes:
                continue
            if occlusion is not None and (r["occlusion"] or "") != occlusion:
                continue
            out.append(r["id"])
        return out

    def occlusion_levels(self):
        return sorted({r["occlusion"] or "" for r in self.records if r["split"] == "test"})

    def record(self, sample_id):
        record = self._by_id.get(sample_id)
        if record is None:
            raise NotFoundError(f"Sample {sample_id!r} not in {self.root}")
        return record

    def load_sample(self, sample_id):
        return self._cached_read(sample_id)

    def cache_info(self):
        return self._cached_read.cache_info()

    def _read_sample(self, sample_id):
        record = self.record(sample_id)
        image, mask = read_raster(self.root / record["path"])
        sample = Sample(
            sample_id=record["id"],
            class_id=int(record["class_id"]),
            pose=Pose.from_dict(record["pose"]),
            image=image,
            object_mask=mask,
            occlusion_level=record["occlusion"],
            occluded_fraction=float(record["occluded_fraction"]),
        )
        return sample

    def load_many(self, sample_ids):
        return [self.load_sample(i) for i in sample_ids]
