"""Model checkpoints: a deterministic zip of manifest.json plus .npy arrays (numpy.load compatible)."""
import io
import json
import logging
from pathlib import Path
import zipfile

import numpy as np

from inemo import __version__
from inemo.errors import CheckpointMismatchError, NotFoundError
from inemo.models import BackgroundBank, Camera, CuboidMesh, NeuralMesh
from inemo.services import settings_store
from inemo.services.feature_net import FeatureExtractor
from inemo.services.geometry3d import neighborhood_mask
from inemo.services.latent_space import LatentPartition
from inemo.services.memory import MeshStore, ReplayBuffer
from inemo.services.optim import AdamState
from inemo.services.training import ModelState

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = "inemo-ckpt/1"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(array):
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(array), allow_pickle=False)
    return buf.getvalue()


def _member(name):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def _collect(state, cfg):
    arrays = {
        "extractor_params": state.extractor.params,
        "optimizer_m": state.optimizer.m,
        "optimizer_v": state.optimizer.v,
        "bank_features": state.bank.features,
        "bank_ages": state.bank.ages,
    }
    meshes = []
    for mesh in state.meshes.meshes():
        key = f"mesh_{mesh.class_id:04d}"
        arrays[f"{key}_vertices"] = mesh.geometry.vertices
        arrays[f"{key}_faces"] = mesh.geometry.faces
        arrays[f"{key}_theta"] = mesh.theta
        meshes.append({
            "class_id": mesh.class_id,
            "key": key,
            "dims": [float(v) for v in mesh.geometry.dims],
            "radius": float(cfg.neighborhood_scale * mesh.geometry.diagonal),
        })
    manifest = {
        "version": CHECKPOINT_VERSION,
        "code_version": __version__,
        "config": settings_store.config_echo(cfg),
        "architecture": state.extractor.architecture(),
        "optimizer": {"t": state.optimizer.t, "beta1": state.optimizer.beta1,
                      "beta2": state.optimizer.beta2, "eps": state.optimizer.eps},
        "camera": state.camera.to_dict(),
        "latent": state.latent.to_meta(),
        "meshes": meshes,
        "replay": state.buffer.to_manifest(),
        "step": state.step,
        "tasks_done": state.tasks_done,
        "history": state.history,
    }
    return manifest, arrays


def save(state, cfg, path):
    """Write a checkpoint; identical state gives identical bytes."""
    manifest, arrays = _collect(state, cfg)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        zf.writestr(_member("manifest.json"), json.dumps(manifest, sort_keys=True, indent=1))
        for name in sorted(arrays):
            zf.writestr(_member(f"{name}.npy"), _npy_bytes(arrays[name]))
    tmp.replace(path)
    log.debug("Checkpoint written to %s", path)
    return path


def load(path):
    """Returns (ModelState, ExperimentConfig)."""
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"Checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files if k != "manifest.json"}
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
    except (zipfile.BadZipFile, KeyError, ValueError, OSError) as exc:
        raise CheckpointMismatchError(f"Malformed checkpoint {path}: {exc}") from None
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointMismatchError(
            f"Checkpoint {path} has version {manifest.get('version')!r}, expected {CHECKPOINT_VERSION!r}"
        )
    try:
        return _restore(manifest, arrays)
    except KeyError as exc:
        raise CheckpointMismatchError(f"Checkpoint {path} is missing {exc}") from None


def _restore(manifest, arrays):
    cfg = settings_store.from_dict(manifest["config"])
    extractor = FeatureExtractor.from_architecture(manifest["architecture"], arrays["extractor_params"])
    opt = manifest["optimizer"]
    optimizer = AdamState(m=arrays["optimizer_m"].copy(), v=arrays["optimizer_v"].copy(), t=int(opt["t"]),
                          beta1=opt["beta1"], beta2=opt["beta2"], eps=opt["eps"])
    store = MeshStore()
    for meta in manifest["meshes"]:
        key = meta["key"]
        geometry = CuboidMesh(arrays[f"{key}_vertices"], arrays[f"{key}_faces"], meta["dims"])
        store.add(NeuralMesh(
            class_id=int(meta["class_id"]),
            geometry=geometry,
            theta=arrays[f"{key}_theta"].copy(),
            neighbor_mask=neighborhood_mask(geometry, meta["radius"]),
        ))
    state = ModelState(
        extractor=extractor,
        latent=LatentPartition.from_meta(manifest["latent"]),
        meshes=store,
        bank=BackgroundBank(arrays["bank_features"].copy(), arrays["bank_ages"].copy()),
        buffer=ReplayBuffer.from_manifest(manifest["replay"]),
        camera=Camera.from_dict(manifest["camera"]),
        optimizer=optimizer,
        step=int(manifest["step"]),
        tasks_done=int(manifest["tasks_done"]),
        history=list(manifest["history"]),
    )
    return state, cfg
