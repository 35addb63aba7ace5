import json
import zipfile

import numpy as np
import pytest

from inemo.errors import CheckpointMismatchError, NotFoundError
from inemo.services import checkpoint
from inemo.services.benchgen import make_class_appearance
from inemo.services.training import ModelState, TaskData, train_task

from conftest import random_poses, render_class, small_config


@pytest.fixture(scope="module")
def trained():
    cfg = small_config(epochs_per_task=1)
    samples = [s for c in (0, 1) for s in render_class(c, random_poses(3, seed=c), cfg.seed, cfg.image_size)]
    task = TaskData(0, [0, 1], samples, {c: make_class_appearance(c, cfg.seed) for c in (0, 1)})
    state = ModelState.create(cfg)
    train_task(task, state, cfg, progress=False)
    state.history.append({"task": 0, "classes": [0, 1], "accuracy": 0.5, "per_task": [0.5]})
    return state, cfg


def test_save_is_deterministic(trained, tmp_path):
    state, cfg = trained
    a = checkpoint.save(state, cfg, tmp_path / "a.ckpt")
    b = checkpoint.save(state, cfg, tmp_path / "b.ckpt")
    assert a.read_bytes() == b.read_bytes()


def test_load_then_save_is_byte_identical(trained, tmp_path):
    state, cfg = trained
    first = checkpoint.save(state, cfg, tmp_path / "first.ckpt")
    restored, restored_cfg = checkpoint.load(first)
    assert restored_cfg == cfg
    second = checkpoint.save(restored, restored_cfg, tmp_path / "second.ckpt")
    assert first.read_bytes() == second.read_bytes()


def test_restored_state_behaves_the_same(trained, tmp_path):
    state, cfg = trained
    restored, _ = checkpoint.load(checkpoint.save(state, cfg, tmp_path / "s.ckpt"))
    assert restored.meshes.classes() == [0, 1]
    assert restored.step == state.step and restored.tasks_done == 1
    assert restored.history == state.history
    for c in (0, 1):
        np.testing.assert_array_equal(restored.meshes.get(c).theta, state.meshes.get(c).theta)
        np.testing.assert_array_equal(restored.meshes.get(c).neighbor_mask, state.meshes.get(c).neighbor_mask)
    np.testing.assert_array_equal(restored.bank.features, state.bank.features)
    assert restored.buffer.all() == state.buffer.all()
    image = render_class(1, random_poses(1, seed=9), cfg.seed, cfg.image_size)[0].image
    np.testing.assert_array_equal(restored.extractor.forward(image), state.extractor.forward(image))
    np.testing.assert_array_equal(restored.latent.assignment, state.latent.assignment)


def test_checkpoint_is_a_numpy_archive(trained, tmp_path):
    state, cfg = trained
    path = checkpoint.save(state, cfg, tmp_path / "n.ckpt")
    with np.load(path) as npz:
        assert "extractor_params" in npz.files
        assert npz["mesh_0001_theta"].shape[1] == cfg.feature_dim


def test_version_mismatch_and_missing_file(trained, tmp_path):
    state, cfg = trained
    path = checkpoint.save(state, cfg, tmp_path / "v.ckpt")
    with zipfile.ZipFile(path) as zf:
        members = {name: zf.read(name) for name in zf.namelist()}
    manifest = json.loads(members["manifest.json"])
    manifest["version"] = "inemo-ckpt/0"
    members["manifest.json"] = json.dumps(manifest).encode()
    old = tmp_path / "old.ckpt"
    with zipfile.ZipFile(old, "w") as zf:
        for name, data in members.items():
            zf.writestr(name, data)
    with pytest.raises(CheckpointMismatchError) as info:
        checkpoint.load(old)
    assert info.value.exit_code == 4

    garbage = tmp_path / "garbage.ckpt"
    garbage.write_bytes(b"not a zip")
    with pytest.raises(CheckpointMismatchError):
        checkpoint.load(garbage)
    with pytest.raises(NotFoundError):
        checkpoint.load(tmp_path / "absent.ckpt")
