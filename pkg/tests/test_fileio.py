"""Tests for fileio module."""

import json
import struct

import numpy as np
import pytest

from sbsm_fit.config import FitConfig
from sbsm_fit.errors import FtsFormatError
from sbsm_fit.fileio import (
    load_bank,
    load_ground_truth,
    load_image_png,
    load_mask_png,
    load_skeleton,
    load_targets,
    read_fts,
    read_losses_csv,
    save_bank,
    save_image_png,
    save_mask_png,
    save_result,
    save_skeleton,
    save_targets,
    write_fts,
    write_losses_csv,
)
from sbsm_fit.fit import ViewTarget, fit_instance
from sbsm_fit.geometry import load_obj
from sbsm_fit.objective import LossBreakdown
from sbsm_fit.render import Camera
from sbsm_fit.synth import generate_views, make_bank


@pytest.fixture(scope="module")
def views(scene):
    """Two 16 x 16 synthetic views with ground truth."""
    return generate_views(scene, Camera(width=16, height=16), 2, seed=0, azimuths=[20.0, 200.0])


class TestFts:
    """Test the FTS tensor container."""

    def test_round_trip(self, tmp_path):
        array = np.arange(24, dtype=np.float64).reshape(2, 3, 4) / 7.0
        write_fts(tmp_path / "a.fts", array)
        loaded = read_fts(tmp_path / "a.fts")
        assert loaded.dtype == np.float32
        assert loaded.shape == (2, 3, 4)
        assert np.array_equal(loaded, array.astype(np.float32))

    def test_layout(self, tmp_path):
        write_fts(tmp_path / "a.fts", np.array([[1.0, 2.0]]))
        raw = (tmp_path / "a.fts").read_bytes()
        assert raw[:4] == b"FTEN"
        assert struct.unpack_from("<IIII", raw, 4) == (1, 2, 1, 2)
        assert struct.unpack_from("<2f", raw, 20) == (1.0, 2.0)
        assert len(raw) == 28

    def test_scalar(self, tmp_path):
        write_fts(tmp_path / "s.fts", np.float64(3.5))
        assert read_fts(tmp_path / "s.fts").shape == ()
        assert float(read_fts(tmp_path / "s.fts")) == 3.5

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.fts"
        path.write_bytes(b"NOPE" + struct.pack("<II", 1, 0) + struct.pack("<f", 1.0))
        with pytest.raises(FtsFormatError, match="magic"):
            read_fts(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "short.fts"
        path.write_bytes(b"FTEN" + struct.pack("<I", 1))
        with pytest.raises(FtsFormatError, match="truncated"):
            read_fts(path)
        path.write_bytes(b"FTEN" + struct.pack("<II", 1, 3) + struct.pack("<I", 2))
        with pytest.raises(FtsFormatError, match="truncated"):
            read_fts(path)

    def test_unknown_version(self, tmp_path):
        path = tmp_path / "v2.fts"
        path.write_bytes(b"FTEN" + struct.pack("<III", 2, 1, 1) + struct.pack("<f", 1.0))
        with pytest.raises(FtsFormatError, match="version"):
            read_fts(path)

    def test_size_mismatch(self, tmp_path):
        path = tmp_path / "a.fts"
        write_fts(path, np.ones((2, 2)))
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(FtsFormatError, match="data bytes"):
            read_fts(path)

    def test_is_a_value_error(self, tmp_path):
        path = tmp_path / "bad.fts"
        path.write_bytes(b"")
        with pytest.raises(ValueError):
            read_fts(path)


class TestPng:
    """Test mask and image PNG conversion."""

    def test_mask_round_trip(self, tmp_path):
        mask = np.zeros((5, 6))
        mask[1:4, 2:5] = 0.8
        save_mask_png(tmp_path / "m.png", mask)
        loaded = load_mask_png(tmp_path / "m.png")
        assert loaded.shape == (5, 6)
        assert np.array_equal(loaded, (mask > 0.5).astype(float))

    def test_image_round_trip(self, tmp_path):
        image = np.random.default_rng(0).integers(0, 256, (4, 5, 3)) / 255.0
        save_image_png(tmp_path / "i.png", image)
        assert np.allclose(load_image_png(tmp_path / "i.png"), image)

    def test_image_is_clipped(self, tmp_path):
        image = np.full((2, 2, 3), 1.7)
        image[0, 0] = -0.5
        save_image_png(tmp_path / "i.png", image)
        loaded = load_image_png(tmp_path / "i.png")
        assert loaded[0, 0].tolist() == [0.0, 0.0, 0.0]
        assert loaded[1, 1].tolist() == [1.0, 1.0, 1.0]


class TestBankFiles:
    """Test bank directories."""

    def test_round_trip(self, small_bank, tmp_path):
        save_bank(small_bank, tmp_path / "bank")
        assert {p.name for p in (tmp_path / "bank").iterdir()} == {"bank.fts", "bank.json", "template.obj"}
        loaded = load_bank(tmp_path / "bank")
        assert loaded.size == small_bank.size and loaded.top_m == small_bank.top_m
        assert np.allclose(loaded.keys, small_bank.keys, atol=1e-6)
        assert np.allclose(loaded.values, small_bank.values, atol=1e-6)
        assert np.allclose(loaded.offsets, small_bank.offsets, atol=1e-6)
        assert np.array_equal(loaded.template.vertices, small_bank.template.vertices)
        assert np.array_equal(loaded.template.faces, small_bank.template.faces)

    def test_manifest(self, small_bank, tmp_path):
        save_bank(small_bank, tmp_path)
        manifest = json.loads((tmp_path / "bank.json").read_text())
        assert manifest == {
            "K": 8,
            "key_dim": 16,
            "value_dim": 8,
            "n_vertices": small_bank.template.n_vertices,
            "top_m": 4,
            "template": "template.obj",
            "dims": {"key": 16, "value": 8, "offset": 3 * small_bank.template.n_vertices},
        }
        assert read_fts(tmp_path / "bank.fts").shape == (8, 16 + 8 + 3 * small_bank.template.n_vertices)

    def test_template_path_from_manifest(self, small_bank, tmp_path):
        save_bank(small_bank, tmp_path)
        (tmp_path / "template.obj").rename(tmp_path / "shape.obj")
        manifest = json.loads((tmp_path / "bank.json").read_text())
        (tmp_path / "bank.json").write_text(json.dumps(dict(manifest, template="shape.obj")))
        loaded = load_bank(tmp_path)
        assert np.array_equal(loaded.template.faces, small_bank.template.faces)
        assert np.allclose(loaded.offsets, small_bank.offsets, atol=1e-6)

    def test_manifest_without_template_entry(self, small_bank, tmp_path):
        save_bank(small_bank, tmp_path)
        manifest = json.loads((tmp_path / "bank.json").read_text())
        del manifest["template"], manifest["dims"]
        (tmp_path / "bank.json").write_text(json.dumps(manifest))
        assert load_bank(tmp_path).size == small_bank.size


class TestTargetFiles:
    """Test target directories."""

    def test_round_trip(self, views, tmp_path):
        save_targets(views, tmp_path)
        loaded = load_targets(tmp_path)
        assert [t.name for t in loaded] == ["view000", "view001"]
        for target, view in zip(loaded, views):
            assert np.array_equal(target.mask, view.mask)
            assert np.max(np.abs(target.image - view.image)) <= 0.5 / 255.0 + 1e-12
            assert np.allclose(target.features, view.features, atol=1e-5)
            assert np.allclose(target.phi, view.phi, atol=1e-6)

    def test_ground_truth(self, views, tmp_path):
        save_targets(views, tmp_path)
        truth = load_ground_truth(tmp_path)
        assert set(truth) == {"view000", "view001"}
        entry = truth["view001"]
        assert entry["azimuth_deg"] == 200.0
        assert np.allclose(entry["pose"]["rotation"], views[1].pose.rotation)
        assert entry["keypoints"] == views[1].keypoints.as_dict()

    def test_plain_targets_have_no_ground_truth(self, views, tmp_path):
        plain = [ViewTarget(v.image, v.mask, v.features, v.phi) for v in views]
        save_targets(plain, tmp_path)
        assert load_ground_truth(tmp_path) == {"view000": {"name": "view000"}, "view001": {"name": "view001"}}


class TestResultFiles:
    """Test losses, skeletons and fit outputs."""

    def test_losses_csv(self, tmp_path):
        history = [LossBreakdown(mask=0.1, total=1.0 / 3.0), LossBreakdown(image=2.5, adv=-1e-9, total=2.5)]
        write_losses_csv(history, tmp_path / "losses.csv")
        header = (tmp_path / "losses.csv").read_text().splitlines()[0]
        assert header == "iteration,mask,image,feature,hyp,adv,art,deform,total"
        assert [h.as_dict() for h in read_losses_csv(tmp_path / "losses.csv")] == [h.as_dict() for h in history]

    def test_skeleton(self, scene, tmp_path):
        save_skeleton(scene.skeleton, tmp_path / "skeleton.json")
        loaded = load_skeleton(tmp_path / "skeleton.json")
        assert np.array_equal(loaded.heads, scene.skeleton.heads)
        assert np.array_equal(loaded.tails, scene.skeleton.tails)
        assert np.array_equal(loaded.parents, scene.skeleton.parents)
        assert loaded.roles == scene.skeleton.roles

    def test_save_result(self, scene, views, tmp_path):
        targets = [ViewTarget(v.image, v.mask, v.features, v.phi, v.name) for v in views]
        bank = make_bank(scene.mesh, np.random.default_rng(0), size=4, value_dim=8, top_m=2)
        config = FitConfig(iterations=2, image_size=16, batch_size=2, discriminator_enabled=False)
        result = fit_instance(targets, bank, config)
        out = save_result(result, config, tmp_path / "fit")
        names = {p.name for p in out.iterdir()}
        assert {"poses.json", "base.obj", "losses.csv", "report.json"} <= names
        assert {"deformed_view000.obj", "deformed_view001.obj"} <= names
        assert len(read_losses_csv(out / "losses.csv")) == 2
        assert load_obj(out / "base.obj").n_vertices == bank.template.n_vertices
        poses = json.loads((out / "poses.json").read_text())
        assert set(poses) == {"view000", "view001"}
        report = json.loads((out / "report.json").read_text())
        assert report["config"]["iterations"] == 2
        assert len(report["bank_weights"]) == 4
        assert [v["name"] for v in report["views"]] == ["view000", "view001"]
        assert ("skeleton.json" in names) == (result.skeleton is not None)
