import numpy as np
import pytest
import torch

from lift3d.dataio import (
    Checkpoint,
    DataFormatError,
    ReferenceBundle,
    load_checkpoint,
    load_png,
    load_reference,
    read_depth,
    read_depth_raster,
    read_report,
    save_checkpoint,
    save_png,
    save_rgba_png,
    write_depth_raster,
    write_report,
)
from lift3d.scenes import synth_scene


class TestDepthRaster:
    def test_round_trip_lossless(self, tmp_path):
        g = torch.Generator().manual_seed(0)
        depth = torch.rand(17, 23, generator=g).numpy()
        path = tmp_path / "d.dpt"
        write_depth_raster(path, depth)
        back = read_depth_raster(path)
        assert back.dtype == np.float32
        np.testing.assert_array_equal(back, depth)

    def test_bad_magic_faults(self, tmp_path):
        path = tmp_path / "bad.dpt"
        path.write_bytes(b"JUNK" + b"\0" * 32)
        with pytest.raises(DataFormatError, match="bad.dpt"):
            read_depth_raster(path)

    def test_truncated_payload_faults(self, tmp_path):
        path = tmp_path / "short.dpt"
        write_depth_raster(path, np.zeros((4, 4), dtype=np.float32))
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(DataFormatError, match="short.dpt"):
            read_depth_raster(path)

    def test_png16_accepted(self, tmp_path):
        from PIL import Image

        arr = (np.arange(64, dtype=np.uint16).reshape(8, 8) * 1000)
        path = tmp_path / "d.png"
        Image.fromarray(arr).save(path)
        depth = read_depth(path)
        # Linear map, larger stays farther.
        np.testing.assert_allclose(depth, arr.astype(np.float32) / 65535.0)


class TestReferenceLoading:
    def _write_bundle(self, tmp_path, mask_all=False):
        scene = synth_scene("sphere", texture_seed=3)
        mask = torch.ones_like(scene.mask) if mask_all else scene.mask
        save_rgba_png(tmp_path / "ref.png", scene.rgb, mask)
        write_depth_raster(tmp_path / "ref.dpt", scene.depth.numpy())
        return scene

    def test_round_trip_from_synth_scene(self, tmp_path):
        scene = self._write_bundle(tmp_path)
        bundle = load_reference(tmp_path / "ref.png", tmp_path / "ref.dpt", "a red sphere")
        assert torch.equal(bundle.mask, scene.mask)
        np.testing.assert_array_equal(bundle.pseudo_depth.numpy(), scene.depth.numpy())
        # 8-bit quantization bounds the RGB error.
        assert (bundle.rgb - scene.rgb).abs().max().item() <= 0.5 / 255 + 1e-6
        assert bundle.prompt == "a red sphere"

    def test_fully_opaque_alpha_covers_image(self, tmp_path):
        self._write_bundle(tmp_path, mask_all=True)
        bundle = load_reference(tmp_path / "ref.png", tmp_path / "ref.dpt", "x")
        assert bundle.mask.all()

    def test_mismatched_depth_dims_fault(self, tmp_path):
        self._write_bundle(tmp_path)
        write_depth_raster(tmp_path / "bad.dpt", np.zeros((4, 4), dtype=np.float32))
        with pytest.raises(DataFormatError, match="bad.dpt"):
            load_reference(tmp_path / "ref.png", tmp_path / "bad.dpt", "x")

    def test_nonfinite_masked_depth_faults(self, tmp_path):
        scene = self._write_bundle(tmp_path)
        depth = scene.depth.numpy().copy()
        depth[scene.mask.numpy()] = np.nan
        write_depth_raster(tmp_path / "nan.dpt", depth)
        with pytest.raises(DataFormatError):
            load_reference(tmp_path / "ref.png", tmp_path / "nan.dpt", "x")

    def test_missing_file_faults_with_path(self, tmp_path):
        with pytest.raises((DataFormatError, FileNotFoundError)):
            load_reference(tmp_path / "absent.png", tmp_path / "absent.dpt", "x")

    def test_bundle_validation(self):
        with pytest.raises(DataFormatError):
            ReferenceBundle(rgb=torch.zeros(4, 4, 3), mask=torch.zeros(5, 5, dtype=torch.bool),
                            pseudo_depth=torch.zeros(4, 4), prompt="x")


class TestPngRoundTrip:
    def test_quantized_round_trip(self, tmp_path):
        img = torch.rand(9, 7, 3, generator=torch.Generator().manual_seed(1))
        save_png(tmp_path / "img.png", img)
        back = load_png(tmp_path / "img.png")
        assert back.shape == (9, 7, 3)
        assert (back - img).abs().max().item() <= 0.5 / 255 + 1e-6


class TestCheckpoint:
    def _checkpoint(self):
        g = torch.Generator().manual_seed(2)
        return Checkpoint(
            step=123,
            field_state={"w": torch.rand(4, 4, generator=g).numpy()},
            background_state={"b": torch.rand(3, generator=g).numpy()},
            embeddings={"z": torch.rand(8, generator=g).numpy()},
            config={"seed": 1, "train": {"total_steps": 10}},
            prior_path="prior.pkl",
        )

    def test_save_load_save_bit_identical(self, tmp_path):
        ckpt = self._checkpoint()
        p1, p2 = tmp_path / "a.pkl", tmp_path / "b.pkl"
        save_checkpoint(p1, ckpt)
        loaded = load_checkpoint(p1)
        save_checkpoint(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()

    def test_fields_preserved(self, tmp_path):
        ckpt = self._checkpoint()
        save_checkpoint(tmp_path / "c.pkl", ckpt)
        loaded = load_checkpoint(tmp_path / "c.pkl")
        assert loaded.step == 123
        assert loaded.prior_path == "prior.pkl"
        np.testing.assert_array_equal(loaded.field_state["w"], ckpt.field_state["w"])

    def test_wrong_version_faults(self, tmp_path):
        import pickle

        with open(tmp_path / "v.pkl", "wb") as f:
            pickle.dump({"version": 999}, f)
        with pytest.raises(DataFormatError):
            load_checkpoint(tmp_path / "v.pkl")


class TestReport:
    def test_byte_identical_round_trip(self, tmp_path):
        report = {"frames": [{"name": "frame_0000.png", "clip_distance": 0.25},
                             {"name": "frame_0001.png", "clip_distance": 0.4498}],
                  "mean_clip_distance": 0.3499}
        p1, p2 = tmp_path / "r1.json", tmp_path / "r2.json"
        write_report(p1, report)
        write_report(p2, read_report(p1))
        assert p1.read_bytes() == p2.read_bytes()
        assert read_report(p1) == report
