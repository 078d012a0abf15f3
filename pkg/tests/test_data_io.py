import numpy as np
import pytest

from ftfd import data_io


class TestTensorContainer:
    def test_roundtrip_f64(self, tmp_path, rng):
        arr = rng.standard_normal((3, 4))
        p = tmp_path / "t.ftfd"
        data_io.write_tensor(p, arr)
        back = data_io.read_tensor(p)
        assert back.dtype == np.float64
        assert np.array_equal(back, arr)
        assert back.tobytes() == arr.tobytes()

    def test_roundtrip_f32(self, tmp_path, rng):
        arr = rng.standard_normal((2, 5, 5)).astype(np.float32)
        p = tmp_path / "t.ftfd"
        data_io.write_tensor(p, arr)
        back = data_io.read_tensor(p)
        assert back.dtype == np.float32
        assert np.array_equal(back, arr)

    def test_rank_zero_scalar(self, tmp_path):
        p = tmp_path / "s.ftfd"
        data_io.write_tensor(p, np.float64(6.25))
        back = data_io.read_tensor(p)
        assert back.shape == ()
        assert back == 6.25

    def test_write_rejects_int_dtype(self, tmp_path):
        with pytest.raises(data_io.ContainerError, match="dtype"):
            data_io.write_tensor(tmp_path / "x.ftfd", np.arange(4))

    def test_corrupt_magic_detected(self, tmp_path, rng):
        p = tmp_path / "t.ftfd"
        data_io.write_tensor(p, rng.standard_normal(4))
        raw = bytearray(p.read_bytes())
        raw[0] ^= 0xFF
        p.write_bytes(bytes(raw))
        with pytest.raises(data_io.ContainerError, match="magic"):
            data_io.read_tensor(p)

    def test_header_byte_corruption_detected(self, tmp_path, rng):
        arr = rng.standard_normal((2, 3))
        good = data_io.tensor_to_bytes(arr)
        # every header/dims byte flip must raise, never return wrong data silently
        for pos in range(7 + 4 * arr.ndim):
            raw = bytearray(good)
            raw[pos] ^= 0xFF
            try:
                back = data_io.tensor_from_bytes(bytes(raw))
            except data_io.ContainerError:
                continue
            raise AssertionError(f"corruption at byte {pos} went undetected: {back.shape}")

    def test_truncated_payload_detected(self, tmp_path, rng):
        p = tmp_path / "t.ftfd"
        data_io.write_tensor(p, rng.standard_normal(8))
        raw = p.read_bytes()
        p.write_bytes(raw[:-3])
        with pytest.raises(data_io.ContainerError, match="payload|truncated"):
            data_io.read_tensor(p)


class TestManifest:
    def _write(self, tmp_path, lines):
        for i in range(len(lines)):
            (tmp_path / f"c{i}").mkdir(exist_ok=True)
            (tmp_path / f"a{i}.wav").write_bytes(b"")
        p = tmp_path / "manifest.tsv"
        p.write_text("\n".join(lines) + "\n")
        return p

    def test_valid_manifest_partitions_by_split(self, tmp_path):
        splits = ["train"] * 6 + ["val"] * 2 + ["test"] * 2
        lines = [f"clip{i}\tc{i}\ta{i}.wav\t{i % 2}\t{splits[i]}" for i in range(10)]
        p = self._write(tmp_path, lines)
        by_split = data_io.load_manifest(p)
        assert len(by_split["train"]) == 6
        assert len(by_split["val"]) == 2
        assert len(by_split["test"]) == 2

    def test_bad_label_names_line(self, tmp_path):
        lines = ["clip0\tc0\ta0.wav\t0\ttrain", "clip1\tc1\ta1.wav\t2\ttrain"]
        p = self._write(tmp_path, lines)
        with pytest.raises(data_io.ManifestError, match=":2:"):
            data_io.load_manifest(p)

    def test_duplicate_clip_id_rejected(self, tmp_path):
        lines = ["clip0\tc0\ta0.wav\t0\ttrain", "clip0\tc1\ta1.wav\t1\ttrain"]
        p = self._write(tmp_path, lines)
        with pytest.raises(data_io.ManifestError, match="duplicate"):
            data_io.load_manifest(p)

    def test_missing_file_reported_at_load(self, tmp_path):
        p = tmp_path / "manifest.tsv"
        p.write_text("clip0\tnowhere\tmissing.wav\t0\ttrain\n")
        with pytest.raises(data_io.ManifestError, match="missing"):
            data_io.load_manifest(p)

    def test_shuffled_manifest_loads_same_set(self, tmp_path, rng):
        lines = [f"clip{i}\tc{i}\ta{i}.wav\t{i % 2}\ttrain" for i in range(8)]
        p = self._write(tmp_path, lines)
        ordered = data_io.load_manifest(p)
        shuffled = lines[:]
        rng.shuffle(shuffled)
        p.write_text("\n".join(shuffled) + "\n")
        reloaded = data_io.load_manifest(p)
        assert set(r.clip_id for r in ordered["train"]) == \
            set(r.clip_id for r in reloaded["train"])

    def test_write_then_load_roundtrip(self, tmp_path):
        lines = [f"clip{i}\tc{i}\ta{i}.wav\t{i % 2}\ttrain" for i in range(4)]
        p = self._write(tmp_path, lines)
        recs = data_io.load_manifest(p)["train"]
        out = tmp_path / "copy.tsv"
        data_io.write_manifest(out, recs)
        assert data_io.load_manifest(out)["train"] == recs


class TestWav:
    def test_roundtrip(self, tmp_path, rng):
        samples = rng.uniform(-0.9, 0.9, 1600)
        p = tmp_path / "a.wav"
        data_io.write_wav(p, samples, 16000)
        back, rate = data_io.read_wav(p)
        assert rate == 16000
        assert back.shape == samples.shape
        assert np.max(np.abs(back - samples)) < 1.0 / 32767


class TestClipFrames:
    def test_roundtrip(self, tmp_path, rng):
        frames = rng.uniform(0, 255, (5, 1, 8, 8)).astype(np.float32)
        data_io.write_clip_frames(tmp_path / "clip", frames)
        back = data_io.read_clip_frames(tmp_path / "clip")
        assert np.array_equal(back, frames)


class TestCheckpoint:
    def test_save_load_save_byte_identical(self, tmp_path, rng):
        weights = {
            "enc.block1.conv.weight": rng.standard_normal((4, 2, 3, 3)).astype(np.float32),
            "cls.weight": rng.standard_normal((1, 8)),
        }
        digest = data_io.config_digest({"t": 4})
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        data_io.save_checkpoint(p1, weights, digest, step=17)
        loaded, step, dig = data_io.load_checkpoint(p1, digest)
        assert step == 17 and dig == digest
        for name, arr in weights.items():
            assert np.array_equal(loaded[name], arr)
            assert loaded[name].dtype == arr.dtype
        data_io.save_checkpoint(p2, loaded, dig, step=step)
        assert p1.read_bytes() == p2.read_bytes()

    def test_digest_mismatch_rejected(self, tmp_path, rng):
        weights = {"w": rng.standard_normal(3)}
        data_io.save_checkpoint(tmp_path / "a.ckpt", weights,
                                data_io.config_digest({"t": 4}), 0)
        with pytest.raises(data_io.CheckpointError, match="digest"):
            data_io.load_checkpoint(tmp_path / "a.ckpt",
                                    data_io.config_digest({"t": 5}))

    def test_garbage_file_rejected(self, tmp_path):
        p = tmp_path / "junk.ckpt"
        p.write_bytes(b"not a checkpoint")
        with pytest.raises(data_io.CheckpointError):
            data_io.load_checkpoint(p)
