import json

import numpy as np
import pytest

from pgmatch.data import (
    dataset_fingerprint,
    export_dataset,
    generate_dataset,
    load_dataset,
    read_matrix,
    write_matrix,
)


class TestGenerate:
    def test_zero_noise_regions_equal_prototype(self):
        ds = generate_dataset(classes=4, regions=5, tokens=3, dim=6, noise_scale=0.0, seed=1)
        for inst in ds.split("train"):
            assert np.all(inst.regions == inst.regions[0])

    def test_same_seed_identical(self):
        a = generate_dataset(classes=4, regions=3, tokens=4, dim=5, seed=9)
        b = generate_dataset(classes=4, regions=3, tokens=4, dim=5, seed=9)
        for split in ("train", "val", "test"):
            for x, y in zip(a.split(split), b.split(split)):
                assert np.array_equal(x.regions, y.regions)
                assert np.array_equal(x.tokens, y.tokens)
                assert x.class_id == y.class_id

    def test_nearest_prototype_separability(self):
        ds = generate_dataset(classes=32, regions=8, tokens=6, dim=64,
                              noise_scale=0.1, seed=3)
        prototypes = np.stack([inst.regions.mean(axis=0) for inst in ds.split("train")])
        correct = 0
        total = 0
        for split in ("val", "test"):
            for inst in ds.split(split):
                probe = inst.regions.mean(axis=0)
                nearest = int(np.linalg.norm(prototypes - probe, axis=1).argmin())
                correct += int(ds.split("train")[nearest].class_id == inst.class_id)
                total += 1
        assert correct / total >= 0.99

    def test_tokens_start_with_class_token(self):
        ds = generate_dataset(classes=5, regions=2, tokens=4, dim=3, seed=2)
        for split in ("train", "val", "test"):
            for inst in ds.split(split):
                assert inst.tokens[0] == inst.class_id
                assert np.all(inst.tokens < ds.vocab_size)

    def test_degenerate_sizes_rejected(self):
        with pytest.raises(ValueError, match="classes"):
            generate_dataset(classes=1)
        with pytest.raises(ValueError):
            generate_dataset(classes=4, regions=0)
        with pytest.raises(ValueError):
            generate_dataset(classes=4, noise_scale=-0.5)

    def test_split_sizes(self):
        ds = generate_dataset(classes=4, train_per_class=3, val_per_class=2, test_per_class=1,
                              regions=2, tokens=3, dim=4, seed=0)
        assert len(ds.split("train")) == 12
        assert len(ds.split("val")) == 8
        assert len(ds.split("test")) == 4
        with pytest.raises(KeyError):
            ds.split("dev")


class TestBinaryFormat:
    def test_header_layout(self, tmp_path):
        path = tmp_path / "m.bin"
        arr = np.arange(6, dtype=np.float64).reshape(2, 3)
        write_matrix(path, arr)
        raw = path.read_bytes()
        assert len(raw) == 8 + 6 * 8
        rows, cols = np.frombuffer(raw[:8], dtype="<u4")
        assert (rows, cols) == (2, 3)
        np.testing.assert_array_equal(np.frombuffer(raw[8:], dtype="<f8").reshape(2, 3), arr)

    def test_roundtrip(self, tmp_path):
        path = tmp_path / "m.bin"
        rng = np.random.default_rng(0)
        arr = rng.standard_normal((7, 4))
        write_matrix(path, arr)
        np.testing.assert_array_equal(read_matrix(path), arr)

    def test_truncation_detected(self, tmp_path):
        path = tmp_path / "m.bin"
        write_matrix(path, np.ones((2, 2)))
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ValueError, match="expected"):
            read_matrix(path)


class TestExportImport:
    def test_roundtrip_exact(self, tmp_path):
        ds = generate_dataset(classes=3, regions=2, tokens=4, dim=5, seed=11)
        out = tmp_path / "ds"
        export_dataset(ds, out)
        loaded = load_dataset(out)
        assert loaded.classes == ds.classes
        assert loaded.vocab_size == ds.vocab_size
        for split in ("train", "val", "test"):
            for a, b in zip(ds.split(split), loaded.split(split)):
                np.testing.assert_array_equal(a.regions, b.regions)
                np.testing.assert_array_equal(a.tokens, b.tokens)
                assert a.class_id == b.class_id

    def test_same_seed_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            export_dataset(generate_dataset(classes=3, regions=2, tokens=3, dim=4, seed=5),
                           tmp_path / name)
        for fname in sorted((tmp_path / "a").iterdir()):
            assert fname.read_bytes() == (tmp_path / "b" / fname.name).read_bytes()

    def test_refuses_nonempty_without_force(self, tmp_path):
        out = tmp_path / "ds"
        out.mkdir()
        (out / "junk.txt").write_text("x")
        ds = generate_dataset(classes=2, regions=2, tokens=2, dim=3, seed=0)
        with pytest.raises(FileExistsError, match="force"):
            export_dataset(ds, out)
        export_dataset(ds, out, force=True)
        assert (out / "manifest.json").exists()

    def test_manifest_contents(self, tmp_path):
        ds = generate_dataset(classes=3, regions=2, tokens=3, dim=4, seed=21)
        export_dataset(ds, tmp_path / "ds")
        manifest = json.loads((tmp_path / "ds" / "manifest.json").read_text())
        assert manifest["seed"] == 21
        assert manifest["classes"] == 3
        assert manifest["splits"]["train"]["count"] == 3

    def test_fingerprint_tracks_content(self, tmp_path):
        export_dataset(generate_dataset(classes=2, regions=2, tokens=2, dim=3, seed=0),
                       tmp_path / "a")
        export_dataset(generate_dataset(classes=2, regions=2, tokens=2, dim=3, seed=0),
                       tmp_path / "b")
        export_dataset(generate_dataset(classes=2, regions=2, tokens=2, dim=3, seed=1),
                       tmp_path / "c")
        assert dataset_fingerprint(tmp_path / "a") == dataset_fingerprint(tmp_path / "b")
        assert dataset_fingerprint(tmp_path / "a") != dataset_fingerprint(tmp_path / "c")
