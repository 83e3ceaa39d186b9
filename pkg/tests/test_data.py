import numpy as np
import pytest

from refedit.data import generate_synthetic, load_dataset, make_batch, sample_translate_offset


class TestGeneration:
    @pytest.mark.parametrize("task", ["copy-patch", "recolor", "translate"])
    def test_construction_contract(self, task):
        samples = generate_synthetic(task, 4, 32, seed=0)
        assert len(samples) == 4
        for s in samples:
            assert s.ref.shape == (3, 32, 32) and s.tar.shape == (3, 32, 32)
            assert s.mask.shape == (1, 32, 32) and s.gt.shape == (3, 32, 32)
            assert np.all((s.mask == 0) | (s.mask == 1)) and s.mask.sum() > 0
            for img in (s.ref, s.tar, s.gt):
                assert img.min() >= 0.0 and img.max() <= 1.0
            # ground truth differs from the target only inside the mask
            off = s.mask == 0
            assert np.array_equal(s.gt * off, s.tar * off)
            assert np.abs(s.gt - s.tar).max() > 0

    def test_same_seed_bit_identical_datasets(self, tmp_path):
        generate_synthetic("copy-patch", 3, 16, seed=5, out_dir=tmp_path / "a")
        generate_synthetic("copy-patch", 3, 16, seed=5, out_dir=tmp_path / "b")
        for name in sorted(p.name for p in (tmp_path / "a").iterdir()):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_translate_offsets_cover_quarter_width(self):
        rng = np.random.default_rng(0)
        size = 32
        offsets = np.array([sample_translate_offset(rng, size) for _ in range(1000)])
        lim = size // 4
        assert offsets.min() == -lim and offsets.max() == lim
        # both tails are populated, not just touched once
        assert (offsets <= -lim + 1).sum() > 20 and (offsets >= lim - 1).sum() > 20

    def test_invalid_size_rejected(self):
        with pytest.raises(ValueError):
            generate_synthetic("copy-patch", 1, 13, seed=0)
        with pytest.raises(ValueError):
            generate_synthetic("nope", 1, 16, seed=0)


class TestRoundTrip:
    def test_disk_round_trip(self, tmp_path):
        samples = generate_synthetic("recolor", 3, 16, seed=2, out_dir=tmp_path)
        loaded = load_dataset(tmp_path)
        assert len(loaded) == 3
        for mem, disk in zip(samples, loaded):
            assert np.array_equal(mem.ref, disk.ref)
            assert np.array_equal(mem.gt, disk.gt)

    def test_make_batch_validates(self):
        samples = generate_synthetic("copy-patch", 4, 16, seed=1)
        inputs, gt = make_batch(samples, [0, 2])
        assert inputs.ref_image.shape == (2, 3, 16, 16)
        assert gt.shape == (2, 3, 16, 16)

    def test_missing_dataset(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path)
