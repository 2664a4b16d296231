import json

import numpy as np
import pytest

from confdecode.dataio import (ChannelStats, SplitAssignment, SynthConfig, TrialSet, apply_zscore,
                               block_stratified_split, fit_channel_stats, generate_synthetic, read_trialset,
                               write_trialset)
from confdecode.errors import FormatError, InsufficientData, InvalidConfig, InvalidShape


@pytest.fixture(scope="module")
def small_set():
    return generate_synthetic(SynthConfig(n_classes=4, n_channels=3, n_samples=16, blocks_per_class=6,
                                          block_size=4, snr=1.0, seed=11, sample_rate_hz=64.0))


class TestSynthetic:
    def test_desk_geometry(self):
        ts = generate_synthetic(SynthConfig.desk(seed=1))
        assert ts.n_trials == 1300
        assert ts.n_classes == 13
        assert np.bincount(ts.labels).tolist() == [100] * 13
        assert ts.class_names[0] == "rest"

    def test_deterministic_bytes(self):
        cfg = SynthConfig.desk(seed=123)
        a, b = generate_synthetic(cfg), generate_synthetic(cfg)
        assert a.data.tobytes() == b.data.tobytes()
        assert np.array_equal(a.labels, b.labels) and np.array_equal(a.block_ids, b.block_ids)

    def test_seed_changes_data(self):
        a = generate_synthetic(SynthConfig.desk(seed=1))
        b = generate_synthetic(SynthConfig.desk(seed=2))
        assert a.data.tobytes() != b.data.tobytes()

    def test_block_structure(self, small_set):
        ts = small_set
        for b in np.unique(ts.block_ids):
            mask = ts.block_ids == b
            assert mask.sum() == 4
            assert np.unique(ts.labels[mask]).size == 1
            # blocks are contiguous in time
            idx = np.flatnonzero(mask)
            assert np.array_equal(idx, np.arange(idx[0], idx[0] + 4))

    def test_block_order_randomized(self):
        ts = generate_synthetic(SynthConfig.desk(seed=5))
        first_labels = ts.labels[::4][:13]
        assert not np.array_equal(first_labels, np.sort(first_labels))

    def test_template_power_matches_snr(self):
        # subtracting a noise-only realization is not possible, so check the power excess instead:
        # E[x^2] = 1 + snr for template classes, 1 for rest
        cfg = SynthConfig(n_classes=3, n_channels=4, n_samples=256, blocks_per_class=100, block_size=4,
                          snr=0.5, seed=3, sample_rate_hz=128.0)
        ts = generate_synthetic(cfg)
        power = (ts.data.astype(np.float64) ** 2).mean(axis=(1, 2))
        assert power[ts.labels == 0].mean() == pytest.approx(1.0, abs=0.01)
        assert power[ts.labels == 1].mean() == pytest.approx(1.5, abs=0.02)
        assert power[ts.labels == 2].mean() == pytest.approx(1.5, abs=0.02)

    def test_snr_zero_is_pure_noise(self):
        ts = generate_synthetic(SynthConfig(n_classes=3, n_channels=4, n_samples=64, blocks_per_class=50,
                                            snr=0.0, seed=4, sample_rate_hz=64.0))
        power = (ts.data.astype(np.float64) ** 2).mean(axis=(1, 2))
        for k in range(3):
            assert power[ts.labels == k].mean() == pytest.approx(1.0, abs=0.02)

    @pytest.mark.parametrize("field,value", [("n_classes", 1), ("n_channels", 0), ("n_samples", 7), ("snr", -0.1)])
    def test_invalid_config(self, field, value):
        cfg = SynthConfig.desk()
        setattr(cfg, field, value)
        with pytest.raises(InvalidConfig):
            generate_synthetic(cfg)


class TestSplit:
    def test_desk_split_counts(self):
        ts = generate_synthetic(SynthConfig.desk(seed=9))
        split = block_stratified_split(ts, 20, 2, seed=1)
        counts = [split.indices(ts, p).size for p in ("train", "cal", "test")]
        assert counts == [1040, 104, 156]

    def test_exact_per_class_counts(self, small_set):
        split = block_stratified_split(small_set, 3, 2, seed=0)
        bl = small_set.block_labels()
        for part, n in (("train", 3), ("cal", 2), ("test", 1)):
            labels = [bl[b] for b in getattr(split, f"{part}_blocks")]
            assert np.bincount(labels, minlength=4).tolist() == [n] * 4

    def test_empty_test_forbidden(self, small_set):
        with pytest.raises(InsufficientData):
            block_stratified_split(small_set, 4, 2, seed=0)

    def test_deterministic_and_seed_dependent(self, small_set):
        a = block_stratified_split(small_set, 3, 1, seed=42)
        b = block_stratified_split(small_set, 3, 1, seed=42)
        c = block_stratified_split(small_set, 3, 1, seed=43)
        assert a == b
        assert a != c
        assert len(c.train_blocks) == len(a.train_blocks)

    def test_roundtrip_dict(self, small_set):
        a = block_stratified_split(small_set, 3, 1, seed=42)
        assert SplitAssignment.from_dict(json.loads(json.dumps(a.to_dict()))) == a


class TestChannelStats:
    def _set(self, data):
        n = data.shape[0]
        return TrialSet(data, np.zeros(n, int), np.arange(n), ["a"], 100.0, 1)

    def test_constant_channel_floored(self):
        ts = self._set(np.full((4, 1, 10), 5.0, dtype=np.float32))
        stats = fit_channel_stats(ts, {0, 1, 2, 3})
        assert stats.mean[0] == 5.0
        assert stats.std[0] == 1e-8

    def test_law_of_large_numbers(self):
        rng = np.random.default_rng(0)
        ts = self._set(rng.standard_normal((200, 2, 100)).astype(np.float32))
        stats = fit_channel_stats(ts, set(range(200)))
        np.testing.assert_allclose(stats.mean, 0.0, atol=0.05)
        np.testing.assert_allclose(stats.std, 1.0, atol=0.05)

    def test_isolation_from_other_partitions(self, small_set):
        split = block_stratified_split(small_set, 3, 1, seed=0)
        before = fit_channel_stats(small_set, split.train_blocks)
        data = small_set.data.copy()
        other = np.concatenate([split.indices(small_set, "cal"), split.indices(small_set, "test")])
        data[other] = np.random.default_rng(1).normal(50.0, 9.0, size=data[other].shape)
        after = fit_channel_stats(small_set.with_data(data), split.train_blocks)
        assert np.array_equal(before.mean, after.mean) and np.array_equal(before.std, after.std)

    def test_empty_train(self, small_set):
        with pytest.raises(InsufficientData):
            fit_channel_stats(small_set, set())


class TestZScore:
    def test_identity(self, small_set):
        C = small_set.n_channels
        out = apply_zscore(small_set, ChannelStats(np.zeros(C), np.ones(C)))
        assert np.array_equal(out.data, small_set.data)
        assert np.array_equal(out.labels, small_set.labels)

    def test_arithmetic(self):
        ts = TrialSet(np.full((1, 1, 1), 3.0, dtype=np.float32), [0], [0], ["a"], 1.0, 1)
        out = apply_zscore(ts, ChannelStats(np.array([1.0]), np.array([2.0])))
        assert out.data[0, 0, 0] == 1.0

    def test_training_trials_standardized(self, small_set):
        split = block_stratified_split(small_set, 3, 1, seed=0)
        stats = fit_channel_stats(small_set, split.train_blocks)
        out = apply_zscore(small_set, stats)
        train = out.trials(split.indices(out, "train")).astype(np.float64)
        np.testing.assert_allclose(train.mean(axis=(0, 2)), 0.0, atol=1e-6)
        np.testing.assert_allclose(train.std(axis=(0, 2)), 1.0, atol=1e-6)

    def test_shape_mismatch(self, small_set):
        with pytest.raises(InvalidShape):
            apply_zscore(small_set, ChannelStats(np.zeros(2), np.ones(2)))


class TestFileFormat:
    def test_roundtrip_bit_exact(self, small_set, tmp_path):
        write_trialset(small_set, tmp_path)
        back = read_trialset(tmp_path)
        assert back.data.tobytes() == small_set.data.tobytes()
        assert np.array_equal(back.labels, small_set.labels)
        assert np.array_equal(back.block_ids, small_set.block_ids)
        assert back.class_names == small_set.class_names
        assert back.sample_rate_hz == small_set.sample_rate_hz

    def test_data_is_little_endian_row_major(self, small_set, tmp_path):
        write_trialset(small_set, tmp_path)
        raw = (tmp_path / "trials.f32").read_bytes()
        assert len(raw) == small_set.n_trials * small_set.n_channels * small_set.n_samples * 4
        n, c, t = 2, 1, 5
        offset = ((n * small_set.n_channels + c) * small_set.n_samples + t) * 4
        assert np.frombuffer(raw[offset:offset + 4], "<f4")[0] == small_set.data[n, c, t]

    def test_truncated_data(self, small_set, tmp_path):
        write_trialset(small_set, tmp_path)
        path = tmp_path / "trials.f32"
        raw = path.read_bytes()
        path.write_bytes(raw[:-10])
        with pytest.raises(FormatError) as exc:
            read_trialset(tmp_path)
        assert exc.value.offset == len(raw) - 10

    def test_k_disagrees_with_labels(self, small_set, tmp_path):
        write_trialset(small_set, tmp_path)
        m = json.loads((tmp_path / "manifest.json").read_text())
        m["K"] = 7
        m["class_names"] = [f"c{i}" for i in range(7)]
        (tmp_path / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(FormatError, match="disagrees"):
            read_trialset(tmp_path)

    def test_malformed_json_reports_offset(self, small_set, tmp_path):
        write_trialset(small_set, tmp_path)
        (tmp_path / "manifest.json").write_text('{"K": 4, "C": oops}')
        with pytest.raises(FormatError) as exc:
            read_trialset(tmp_path)
        assert exc.value.offset == 14

    def test_shape_mismatch(self, small_set, tmp_path):
        write_trialset(small_set, tmp_path)
        m = json.loads((tmp_path / "manifest.json").read_text())
        m["labels"] = m["labels"][:-1]
        (tmp_path / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(FormatError):
            read_trialset(tmp_path)
