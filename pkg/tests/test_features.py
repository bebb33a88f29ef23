import struct

import numpy as np
import pytest

from dsta import features as ft
from dsta.features import DatasetSpec, TauRule, VideoSample


def _sample(label=1, T=4, N=2, d=3, tau=2, ident="v0", seed=0):
    rng = np.random.default_rng(seed)
    return VideoSample(ident, label, tau, 10, rng.standard_normal((T, d)), rng.standard_normal((T, N, d)))


class TestFileFormat:
    def test_round_trip_is_bit_exact(self, tmp_path):
        samples = [_sample(), _sample(label=0, tau=None, ident="négatif", seed=1)]
        path = tmp_path / "x.dsta"
        ft.write(samples, path)
        back = ft.read(path)
        assert back == samples
        assert ft.dumps(back) == path.read_bytes()

    def test_negative_tau_normalised(self):
        assert _sample(label=0, tau=7).tau is None

    def test_bad_magic(self):
        buf = bytearray(ft.dumps([_sample()]))
        buf[:4] = b"XXXX"
        with pytest.raises(ft.CorruptHeaderError):
            ft.loads(bytes(buf))

    def test_bad_version(self):
        buf = bytearray(ft.dumps([_sample()]))
        buf[4:6] = struct.pack("<H", 9)
        with pytest.raises(ft.CorruptHeaderError):
            ft.loads(bytes(buf))

    @pytest.mark.parametrize("cut", [3, 12, 20, 60])
    def test_truncation(self, cut):
        buf = ft.dumps([_sample()])
        with pytest.raises(ft.TruncatedFileError):
            ft.loads(buf[: len(buf) - cut] if cut > 20 else buf[:cut])

    def test_dimension_mismatch(self):
        buf = bytearray(ft.dumps([_sample(ident="ab")]))
        # the d field sits after id_len(2) + id(2) + label/tau/fps/T/N (1+4+2+4+2)
        off = 10 + 2 + 2 + 13
        buf[off : off + 4] = struct.pack("<I", 4)
        with pytest.raises(ft.DimensionMismatchError):
            ft.loads(bytes(buf))

    def test_trailing_bytes(self):
        with pytest.raises(ft.DimensionMismatchError):
            ft.loads(ft.dumps([_sample()]) + b"\0")

    def test_splits_round_trip(self, tmp_path):
        ft.write_splits(tmp_path / "s.json", {"train": ["a", "b"], "test": ["c"]})
        assert ft.read_splits(tmp_path / "s.json") == {"test": ["c"], "train": ["a", "b"]}


class TestSampleValidation:
    def test_positive_needs_tau_in_range(self):
        with pytest.raises(ValueError):
            _sample(tau=None)
        with pytest.raises(ValueError):
            _sample(tau=5)

    def test_shapes_must_agree(self):
        with pytest.raises(ValueError):
            VideoSample("v", 0, None, 10, np.zeros((4, 3)), np.zeros((5, 2, 3)))

    def test_non_finite_rejected(self):
        f = np.zeros((2, 2))
        f[0, 0] = np.nan
        with pytest.raises(ValueError):
            VideoSample("v", 0, None, 10, f, np.zeros((2, 1, 2)))


class TestSynthesis:
    def test_counts_and_determinism(self):
        spec = DatasetSpec(train_pos=3, train_neg=4, test_pos=2, test_neg=1, T=10, fps=5, N=3, d=4,
                           tau_rule=TauRule("fixed", frame=8), seed=5)
        a, b = ft.synthesize(spec), ft.synthesize(spec)
        assert [len(a["train"]), len(a["test"])] == [7, 3]
        assert a["train"] == b["train"] and a["test"] == b["test"]
        assert sum(s.label for s in a["train"]) == 3
        assert all(s.tau == 8 for s in a["train"] if s.label)

    def test_signal_only_in_positives_near_tau(self):
        spec = DatasetSpec(train_pos=50, train_neg=50, test_pos=0, test_neg=0, T=20, fps=5, N=4, d=16,
                           tau_rule=TauRule("fixed", frame=18), signal=3.0, ramp_seconds=1.0)
        data = ft.synthesize(spec)["train"]
        pos = np.mean([s.frame_feats for s in data if s.label], axis=0)
        neg = np.mean([s.frame_feats for s in data if not s.label], axis=0)
        gap = np.linalg.norm(pos - neg, axis=1)
        assert gap[:10].max() < 1.5 < gap[17]

    def test_uniform_tau_rule(self):
        spec = DatasetSpec.ccd_like(train_pos=40, train_neg=0, test_pos=0, test_neg=0, d=4, N=2)
        taus = {s.tau for s in ft.synthesize(spec)["train"]}
        assert min(taus) >= 31 and max(taus) == 50 and len(taus) > 5

    def test_spec_dict_round_trip(self):
        spec = DatasetSpec.ccd_like(seed=3)
        assert DatasetSpec.from_dict(spec.to_dict()) == spec
        with pytest.raises(ValueError):
            DatasetSpec.from_dict({"bogus": 1})

    def test_ramp(self):
        r = ft.signal_ramp(10, 8, 2, 1.0, 2.0)
        assert r[7] == 1.0 and r[3] == 0.0 and np.all(np.diff(r) >= 0)

    def test_tau_rule_validation(self):
        with pytest.raises(ValueError):
            TauRule("fixed").bounds(10, 5)
        with pytest.raises(ValueError):
            TauRule("fixed", frame=11).bounds(10, 5)
        with pytest.raises(ValueError):
            TauRule("weird").bounds(10, 5)

    def test_stack_batch(self):
        frames, objects, labels, taus, fps = ft.stack_batch([_sample(), _sample(label=0, tau=None)])
        assert frames.dtype == np.float64 and objects.shape == (2, 4, 2, 3)
        np.testing.assert_array_equal(taus, [2, 0])
        with pytest.raises(ValueError):
            ft.stack_batch([_sample(), _sample(T=5)])
