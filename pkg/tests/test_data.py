import numpy as np
import pytest

from dvae.data import (DataFormatError, Dataset, SyntheticConfig, generate_synthetic,
                       load_dataset, mixing_matrix, save_dataset, split, validate_correlation)
from dvae.metrics import fit_importance


def test_identity_correlation_sample_statistics():
    n = 10_000
    ds = generate_synthetic(SyntheticConfig(n_speakers=n, utterances_per_speaker=1,
                                            n_factors=4, x_dim=4, seed=0))
    r = np.corrcoef(ds.F, rowvar=False)
    off = r[~np.eye(4, dtype=bool)]
    assert np.all(np.abs(off) < 3 / np.sqrt(n))


def test_planted_correlation_reproduced():
    n = 10_000
    c = np.array([[1.0, 0.6, 0.0], [0.6, 1.0, -0.3], [0.0, -0.3, 1.0]])
    ds = generate_synthetic(SyntheticConfig(n_speakers=n, utterances_per_speaker=1,
                                            n_factors=3, x_dim=3, factor_correlation=c,
                                            seed=1))
    assert np.all(np.abs(np.corrcoef(ds.F, rowvar=False) - c) < 3 / np.sqrt(n))


def test_noiseless_linear_data_in_mixing_span():
    cfg = SyntheticConfig(n_speakers=30, utterances_per_speaker=3, n_factors=5, x_dim=12,
                          session_noise_std=0.0, seed=4)
    ds = generate_synthetic(cfg)
    a = mixing_matrix(12, 5, 4)
    coef, *_ = np.linalg.lstsq(a, ds.X.T, rcond=None)
    assert np.max(np.abs(a @ coef - ds.X.T)) < 1e-10


def test_generation_is_deterministic():
    cfg = SyntheticConfig(n_speakers=5, utterances_per_speaker=4, seed=9)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    assert a.X.tobytes() == b.X.tobytes() and a.F.tobytes() == b.F.tobytes()
    assert list(a.ids) == list(b.ids)


def test_speaker_streams_independent_of_speaker_count():
    small = generate_synthetic(SyntheticConfig(n_speakers=3, utterances_per_speaker=4, seed=2))
    big = generate_synthetic(SyntheticConfig(n_speakers=6, utterances_per_speaker=4, seed=2))
    np.testing.assert_array_equal(small.X, big.X[:12])


def test_tanh_mixing_bounded():
    ds = generate_synthetic(SyntheticConfig(n_speakers=10, utterances_per_speaker=2,
                                            mixing="tanh", session_noise_std=0.0))
    assert np.all(np.abs(ds.X) < 1)


@pytest.mark.parametrize("matrix,message", [
    ([[1.0, 0.5], [0.4, 1.0]], "symmetric"),
    ([[2.0, 0.0], [0.0, 1.0]], "unit diagonal"),
    ([[1.0, 2.0], [2.0, 1.0]], "positive definite"),
])
def test_invalid_correlation_names_property(matrix, message):
    with pytest.raises(ValueError, match=message):
        validate_correlation(np.array(matrix), 2)


def test_round_trip_bit_identical(tmp_path):
    ds = generate_synthetic(SyntheticConfig(n_speakers=4, utterances_per_speaker=3,
                                            n_factors=2, x_dim=5, seed=3))
    path = tmp_path / "d.csv"
    save_dataset(path, ds)
    back = load_dataset(path)
    assert back.X.tobytes() == ds.X.tobytes()
    assert back.F.tobytes() == ds.F.tobytes()
    assert list(back.labels) == list(ds.labels) and list(back.ids) == list(ds.ids)
    assert back.factor_names == ds.factor_names


def test_missing_factor_columns(tmp_path):
    ds = Dataset(np.random.default_rng(0).standard_normal((120, 3)),
                 labels=np.repeat(["a", "b"], 60))
    path = tmp_path / "d.csv"
    save_dataset(path, ds)
    back = load_dataset(path)
    assert back.F is None and back.n_factors == 0
    with pytest.raises(ValueError, match="factor"):
        back.require_factors()
    with pytest.raises(ValueError):
        fit_importance(back.X, back.F)


def test_malformed_row_cites_line(tmp_path):
    ds = generate_synthetic(SyntheticConfig(n_speakers=5, utterances_per_speaker=5,
                                            n_factors=2, x_dim=3))
    path = tmp_path / "d.csv"
    save_dataset(path, ds)
    lines = path.read_text().splitlines()
    lines[16] = lines[16].rsplit(",", 1)[0] + ",oops"  # line 17 of the file
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataFormatError) as info:
        load_dataset(path)
    assert info.value.line == 17 and "line 17" in str(info.value)


def test_short_row_and_duplicate_id(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("id,x_1,x_2\na,1,2\nb,3\n")
    with pytest.raises(DataFormatError, match="line 3"):
        load_dataset(path)
    path.write_text("id,x_1\na,1\na,2\n")
    with pytest.raises(DataFormatError, match="duplicate"):
        load_dataset(path)


def test_split_sizes_partition_and_determinism():
    ds = Dataset(np.arange(200.0).reshape(100, 2))
    tr, te = split(ds, 0.8, seed=1)
    assert (len(tr), len(te)) == (80, 20)
    assert set(tr.ids) | set(te.ids) == set(ds.ids)
    assert not set(tr.ids) & set(te.ids)
    tr2, _ = split(ds, 0.8, seed=1)
    assert list(tr.ids) == list(tr2.ids)


def test_speaker_disjoint_split():
    ds = generate_synthetic(SyntheticConfig(n_speakers=10, utterances_per_speaker=3,
                                            n_factors=2, x_dim=3))
    tr, te = split(ds, 0.8, seed=0, speaker_disjoint=True)
    assert not set(tr.labels) & set(te.labels)
    assert len(set(tr.labels)) == 8


def test_factor_covariance_converges():
    c = np.array([[1.0, 0.5, 0.2], [0.5, 1.0, 0.1], [0.2, 0.1, 1.0]])
    ds = generate_synthetic(SyntheticConfig(n_speakers=50_000, utterances_per_speaker=1,
                                            n_factors=3, x_dim=3, factor_correlation=c,
                                            seed=6))
    cov = np.cov(ds.F, rowvar=False)
    assert np.linalg.norm(cov - c) / np.linalg.norm(c) < 0.05
