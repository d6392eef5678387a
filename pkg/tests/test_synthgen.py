import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tribolens.dataset import is_symmetric
from tribolens.errors import SchemaError
from tribolens.spectral import eig_sym, retention_size
from tribolens.synthgen import ORIENTATION_CHANNELS, FABRIC_LAYOUT, SynthSpec, gen_blocks, gen_lowrank


def test_noiseless_complete_equals_truth():
    ds, truth = gen_lowrank(SynthSpec(n=15, noise_std=0.0, missing_rate=0.0, seed=1))
    assert ds.mask.all()
    np.testing.assert_array_equal(ds.values, truth.values)


def test_rank_one_without_rescale():
    ds, truth = gen_lowrank(SynthSpec(n=10, rank=1, noise_std=0.0, missing_rate=0.0,
                                      rescale=False, mu_range=(0.0, 2.0), seed=2))
    lam = eig_sym(truth.base).eigenvalues
    assert np.sum(np.abs(lam) > 1e-10) == 1


@pytest.mark.parametrize("rank", [1, 2, 3, 5])
def test_retention_of_noiseless_output(rank):
    ds, truth = gen_lowrank(SynthSpec(n=20, rank=rank, noise_std=0.0, missing_rate=0.0, seed=rank))
    assert retention_size(eig_sym(ds.values[:, :, 0]), 0.999) <= rank + 1
    assert truth.info["rank_bound"] == rank + 1


def test_spec_validation():
    with pytest.raises(SchemaError):
        SynthSpec(n=3, rank=4)
    with pytest.raises(SchemaError):
        SynthSpec(missing_rate=1.0)
    with pytest.raises(SchemaError):
        SynthSpec(mu_range=(0.5, 3.0))
    with pytest.raises(SchemaError):
        SynthSpec(channels=("rolling",))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([("static",), ("static", "kinetic"),
                                                ORIENTATION_CHANNELS]))
def test_truth_symmetric_and_bounded(seed, channels):
    ds, truth = gen_lowrank(SynthSpec(n=12, seed=seed, channels=channels))
    assert truth.values.min() >= 0 and truth.values.max() <= ds.mu_max
    np.testing.assert_array_equal(truth.base, truth.base.T)
    assert is_symmetric(ds)


def test_same_seed_same_bytes():
    a, _ = gen_lowrank(SynthSpec(seed=9, channels=("static", "kinetic")))
    b, _ = gen_lowrank(SynthSpec(seed=9, channels=("static", "kinetic")))
    assert a.values.tobytes() == b.values.tobytes() and a.mask.tobytes() == b.mask.tobytes()


@pytest.mark.parametrize("rate", [0.1, 0.3, 0.6])
def test_observed_fraction_within_binomial_bounds(rate):
    n = 80
    ds, _ = gen_lowrank(SynthSpec(n=n, missing_rate=rate, seed=4))
    iu = np.triu_indices(n)
    trials = len(iu[0])
    observed = ds.mask[:, :, 0][iu].sum()
    p = 1 - rate
    assert abs(observed - p * trials) <= 3 * math.sqrt(trials * p * (1 - p))


def test_kinetic_below_static():
    ds, truth = gen_lowrank(SynthSpec(channels=("static", "kinetic"), kinetic_noise=0.02, seed=3))
    assert (ds.values[:, :, 1] <= ds.values[:, :, 0]).all()
    assert (truth.values[:, :, 1] <= truth.values[:, :, 0]).all()


def test_outliers_shift_some_entries():
    clean, _ = gen_lowrank(SynthSpec(noise_std=0.0, seed=5))
    dirty, _ = gen_lowrank(SynthSpec(noise_std=0.0, outlier_rate=0.1, seed=5))
    moved = np.abs(dirty.values - clean.values)[clean.mask] > 0.2
    assert 0.03 < moved.mean() < 0.2


def test_fabric_layout_mask_pattern():
    ds, _ = gen_blocks(SynthSpec(layout=FABRIC_LAYOUT, missing_rate=0.0, seed=0))
    lib = ds.library
    assert ds.n == 40
    knit, woven, nf = (lib.members(c) for c in ("knit", "woven", "nonfabric"))
    M = ds.mask[:, :, 0]
    assert not M[np.ix_(nf, nf)].any()
    assert not M[np.ix_(knit, woven)].any()
    assert M[np.ix_(knit, knit)].all() and M[np.ix_(woven, woven)].all()
    assert M[np.ix_(nf, knit)].all()
    covered = [w for w in woven if M[nf, w].all()]
    assert len(covered) == 12 and not M[np.ix_(nf, woven[12:])].any()


def test_no_layout_reduces_to_lowrank():
    spec = SynthSpec(n=12, seed=6)
    a, _ = gen_blocks(spec)
    b, _ = gen_lowrank(spec)
    np.testing.assert_array_equal(a.values, b.values)


@pytest.mark.parametrize("rho", [0.5, 0.8, 0.95])
def test_orientation_correlation(rho):
    ds, truth = gen_lowrank(SynthSpec(n=150, channels=ORIENTATION_CHANNELS, orientation_corr=rho,
                                      noise_std=0.0, missing_rate=0.0, seed=7))
    base = truth.base[np.triu_indices(150)]
    for k in range(4):
        ch = truth.values[:, :, k][np.triu_indices(150)]
        assert abs(np.corrcoef(base, ch)[0, 1] - rho) <= 0.1


def test_orientation_channels_transpose_paired():
    ds, _ = gen_lowrank(SynthSpec(n=10, channels=ORIENTATION_CHANNELS, seed=8))
    np.testing.assert_array_equal(ds.values[:, :, 1], ds.values[:, :, 2].T)


def test_orientation_equals_base_on_nonfabric_pairs():
    ds, truth = gen_blocks(SynthSpec(layout={"knit": 4, "nonfabric": 3},
                                     channels=ORIENTATION_CHANNELS, holdout=(), seed=1))
    nf = ds.library.members("nonfabric")
    for k in range(4):
        np.testing.assert_array_equal(truth.values[nf, :, k], np.clip(truth.base[nf, :], 0, 2))
