import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quadgate.data import Modality
from quadgate.errors import ConfigurationError, ContractError, DimensionError, NumericalError
from quadgate.transmix import (
    EligibilityRule,
    apply_cutmix,
    compute_lambda,
    conditional_transmix,
    downsample_mask,
    mixed_score,
    sample_cut_mask,
    score_histogram,
)

# --- masks -------------------------------------------------------------------


def test_mask_is_reproducible():
    a = sample_cut_mask(32, 40, np.random.default_rng(3))
    b = sample_cut_mask(32, 40, np.random.default_rng(3))
    assert np.array_equal(a.mask, b.mask) and (a.top, a.left) == (b.top, b.left)


@settings(max_examples=300, deadline=None)
@given(st.integers(8, 80), st.integers(8, 80), st.integers(0, 2 ** 32 - 1))
def test_mask_is_one_rectangle_in_area_range(h, w, seed):
    cut = sample_cut_mask(h, w, np.random.default_rng(seed))
    m = cut.mask
    assert 0.05 <= m.mean() <= 0.5
    assert m.sum() == cut.height * cut.width
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    assert np.all(m[rows.min():rows.max() + 1, cols.min():cols.max() + 1] == 1)
    assert (rows.max() - rows.min() + 1) * (cols.max() - cols.min() + 1) == m.sum()


def test_mask_degenerate_dims():
    with pytest.raises(ConfigurationError):
        sample_cut_mask(7, 32, np.random.default_rng())


# --- cutmix ------------------------------------------------------------------


def images(seed=0, shape=(1, 8, 8)):
    rng = np.random.default_rng(seed)
    return rng.random(shape), rng.random(shape)


def test_cutmix_zero_and_one_masks():
    a, b = images()
    assert np.array_equal(apply_cutmix(a, b, np.zeros((8, 8))), a)
    assert np.array_equal(apply_cutmix(a, b, np.ones((8, 8))), b)


def test_cutmix_swap_symmetry():
    a, b = images(1)
    m = sample_cut_mask(8, 8, np.random.default_rng(2)).mask
    assert np.array_equal(apply_cutmix(a, b, m), apply_cutmix(b, a, 1 - m))


def test_cutmix_shape_mismatch():
    a, _ = images()
    with pytest.raises(DimensionError):
        apply_cutmix(a, np.zeros((1, 8, 9)), np.zeros((8, 8)))


# --- lambda ----------------------------------------------------------------


def test_lambda_endpoints():
    att = np.random.default_rng(0).dirichlet(np.ones(4))
    assert compute_lambda(att, np.zeros((8, 8)), (2, 2)) == 0.0
    assert compute_lambda(att, np.ones((8, 8)), (2, 2)) == pytest.approx(1.0, abs=1e-15)


def test_lambda_one_cell_of_four():
    m = np.zeros((8, 8))
    m[:4, 4:] = 1
    assert compute_lambda(np.full(4, 0.25), m, (2, 2)) == 0.25


def test_lambda_size_mismatch():
    with pytest.raises(DimensionError):
        compute_lambda(np.full(5, 0.2), np.zeros((8, 8)), (2, 2))


def test_downsample_takes_cell_centre_pixel():
    m = np.zeros((8, 8))
    m[2, 6] = 1  # centre of cell (0, 1) on a 2x2 grid is pixel (2, 6)
    m[0, 0] = 1  # a corner pixel is not a centre
    assert downsample_mask(m, (2, 2)).tolist() == [[0, 1], [0, 0]]


def test_downsample_oracle_loop():
    m = (np.random.default_rng(4).random((12, 20)) > 0.5).astype(float)
    grid = (3, 4)
    ref = np.array([[m[int((i + 0.5) * 12 / 3), int((j + 0.5) * 20 / 4)] for j in range(4)] for i in range(3)])
    assert np.array_equal(downsample_mask(m, grid), ref)


# --- mixed score -----------------------------------------------------------


def test_mixed_score_endpoints_and_example():
    assert mixed_score(2.0, 6.0, 0.0) == 2.0
    assert mixed_score(2.0, 6.0, 1.0) == 6.0
    assert mixed_score(2.0, 6.0, 0.3) == pytest.approx(3.2, abs=1e-15)


def test_mixed_score_rejects_bad_lambda():
    with pytest.raises(ContractError):
        mixed_score(1.0, 2.0, 1.5)


@given(st.floats(0, 100), st.floats(0, 100), st.floats(0, 1), st.floats(0, 1))
def test_mixed_score_monotone_and_bounded(ya, yb, l1, l2):
    lo, hi = sorted((l1, l2))
    a, b = mixed_score(ya, yb, lo), mixed_score(ya, yb, hi)
    assert min(ya, yb) <= a <= max(ya, yb)
    if yb >= ya:
        assert a <= b
    else:
        assert a >= b


# --- eligibility -------------------------------------------------------------


def test_eligibility_ge():
    rule = EligibilityRule(Modality.GE)
    assert rule(3.0) and not rule(5.0) and rule(4.0)


def test_eligibility_lo():
    rule = EligibilityRule.for_modality("lo")
    assert rule(7.0) and rule(1.5) and not rule(2.0) and not rule(6.0)


def test_eligibility_cip():
    rule = EligibilityRule(Modality.CIP)
    assert rule(15.0) and not rule(0.0) and not rule(10.0)


# --- conditional transmix ----------------------------------------------------


def uniform_provider(imgs):
    return np.full((len(imgs), 2, 2), 0.25)


def test_transmix_passes_ineligible_untouched():
    rng = np.random.default_rng(0)
    imgs = rng.random((4, 1, 16, 16))
    scores = np.array([5.0, 6.0, 3.0, 8.0])
    out, ys, recs = conditional_transmix(imgs, scores, EligibilityRule(Modality.GE), uniform_provider, rng)
    assert [r.index_a for r in recs] == [2]
    for i in (0, 1, 3):
        assert np.array_equal(out[i], imgs[i]) and ys[i] == scores[i]
    r = recs[0]
    assert r.index_b != 2
    assert ys[2] == r.mixed_score
    np.testing.assert_allclose(r.mixed_score, r.lam * r.score_b + (1 - r.lam) * r.score_a, atol=1e-12)


def test_transmix_single_sample_passes_through():
    img = np.ones((1, 1, 16, 16))
    out, ys, recs = conditional_transmix(img, np.array([50.0]), EligibilityRule(Modality.CIP),
                                         uniform_provider, np.random.default_rng())
    assert recs == [] and np.array_equal(out, img) and ys[0] == 50.0


def test_transmix_uniform_attention_gives_cell_fraction():
    # an all-zero anchor mixed with all-one partners makes the mixed image the mask itself
    imgs = np.ones((4, 1, 16, 16))
    imgs[0] = 0.0
    for seed in range(20):
        _, _, recs = conditional_transmix(imgs, np.array([20.0, 0.0, 0.0, 0.0]), EligibilityRule(Modality.CIP),
                                          uniform_provider, np.random.default_rng(seed))
        (r,) = recs
        mask = r.image[0]
        assert set(np.unique(mask)) <= {0.0, 1.0}
        assert r.lam == downsample_mask(mask, (2, 2)).mean()


def test_transmix_is_seed_reproducible():
    imgs = np.random.default_rng(1).random((5, 1, 16, 16))
    scores = np.array([20.0, 0.0, 30.0, 40.0, 5.0])
    runs = [conditional_transmix(imgs, scores, EligibilityRule(Modality.CIP), uniform_provider,
                                 np.random.default_rng(9)) for _ in range(2)]
    assert np.array_equal(runs[0][0], runs[1][0]) and np.array_equal(runs[0][1], runs[1][1])


def test_transmix_calls_provider_once_with_mixed_images():
    calls = []

    def provider(imgs):
        calls.append(imgs.copy())
        return uniform_provider(imgs)

    imgs = np.random.default_rng(2).random((4, 1, 16, 16))
    out, _, recs = conditional_transmix(imgs, np.array([20.0, 30.0, 0.0, 0.0]), EligibilityRule(Modality.CIP),
                                        provider, np.random.default_rng(3))
    assert len(calls) == 1
    assert np.array_equal(calls[0], np.stack([out[r.index_a] for r in recs]))


# --- histogram ---------------------------------------------------------------


def test_level_counts():
    assert len(Modality.GE.levels) == 17
    assert len(Modality.CIP.levels) == 101


def test_histogram_counts():
    c = score_histogram([0.0, 0.0, 8.0], Modality.GE.levels)
    assert c[0] == 2 and c[16] == 1 and c.sum() == 3


def test_histogram_rejects_out_of_range():
    with pytest.raises(ContractError):
        score_histogram([9.0], Modality.GE.levels)


def test_transmix_nonfinite_attention_is_numerical():
    imgs = np.random.default_rng(5).random((3, 1, 16, 16))
    with pytest.raises(NumericalError):
        conditional_transmix(imgs, np.array([20.0, 0.0, 0.0]), EligibilityRule(Modality.CIP),
                             lambda x: np.full((len(x), 2, 2), np.nan), np.random.default_rng(0))
