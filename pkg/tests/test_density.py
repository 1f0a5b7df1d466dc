import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from deconfounding_rl import density as D


def gaussian_data(n, seed, sd=0.1):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, n)
    return x, rng.normal(x, sd)


def test_jitter_pinned_noise_is_identity():
    assert D.jitter(3, eps=0.0, beta=0.5) == 3.0


def test_jitter_defaults_mean_and_support():
    rng = np.random.default_rng(0)
    out = D.jitter(np.full(100_000, 2), rng=rng)
    assert abs(out.mean() - 2) < 0.003
    assert np.all((out > 1.25) & (out < 2.75))


def test_jitter_theta_zero_is_uniform():
    out = D.jitter(np.zeros(100_000), D.JitterConfig(theta_jit=0.0), np.random.default_rng(1))
    assert abs(out.var() - 1 / 12) < 0.002


def test_jitter_rounding_recovers_codes():
    codes = np.random.default_rng(2).integers(0, 5, 100_000)
    out = D.jitter(codes, rng=np.random.default_rng(3))
    # rounding fails iff |eps + delta| > 0.5, which has probability E|delta|
    # for delta = theta (B - 0.5); integrated numerically this is 0.0615234375
    expected = 1 - 0.0615234375
    acc = np.mean(np.round(out) == codes)
    assert abs(acc - expected) < 4 * np.sqrt(expected * (1 - expected) / len(codes))


def test_jitter_config_validation():
    with pytest.raises(ValueError):
        D.JitterConfig(theta_jit=-1)
    with pytest.raises(ValueError):
        D.JitterConfig(v_beta=0)


@pytest.mark.parametrize("method", ["kmeans", "random"])
def test_select_centers_deterministic(method):
    z = np.random.default_rng(4).normal(size=(300, 2))
    assert np.array_equal(D.select_centers(z, 10, method, seed=5), D.select_centers(z, 10, method, seed=5))


def test_kmeans_with_k_equal_n_is_permutation():
    z = np.random.default_rng(6).normal(size=(20, 2))
    c = D.select_centers(z, 20, "kmeans", seed=0)
    assert np.array_equal(np.sort(c, axis=0), np.sort(z, axis=0))
    key = lambda a: np.lexsort(a.T[::-1])
    assert np.allclose(c[key(c)], z[key(z)])


def test_kmeans_finds_two_blobs():
    rng = np.random.default_rng(7)
    z = np.concatenate([rng.normal(-10, 1, (200, 2)), rng.normal(10, 1, (200, 2))])
    c = D.select_centers(z, 2, "kmeans", seed=1)
    c = c[np.argsort(c[:, 0])]
    assert np.all(np.abs(c[0] + 10) < 3) and np.all(np.abs(c[1] - 10) < 3)


def test_select_centers_errors():
    with pytest.raises(ValueError):
        D.select_centers(np.zeros((3, 1)), 4)
    with pytest.raises(ValueError):
        D.select_centers(np.zeros((3, 1)), 2, method="other")


def test_fit_orders_gaussian_density():
    x, y = gaussian_data(2000, 8)
    m = D.fit_lscde(x, y, k=100, lambda_reg=0.01, bandwidths=(0.2, 0.1), seed=0)
    assert D.conditional_density(m, 0.0, 0.0) > D.conditional_density(m, 0.0, 0.5)


def test_fit_is_deterministic():
    x, y = gaussian_data(500, 9)
    a = D.fit_lscde(x, y, k=50, seed=3)
    b = D.fit_lscde(x, y, k=50, seed=3)
    assert np.array_equal(a.alpha, b.alpha) and np.array_equal(a.centers.centers, b.centers.centers)


def test_fit_errors():
    x, y = gaussian_data(50, 10)
    with pytest.raises(ValueError):
        D.fit_lscde(x, y, lambda_reg=0)
    with pytest.raises(ValueError):
        D.fit_lscde(x, y[:-1])
    with pytest.raises(D.DegenerateFitError):
        D.LscdeModel(D.KernelCenters(np.zeros((1, 2)), 1.0, 1.0), np.zeros(1), 1, 1)


def test_dimension_mismatch():
    x, y = gaussian_data(100, 11)
    m = D.fit_lscde(x, y, k=10)
    with pytest.raises(ValueError, match="dimension"):
        D.conditional_density(m, np.zeros((1, 2)), np.zeros((1, 1)))


def test_single_center_is_gaussian_in_y():
    base = D.LscdeModel(D.KernelCenters(np.zeros((1, 2)), 0.7, 0.3), np.array([1.0]), 1, 1)
    ys = np.linspace(-1, 1, 11)
    for c in (1e-6, 1.0, 1e6):
        dens = D.conditional_density(base.scaled(c), 0.4, ys[:, None])
        assert np.allclose(dens, norm.pdf(ys, 0, 0.3), rtol=1e-12)


def test_alpha_scale_invariance_and_normalization():
    x, y = gaussian_data(2000, 12)
    m = D.fit_lscde(x, y, k=100, lambda_reg=0.01, bandwidths=(0.2, 0.1), seed=0)
    gy = np.linspace(-3, 3, 3001)
    for x0 in (-0.9, 0.0, 0.6):
        dens = D.conditional_density(m, x0, gy[:, None])
        assert np.allclose(D.conditional_density(m.scaled(7.3), x0, gy[:, None]), dens, rtol=1e-12)
        assert abs(dens.sum() * (gy[1] - gy[0]) - 1) < 0.01


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 8), sx=st.floats(0.05, 3), sy=st.floats(0.05, 3))
def test_random_models_nonnegative_and_normalized(seed, k, sx, sy):
    rng = np.random.default_rng(seed)
    m = D.LscdeModel(D.KernelCenters(rng.uniform(-1, 1, (k, 2)), sx, sy), rng.uniform(0.01, 1, k), 1, 1)
    gy = np.linspace(-2 - 8 * sy, 2 + 8 * sy, 4001)
    x0 = rng.uniform(-1, 1)
    dens = D.conditional_density(m, x0, gy[:, None])
    assert np.all(dens >= 0)
    assert abs(dens.sum() * (gy[1] - gy[0]) - 1) < 0.01
    assert np.all(D.unnormalized_density(m, rng.normal(size=(50, 1)), rng.normal(size=(50, 1))) >= 0)


def test_discrete_columns_are_jittered_and_queried_raw():
    rng = np.random.default_rng(13)
    a = rng.integers(0, 3, 3000)
    y = rng.normal(a.astype(float), 0.2)
    m = D.fit_lscde(a, y, k=60, lambda_reg=0.01, bandwidths=(0.3, 0.1), discrete_x=[True], seed=0)
    peaks = [np.linspace(-1, 3, 401)[np.argmax(D.conditional_density(m, c, np.linspace(-1, 3, 401)[:, None]))]
             for c in range(3)]
    assert np.allclose(peaks, [0, 1, 2], atol=0.15)


def test_standardized_density_is_wrt_raw_y():
    x, y = gaussian_data(2000, 14)
    m = D.fit_lscde(10 * x, 50 * y, k=100, lambda_reg=0.01, bandwidths=(0.2, 0.1), standardize=True)
    gy = np.linspace(-150, 150, 3001)
    assert abs(D.conditional_density(m, 0.0, gy[:, None]).sum() * (gy[1] - gy[0]) - 1) < 0.01


def test_mse_smaller_with_more_data():
    def mse(n):
        x, y = gaussian_data(n, 15)
        cv = D.cross_validate(x, y, [100, 300], [0.01, 0.001], [0.05, 0.2], folds=3, seed=0)
        m = D.fit_lscde(x, y, k=cv["k"], lambda_reg=cv["lambda_reg"], bandwidths=cv["bandwidths"])
        gx, gy = np.meshgrid(np.linspace(-0.8, 0.8, 9), np.linspace(-1.2, 1.2, 121))
        est = D.conditional_density(m, gx.reshape(-1, 1), gy.reshape(-1, 1))
        return np.mean((est - norm.pdf(gy.ravel(), gx.ravel(), 0.1)) ** 2)

    assert mse(5000) < mse(500)


def test_cross_validate_single_point_grid():
    x, y = gaussian_data(200, 16)
    cv = D.cross_validate(x, y, [20], [0.1], [(0.3, 0.2)], folds=2)
    assert (cv["k"], cv["lambda_reg"], cv["bandwidths"]) == (20, 0.1, (0.3, 0.2))


def test_cross_validate_prefers_sane_bandwidth_and_is_deterministic():
    x, y = gaussian_data(1000, 17)
    grid = [(0.2, s) for s in (0.01, 0.1, 10.0)]
    a = D.cross_validate(x, y, [50], [0.01], grid, folds=3, seed=4)
    b = D.cross_validate(x, y, [50], [0.01], grid, folds=3, seed=4)
    sy = a["bandwidths"][1]
    assert abs(sy - 0.1) < abs(sy - 10)
    assert a["bandwidths"] == b["bandwidths"] and a["scores"] == b["scores"]


def test_cross_validate_errors():
    x, y = gaussian_data(50, 18)
    with pytest.raises(ValueError):
        D.cross_validate(x, y, [10], [0.1], [0.2], folds=1)
    with pytest.raises(ValueError):
        D.cross_validate(x, y, [], [0.1], [0.2])


def test_save_load_round_trip(tmp_path):
    x, y = gaussian_data(300, 19)
    m = D.fit_lscde(np.c_[x, x**2], y, k=30, standardize=True)
    D.save_model(m, tmp_path / "m.txt")
    back = D.load_model(tmp_path / "m.txt")
    q = np.random.default_rng(0).normal(size=(20, 3))
    assert np.array_equal(D.conditional_density(m, q[:, :2], q[:, 2:]),
                          D.conditional_density(back, q[:, :2], q[:, 2:]))
