import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from mvrecon.priors import (
    L1AnalysisPrior,
    NullPrior,
    TVPrior,
    huber_grad,
    huber_prox,
    huber_value,
    make_prior,
    prox_l1_analysis,
    prox_l1_huber,
    tv_gradient,
    tv_gradient_adjoint,
    tv_prox,
    tv_value,
)
from mvrecon.wavelets import WaveletFrame, analysis_matrix, dwt_forward, dwt_inverse, max_levels


def scalar_root(df, z, span=10.0):
    """Root of an increasing scalar derivative by Brent's method."""
    return brentq(df, z - span, z + span, xtol=1e-15, rtol=1e-15, maxiter=500)


# --- wavelets ---------------------------------------------------------------


@pytest.mark.parametrize("wavelet", ["haar", "db4"])
@pytest.mark.parametrize("side", [8, 16, 32, 64])
def test_frame_perfect_reconstruction_and_isometry(wavelet, side):
    rng = np.random.default_rng(side)
    top = max_levels(side)
    for levels in sorted({1, max(1, top - 2), top}):
        fr = WaveletFrame(side, wavelet, levels)
        x = rng.standard_normal((3, side * side))
        c = dwt_forward(fr, x)
        assert np.max(np.abs(dwt_inverse(fr, c) - x)) <= 1e-12
        assert np.allclose(np.linalg.norm(c, axis=1), np.linalg.norm(x, axis=1), rtol=1e-12)


@pytest.mark.parametrize("wavelet", ["haar", "db4"])
def test_analysis_matrix_orthogonal(wavelet):
    for N in (8, 16, 32):
        M = analysis_matrix(wavelet, N)
        assert np.allclose(M @ M.T, np.eye(N), atol=1e-14)


def test_db4_vanishing_moments():
    from mvrecon.wavelets import highpass, lowpass

    g = highpass(lowpass("db4"))
    m = np.arange(8)
    for k in range(4):
        assert abs(np.sum(g * m**k)) < 1e-9 * max(1, 8**k)


def test_haar_constant_has_no_details():
    fr = WaveletFrame(16, "haar")
    c = fr.forward(np.full(256, 2.5))
    assert np.allclose(c[fr.detail_mask()], 0.0, atol=1e-13)
    assert np.array_equal(fr.forward(np.zeros(256)), np.zeros(256))


def test_frame_errors():
    with pytest.raises(ValueError):
        WaveletFrame(16, "nope")
    with pytest.raises(ValueError):
        WaveletFrame(16, "haar", levels=5)
    with pytest.raises(ValueError):
        WaveletFrame(16).forward(np.zeros(100))


def test_wavelet_aliases():
    assert WaveletFrame(16, "daubechies8").same_as(WaveletFrame(16, "db4"))
    assert not WaveletFrame(16, "haar").same_as(WaveletFrame(16, "db4"))


# --- huber ------------------------------------------------------------------


def test_huber_examples():
    mu = 0.2
    assert huber_value(np.zeros(3), mu) == 0.0
    assert huber_value(np.array([mu / 2]), mu) == pytest.approx(mu / 8)
    assert huber_value(np.array([1.0]), 0.5) == pytest.approx(0.75)
    with pytest.raises(ValueError):
        huber_value(np.ones(2), 0.0)
    with pytest.raises(ValueError):
        huber_grad(np.ones(2), -1.0)


def test_huber_continuous_at_branch():
    mu = 0.3
    below = huber_value(np.array([mu * (1 - 1e-12)]), mu)
    above = huber_value(np.array([mu * (1 + 1e-12)]), mu)
    assert abs(below - above) < 1e-10


def test_huber_tends_to_l1():
    rng = np.random.default_rng(0)
    a = rng.choice([-1, 1], 1000) * 10 ** rng.uniform(-6, 2, 1000)
    mu = 1e-10
    l1 = np.sum(np.abs(a))
    assert abs(huber_value(a, mu) - l1) / l1 <= 1e-4


@given(st.floats(-5, 5), st.floats(1e-3, 2))
@settings(max_examples=200)
def test_huber_grad_matches_fd(a, mu):
    h = 1e-7
    if abs(abs(a) - mu) < 1e-4:
        return
    fd = (huber_value(np.array([a + h]), mu) - huber_value(np.array([a - h]), mu)) / (2 * h)
    g = huber_grad(np.array([a]), mu)[0]
    assert abs(g - fd) <= 1e-6 * max(1.0, abs(fd))


def test_huber_grad_lipschitz():
    mu = 0.1
    a = np.linspace(-1, 1, 2001)
    g = huber_grad(a, mu)
    slopes = np.abs(np.diff(g) / np.diff(a))
    assert slopes.max() <= 1 / mu + 1e-9


def test_huber_prox_examples():
    z = np.array([2.0, -0.3, 0.0])
    assert np.array_equal(huber_prox(z, 0.0, 0.1), z)
    assert huber_prox(np.array([2.0]), 0.5, 1e-12)[0] == pytest.approx(1.5, abs=1e-10)
    mu = 0.4
    assert huber_prox(np.array([0.3]), mu, mu)[0] == pytest.approx(0.15)
    with pytest.raises(ValueError):
        huber_prox(z, -1.0, 0.1)


def test_huber_prox_matches_scalar_minimization():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(300):
        z = rng.uniform(-3, 3)
        lam = rng.uniform(0, 2)
        mu = 10 ** rng.uniform(-3, 0.5)
        # derivative written out independently of the library
        df = lambda p: lam * (p / mu if abs(p) < mu else np.sign(p)) + p - z
        p = huber_prox(np.array([z]), lam, mu)[0]
        q = scalar_root(df, z)
        worst = max(worst, abs(p - q))
    assert worst <= 1e-8


def test_prox_l1_huber_matches_scalar_minimization():
    rng = np.random.default_rng(2)
    for _ in range(300):
        z, b = rng.uniform(-3, 3, 2)
        tw, tc = rng.uniform(0, 1.5, 2)
        mu = 10 ** rng.uniform(-10, 0)
        def f(a):
            d = np.abs(a - b)
            hub = np.where(d < mu, d * d / (2 * mu), d - mu / 2)
            return tw * np.abs(a) + tc * hub + 0.5 * (a - z) ** 2

        p = prox_l1_huber(np.array([z]), tw, tc, np.array([b]), mu)[0]
        grid = np.concatenate([np.linspace(-5, 5, 20001), [0.0, b, z]])
        assert f(p) <= f(grid).min() + 1e-12


def prox_spot_check(prox_point, objective, z, rng, count=1000, scale=1.0):
    fp = objective(prox_point)
    for _ in range(count):
        q = prox_point + scale * rng.standard_normal(prox_point.shape) * 10 ** rng.uniform(-6, 0)
        if objective(q) < fp - 1e-12 * max(1.0, abs(fp)):
            return False
    return True


def test_huber_prox_optimality_spot_check():
    rng = np.random.default_rng(3)
    z = rng.standard_normal(20)
    lam, mu = 0.4, 0.05
    p = huber_prox(z, lam, mu)
    obj = lambda v: 0.5 * np.sum((v - z) ** 2) + lam * huber_value(v, mu)
    assert prox_spot_check(p, obj, z, rng)


# --- l1 analysis ------------------------------------------------------------


def test_prox_l1_analysis_examples():
    fr = WaveletFrame(16, "haar")
    rng = np.random.default_rng(0)
    z = rng.standard_normal(256)
    assert np.allclose(prox_l1_analysis(fr, z, 0.0), z, atol=1e-13)
    c = np.zeros(256)
    c[37] = 2.0
    atom = fr.inverse(c)
    out = fr.forward(prox_l1_analysis(fr, atom, 0.5))
    expect = np.zeros(256)
    expect[37] = 1.5
    assert np.allclose(out, expect, atol=1e-13)
    lam = 0.3
    assert np.linalg.norm(prox_l1_analysis(fr, z, lam) - z) <= lam * np.sqrt(256) + 1e-12
    with pytest.raises(ValueError):
        prox_l1_analysis(fr, z, -1.0)


def test_prox_l1_analysis_optimality():
    fr = WaveletFrame(16, "db4")
    rng = np.random.default_rng(5)
    z = rng.standard_normal(256)
    lam = 0.2
    p = prox_l1_analysis(fr, z, lam)
    obj = lambda v: 0.5 * np.sum((v - z) ** 2) + lam * np.sum(np.abs(fr.forward(v)))
    assert prox_spot_check(p, obj, z, rng)
    # subgradient condition in coefficient space
    c, cz = fr.forward(p), fr.forward(z)
    nz = np.abs(c) > 1e-12
    assert np.allclose(cz[nz] - c[nz], lam * np.sign(c[nz]), atol=1e-10)
    assert np.all(np.abs(cz[~nz]) <= lam + 1e-10)


# --- TV ---------------------------------------------------------------------


def tv_direct(img):
    s = img.shape[0]
    total = 0.0
    for r in range(s):
        for c in range(s):
            right = img[r, c + 1] if c + 1 < s else 0.0
            down = img[r + 1, c] if r + 1 < s else 0.0
            total += np.hypot(right - img[r, c], down - img[r, c])
    return total


def test_tv_value_examples():
    assert tv_value(np.zeros((8, 8))) == 0.0
    s = 8
    img = np.zeros((s, s))
    img[:, 4:] = 1.0
    assert tv_value(img) == pytest.approx(tv_direct(img), abs=1e-12)
    # interior column jump contributes n_side, boundary terms the rest
    interior = s - 1  # rows 0..s-2 see only the horizontal jump
    assert tv_value(img) > interior
    rng = np.random.default_rng(0)
    x = rng.standard_normal((8, 8))
    assert tv_value(x) == pytest.approx(tv_direct(x), rel=1e-13)
    c = 0.7
    assert tv_value(np.full((8, 8), c)) == pytest.approx(tv_direct(np.full((8, 8), c)))


def test_tv_gradient_adjoint_consistency():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 8, 8))
    q = rng.standard_normal((3, 2, 8, 8))
    assert np.sum(tv_gradient(x) * q) == pytest.approx(np.sum(x * tv_gradient_adjoint(q)), rel=1e-12)
    # operator norm bound
    K = np.stack([tv_gradient(e.reshape(8, 8)).ravel() for e in np.eye(64)], axis=1)
    assert np.linalg.norm(K, 2) ** 2 <= 8.0


def test_tv_prox_zero_weight_and_gap():
    rng = np.random.default_rng(2)
    z = rng.standard_normal((16, 16))
    assert np.array_equal(tv_prox(z, 0.0), z)
    p, gap, it, _ = tv_prox(z, 0.3, iters=20000, tol=1e-8, full_output=True)
    assert gap <= 1e-8 * (1 + tv_value(p))
    obj = lambda v: 0.5 * np.sum((v - z) ** 2) + 0.3 * tv_value(v)
    assert prox_spot_check(p, obj, z, rng)


def test_tv_prox_matches_cvxpy():
    cp = pytest.importorskip("cvxpy")
    rng = np.random.default_rng(4)
    z = rng.standard_normal((8, 8))
    lam = 0.25
    X = cp.Variable((8, 8))
    Xp = cp.hstack([X, np.zeros((8, 1))])
    Xd = cp.vstack([X, np.zeros((1, 8))])
    d1 = Xp[:, 1:] - X
    d2 = Xd[1:, :] - X
    tv = cp.sum(cp.norm(cp.vstack([cp.vec(d1, order="C"), cp.vec(d2, order="C")]), 2, axis=0))
    cp.Problem(cp.Minimize(0.5 * cp.sum_squares(X - z) + lam * tv)).solve(solver="CLARABEL")
    p = tv_prox(z, lam, iters=20000, tol=1e-10)
    assert np.max(np.abs(p - X.value)) < 1e-5


# --- prior objects ----------------------------------------------------------


def test_prior_objects():
    fr = WaveletFrame(8, "haar")
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 64))
    pr = L1AnalysisPrior(fr, [1.0, 2.0, 2.0])
    expect = np.sum(np.abs(fr.forward(x[0]))) + 2 * np.sum(np.abs(fr.forward(x[1:])))
    assert pr.value(x) == pytest.approx(expect)
    assert NullPrior().value(x) == 0.0
    tv = TVPrior(8, 1.5)
    assert tv.value(x) == pytest.approx(1.5 * sum(tv_value(xi.reshape(8, 8)) for xi in x))
    assert isinstance(make_prior("tv", 8), TVPrior)
    assert isinstance(make_prior("l1", 8, fr), L1AnalysisPrior)
    assert isinstance(make_prior("none", 8), NullPrior)
    with pytest.raises(ValueError):
        make_prior("bogus", 8)
    with pytest.raises(ValueError):
        L1AnalysisPrior(fr, -1.0).value(x)


def test_prior_dual_interface_is_consistent():
    # f(x) = max over the dual set of <K x, q>
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 64))
    for pr in (L1AnalysisPrior(WaveletFrame(8, "db4", 1), [1.0, 3.0]), TVPrior(8, [2.0, 0.5])):
        Kx = pr.linear(x)
        q_star = pr.project_dual(1e6 * Kx)
        assert np.sum(Kx * q_star) == pytest.approx(pr.value(x), rel=1e-9)
        q = rng.standard_normal(Kx.shape)
        assert np.sum(pr.linear(x) * q) == pytest.approx(np.sum(x * pr.linear_adjoint(q)), rel=1e-12)
        assert np.sum(Kx * pr.project_dual(q)) <= pr.value(x) + 1e-9
