import dataclasses

import numpy as np
import pytest

from mvrecon.geometry import Grid, ParamBounds, TransformModel, TransformParams, WarpOperator, default_bounds
from mvrecon.metrics import relative_transform
from mvrecon.operators import make_identity_op, make_spread_spectrum_op, make_blur_downsample_op
from mvrecon.priors import L1AnalysisPrior, NullPrior, TVPrior, huber_value
from mvrecon.scene import synthetic_reference
from mvrecon import solver as S
from mvrecon.solver import (
    ConvergenceAssertionError,
    IterationTrace,
    JointProblem,
    KappaCalibrationError,
    SolverConfig,
    auto_kappa,
    calibrate_gamma_x0,
    fidelity_grad_params,
    objective,
    objective_terms,
    run_algorithm1,
    step1_image_update,
    step2_param_update,
    view_fidelity,
)
from mvrecon.wavelets import WaveletFrame

TR = TransformModel.TRANSLATION


def smooth_ref(side, seed=0):
    return synthetic_reference(side, seed, blobs=6, rectangles=2, smoothing=1.0, border=side // 5).ravel()


def translated_problem(side=16, shifts=((0, 0), (1.3, -0.7)), prior="l1", fixed=False, ops=None,
                       anchor=False, wavelet="haar", weights=1.0, bound=6.0, ref=None):
    g = Grid(side)
    ref = smooth_ref(side) if ref is None else ref
    th = np.array(shifts, dtype=float)
    l = len(th)
    ops = ops or [make_identity_op(g.n) for _ in range(l)]
    views = [WarpOperator(g, TransformParams(TR, t)).apply(ref) for t in th]
    y = np.stack([A.apply(v) for A, v in zip(ops, views)])
    fr = WaveletFrame(side, wavelet)
    if prior == "l1":
        pr = L1AnalysisPrior(fr, weights)
    elif prior == "tv":
        pr = TVPrior(side, weights)
    else:
        pr = NullPrior()
    if fixed:
        bounds = [ParamBounds.fixed(TR)] * l
    else:
        bounds = [default_bounds(TR, bound)] * l
        if anchor:
            bounds[0] = ParamBounds.fixed(TR)
    return JointProblem(g, ops, y, TR, bounds, pr, fr), th, ref


# --- objective --------------------------------------------------------------


def test_objective_examples():
    pb, th, ref = translated_problem(prior="none")
    cfg = SolverConfig(kappa=7.0)
    x0 = np.zeros(pb.stack_shape)
    assert objective(x0, pb.identity_params(), cfg, pb) == pytest.approx(7.0 * np.sum(pb.y**2))
    truth = np.zeros(pb.stack_shape)
    truth[0] = ref
    assert objective(truth, th, cfg, pb) == pytest.approx(0.0, abs=1e-20)
    pb1, th, ref = translated_problem(prior="l1")
    truth[0] = ref
    assert objective(truth, th, cfg, pb1) == pytest.approx(pb1.prior.value(truth), rel=1e-12)


def test_objective_recomputation_and_infeasible():
    pb, th, _ = translated_problem(prior="l1")
    rng = np.random.default_rng(0)
    x = rng.standard_normal(pb.stack_shape)
    t = th + rng.uniform(-0.5, 0.5, th.shape)
    fr = pb.frame
    fid = 0.0
    for j in range(2):
        W = WarpOperator(pb.grid, TransformParams(TR, t[j]))
        r = pb.views[j].apply(W.apply(x[0]) + x[j + 1]) - pb.y[j]
        fid += r @ r
    expect = np.sum(np.abs(fr.forward(x))) + 3.0 * fid
    assert objective(x, t, SolverConfig(kappa=3.0), pb) == pytest.approx(expect, rel=1e-12)
    with pytest.raises(ValueError):
        objective(x, t + 100, SolverConfig(), pb)


# --- step 1 -----------------------------------------------------------------


def test_step1_keeps_minimizer():
    pb, th, ref = translated_problem(prior="none")
    xk = np.zeros(pb.stack_shape)
    xk[0] = ref
    cfg = SolverConfig()
    x1, info = step1_image_update(pb, xk, th, 5.0, cfg)
    assert np.allclose(x1, xk, atol=1e-12)


@pytest.mark.parametrize("prior", ["l1", "tv", "none"])
def test_step1_decreases(prior):
    pb, th, _ = translated_problem(prior=prior)
    rng = np.random.default_rng(1)
    xk = rng.standard_normal(pb.stack_shape) * 0.1
    cfg = SolverConfig()
    thetas = th + 0.3
    for gamma in (1000.0, 10.0, 0.1):
        x1, info = step1_image_update(pb, xk, thetas, gamma, cfg)
        L0 = objective(xk, thetas, cfg, pb)
        L1 = objective(x1, thetas, cfg, pb)
        move = huber_value(pb.frame.forward(x1 - xk), cfg.mu)
        assert L1 + 0.5 * gamma * move <= L0 + 1e-9 * (1 + abs(L0))


def cvx_step1(pb, xk, thetas, gamma, kappa, mu, prior):
    cp = pytest.importorskip("cvxpy")
    n, l = pb.grid.n, pb.n_views
    Sop = pb.operator(thetas)
    M = np.stack([Sop.apply(e.reshape(pb.stack_shape)).ravel() for e in np.eye((l + 1) * n)], axis=1)
    Wt = np.stack([pb.frame.forward(e) for e in np.eye(n)], axis=1)
    X = cp.Variable((l + 1, n))
    fid = kappa * cp.sum_squares(M @ cp.vec(X, order="C") - pb.y.ravel())
    D = [Wt @ (X[b] - xk[b]) for b in range(l + 1)]
    move = sum(cp.sum(cp.huber(d, mu)) / (2 * mu) for d in D)
    if prior == "l1":
        reg = sum(cp.norm1(Wt @ X[b]) for b in range(l + 1))
    elif prior == "tv":
        side = pb.grid.side
        reg = 0
        for b in range(l + 1):
            img = cp.reshape(X[b], (side, side), order="C")
            d1 = cp.hstack([img[:, 1:], np.zeros((side, 1))]) - img
            d2 = cp.vstack([img[1:, :], np.zeros((1, side))]) - img
            reg = reg + cp.sum(cp.norm(cp.vstack([cp.vec(d1, order="C"), cp.vec(d2, order="C")]), 2, axis=0))
    else:
        reg = 0
    prob = cp.Problem(cp.Minimize(fid + reg + 0.5 * gamma * move))
    prob.solve(solver="CLARABEL", tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12)
    return prob.value


@pytest.mark.parametrize("prior", ["l1", "tv"])
def test_step1_matches_convex_solver(prior):
    # smallest admissible grid; l = 1
    pb, th, _ = translated_problem(side=8, shifts=((0.4, -0.3),), prior=prior)
    rng = np.random.default_rng(2)
    xk = rng.standard_normal(pb.stack_shape) * 0.05
    kappa, gamma, mu = 5.0, 2.0, 1e-3
    cfg = SolverConfig(kappa=kappa, mu=mu, inner_tol=1e-15, inner_max_iter=20000)
    x1, info = step1_image_update(pb, xk, th, gamma, cfg)
    assert not info["fallback"]
    mine = objective(x1, th, cfg, pb) + 0.5 * gamma * huber_value(pb.frame.forward(x1 - xk), mu)
    ref = cvx_step1(pb, xk, th, gamma, kappa, mu, prior)
    assert abs(mine - ref) <= 1e-6 * abs(ref)


def test_step1_fallback_on_bad_inner_solver(monkeypatch):
    pb, th, _ = translated_problem()
    xk = np.zeros(pb.stack_shape)
    monkeypatch.setattr(S, "_step1_fista", lambda *a, **k: (np.full(pb.stack_shape, 50.0), 1))
    x1, info = step1_image_update(pb, xk, th, 1.0, SolverConfig())
    assert info["fallback"] and np.array_equal(x1, xk)


# --- step 2 -----------------------------------------------------------------


def test_fidelity_grad_params_zero_background():
    pb, th, _ = translated_problem()
    x = np.zeros(pb.stack_shape)
    x[1] = 1.0
    g, H, q = fidelity_grad_params(pb, 1, x, th[1])
    assert np.array_equal(g, np.zeros(2)) and np.array_equal(H, np.zeros((2, 2)))


@pytest.mark.parametrize("model", list(TransformModel))
def test_fidelity_grad_matches_fd(model):
    side = 16
    g = Grid(side)
    ref = smooth_ref(side, 3)
    rng = np.random.default_rng(4)
    ops = [make_spread_spectrum_op(g, 100, 1, 0)]
    t_true = model.identity.copy()
    t_true[{2: 0, 3: 1, 6: 2, 8: 2}[model.n_params]] += 1.1
    y = np.stack([ops[0].apply(WarpOperator(g, TransformParams(model, t_true)).apply(ref))])
    fr = WaveletFrame(side)
    b = ParamBounds.around_identity(model, np.full(model.n_params, 50.0))
    pb = JointProblem(g, ops, y, model, [b], NullPrior(), fr)
    x = np.stack([ref, 0.01 * rng.standard_normal(g.n)])
    theta = model.identity + rng.uniform(-1, 1, model.n_params) * np.array(
        [0.05, 0.05, 1, 0.05, 0.05, 1, 0.002, 0.002][: model.n_params]
        if model.n_params >= 6 else ([1, 1] if model.n_params == 2 else [0.05, 1, 1])
    )
    grad, H, q = fidelity_grad_params(pb, 0, x, theta)
    h = 1e-5
    fd = np.zeros_like(grad)
    for i in range(len(theta)):
        e = np.zeros_like(theta)
        e[i] = h
        fd[i] = (view_fidelity(pb, 0, x, theta + e) - view_fidelity(pb, 0, x, theta - e)) / (2 * h)
    assert np.linalg.norm(grad - fd) <= 1e-4 * np.linalg.norm(fd)
    assert np.allclose(H, H.T)
    assert np.linalg.eigvalsh(H).min() >= -1e-10


def test_step2_zero_gradient_keeps_params():
    pb, th, ref = translated_problem(prior="none")
    x = np.zeros(pb.stack_shape)
    x[0] = ref
    st = step2_param_update(pb, 1, x, th[1], 0.1, pb.bounds[1], SolverConfig())
    assert np.allclose(st.theta, th[1], atol=1e-12)
    assert st.accepted and st.i == 1


def test_step2_interior_matches_newton_form():
    pb, th, ref = translated_problem(prior="none")
    x = np.zeros(pb.stack_shape)
    x[0] = ref
    t0 = th[1] + np.array([0.2, -0.1])
    cfg = SolverConfig()
    st = step2_param_update(pb, 1, x, t0, 0.1, pb.bounds[1], cfg)
    g, H, q0 = fidelity_grad_params(pb, 1, x, t0)
    expect = t0 - np.linalg.solve(H + 2**st.i * 0.1 * np.eye(2), g)
    assert np.allclose(st.theta, expect, atol=1e-10)
    # sufficient decrease of the view fidelity
    assert st.q_new + 0.05 * np.sum((st.theta - t0) ** 2) <= st.q_old + 1e-12


def test_step2_respects_bounds_and_cap():
    pb, th, ref = translated_problem(prior="none", bound=0.5, shifts=((0, 0), (3.0, 0.0)))
    x = np.zeros(pb.stack_shape)
    x[0] = ref
    st = step2_param_update(pb, 1, x, np.zeros(2), 0.1, pb.bounds[1], SolverConfig())
    assert pb.bounds[1].contains(st.theta)
    with pytest.raises(ValueError):
        step2_param_update(pb, 1, x, np.array([5.0, 0]), 0.1, pb.bounds[1], SolverConfig())
    # an impossible acceptance test exhausts the cap and keeps theta
    cfg = SolverConfig(backtrack_cap=3)
    orig = S.view_fidelity
    try:
        S.view_fidelity = lambda *a: 1e300
        st = step2_param_update(pb, 1, x, np.zeros(2), 0.1, pb.bounds[1], cfg)
    finally:
        S.view_fidelity = orig
    assert not st.accepted and np.array_equal(st.theta, np.zeros(2)) and st.i == 3


def test_one_parameter_translation_recovers_shift():
    # background known; only the x-shift of a single view is free
    side = 32
    g = Grid(side)
    ref = smooth_ref(side, 5)
    true = 1.37
    y = WarpOperator(g, TransformParams(TR, [true, 0.0])).apply(ref)[None]
    b = ParamBounds(np.array([-4.0, 0.0]), np.array([4.0, 0.0]))
    pb = JointProblem(g, [make_identity_op(g.n)], y, TR, [b], NullPrior(), WaveletFrame(side))
    x = np.stack([ref, np.zeros(g.n)])
    # brute-force scan oracle
    from scipy.optimize import minimize_scalar

    grid = np.linspace(-4, 4, 161)
    s0 = grid[np.argmin([view_fidelity(pb, 0, x, [s, 0.0]) for s in grid])]
    scan = minimize_scalar(lambda s: view_fidelity(pb, 0, x, [s, 0.0]), bounds=(s0 - 0.05, s0 + 0.05),
                           method="bounded", options={"xatol": 1e-7}).x
    theta = np.zeros(2)
    for _ in range(20):
        theta = step2_param_update(pb, 0, x, theta, 0.1, b, SolverConfig()).theta
    assert abs(theta[0] - scan) <= 1e-3
    assert abs(theta[0] - true) <= 1e-3


# --- outer loop -------------------------------------------------------------


def test_convex_limit_recovers_decomposition():
    pb, th, ref = translated_problem(prior="none", fixed=True, shifts=((0, 0),))
    # the l1-type move term leaves a residual of order gamma_min / kappa
    rel = []
    for gmin in (0.1, 1e-3):
        est, tr = run_algorithm1(pb, SolverConfig(k_max=200, gamma_x_min=gmin, tol_x=0.0, tol_theta=0.0))
        fit = est.images[0] + est.images[1]
        rel.append(np.sum((fit - pb.y[0]) ** 2) / np.sum(pb.y**2))
        assert np.array_equal(est.thetas, np.zeros((1, 2)))
        assert tr.monotone() and tr.sufficient_decrease() and tr.telescoping()
    assert rel[0] <= 1e-6 and rel[1] <= 1e-2 * rel[0]


def test_two_view_alignment_within_005_px():
    pb, th, _ = translated_problem(side=32, shifts=((0, 0), (3.2, -2.6)), anchor=True, weights=[1, 4, 4])
    est, tr = run_algorithm1(pb, SolverConfig())
    rel = relative_transform(TR, est.thetas[0], est.thetas[1])
    rel_true = relative_transform(TR, th[0], th[1])
    assert np.max(np.abs(rel - rel_true)) <= 0.05
    assert tr.monotone() and tr.sufficient_decrease() and tr.telescoping()


def test_increments_vanish_on_small_instance():
    pb, th, _ = translated_problem(side=16, shifts=((0, 0), (1.2, 0.8)), anchor=True, weights=[1, 4, 4])
    cfg = SolverConfig(k_max=200, tol_x=0.0, tol_theta=0.0, inner_tol=1e-14)
    est, tr = run_algorithm1(pb, cfg)
    assert tr.iterations == 200
    assert tr.final_increment() <= 1e-6
    assert tr.monotone() and tr.sufficient_decrease() and tr.telescoping()


def test_trace_csv_roundtrip(tmp_path):
    pb, th, _ = translated_problem(side=16, anchor=True)
    est, tr = run_algorithm1(pb, SolverConfig(k_max=12))
    p = tmp_path / "t.csv"
    tr.to_csv(p, timing=False)
    lines = p.read_text().splitlines()
    assert lines[0] == "k,L,fidelity,prior,move,dx,dtheta,i_max,ms"
    assert len(lines) == tr.iterations + 2
    assert all(line.endswith(",0") for line in lines[1:])
    back = IterationTrace.from_csv(p, tr.kappa, tr.gamma_min)
    assert np.array_equal(back.column("L"), tr.column("L"))
    assert np.array_equal(back.column("dx"), tr.column("dx"))


def test_parallel_views_match_sequential():
    pb, th, _ = translated_problem(side=16, shifts=((0, 0), (1.0, 0.5), (-0.7, 1.1)), anchor=True)
    a, ta = run_algorithm1(pb, SolverConfig(k_max=15))
    b, tb = run_algorithm1(pb, SolverConfig(k_max=15, workers=3))
    assert np.array_equal(a.images, b.images) and np.array_equal(a.thetas, b.thetas)
    assert np.array_equal(ta.column("L"), tb.column("L"))


def test_assertion_failure_carries_trace(monkeypatch):
    pb, th, _ = translated_problem(side=16)
    real = S.step2_param_update

    def bad(*args, **kw):
        st = real(*args, **kw)
        st.theta = st.theta + 100.0
        return st

    monkeypatch.setattr(S, "step2_param_update", bad)
    with pytest.raises((ConvergenceAssertionError, ValueError)) as ei:
        run_algorithm1(pb, SolverConfig(k_max=3))
    assert "bounds" in str(ei.value) or isinstance(ei.value, ConvergenceAssertionError)


def test_monotonicity_assertion(monkeypatch):
    pb, th, _ = translated_problem(side=16)
    monkeypatch.setattr(S, "objective_terms", _inflating_objective(S.objective_terms))
    with pytest.raises(ConvergenceAssertionError) as ei:
        run_algorithm1(pb, SolverConfig(k_max=5))
    assert ei.value.trace is not None and ei.value.trace.iterations >= 1


def _inflating_objective(real):
    calls = {"n": 0}

    def wrapped(*a, **k):
        L, fid, pri = real(*a, **k)
        calls["n"] += 1
        return L + calls["n"], fid, pri

    return wrapped


def test_infeasible_start_rejected():
    pb, th, _ = translated_problem(side=16, bound=1.0)
    with pytest.raises(ValueError):
        run_algorithm1(pb, SolverConfig(), theta0=np.full((2, 2), 5.0))


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(kappa=0)
    with pytest.raises(ValueError):
        SolverConfig(mu=0)
    with pytest.raises(ValueError):
        SolverConfig(gamma_x_decay=1.5)
    cfg = SolverConfig(kappa=10)
    assert cfg.gamma_x(0) == 200.0
    assert cfg.gamma_x(1000) == 0.1
    assert cfg.gamma_min == 0.1


# --- calibration ------------------------------------------------------------


def cs_problem(side=16, sigma=0.0, seed=0):
    g = Grid(side)
    ops = [make_spread_spectrum_op(g, int(0.5 * g.n), seed, j) for j in range(2)]
    pb, th, ref = translated_problem(side=side, ops=ops, anchor=True, shifts=((0, 0), (1.0, -0.5)))
    if sigma > 0:
        pb.y = pb.y + sigma * np.random.default_rng(seed).standard_normal(pb.y.shape)
    return pb


def test_calibrate_gamma_x0_lands_in_target():
    pb = cs_problem()
    g0, res = calibrate_gamma_x0(pb, SolverConfig())
    assert 0.1 <= res <= 0.2
    assert S.first_step_residual(pb, SolverConfig(), g0) == pytest.approx(res)


def test_auto_kappa_saturates_without_noise():
    pb = cs_problem()
    cfg = SolverConfig(k_max=30)
    res = auto_kappa(pb, cfg, epsilon=1e-12, kappa_max=1e3)
    assert res.saturated and res.kappa == 1e3


def test_auto_kappa_hits_target_and_is_repeatable():
    pb = cs_problem(sigma=0.01)
    from mvrecon.metrics import noise_bound

    eps = noise_bound(0.01, pb.y.size)
    cfg = SolverConfig(k_max=60)
    res = auto_kappa(pb, cfg, eps)
    assert 0.99 * eps <= res.residual <= 1.01 * eps
    ks = np.array([p[0] for p in res.probes])
    rs = np.array([p[1] for p in res.probes])
    order = np.argsort(ks)
    assert np.all(np.diff(rs[order]) <= 1e-9 * rs.max())
    again = auto_kappa(pb, cfg, eps)
    assert again.kappa == res.kappa
    assert abs(again.residual - res.residual) <= 0.01 * res.residual
    with pytest.raises(ValueError):
        auto_kappa(pb, cfg, 0.0)


def test_auto_kappa_reports_missing_bracket():
    pb = cs_problem(sigma=0.01)
    with pytest.raises(KappaCalibrationError):
        auto_kappa(pb, SolverConfig(k_max=10), epsilon=1e6, kappa_min=1.0, max_probes=3)
