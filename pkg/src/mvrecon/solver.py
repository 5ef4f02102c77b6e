"""Joint reconstruction and registration by alternating proximal descent.

Minimises ``L(x, theta) = f(x) + kappa ||A(theta) x - y||^2`` over image stacks
``x = (x_0, x_1, ..., x_l)`` and per-view transform parameters ``theta_j``
restricted to boxes.  Each outer iteration

1. updates the images by approximately solving the convex problem
   ``min_x L(x, theta^k) + gamma_x^k / 2 * h_mu(D^T (x - x^k))``;
2. updates every ``theta_j`` with a box-constrained Newton-like step whose
   curvature ``H + 2^i gamma_theta I`` is backtracked until a quadratic upper
   bound holds.

Both steps are guarded so the objective never increases, and the decrease
inequalities are checked at runtime.
"""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .geometry import KEYS, Grid, Kernel, ParamBounds, TransformModel, TransformParams, WarpOperator
from .operators import LinearOperator, StackedOperator, estimate_norm
from .priors import L1AnalysisPrior, NullPrior, huber_elementwise, huber_prox, prox_l1_huber
from .qp import solve_box_qp
from .wavelets import WaveletFrame

log = logging.getLogger(__name__)


class ConvergenceAssertionError(AssertionError):
    """A descent guarantee failed at runtime; carries the trace so far."""

    def __init__(self, message, trace=None, estimate=None):
        super().__init__(message)
        self.trace = trace
        self.estimate = estimate


class InnerSolverError(RuntimeError):
    pass


@dataclass
class SolverConfig:
    kappa: float = 100.0
    gamma_theta: float = 0.1
    gamma_x0: float | None = None  # None: gamma_x_factor * kappa
    gamma_x_factor: float = 20.0
    gamma_x_decay: float = 0.9
    gamma_x_min: float = 0.1
    mu: float = 1e-10
    k_max: int = 200
    tol_x: float = 1e-5
    tol_theta: float = 1e-6
    inner_tol: float = 1e-8
    inner_max_iter: int = 500
    power_iters: int = 30
    backtrack_cap: int = 60
    qp_tol: float = 1e-12
    decrease_rtol: float = 1e-9
    workers: int = 1
    check: bool = True
    # only test the stopping rule once gamma_x has reached its floor
    stop_at_floor: bool = True

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if not self.gamma_theta > 0 or not self.gamma_x_min > 0:
            raise ValueError("cost-to-move weights must be positive")
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        if not 0 < self.gamma_x_decay <= 1:
            raise ValueError("gamma_x_decay must lie in (0, 1]")

    @property
    def gamma_x_start(self) -> float:
        return self.gamma_x0 if self.gamma_x0 is not None else self.gamma_x_factor * self.kappa

    def gamma_x(self, k: int) -> float:
        return max(self.gamma_x_decay**k * self.gamma_x_start, self.gamma_x_min)

    @property
    def gamma_min(self) -> float:
        return min(self.gamma_x_min, self.gamma_x_start, self.gamma_theta)

    @property
    def gamma_max(self) -> float:
        return max(self.gamma_x_start, self.gamma_theta)


@dataclass
class JointProblem:
    """Measurements, sensing operators, transform model and priors."""

    grid: Grid
    views: Sequence[LinearOperator]
    y: np.ndarray
    model: TransformModel
    bounds: Sequence[ParamBounds]
    prior: object
    frame: WaveletFrame  # cost-to-move frame D
    kernel: Kernel = KEYS

    def __post_init__(self):
        self.y = np.atleast_2d(np.asarray(self.y, dtype=float))
        self.views = tuple(self.views)
        if isinstance(self.bounds, ParamBounds):
            self.bounds = [self.bounds] * len(self.views)
        self.bounds = tuple(self.bounds)
        if not (len(self.views) == len(self.bounds) == self.y.shape[0]):
            raise ValueError("views, bounds and measurements disagree on the view count")
        for b in self.bounds:
            if b.lower.shape != (self.model.n_params,):
                raise ValueError("bounds do not match the transform model")
        if self.frame.side != self.grid.side:
            raise ValueError("wavelet frame does not match the grid")

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def stack_shape(self) -> tuple[int, int]:
        return (self.n_views + 1, self.grid.n)

    def identity_params(self) -> np.ndarray:
        return np.tile(self.model.identity, (self.n_views, 1))

    def operator(self, thetas) -> StackedOperator:
        return StackedOperator(self.grid, self.views, self.model, thetas, self.kernel)

    def feasible(self, thetas, tol: float = 0.0) -> bool:
        return all(b.contains(t, tol) for b, t in zip(self.bounds, np.atleast_2d(thetas)))


@dataclass
class SceneEstimate:
    images: np.ndarray  # (l + 1, n); row 0 is the background
    thetas: np.ndarray  # (l, p)
    model: TransformModel

    @property
    def background(self) -> np.ndarray:
        return self.images[0]

    def foreground(self, j: int) -> np.ndarray:
        return self.images[j + 1]

    def params(self, j: int) -> TransformParams:
        return TransformParams(self.model, self.thetas[j])

    def view_image(self, grid: Grid, j: int, kernel: Kernel = KEYS) -> np.ndarray:
        return WarpOperator(grid, self.params(j), kernel).apply(self.images[0]) + self.images[j + 1]


TRACE_COLUMNS = ("k", "L", "fidelity", "prior", "move", "dx", "dtheta", "i_max", "ms")


@dataclass
class IterationTrace:
    """Per-iteration record; row 0 holds the initial point."""

    kappa: float
    gamma_min: float
    rows: list = field(default_factory=list)
    events: list = field(default_factory=list)

    def append(self, **row):
        self.rows.append(row)

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    @property
    def iterations(self) -> int:
        return len(self.rows) - 1

    @property
    def L0(self) -> float:
        return self.rows[0]["L"]

    @property
    def L_final(self) -> float:
        return self.rows[-1]["L"]

    def final_increment(self) -> float:
        r = self.rows[-1]
        return r["dx"] + r["dtheta"]

    def monotone(self, rtol: float = 1e-9) -> bool:
        L = self.column("L")
        return bool(np.all(L[1:] <= L[:-1] + rtol * (1.0 + np.abs(L[:-1]))))

    def sufficient_decrease_slack(self) -> np.ndarray:
        """``L_k - L_{k+1} - gamma_min/2 (kappa dtheta^2 + move)`` per iteration."""
        L = self.column("L")
        dth = self.column("dtheta")[1:]
        move = self.column("move")[1:]
        return L[:-1] - L[1:] - 0.5 * self.gamma_min * (self.kappa * dth**2 + move)

    def sufficient_decrease(self, rtol: float = 1e-9) -> bool:
        L = self.column("L")
        return bool(np.all(self.sufficient_decrease_slack() >= -rtol * (1.0 + np.abs(L[:-1]))))

    def increment_sum(self) -> float:
        dth = self.column("dtheta")[1:]
        move = self.column("move")[1:]
        return float(0.5 * self.gamma_min * np.sum(self.kappa * dth**2 + move))

    def telescoping(self, rtol: float = 1e-9) -> bool:
        L = self.column("L")
        slack = rtol * float(np.sum(1.0 + np.abs(L[:-1])))
        return self.increment_sum() <= self.L0 - self.L_final + slack

    def to_csv(self, path, timing: bool = True):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            for r in self.rows:
                w.writerow(
                    [
                        r["k"],
                        repr(float(r["L"])),
                        repr(float(r["fidelity"])),
                        repr(float(r["prior"])),
                        repr(float(r["move"])),
                        repr(float(r["dx"])),
                        repr(float(r["dtheta"])),
                        r["i_max"],
                        f"{r['ms']:.3f}" if timing else "0",
                    ]
                )

    @classmethod
    def from_csv(cls, path, kappa: float, gamma_min: float) -> "IterationTrace":
        tr = cls(kappa=kappa, gamma_min=gamma_min)
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                tr.append(
                    k=int(row["k"]),
                    L=float(row["L"]),
                    fidelity=float(row["fidelity"]),
                    prior=float(row["prior"]),
                    move=float(row["move"]),
                    dx=float(row["dx"]),
                    dtheta=float(row["dtheta"]),
                    i_max=int(row["i_max"]),
                    ms=float(row["ms"]),
                )
        return tr


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------


def objective_terms(problem: JointProblem, x, thetas, kappa: float, S: StackedOperator | None = None):
    """Return ``(L, fidelity, prior)`` with ``fidelity = kappa ||A(theta) x - y||^2``."""
    if not problem.feasible(thetas):
        raise ValueError("transform parameters lie outside their bounds")
    S = S or problem.operator(thetas)
    r = S.apply(x) - problem.y
    fid = kappa * float(np.sum(r * r))
    pri = problem.prior.value(x)
    return fid + pri, fid, pri


def objective(x, thetas, config: SolverConfig, problem: JointProblem) -> float:
    return objective_terms(problem, x, thetas, config.kappa)[0]


def move_cost(problem: JointProblem, dx, mu: float) -> float:
    """``h_mu(D^T dx)`` summed over all blocks."""
    return float(np.sum(huber_elementwise(problem.frame.forward(dx), mu)))


# ---------------------------------------------------------------------------
# Step 1: image update
# ---------------------------------------------------------------------------


def _operator_norm(S: StackedOperator, iters: int, state: dict) -> float:
    key = S.thetas.tobytes()
    cache = state.setdefault("norms", {})
    if key not in cache:
        cache.clear()
        cache[key] = estimate_norm(S.apply, S.adjoint, S.stack_shape, iters=iters)
    return cache[key]


def _separable(problem: JointProblem) -> bool:
    pr = problem.prior
    return isinstance(pr, NullPrior) or (
        isinstance(pr, L1AnalysisPrior) and pr.frame.same_as(problem.frame)
    )


def _step1_fista(problem, S, x_k, gamma, config, state):
    """Monotone FISTA in wavelet coefficients with an exact separable prox."""
    D = problem.frame
    y = problem.y
    kappa, mu = config.kappa, config.mu
    B = x_k.shape[0]
    if isinstance(problem.prior, L1AnalysisPrior):
        w = problem.prior._w(x_k) * np.ones_like(x_k)
    else:
        w = np.zeros_like(x_k)
    c = 0.5 * gamma
    a_k = D.forward(x_k)
    norm = _operator_norm(S, config.power_iters, state)
    Lip = max(2.0 * kappa * norm**2 * 1.05, 1e-12)

    def nonsmooth(a):
        return float(np.sum(w * np.abs(a)) + c * np.sum(huber_elementwise(a - a_k, mu)))

    Ax_k = S.apply(x_k)
    r_k = Ax_k - y
    F_k = kappa * float(np.sum(r_k * r_k)) + nonsmooth(a_k)

    a, Aa, F = a_k, Ax_k, F_k
    v, Av = a_k, Ax_k
    t = 1.0
    small = 0
    it = 0
    for it in range(1, config.inner_max_iter + 1):
        rv = Av - y
        fv = kappa * float(np.sum(rv * rv))
        grad = D.forward(S.adjoint(2.0 * kappa * rv))
        while True:
            z = prox_l1_huber(v - grad / Lip, w / Lip, c / Lip, a_k, mu)
            Az = S.apply(D.inverse(z))
            rz = Az - y
            fz = kappa * float(np.sum(rz * rz))
            dz = z - v
            if fz <= fv + float(np.sum(grad * dz)) + 0.5 * Lip * float(np.sum(dz * dz)) + 1e-12 * max(1.0, fv):
                break
            Lip *= 2.0
        Fz = fz + nonsmooth(z)
        if not np.isfinite(Fz):
            raise InnerSolverError("image update diverged")
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        if Fz <= F:
            a_new, Aa_new, F_new = z, Az, Fz
        else:
            a_new, Aa_new, F_new = a, Aa, F
        beta1, beta2 = t / t_new, (t - 1.0) / t_new
        v = a_new + beta1 * (z - a_new) + beta2 * (a_new - a)
        Av = Aa_new + beta1 * (Az - Aa_new) + beta2 * (Aa_new - Aa)
        change = F - F_new
        a, Aa, F, t = a_new, Aa_new, F_new, t_new
        small = small + 1 if change <= config.inner_tol * max(abs(F), 1e-300) else 0
        if small >= 2:
            break
    return D.inverse(a), it


def _step1_primal_dual(problem, S, x_k, gamma, config, state):
    """Condat-Vu iteration: gradient on the fidelity, prox on the cost-to-move,
    dual ascent on the prior's linear part.  Returns the best iterate seen."""
    D = problem.frame
    pr = problem.prior
    y = problem.y
    kappa, mu = config.kappa, config.mu
    c = 0.5 * gamma
    norm = _operator_norm(S, config.power_iters, state)
    Lip = max(2.0 * kappa * norm**2 * 1.05, 1e-12)
    sigma = Lip / (2.0 * pr.linear_norm_sq)
    tau = 0.99 / (0.5 * Lip + sigma * pr.linear_norm_sq)
    q = state.get("dual")
    if q is None or q.shape != pr.linear(x_k).shape:
        q = np.zeros_like(pr.linear(x_k))
    a_k = D.forward(x_k)

    def step1_obj(x, Ax):
        r = Ax - y
        return (
            kappa * float(np.sum(r * r))
            + pr.value(x)
            + c * float(np.sum(huber_elementwise(D.forward(x) - a_k, mu)))
        )

    x = x_k.copy()
    Ax = S.apply(x)
    best_x, best_F = x_k, step1_obj(x_k, Ax)
    last_F = best_F
    small = 0
    it = 0
    for it in range(1, config.inner_max_iter + 1):
        grad = S.adjoint(2.0 * kappa * (Ax - y))
        v = x - tau * (grad + pr.linear_adjoint(q))
        x_new = x_k + D.inverse(huber_prox(D.forward(v - x_k), tau * c, mu))
        q = pr.project_dual(q + sigma * pr.linear(2.0 * x_new - x))
        x = x_new
        Ax = S.apply(x)
        if it % 5 == 0 or it == config.inner_max_iter:
            F = step1_obj(x, Ax)
            if not np.isfinite(F):
                raise InnerSolverError("image update diverged")
            if F < best_F:
                best_x, best_F = x.copy(), F
            small = small + 1 if abs(last_F - F) <= config.inner_tol * max(abs(F), 1e-300) else 0
            last_F = F
            if small >= 2:
                break
    state["dual"] = q
    return best_x, it


def step1_image_update(problem: JointProblem, x_k, thetas, gamma: float, config: SolverConfig,
                       state: dict | None = None, S: StackedOperator | None = None):
    """Approximate minimiser of ``L(x, theta^k) + gamma/2 h_mu(D^T (x - x^k))``.

    Returns ``(x_new, info)``.  If the decrease inequality fails (inexact inner
    solve), ``x_new = x_k``.
    """
    state = {} if state is None else state
    S = S or problem.operator(thetas)
    x_k = np.asarray(x_k, dtype=float)
    if _separable(problem):
        x_new, iters = _step1_fista(problem, S, x_k, gamma, config, state)
        solver = "fista"
    else:
        x_new, iters = _step1_primal_dual(problem, S, x_k, gamma, config, state)
        solver = "primal_dual"
    L_old = objective_terms(problem, x_k, thetas, config.kappa, S)[0]
    L_new = objective_terms(problem, x_new, thetas, config.kappa, S)[0]
    move = move_cost(problem, x_new - x_k, config.mu)
    fallback = L_new + 0.5 * gamma * move > L_old + config.decrease_rtol * (1.0 + abs(L_old))
    if fallback:
        log.info("image update failed the decrease test; keeping previous iterate")
        x_new, L_new, move = x_k.copy(), L_old, 0.0
    return x_new, {"iters": iters, "fallback": fallback, "solver": solver, "L": L_new, "move": move}


# ---------------------------------------------------------------------------
# Step 2: parameter update
# ---------------------------------------------------------------------------


def view_fidelity(problem: JointProblem, j: int, x, theta_j) -> float:
    """``q_j(theta_j) = ||A_j (T(theta_j) x_0 + x_j) - y_j||^2``."""
    W = WarpOperator(problem.grid, TransformParams(problem.model, theta_j), problem.kernel)
    r = problem.views[j].apply(W.apply(x[0]) + x[j + 1]) - problem.y[j]
    return float(r @ r)


def fidelity_grad_params(problem: JointProblem, j: int, x, theta_j):
    """Gradient and Gauss-Newton curvature of ``q_j`` at ``theta_j``.

    Returns ``(grad, H, q)`` with ``grad = 2 (A_j J)^T r`` and
    ``H = 2 (A_j J)^T (A_j J)``.
    """
    A = problem.views[j]
    W = WarpOperator(problem.grid, TransformParams(problem.model, theta_j), problem.kernel)
    r = A.apply(W.apply(x[0]) + x[j + 1]) - problem.y[j]
    J = W.jacobian(x[0])
    AJ = np.stack([A.apply(J[:, i]) for i in range(J.shape[1])], axis=1)
    grad = 2.0 * AJ.T @ r
    H = 2.0 * AJ.T @ AJ
    H = 0.5 * (H + H.T)
    return grad, H, float(r @ r)


@dataclass
class ParamStep:
    theta: np.ndarray
    i: int
    accepted: bool
    q_old: float
    q_new: float


def step2_param_update(problem: JointProblem, j: int, x, theta_j, gamma_theta: float,
                       bounds: ParamBounds, config: SolverConfig) -> ParamStep:
    """Backtracked box-constrained Newton-like update of one view's parameters."""
    theta_j = np.asarray(theta_j, dtype=float)
    if not bounds.contains(theta_j):
        raise ValueError("current parameters are infeasible")
    grad, H, q0 = fidelity_grad_params(problem, j, x, theta_j)
    p = theta_j.size
    eye = np.eye(p)
    lo, hi = bounds.lower - theta_j, bounds.upper - theta_j
    lo, hi = np.minimum(lo, 0.0), np.maximum(hi, 0.0)
    slack = 1e-12 * max(1.0, q0)
    for i in range(1, config.backtrack_cap + 1):
        c = 2.0**i * gamma_theta
        d = solve_box_qp(H + c * eye, grad, lo, hi, tol=config.qp_tol)
        theta_new = bounds.project(theta_j + d)
        d = theta_new - theta_j
        q_new = view_fidelity(problem, j, x, theta_new)
        model = q0 + grad @ d + 0.5 * d @ ((H + (c - gamma_theta) * eye) @ d)
        if q_new <= model + slack and q_new + 0.5 * gamma_theta * (d @ d) <= q0 + slack:
            return ParamStep(theta_new, i, True, q0, q_new)
    log.warning("view %d: backtracking exceeded cap %d; parameters kept", j, config.backtrack_cap)
    return ParamStep(theta_j.copy(), config.backtrack_cap, False, q0, q0)


# ---------------------------------------------------------------------------
# Outer loop
# ---------------------------------------------------------------------------


def run_algorithm1(problem: JointProblem, config: SolverConfig, theta0=None,
                   callback: Callable | None = None, x0=None):
    """Alternate image and parameter updates; return ``(SceneEstimate, IterationTrace)``.

    Raises :class:`ConvergenceAssertionError` if ``config.check`` is set and a
    monotonicity, sufficient-decrease, feasibility or backtracking guarantee
    fails.
    """
    thetas = problem.identity_params() if theta0 is None else np.array(theta0, dtype=float)
    thetas = np.atleast_2d(thetas)
    if not problem.feasible(thetas):
        raise ValueError("initial parameters lie outside their bounds")
    x = np.zeros(problem.stack_shape) if x0 is None else np.array(x0, dtype=float)
    kappa = config.kappa
    trace = IterationTrace(kappa=kappa, gamma_min=config.gamma_min)
    S = problem.operator(thetas)
    L, fid, pri = objective_terms(problem, x, thetas, kappa, S)
    trace.append(k=0, L=L, fidelity=fid, prior=pri, move=0.0, dx=0.0, dtheta=0.0, i_max=0, ms=0.0)
    state: dict = {}
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None

    def fail(msg):
        raise ConvergenceAssertionError(msg, trace, SceneEstimate(x, thetas, problem.model))

    try:
        for k in range(config.k_max):
            t0 = time.perf_counter()
            gamma = config.gamma_x(k)
            x_new, info = step1_image_update(problem, x, thetas, gamma, config, state, S)
            if info["fallback"]:
                trace.events.append((k + 1, "image update fallback"))

            def upd(j):
                return step2_param_update(
                    problem, j, x_new, thetas[j], config.gamma_theta, problem.bounds[j], config
                )

            steps = list(pool.map(upd, range(problem.n_views))) if pool else [upd(j) for j in range(problem.n_views)]
            thetas_new = np.stack([s.theta for s in steps])
            for j, s in enumerate(steps):
                if not s.accepted:
                    trace.events.append((k + 1, f"view {j}: backtracking cap reached"))
            S_new = S.with_params(thetas_new)
            L_new, fid, pri = objective_terms(problem, x_new, thetas_new, kappa, S_new)
            dx = float(np.linalg.norm(x_new - x))
            dth = float(np.linalg.norm(thetas_new - thetas))
            move = info["move"]
            i_max = max(s.i for s in steps)
            ms = 1000.0 * (time.perf_counter() - t0)
            trace.append(k=k + 1, L=L_new, fidelity=fid, prior=pri, move=move, dx=dx,
                         dtheta=dth, i_max=i_max, ms=ms)
            x_prev_norm = float(np.linalg.norm(x))
            x, thetas, S = x_new, thetas_new, S_new
            if config.check:
                tol = config.decrease_rtol * (1.0 + abs(trace.rows[-2]["L"]))
                if L_new > trace.rows[-2]["L"] + tol:
                    fail(f"objective increased at iteration {k + 1}")
                if trace.sufficient_decrease_slack()[-1] < -tol:
                    fail(f"sufficient decrease violated at iteration {k + 1}")
                if not problem.feasible(thetas):
                    fail(f"parameters left the box at iteration {k + 1}")
                if i_max > config.backtrack_cap:
                    fail(f"backtracking index exceeded cap at iteration {k + 1}")
            if callback is not None:
                callback(k + 1, x, thetas, trace)
            settled = not config.stop_at_floor or gamma <= config.gamma_x_min
            if settled and dx <= config.tol_x * max(1.0, x_prev_norm) and dth <= config.tol_theta:
                break
    finally:
        if pool:
            pool.shutdown()
    return SceneEstimate(x, thetas, problem.model), trace


# ---------------------------------------------------------------------------
# Parameter calibration
# ---------------------------------------------------------------------------


def first_step_residual(problem: JointProblem, config: SolverConfig, gamma0: float, theta0=None) -> float:
    """``||A(theta^0) x^1 - y||^2 / ||y||^2`` after the first image update."""
    thetas = problem.identity_params() if theta0 is None else np.atleast_2d(theta0)
    S = problem.operator(thetas)
    x1, _ = step1_image_update(problem, np.zeros(problem.stack_shape), thetas, gamma0, config, {}, S)
    r = S.apply(x1) - problem.y
    return float(np.sum(r * r) / max(np.sum(problem.y**2), 1e-300))


def calibrate_gamma_x0(problem: JointProblem, config: SolverConfig, target=(0.1, 0.2),
                       probes: int = 8, theta0=None):
    """Search ``gamma_x^0`` so the first-step relative residual falls in ``target``.

    The residual grows with ``gamma_x^0``.  Returns ``(gamma0, residual)``; if no
    probe lands in the interval the closest one is returned.
    """
    lo_t, hi_t = target
    g = config.gamma_x_start
    lo = hi = None
    best = None
    for _ in range(probes):
        res = first_step_residual(problem, config, g, theta0)
        dist = 0.0 if lo_t <= res <= hi_t else min(abs(res - lo_t), abs(res - hi_t))
        if best is None or dist < best[2]:
            best = (g, res, dist)
        if dist == 0.0:
            break
        if res < lo_t:
            lo = g
        else:
            hi = g
        if lo is not None and hi is not None:
            g = float(np.sqrt(lo * hi))
        elif lo is not None:
            g = lo * 10.0
        else:
            g = hi / 10.0
    return best[0], best[1]


class KappaCalibrationError(RuntimeError):
    pass


@dataclass
class KappaResult:
    kappa: float
    residual: float
    saturated: bool
    probes: list


def auto_kappa(problem: JointProblem, config: SolverConfig, epsilon: float, theta0=None,
               kappa_min: float = 1e-2, kappa_max: float = 1e6, max_probes: int = 20,
               rtol: float = 0.01) -> KappaResult:
    """Choose ``kappa`` so the converged residual ``||A(theta*) x* - y||`` is within
    ``rtol`` of ``epsilon``, by bracketing then bisection in ``log kappa``.

    ``gamma_x^0`` follows ``kappa`` through ``gamma_x_factor``.  If even
    ``kappa_max`` leaves the residual above the target, ``kappa_max`` is
    returned with ``saturated=True``.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    probes = []

    def probe(kappa):
        cfg = replace(config, kappa=kappa)
        est, tr = run_algorithm1(problem, cfg, theta0)
        S = problem.operator(est.thetas)
        res = float(np.linalg.norm(S.apply(est.images) - problem.y))
        probes.append((kappa, res, tr))
        log.info("auto_kappa probe kappa=%.6g residual=%.6g target=%.6g", kappa, res, epsilon)
        return res

    def ok(res):
        return (1 - rtol) * epsilon <= res <= (1 + rtol) * epsilon

    kappa = float(np.clip(config.kappa, kappa_min, kappa_max))
    res = probe(kappa)
    if ok(res):
        return KappaResult(kappa, res, False, probes)
    lo = hi = None  # lo: residual too large; hi: residual too small
    if res > epsilon:
        lo = (kappa, res)
    else:
        hi = (kappa, res)
    while (lo is None or hi is None) and len(probes) < max_probes:
        if hi is None:
            if lo[0] >= kappa_max:
                return KappaResult(kappa_max, lo[1], True, probes)
            kappa = min(lo[0] * 10.0, kappa_max)
        else:
            if hi[0] <= kappa_min:
                raise KappaCalibrationError("residual below target even at the smallest kappa")
            kappa = max(hi[0] / 10.0, kappa_min)
        res = probe(kappa)
        if ok(res):
            return KappaResult(kappa, res, False, probes)
        if res > epsilon:
            lo = (kappa, res)
        else:
            hi = (kappa, res)
    while len(probes) < max_probes and lo is not None and hi is not None:
        kappa = float(np.sqrt(lo[0] * hi[0]))
        res = probe(kappa)
        if ok(res):
            return KappaResult(kappa, res, False, probes)
        if res > epsilon:
            lo = (kappa, res)
        else:
            hi = (kappa, res)
    raise KappaCalibrationError(f"no kappa met the residual target within {max_probes} probes")
