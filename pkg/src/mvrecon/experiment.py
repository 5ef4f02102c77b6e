"""Experiment driver: synthetic scenes, the align / cs / sr modes and their outputs."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import solve_bpdn, solve_group_sparse
from .config import ExperimentConfig
from .geometry import KERNELS, Grid, TransformModel, TransformParams, WarpOperator
from .metrics import (
    NoiseModel,
    nonzero_fraction,
    registration_error,
    relative_transform,
    snr_db,
)
from .operators import (
    make_blur_downsample_op,
    make_identity_op,
    make_spread_spectrum_op,
    view_rng,
)
from .pgm import read_pgm, write_pgm
from .priors import make_prior
from .scene import SyntheticScene, draw_params, make_scene, rectangle_occlusions, synthetic_reference
from .solver import (
    ConvergenceAssertionError,
    IterationTrace,
    JointProblem,
    SceneEstimate,
    auto_kappa,
    calibrate_gamma_x0,
    run_algorithm1,
)
from .wavelets import WaveletFrame

log = logging.getLogger(__name__)


def make_operators(cfg: ExperimentConfig, grid: Grid):
    if cfg.mode in ("synth", "align"):
        return [make_identity_op(grid.n) for _ in range(cfg.views)]
    if cfg.mode == "cs":
        m = max(1, int(round(cfg.sampling_ratio * grid.n)))
        return [make_spread_spectrum_op(grid, m, cfg.seed, view=j) for j in range(cfg.views)]
    return [make_blur_downsample_op(grid, cfg.factor) for _ in range(cfg.views)]


def load_reference(cfg: ExperimentConfig) -> np.ndarray:
    if cfg.reference:
        img = read_pgm(cfg.reference)
        if img.shape != (cfg.side, cfg.side):
            raise ValueError(f"reference image must be {cfg.side}x{cfg.side}, got {img.shape}")
        return img.ravel()
    return synthetic_reference(cfg.side, cfg.seed, cfg.blobs, cfg.rectangles, cfg.smoothing).ravel()


def synth_scene(cfg: ExperimentConfig) -> SyntheticScene:
    """Deterministic scene for ``cfg``: reference, drawn parameters, occlusions, noise."""
    grid = Grid(cfg.side)
    model = cfg.transform_model
    kernel = KERNELS[cfg.kernel]
    ref = load_reference(cfg)
    thetas = draw_params(
        model, cfg.views, view_rng(cfg.seed, 1), cfg.translation_range, cfg.scale_range,
        cfg.linear_range, cfg.projective_range,
    )
    if cfg.anchor_view and cfg.mode != "synth":
        # view 1 defines the background frame, so its true transform is the identity
        thetas[0] = model.identity
    fg = np.zeros((cfg.views, grid.n))
    if cfg.occlusions > 0:
        rng = view_rng(cfg.seed, 2)
        for j, t in enumerate(thetas):
            warped = WarpOperator(grid, TransformParams(model, t), kernel).apply(ref)
            fg[j] = rectangle_occlusions(grid, warped, cfg.occlusions, rng, (cfg.occlusion_min, cfg.occlusion_max))
    return make_scene(grid, model, thetas, make_operators(cfg, grid), ref, fg, cfg.sigma, cfg.seed, kernel)


def build_problem(cfg: ExperimentConfig, scene: SyntheticScene) -> JointProblem:
    frame = WaveletFrame(cfg.side, cfg.wavelet, cfg.levels or None)
    prior = make_prior(cfg.prior, cfg.side, frame, cfg.prior_weights())
    if cfg.prior == "tv":
        prior.iters = cfg.tv_iters
    return JointProblem(
        scene.grid, scene.operators, scene.y, scene.model, cfg.view_bounds(), prior, frame,
        KERNELS[cfg.kernel],
    )


def upsample_bicubic(low, factor: int) -> np.ndarray:
    """Keys cubic upsampling of a block-averaged image (edge samples replicated)."""
    from .geometry import keys_kernel

    low = np.asarray(low, dtype=float)
    lo = low.shape[0]
    hi = lo * factor
    pos = (np.arange(hi) + 0.5) / factor - 0.5
    base = np.floor(pos).astype(int) - 1
    M = np.zeros((hi, lo))
    for t in range(4):
        idx = base + t
        w = keys_kernel(pos - idx)
        np.add.at(M, (np.arange(hi), np.clip(idx, 0, lo - 1)), w)
    return M @ low @ M.T


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    scene: SyntheticScene
    estimate: SceneEstimate | None
    trace: IterationTrace | None
    metrics: dict = field(default_factory=dict)


def _view_estimates(problem: JointProblem, est: SceneEstimate) -> np.ndarray:
    S = problem.operator(est.thetas)
    return np.stack([S.view_image(est.images, j) for j in range(problem.n_views)])


def trace_checks(trace: IterationTrace, rtol: float = 1e-9) -> dict:
    return {
        "iterations": trace.iterations,
        "L0": trace.L0,
        "L_final": trace.L_final,
        "monotone": trace.monotone(rtol),
        "sufficient_decrease": trace.sufficient_decrease(rtol),
        "telescoping": trace.telescoping(rtol),
        "final_increment": trace.final_increment(),
        "fallbacks": len(trace.events),
    }


def solve_scene(cfg: ExperimentConfig, scene: SyntheticScene):
    """Run the joint solver on ``scene``; returns ``(problem, estimate, trace, info)``."""
    problem = build_problem(cfg, scene)
    sc = cfg.solver_config()
    info = {}
    if cfg.auto_kappa:
        if cfg.sigma <= 0:
            raise ValueError("auto_kappa needs sigma > 0")
        nm = NoiseModel.from_sigma(cfg.sigma, scene.y.size)
        res = auto_kappa(problem, sc, nm.epsilon)
        sc = type(sc)(**{**sc.__dict__, "kappa": res.kappa})
        info.update(epsilon=nm.epsilon, kappa=res.kappa, kappa_probes=len(res.probes),
                    kappa_saturated=res.saturated)
    if cfg.calibrate_gamma_x0:
        g0, r0 = calibrate_gamma_x0(problem, sc)
        sc = type(sc)(**{**sc.__dict__, "gamma_x0": g0})
        info.update(gamma_x0=g0, first_step_residual=r0)
    est, trace = run_algorithm1(problem, sc)
    info["kappa"] = sc.kappa
    return problem, est, trace, info


def evaluate(cfg: ExperimentConfig, scene: SyntheticScene, problem: JointProblem,
             est: SceneEstimate, trace: IterationTrace) -> dict:
    met = dict(trace_checks(trace))
    views = _view_estimates(problem, est)
    snrs = [snr_db(v, t) for v, t in zip(views, scene.views)]
    for j, s in enumerate(snrs):
        met[f"snr_view{j + 1}"] = s
    met["snr_mean"] = float(np.mean(snrs))
    if scene.n_views >= 2:
        sigma, skipped = registration_error(est.thetas, scene.thetas, scene.model, cfg.side, True)
        met["registration_error"] = sigma
        met["registration_pairs_skipped"] = len(skipped)
    r = problem.operator(est.thetas).apply(est.images) - problem.y
    met["residual"] = float(np.linalg.norm(r))
    frame = problem.frame
    if len(trace.rows) > 1:
        met["nnz_fraction_final"] = nonzero_fraction(frame.forward(est.images))
    if cfg.mode == "cs" and cfg.baselines:
        eps = 0.0 if cfg.sigma == 0 else NoiseModel.from_sigma(cfg.sigma, scene.y.size).epsilon
        haar = WaveletFrame(cfg.side, "haar", cfg.levels or None)
        for name, fn in (("bpdn", solve_bpdn), ("group", solve_group_sparse)):
            res = fn(haar, scene.operators, scene.y, eps, max_iter=cfg.baseline_max_iter)
            s = [snr_db(x, t) for x, t in zip(res.images, scene.views)]
            met[f"{name}_snr_mean"] = float(np.mean(s))
        met["advantage_db"] = met["snr_mean"] - met["bpdn_snr_mean"]
    if cfg.mode == "sr":
        lo = cfg.side // cfg.factor
        mse_bic = []
        for j in range(scene.n_views):
            up = upsample_bicubic(scene.y[j].reshape(lo, lo), cfg.factor).ravel()
            mse_bic.append(float(np.mean((up - scene.views[j]) ** 2)))
        met["bicubic_mse_best"] = float(np.min(mse_bic))
        met["sr_mse"] = float(np.mean((views - scene.views) ** 2))
    return met


def write_metrics(path, metrics: dict):
    with open(path, "w") as fh:
        for k, v in metrics.items():
            if isinstance(v, (bool, np.bool_)):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(float(v))
            fh.write(f"{k}={v}\n")


def _register(image, model: TransformModel, theta, grid: Grid, kernel) -> np.ndarray:
    """Resample a view into the background frame using ``tau_theta^{-1}``."""
    inv = relative_transform(model, model.identity, theta, grid.side)
    return WarpOperator(grid, TransformParams(model, inv), kernel).apply(image)


def write_outputs(cfg: ExperimentConfig, result: ExperimentResult, out: Path):
    scene, est = result.scene, result.estimate
    side = cfg.side
    out.mkdir(parents=True, exist_ok=True)
    write_pgm(out / "reference.pgm", scene.reference.reshape(side, side))
    if scene.y.shape[1] == scene.grid.n:
        raw = scene.y
    else:
        raw = scene.views
    write_pgm(out / "unregistered_overlay.pgm", raw.mean(axis=0).reshape(side, side))
    params = ["view," + ",".join(f"true{i}" for i in range(scene.model.n_params))]
    if est is None:
        for j, v in enumerate(scene.views):
            write_pgm(out / f"view_{j + 1}.pgm", v.reshape(side, side))
    else:
        kernel = KERNELS[cfg.kernel]
        write_pgm(out / "background.pgm", est.background.reshape(side, side))
        reg = []
        for j in range(scene.n_views):
            # foregrounds are signed; store them offset by one half
            write_pgm(out / f"foreground_{j + 1}.pgm", 0.5 + est.foreground(j).reshape(side, side))
            reg.append(_register(raw[j], scene.model, est.thetas[j], scene.grid, kernel))
        write_pgm(out / "registered_overlay.pgm", np.mean(reg, axis=0).reshape(side, side))
        params[0] += "," + ",".join(f"est{i}" for i in range(scene.model.n_params))
    for j in range(scene.n_views):
        vals = list(scene.thetas[j])
        if est is not None:
            vals += list(est.thetas[j])
        params.append(f"{j + 1}," + ",".join(repr(float(v)) for v in vals))
    (out / "params.csv").write_text("\n".join(params) + "\n")
    write_metrics(out / "metrics.txt", result.metrics)
    if result.trace is not None:
        trace_path = Path(cfg.trace) if cfg.trace else out / "trace.csv"
        result.trace.to_csv(trace_path, timing=cfg.timing)


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> ExperimentResult:
    """Generate the scene for ``cfg``, solve it and (optionally) write artifacts to ``cfg.out``."""
    scene = synth_scene(cfg)
    out = Path(cfg.out)
    if cfg.mode == "synth":
        result = ExperimentResult(cfg, scene, None, None, {"views": scene.n_views})
        if write:
            write_outputs(cfg, result, out)
        return result
    try:
        problem, est, trace, info = solve_scene(cfg, scene)
    except ConvergenceAssertionError as exc:
        if write and exc.trace is not None:
            out.mkdir(parents=True, exist_ok=True)
            exc.trace.to_csv(out / "trace_failed.csv", timing=cfg.timing)
            (out / "failure.txt").write_text(f"{exc}\nevents={exc.trace.events}\n")
        raise
    metrics = evaluate(cfg, scene, problem, est, trace)
    metrics.update(info)
    result = ExperimentResult(cfg, scene, est, trace, metrics)
    if write:
        write_outputs(cfg, result, out)
    return result
