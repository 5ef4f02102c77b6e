"""Flat ``key = value`` experiment configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import ParamBounds, TransformModel
from .solver import SolverConfig

MODES = ("synth", "align", "cs", "sr")


@dataclass
class ExperimentConfig:
    mode: str = "align"
    side: int = 64
    views: int = 5
    model: str = "scale_translation"
    kernel: str = "keys"
    # uniform parameter draws: translation in [-dt/2, dt/2], scale in 1 +- ds/2, ...
    translation_range: float = 8.0
    scale_range: float = 0.0
    linear_range: float = 0.0
    projective_range: float = 0.0
    # box constraints (half widths around identity)
    bound_translation: float = 20.0
    bound_scale: float = 0.2
    bound_linear: float = 0.2
    bound_projective: float = 0.01
    anchor_view: bool = True
    # sensing
    sampling_ratio: float = 1.0
    factor: int = 2
    sigma: float = 0.0
    # scene
    reference: str = ""
    occlusions: int = 0
    occlusion_min: int = 4
    occlusion_max: int = 10
    blobs: int = 12
    rectangles: int = 4
    smoothing: float = 1.5
    # priors
    prior: str = "l1"
    wavelet: str = "db4"
    levels: int = 0  # 0: default depth
    bg_weight: float = 1.0
    fg_weight: float = 1.0
    tv_iters: int = 200
    # solver
    kappa: float = 100.0
    auto_kappa: bool = False
    gamma_theta: float = 0.1
    gamma_x_factor: float = 20.0
    gamma_x0: float = 0.0  # > 0 overrides gamma_x_factor * kappa
    calibrate_gamma_x0: bool = False
    gamma_x_decay: float = 0.9
    gamma_x_min: float = 0.1
    mu: float = 1e-10
    k_max: int = 200
    tol_x: float = 1e-5
    tol_theta: float = 1e-6
    inner_tol: float = 1e-8
    inner_max_iter: int = 500
    backtrack_cap: int = 60
    workers: int = 1
    # baselines / output
    baselines: bool = True
    baseline_max_iter: int = 20000
    timing: bool = False
    seed: int = 0
    out: str = "out"
    trace: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.side < 8 or self.side % 2:
            raise ValueError("side must be even and at least 8")
        if self.views < 1:
            raise ValueError("need at least one view")
        TransformModel(self.model)
        if not 0 < self.sampling_ratio <= 1:
            raise ValueError("sampling_ratio must lie in (0, 1]")
        if self.mode == "sr" and self.side % self.factor:
            raise ValueError("side must be divisible by the downsampling factor")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        for name in ("translation", "scale", "linear", "projective"):
            half = getattr(self, f"{name}_range") / 2.0
            bound = getattr(self, f"bound_{name}")
            if half > bound + 1e-12:
                raise ValueError(f"{name} draw interval exceeds its bounds")

    @property
    def transform_model(self) -> TransformModel:
        return TransformModel(self.model)

    def bounds(self) -> ParamBounds:
        m = self.transform_model
        t, s, a, h = self.bound_translation, self.bound_scale, self.bound_linear, self.bound_projective
        half = {
            TransformModel.TRANSLATION: [t, t],
            TransformModel.SCALE_TRANSLATION: [s, t, t],
            TransformModel.AFFINE: [a, a, t, a, a, t],
            TransformModel.HOMOGRAPHY_APPROX: [a, a, t, a, a, t, h, h],
        }[m]
        return ParamBounds.around_identity(m, half)

    def view_bounds(self) -> list[ParamBounds]:
        b = self.bounds()
        out = [b] * self.views
        if self.anchor_view and self.views > 1:
            out[0] = ParamBounds.fixed(self.transform_model)
        return out

    def prior_weights(self) -> np.ndarray:
        return np.array([self.bg_weight] + [self.fg_weight] * self.views)

    def solver_config(self) -> SolverConfig:
        return SolverConfig(
            kappa=self.kappa,
            gamma_theta=self.gamma_theta,
            gamma_x0=self.gamma_x0 if self.gamma_x0 > 0 else None,
            gamma_x_factor=self.gamma_x_factor,
            gamma_x_decay=self.gamma_x_decay,
            gamma_x_min=self.gamma_x_min,
            mu=self.mu,
            k_max=self.k_max,
            tol_x=self.tol_x,
            tol_theta=self.tol_theta,
            inner_tol=self.inner_tol,
            inner_max_iter=self.inner_max_iter,
            backtrack_cap=self.backtrack_cap,
            workers=self.workers,
        )

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in dataclasses.fields(self))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _convert(kind, raw: str):
    raw = raw.strip()
    if kind is bool or kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind is int or kind == "int":
        return int(raw)
    if kind is float or kind == "float":
        return float(raw)
    return raw


def parse_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def apply_overrides(cfg: ExperimentConfig, values: dict) -> ExperimentConfig:
    fields = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    kw = dataclasses.asdict(cfg)
    for key, raw in values.items():
        if key not in fields:
            raise ValueError(f"unknown configuration key {key!r}")
        kw[key] = _convert(fields[key].type, raw) if isinstance(raw, str) else raw
    return ExperimentConfig(**kw)


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    values = parse_text(Path(path).read_text()) if path else {}
    values.update(overrides or {})
    return apply_overrides(cfg, values)


def shipped_config(name: str) -> Path:
    """Path of a config file shipped with the package (``align``, ``cs``, ``sr``, ``synth``)."""
    from importlib.resources import files

    return Path(str(files("mvrecon") / "configs" / f"{name}.cfg"))
