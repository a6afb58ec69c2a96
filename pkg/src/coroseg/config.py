"""Pipeline configuration: flat key = value files with CLI overrides."""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass

from .errors import DataError, UsageError
from .levelset import EvolutionParams
from .vesselness import FrangiParams


@dataclass
class PipelineConfig:
    input: str = ""
    out_dir: str = "out"
    # seed detection
    cr: float = 0.5
    tf: float = 0.1
    tgf: float = 0.2
    vt: float | None = None          # None: take the blood model's lower bound
    plane_gap: float = 2.0
    plane_half_extent: float = 6.0
    plane_spacing: float = 0.5
    ray_max: float = 5.0
    gf_pairing: str = "rank"
    seed_point: tuple[int, int, int] | None = None   # manual seed override
    # vesselness
    scales: tuple[float, ...] = (1.0, 1.5, 2.0, 2.5)
    alpha: float = 0.5
    beta: float = 0.5
    c: float | None = None
    gamma: float = 1.0
    edge_suppress: float | None = None
    edge_scale: float = 1.0
    edge_gain: float = 1.0
    # blood model
    blood_mu: float | None = None
    blood_sigma: float | None = None
    hu_lo: float | None = None
    hu_hi: float | None = None
    aorta_z_band: float = 0.25
    bin_width: float = 8.0
    # level-set evolution
    energy: str = "chan_vese_localized"
    ball_radius: float = 4.0
    lambda_weight: float = 0.2
    dt: float = 0.25
    eps: float = 1.5
    max_iters: int = 300
    conv_tol: float = 0.001
    band: int = 6
    reinit_every: int = 10
    t_v: float = 0.0
    seed_radius: float = 1.5
    capture_radius: float = 4.0
    # skeleton and reformation
    n_branches: int = 4
    speed_exponent: float = 4.0
    branch_floor: float = 5.0
    cpr_half_extent: float = 10.0
    cpr_spacing: float = 0.25

    def frangi_params(self) -> FrangiParams:
        try:
            return FrangiParams(alpha=self.alpha, beta=self.beta, c=self.c,
                                scales=self.scales, gamma=self.gamma)
        except DataError as exc:
            raise UsageError(str(exc)) from exc

    def evolution_params(self, hu_gate=None) -> EvolutionParams:
        try:
            return EvolutionParams(
                energy=self.energy, lambda_weight=self.lambda_weight,
                ball_radius=self.ball_radius, dt=self.dt, eps=self.eps,
                max_iters=self.max_iters, conv_tol=self.conv_tol,
                band=self.band, reinit_every=self.reinit_every,
                hu_gate=hu_gate, t_v=self.t_v, seed_radius=self.seed_radius,
                capture_radius=self.capture_radius)
        except DataError as exc:
            raise UsageError(str(exc)) from exc

    def validate(self) -> "PipelineConfig":
        if not 0.0 < self.cr < 1.0:
            raise UsageError(f"cr must lie in (0, 1), got {self.cr}")
        if self.gf_pairing not in ("rank", "direction"):
            raise UsageError("gf_pairing must be 'rank' or 'direction'")
        if not 0.0 < self.aorta_z_band <= 1.0:
            raise UsageError("aorta_z_band must lie in (0, 1]")
        if (self.blood_mu is None) != (self.blood_sigma is None):
            raise UsageError("blood_mu and blood_sigma must be given together")
        if (self.hu_lo is None) != (self.hu_hi is None):
            raise UsageError("hu_lo and hu_hi must be given together")
        self.frangi_params()
        self.evolution_params()
        return self


_HINTS = typing.get_type_hints(PipelineConfig)


def _coerce(name: str, raw: str):
    """Parse one key = value string into the field's declared type."""
    hint = _HINTS[name]
    optional = typing.get_origin(hint) is typing.Union
    if optional:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if raw.strip().lower() in ("none", ""):
            return None
        hint = args[0]
    origin = typing.get_origin(hint)
    try:
        if origin is tuple:
            parts = [p for p in raw.replace(",", " ").split() if p]
            elem = typing.get_args(hint)[0]
            return tuple(elem(p) for p in parts)
        if hint is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return hint(raw.strip())
    except (TypeError, ValueError) as exc:
        raise UsageError(f"malformed value for {name}: {raw!r}") from exc


def parse_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Defaults, updated from a flat key = value file, then from overrides."""
    values: dict = {}
    if path is not None:
        path = os.fspath(path)
        if not os.path.isfile(path):
            raise UsageError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise UsageError(f"{path}:{lineno}: expected key = value")
                key, raw = (s.strip() for s in line.split("=", 1))
                if key not in _HINTS:
                    raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
                values[key] = _coerce(key, raw)
    for key, raw in (overrides or {}).items():
        if key not in _HINTS:
            raise UsageError(f"unknown config key {key!r}")
        values[key] = _coerce(key, raw) if isinstance(raw, str) else raw
    return PipelineConfig(**values).validate()


def serialize_config(cfg: PipelineConfig) -> str:
    """Canonical text form; parse(serialize(cfg)) reproduces cfg exactly."""
    lines = []
    for f in sorted(dataclasses.fields(cfg), key=lambda f: f.name):
        value = getattr(cfg, f.name)
        if value is None:
            text = "none"
        elif isinstance(value, tuple):
            text = " ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"
