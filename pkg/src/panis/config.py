"""Run configuration: a flat key-value text format with named presets.

Files contain ``key = value`` lines; ``#`` starts a comment. Every default
is overridable, and the effective configuration is echoed verbatim into
each output container so results are reproducible from the artifact alone.

A note on ``lambda``: it is the precision of the virtual likelihood. A
reasonable guideline is to set 1/lambda equal to the tolerance one would
give a deterministic iterative solver for the same PDE. The sampling count
``samples_per_step``, the ADAM settings and the convergence rule are this
package's defaults; the source method leaves them unspecified.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .errors import ConfigError

__all__ = ["Config", "parse_config", "load_config", "PRESETS", "preset_config"]


@dataclass
class Config:
    mode: str = "panis"  # panis | mpanis
    # microstructure
    grid_resolution: int = 129  # pixels per side of c (and quadrature points)
    input_dim: int = 1024  # KLE truncation d_x
    length_scale: float = 0.25
    volume_fraction: float = 0.5
    contrast_ratio: float = 10.0
    # PDE
    source: float = 100.0
    bc: str = "zero"  # zero | const:<v> | sin
    alpha: float = 0.0
    u_bar: float = 0.0
    # discretizations
    trial_side: int = 64  # d_y = trial_side^2
    weight_side: int = 17  # N = weight_side^2
    quad_points: int = 0  # quadrature points per side; 0 = match grid_resolution
    coarse_elements: int = 16  # squares per side of the coarse mesh
    coarse_input_mode: str = "nodal"  # nodal | element_pairs
    # training
    lam: float = 1.0e4
    subsample: int = 100  # M
    samples_per_step: int = 8  # R
    atom_count: int = 100  # K (multiscale)
    cov_rank: int = 10  # d'
    cov_space: str = "coarse"  # coarse | fine
    prior_variance: float = 1.0e16
    learning_rate: float = 1.0e-3
    final_lr_fraction: float = 1.0  # cosine decay floor; 1 = constant rate
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1.0e-8
    max_steps: int = 5000
    convergence_window: int = 200
    convergence_tol: float = 1.0e-3
    temper_ramp_fraction: float = 0.5  # alpha ramps 0 -> alpha over this share of steps
    x_floor: float = 1.0e-6
    fluctuations: bool = True
    fluctuation_boundary_tol: float = 0.2
    fluctuation_lr_scale: float = 1.0  # extra ADAM rate on the atom fluctuations
    fluctuation_init: str = "fit"  # fit | zero: seed y_f from its linear subproblem
    init_sigma: float = 0.1
    # solvers
    newton_tol: float = 1.0e-10
    newton_max_iter: int = 50
    # validation
    fine_resolution: int = 129  # reference mesh nodes per side
    validation_count: int = 100  # N_v
    # bookkeeping
    seed: int = 0
    log_every: int = 50
    snapshot_every: int = 200

    @property
    def n_weights(self) -> int:
        return self.weight_side**2

    @property
    def d_y(self) -> int:
        return self.trial_side**2

    def validate(self) -> "Config":
        if self.mode not in ("panis", "mpanis"):
            raise ConfigError(f"mode must be panis or mpanis, got {self.mode!r}")
        if self.lam <= 0:
            raise ConfigError(f"lambda must be positive, got {self.lam}")
        if not 1 <= self.subsample <= self.n_weights:
            raise ConfigError(
                f"subsample M={self.subsample} must lie in [1, N={self.n_weights}]")
        if self.prior_variance <= 0:
            raise ConfigError("prior_variance must be positive")
        if not 0 < self.volume_fraction < 1:
            raise ConfigError("volume_fraction must be in (0, 1)")
        if self.contrast_ratio <= 0:
            raise ConfigError("contrast_ratio must be positive")
        if self.input_dim > self.grid_resolution**2:
            raise ConfigError("input_dim exceeds the pixel count of the grid")
        if self.cov_rank >= (self.coarse_elements + 1) ** 2:
            raise ConfigError("cov_rank must be smaller than the coarse dimension")
        if self.cov_space not in ("coarse", "fine"):
            raise ConfigError(f"cov_space must be coarse or fine, got {self.cov_space!r}")
        if self.coarse_input_mode not in ("nodal", "element_pairs"):
            raise ConfigError(f"unknown coarse_input_mode {self.coarse_input_mode!r}")
        if not (self.bc in ("zero", "sin") or self.bc.startswith("const:")):
            raise ConfigError(f"unknown bc {self.bc!r} (zero | const:<v> | sin)")
        if self.mode == "mpanis" and self.atom_count < 1:
            raise ConfigError("multiscale mode needs at least one atom")
        return self

    def effective_text(self) -> str:
        lines = [f"{_key_name(f.name)} = {_format(getattr(self, f.name))}"
                 for f in fields(self)]
        return "\n".join(lines) + "\n"


def _key_name(field_name: str) -> str:
    return "lambda" if field_name == "lam" else field_name


def _field_name(key: str) -> str:
    return "lam" if key == "lambda" else key


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


# Full-scale defaults mirror the published setups; desk presets are scaled
# so the whole pipeline runs in minutes on a CPU.
PRESETS: dict[str, dict] = {
    "panis-full": {},
    "mpanis-full": {
        "mode": "mpanis",
        "length_scale": 0.05,
        "coarse_elements": 8,
        "weight_side": 64,
        "lam": 10**2.2,
        "subsample": 1500,
        "atom_count": 100,
    },
    "panis-full-nonlinear": {
        "alpha": 0.05,
        "u_bar": 5.0,
        "subsample": 200,
    },
    "panis-desk": {
        "grid_resolution": 33,
        "input_dim": 64,
        "trial_side": 24,
        "weight_side": 9,
        "quad_points": 65,
        "coarse_elements": 8,
        "subsample": 64,
        "samples_per_step": 4,
        "max_steps": 3000,
        "learning_rate": 2.0e-3,
        "final_lr_fraction": 0.05,
        "fine_resolution": 65,
        "validation_count": 50,
    },
    "panis-desk-nonlinear": {
        "grid_resolution": 33,
        "input_dim": 64,
        "trial_side": 24,
        "weight_side": 9,
        "quad_points": 65,
        "coarse_elements": 8,
        "subsample": 64,
        "samples_per_step": 4,
        "max_steps": 3000,
        "learning_rate": 2.0e-3,
        "final_lr_fraction": 0.05,
        "fine_resolution": 65,
        "validation_count": 50,
        "alpha": 0.05,
        "u_bar": 5.0,
    },
    "mpanis-desk": {
        "mode": "mpanis",
        "grid_resolution": 65,
        "input_dim": 256,
        "length_scale": 0.1,
        "trial_side": 32,
        "weight_side": 32,
        "coarse_elements": 8,
        "lam": 10**2.2,
        "subsample": 160,
        "samples_per_step": 4,
        "atom_count": 32,
        "max_steps": 2000,
        "learning_rate": 2.0e-3,
        "final_lr_fraction": 0.05,
        "fine_resolution": 129,
        "validation_count": 32,
    },
}


def preset_config(name: str, **overrides) -> Config:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; known: {sorted(PRESETS)}")
    return replace(Config(), **{**PRESETS[name], **overrides}).validate()


_FIELD_TYPES = {f.name: f.type for f in fields(Config)}


def _coerce(name: str, raw: str):
    ftype = _FIELD_TYPES[name]
    if ftype == "bool":
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from exc
    return raw


def parse_config(text: str, **overrides) -> Config:
    """Parse ``key = value`` lines; a ``preset`` line seeds the defaults."""
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {body!r}")
        key, _, raw = body.partition("=")
        pairs[key.strip()] = raw.strip()

    base = Config()
    if "preset" in pairs:
        name = pairs.pop("preset")
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; known: {sorted(PRESETS)}")
        base = replace(base, **PRESETS[name])

    values = {}
    for key, raw in pairs.items():
        fname = _field_name(key)
        if fname not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        values[fname] = _coerce(fname, raw)
    values.update(overrides)
    return replace(base, **values).validate()


def load_config(path, **overrides) -> Config:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, **overrides)
