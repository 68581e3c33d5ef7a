"""Stochastic variational inference for the surrogate.

Each step draws a handful of weight-function indices, input samples (or
atoms) and reparametrization noise, estimates the ELBO

    F = -lambda N/(M R) sum_{m,r} |r_{j_m}(y_r, x_r)|
        - 1/(2 R sigma_prior^2) sum_r |y_r|^2  + 0.5 log det Sigma

and ascends it with ADAM. Gradients flow through |r| by subgradient
(sign(0) = 0), through the samples by reparametrization, through the coarse
solve by one adjoint solve per sample and through the property map by the
network's backward pass. The nonlinear law is tempered by ramping alpha
from zero during the first part of the run.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import fem, network, surrogate
from .errors import ConfigError, NumericalError
from .fem import ConstitutiveLaw
from .microstructure import sample_field
from .residuals import subsample_residuals
from .surrogate import SurrogateState, mean_solve, sample_posterior

__all__ = [
    "TrainSettings",
    "TemperSchedule",
    "temper_alpha",
    "StepDraws",
    "ElboTrace",
    "TrainResult",
    "Adam",
    "elbo_and_grads",
    "draw_step",
    "train",
    "gradient_check",
]


@dataclass(frozen=True)
class TemperSchedule:
    """Piecewise-linear ramp of the nonlinearity from 0 to its final value."""

    final_alpha: float
    ramp_steps: int

    def alpha_at(self, step: int) -> float:
        if self.final_alpha == 0.0 or self.ramp_steps <= 0:
            return self.final_alpha
        return self.final_alpha * min(1.0, step / self.ramp_steps)


def temper_alpha(schedule: TemperSchedule, step: int) -> float:
    return schedule.alpha_at(step)


@dataclass
class TrainSettings:
    lam: float  # virtual-likelihood precision; 1/lam ~ solver tolerance
    subsample: int  # M weight functions per step
    r_samples: int  # posterior samples per step (ours, unstated in the source method)
    prior_variance: float = 1e16
    learning_rate: float = 1e-3
    final_lr_fraction: float = 1.0  # cosine decay toward lr * fraction
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_steps: int = 5000
    convergence_window: int = 200
    convergence_tol: float = 1e-3
    temper: TemperSchedule | None = None
    u_bar: float = 0.0
    x_floor: float = 1e-6
    newton_tol: float = 1e-10
    newton_max_iter: int = 50
    snapshot_every: int = 200
    fluctuation_lr_scale: float = 1.0

    def __post_init__(self):
        if self.lam <= 0:
            raise ConfigError(f"lambda must be positive, got {self.lam}")
        if self.prior_variance <= 0:
            raise ConfigError("prior variance must be positive")
        if self.r_samples < 1 or self.subsample < 1:
            raise ConfigError("need at least one sample and one residual per step")


@dataclass
class StepDraws:
    """Frozen randomness for one step: indices, inputs and noise."""

    indices: np.ndarray  # (M,)
    eps1: np.ndarray  # (R, rank)
    eps2: np.ndarray  # (R, dim)
    cfields: list = field(default_factory=list)  # PANIS: per-sample images
    atom_ids: np.ndarray | None = None  # mPANIS: atom index per sample

    @property
    def r_samples(self) -> int:
        return self.eps1.shape[0]


@dataclass
class ElboTrace:
    steps: list = field(default_factory=list)
    elbo: list = field(default_factory=list)
    residual_term: list = field(default_factory=list)
    prior_term: list = field(default_factory=list)
    entropy: list = field(default_factory=list)
    alpha: list = field(default_factory=list)
    clamped: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    def append(self, step, elbo, terms, alpha, clamped, seconds):
        self.steps.append(step)
        self.elbo.append(elbo)
        self.residual_term.append(terms["residual"])
        self.prior_term.append(terms["prior"])
        self.entropy.append(terms["entropy"])
        self.alpha.append(alpha)
        self.clamped.append(clamped)
        self.seconds.append(seconds)

    def to_csv(self, path) -> None:
        header = "step,elbo,residual_term,prior_term,entropy,alpha,clamps,seconds"
        rows = np.column_stack([
            self.steps, self.elbo, self.residual_term, self.prior_term,
            self.entropy, self.alpha, self.clamped, self.seconds,
        ])
        np.savetxt(path, rows, delimiter=",", header=header, comments="")

    def window_means(self, window: int) -> np.ndarray:
        vals = np.asarray(self.elbo)
        n_full = len(vals) // window
        if n_full == 0:
            return np.array([])
        return vals[: n_full * window].reshape(n_full, window).mean(axis=1)


@dataclass
class TrainResult:
    state: SurrogateState
    trace: ElboTrace
    converged: bool = False
    aborted: bool = False
    reason: str = ""
    steps_run: int = 0


class Adam:
    """Plain ADAM ascent over a dict of named arrays."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float | None = None,
             rate_scale: dict | None = None) -> None:
        self.t += 1
        rate = self.lr if lr is None else lr
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        for key in sorted(params):  # fixed order for reproducibility
            g = grads[key]
            if key not in self.m:
                self.m[key] = np.zeros_like(params[key])
                self.v[key] = np.zeros_like(params[key])
            self.m[key] = b1 * self.m[key] + (1 - b1) * g
            self.v[key] = b2 * self.v[key] + (1 - b2) * g * g
            mhat = self.m[key] / corr1
            vhat = self.v[key] / corr2
            scale = rate_scale.get(key, 1.0) if rate_scale else 1.0
            params[key] += rate * scale * mhat / (np.sqrt(vhat) + self.eps)


def parameter_dict(state: SurrogateState) -> dict:
    """Live views of every trainable array, plus log-sigma as a length-1 array."""
    params = {f"psi_x/{k}": v for k, v in state.params.items()}
    params["cov/L"] = state.cov_L
    params["cov/log_sigma"] = np.array([state.log_sigma])
    for i, atom in enumerate(state.atoms):
        params[f"atoms/yf/{i}"] = atom.yf
    return params


def zero_like(params: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


def draw_step(state: SurrogateState, problem, settings: TrainSettings,
              rng: np.random.Generator) -> StepDraws:
    """All randomness of one step, in a fixed draw order."""
    m_sub = settings.subsample
    indices = subsample_residuals(problem.engine.n_weights, m_sub, rng)
    r = settings.r_samples
    rank = state.cov_L.shape[1]
    if state.mode == "panis":
        cfields = [sample_field(problem.microspec, rng=rng).c for _ in range(r)]
        eps1 = rng.standard_normal((r, rank))
        eps2 = rng.standard_normal((r, problem.ops.d_y))
        return StepDraws(indices=indices, eps1=eps1, eps2=eps2, cfields=cfields)
    atom_ids = rng.integers(0, len(state.atoms), size=r)
    eps1 = rng.standard_normal((r, rank))
    eps2 = rng.standard_normal((r, state.cov_L.shape[0]))
    return StepDraws(indices=indices, eps1=eps1, eps2=eps2, atom_ids=atom_ids)


def elbo_and_grads(state: SurrogateState, problem, law: ConstitutiveLaw,
                   draws: StepDraws, settings: TrainSettings, *,
                   want_grads: bool = True, update_running: bool = True):
    """Monte-Carlo ELBO estimate, its term breakdown and parameter gradients."""
    engine, mesh, ops = problem.engine, problem.mesh, problem.ops
    r_count = draws.r_samples
    m_sub = len(draws.indices)
    lam_scale = settings.lam * engine.n_weights / (m_sub * r_count)
    prior_scale = 1.0 / (r_count * settings.prior_variance)

    params = parameter_dict(state)
    grads = zero_like(params) if want_grads else None
    residual_abs = 0.0
    prior_quad = 0.0
    clamp_count = 0

    for r in range(r_count):
        if state.mode == "panis":
            c_field = draws.cfields[r]
            atom = None
        else:
            atom = state.atoms[int(draws.atom_ids[r])]
            c_field = atom.c
        msr = mean_solve(state, c_field, mesh, problem.coarse_bc, problem.source,
                         ops, law, train=True, update_running=update_running,
                         newton_tol=settings.newton_tol,
                         newton_max_iter=settings.newton_max_iter)
        sample = sample_posterior(state, msr, ops, eps1=draws.eps1[r],
                                  eps2=draws.eps2[r], atom=atom, law=law,
                                  x_floor=settings.x_floor,
                                  newton_tol=settings.newton_tol,
                                  newton_max_iter=settings.newton_max_iter)
        batch = engine.eval_batch(draws.indices, sample.y, c_field, law)
        vals = batch.values
        if not np.all(np.isfinite(vals)):
            raise NumericalError(
                f"non-finite residual in step sample {r}: "
                f"max |y| = {np.abs(sample.y).max():.3e}")
        residual_abs += float(np.abs(vals).sum())
        if state.mode == "panis":
            prior_quad += float(sample.y @ sample.y)
        else:
            prior_quad += float(sample.y_c @ sample.y_c + sample.atom.yf @ sample.atom.yf)
        if sample.clamped is not None:
            clamp_count += int(sample.clamped.sum())

        if not want_grads:
            continue
        signs = np.sign(vals)
        dy = batch.pullback(signs) * (-lam_scale)

        if state.mode == "panis":
            dy += -prior_scale * sample.y
            d_big = ops.A.T @ dy
            if state.cov_space == "coarse":
                grads["cov/L"] += np.outer(d_big, draws.eps1[r])
            else:
                grads["cov/L"] += np.outer(dy, draws.eps1[r])
            grads["cov/log_sigma"][0] += state.sigma * float(dy @ draws.eps2[r])
            _backprop_mean(state, mesh, law, msr, msr.model, msr.solution,
                           d_big, grads, settings)
        else:
            dy_c = dy - prior_scale * sample.y_c
            dyf = ops.Aperp.T @ dy - prior_scale * sample.atom.yf
            if state.fluct_free is not None:
                dyf = np.where(state.fluct_free, dyf, 0.0)
            grads[f"atoms/yf/{int(draws.atom_ids[r])}"] += dyf
            d_big = ops.A.T @ dy_c
            d_elem = fem.adjoint_gradient(sample.model, law, sample.solution, d_big)
            d_xp = surrogate.elements_grad_to_input(state, d_elem, mesh)
            d_xp = np.where(sample.clamped, 0.0, d_xp)
            grads["cov/L"] += np.outer(d_xp, draws.eps1[r])
            grads["cov/log_sigma"][0] += state.sigma * float(d_xp @ draws.eps2[r])
            d_net = surrogate.input_grad_to_net(state, d_xp, mesh)
            net_grads = network.backward(state.arch, msr.tape, d_net, state.params)
            for k, v in net_grads.items():
                grads[f"psi_x/{k}"] += v

    entropy = surrogate.log_entropy(state, ops)
    terms = {
        "residual": -lam_scale * residual_abs,
        "prior": -0.5 * prior_scale * prior_quad,
        "entropy": entropy,
    }
    elbo = terms["residual"] + terms["prior"] + terms["entropy"]
    if want_grads:
        d_l, d_ls = surrogate.entropy_gradients(state, ops)
        grads["cov/L"] += d_l
        grads["cov/log_sigma"][0] += d_ls
    diag = {"clamped": clamp_count}
    return elbo, terms, grads, diag


def _backprop_mean(state, mesh, law, msr, model, solution, d_big, grads, settings):
    """Chain a fine-coefficient mean gradient back to the network parameters."""
    d_elem = fem.adjoint_gradient(model, law, solution, d_big)
    d_flat = surrogate.elements_grad_to_input(state, d_elem, mesh)
    d_net = surrogate.input_grad_to_net(state, d_flat, mesh)
    net_grads = network.backward(state.arch, msr.tape, d_net, state.params)
    for k, v in net_grads.items():
        grads[f"psi_x/{k}"] += v


def _snapshot(state: SurrogateState) -> dict:
    snap = {k: v.copy() for k, v in state.params.items()}
    return {
        "params": snap,
        "cov_L": state.cov_L.copy(),
        "log_sigma": state.log_sigma,
        "yf": [a.yf.copy() for a in state.atoms],
        "bn": {k: {kk: vv.copy() for kk, vv in v.items()}
               for k, v in state.bn_state.items()},
    }


def _restore(state: SurrogateState, snap: dict) -> None:
    for k, v in snap["params"].items():
        state.params[k][...] = v
    state.cov_L[...] = snap["cov_L"]
    state.log_sigma = snap["log_sigma"]
    for atom, yf in zip(state.atoms, snap["yf"]):
        atom.yf[...] = yf
    for k, v in snap["bn"].items():
        for kk, vv in v.items():
            state.bn_state[k][kk][...] = vv


def train(state: SurrogateState, problem, settings: TrainSettings,
          rng: np.random.Generator, *, hook=None) -> TrainResult:
    """ADAM ascent on the stochastic ELBO until convergence or step budget.

    Works for both modes: the single-scale stream draws fresh inputs every
    step, the multiscale run subsamples its fixed atoms. Stops when the
    windowed ELBO mean improves by less than the tolerance twice in a row.
    """
    if state.mode == "mpanis" and not state.atoms:
        raise ConfigError("multiscale training requires a fixed atom set")
    adam = Adam(settings.learning_rate, settings.beta1, settings.beta2,
                settings.adam_eps)
    trace = ElboTrace()
    params = parameter_dict(state)
    rate_scale = None
    if settings.fluctuation_lr_scale != 1.0:
        rate_scale = {k: settings.fluctuation_lr_scale
                      for k in params if k.startswith("atoms/")}
    snap = _snapshot(state)
    window_prev = None
    flat_windows = 0
    final_alpha = settings.temper.final_alpha if settings.temper else 0.0

    for step in range(settings.max_steps):
        t0 = time.perf_counter()
        alpha = settings.temper.alpha_at(step) if settings.temper else 0.0
        law = ConstitutiveLaw(alpha=alpha, u_bar=settings.u_bar)
        draws = draw_step(state, problem, settings, rng)
        try:
            elbo, terms, grads, diag = elbo_and_grads(
                state, problem, law, draws, settings)
        except NumericalError as exc:
            _restore(state, snap)
            return TrainResult(state=state, trace=trace, aborted=True,
                               reason=f"step {step}: {exc}", steps_run=step)
        if not np.isfinite(elbo):
            _restore(state, snap)
            return TrainResult(state=state, trace=trace, aborted=True,
                               reason=f"step {step}: ELBO became non-finite",
                               steps_run=step)
        frac = settings.final_lr_fraction
        if frac < 1.0:
            cos = 0.5 * (1 + np.cos(np.pi * step / max(settings.max_steps - 1, 1)))
            rate = settings.learning_rate * (frac + (1 - frac) * cos)
        else:
            rate = settings.learning_rate
        adam.step(params, grads, lr=rate, rate_scale=rate_scale)
        state.log_sigma = float(params["cov/log_sigma"][0])
        if state.mode == "mpanis" and state.fluct_free is not None:
            for atom in state.atoms:
                atom.yf[~state.fluct_free] = 0.0
        trace.append(step, elbo, terms, alpha, diag["clamped"],
                     time.perf_counter() - t0)
        if hook is not None:
            hook(step, state, trace)
        if (step + 1) % settings.snapshot_every == 0:
            snap = _snapshot(state)

        # converge only after tempering has finished ramping
        w = settings.convergence_window
        if (step + 1) % w == 0 and alpha == final_alpha:
            mean_now = float(np.mean(trace.elbo[-w:]))
            if window_prev is not None:
                improve = (mean_now - window_prev) / max(abs(window_prev), 1e-12)
                flat_windows = flat_windows + 1 if improve < settings.convergence_tol else 0
                if flat_windows >= 2:
                    return TrainResult(state=state, trace=trace, converged=True,
                                       steps_run=step + 1)
            window_prev = mean_now
    return TrainResult(state=state, trace=trace, converged=False,
                       steps_run=settings.max_steps)


def gradient_check(state: SurrogateState, problem, law: ConstitutiveLaw,
                   settings: TrainSettings, rng: np.random.Generator, *,
                   n_coords: int = 20, step_size: float = 1e-6,
                   groups: tuple[str, ...] | None = None):
    """Central finite differences against the backpropagated ELBO gradient.

    Randomness (inputs, indices, noise) is frozen across evaluations. Returns
    rows (name, index, analytic, numeric, relative error).
    """
    draws = draw_step(state, problem, settings, rng)
    _, _, grads, _ = elbo_and_grads(state, problem, law, draws, settings,
                                    update_running=False)
    params = parameter_dict(state)
    names = [k for k in sorted(params) if groups is None
             or any(k.startswith(g) for g in groups)]
    gmax = max(np.abs(grads[k]).max() for k in names)
    by_group: dict[str, list] = {}
    for k in names:
        flat = np.abs(grads[k]).ravel()
        group = k.split("/")[0]
        for idx in np.nonzero(flat > 1e-9 * max(gmax, 1.0))[0]:
            by_group.setdefault(group, []).append((k, int(idx)))
    candidates = [c for group in by_group.values() for c in group]
    if len(candidates) < n_coords:
        raise NumericalError(
            f"only {len(candidates)} coordinates carry usable gradient signal")
    # every parameter family is represented, remainder drawn at random
    chosen: list[tuple[str, int]] = []
    for group in sorted(by_group):
        pool = by_group[group]
        take = min(2, len(pool), n_coords - len(chosen))
        for sel in rng.choice(len(pool), size=take, replace=False):
            chosen.append(pool[int(sel)])
    remaining = [c for c in candidates if c not in chosen]
    extra = n_coords - len(chosen)
    if extra > 0:
        for sel in rng.choice(len(remaining), size=min(extra, len(remaining)),
                              replace=False):
            chosen.append(remaining[int(sel)])

    rows = []
    for name, idx in chosen:
        arr = params[name].ravel()
        keep = arr[idx]
        h = step_size * max(1.0, abs(keep))
        arr[idx] = keep + h
        state.log_sigma = float(params["cov/log_sigma"][0])
        f_plus, *_ = elbo_and_grads(state, problem, law, draws, settings,
                                    want_grads=False, update_running=False)
        arr[idx] = keep - h
        state.log_sigma = float(params["cov/log_sigma"][0])
        f_minus, *_ = elbo_and_grads(state, problem, law, draws, settings,
                                     want_grads=False, update_running=False)
        arr[idx] = keep
        state.log_sigma = float(params["cov/log_sigma"][0])
        numeric = (f_plus - f_minus) / (2 * h)
        analytic = float(grads[name].ravel()[idx])
        denom = max(abs(analytic), abs(numeric), 1e-300)
        rows.append((name, idx, analytic, numeric,
                     abs(analytic - numeric) / denom))
    return rows
