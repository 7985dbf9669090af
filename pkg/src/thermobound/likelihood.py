"""Probability-flow NLL, entropy terms, and the entropy-rate lower bound.

All quantities are in nats unless a name ends in ``_bpd``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import integrate

from . import kernels
from .data import DatasetSpec, data_entropy
from .process import DiffusionProcess
from .quadrature import SQRT, TimeGrid, mean_and_stderr, trapezoid, warp, warp_derivative
from .scorefield import ScoreField


class LikelihoodError(RuntimeError):
    pass


class NonFiniteState(LikelihoodError):
    def __init__(self, trajectory: int, t: float):
        super().__init__(f"non-finite ODE state in trajectory {trajectory} at t={t:.6g}")
        self.trajectory = trajectory
        self.t = t


def to_bpd(nats: float, d: int) -> float:
    return nats / (d * math.log(2.0))


def entropy_S0(data: DatasetSpec) -> float:
    return data_entropy(data)


def entropy_S1(proc: DiffusionProcess) -> float:
    """Entropy of the Gaussian equilibrium N(0, prior_variance * I)."""
    return 0.5 * proc.dim * math.log(2.0 * math.pi * math.e * proc.prior_variance())


def marginal_entropy(data: DatasetSpec, proc: DiffusionProcess, t: float = 1.0) -> float:
    """Differential entropy of the forward marginal p_t for the given data.

    Gaussian data: closed form. Uniform data: one-dimensional quadrature of
    -p log p per coordinate. At t = 1 this is the entropy the true-score
    identity needs; it exceeds ``entropy_S1`` by the data's residual spread.
    """
    data.check_process(proc)
    if t == 0.0:
        return entropy_S0(data)
    alpha, var = proc.marginal(t)
    if data.is_gaussian:
        cov = alpha * alpha * data.cov + var * np.eye(data.d)
        _, logdet = np.linalg.slogdet(cov)
        return 0.5 * (data.d * math.log(2.0 * math.pi * math.e) + logdet)
    s = math.sqrt(var)

    def integrand(x):
        logp = float(kernels.uniform_log_density(np.array([x]), s)[0])
        return -math.exp(logp) * logp

    lo, hi = -12.0 * s, 1.0 + 12.0 * s
    pts = [p for p in (0.0, 1.0) if lo < p < hi]
    h1, _ = integrate.quad(integrand, lo, hi, points=pts, limit=400, epsabs=1e-12, epsrel=1e-12)
    return data.d * h1


# ---------------------------------------------------------------------------
# probability-flow ODE


@dataclass(frozen=True)
class ODEConfig:
    steps: int = 256
    t_min: float = 1e-4
    t_max: float = 1.0 - 1e-4
    spacing: str = SQRT
    probe_seed: int = 0


@dataclass
class NLLResult:
    nll: float
    stderr: float
    per_sample: np.ndarray = field(repr=False)
    d: int = 1

    @property
    def nll_bpd(self) -> float:
        return to_bpd(self.nll, self.d)

    def __iter__(self):
        yield self.nll
        yield self.stderr


def pf_ode_log_likelihood(field: ScoreField, proc: DiffusionProcess, x0: np.ndarray,
                          ode: ODEConfig = ODEConfig()) -> np.ndarray:
    """log p_theta(x0) per row, by RK4 on the probability-flow ODE.

    Steps are uniform in a warped clock u with t = warp(u), so the sqrt
    spacing resolves the fast dynamics right after t_min.
    """
    x = np.array(x0, dtype=np.float64, copy=True)
    n = x.shape[0]
    delta = np.zeros(n)
    h = 1.0 / ode.steps

    def rhs(y, u, k, stage):
        t = float(warp(u, ode.t_min, ode.t_max, ode.spacing))
        dtdu = float(warp_derivative(u, ode.t_min, ode.t_max, ode.spacing))
        g2 = float(proc.g_squared(t))
        vel = proc.drift(y, t) - 0.5 * g2 * field.evaluate(y, t)
        rng = None if field.exact_divergence else np.random.default_rng([ode.probe_seed, k, stage])
        div = proc.drift_divergence(t) - 0.5 * g2 * field.divergence(y, t, rng)
        return vel * dtdu, div * dtdu

    for k in range(ode.steps):
        u = k * h
        k1x, k1d = rhs(x, u, k, 0)
        k2x, k2d = rhs(x + 0.5 * h * k1x, u + 0.5 * h, k, 1)
        k3x, k3d = rhs(x + 0.5 * h * k2x, u + 0.5 * h, k, 2)
        k4x, k4d = rhs(x + h * k3x, u + h, k, 3)
        x = x + (h / 6.0) * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
        delta = delta + (h / 6.0) * (k1d + 2.0 * k2d + 2.0 * k3d + k4d)
        bad = ~np.all(np.isfinite(x), axis=1) | ~np.isfinite(delta)
        if bad.any():
            raise NonFiniteState(int(np.flatnonzero(bad)[0]), float(warp((k + 1) * h, ode.t_min, ode.t_max, ode.spacing)))
    return proc.prior_log_density(x) + delta


def nll_ode(field: ScoreField, data: DatasetSpec, proc: DiffusionProcess, ode: ODEConfig = ODEConfig(),
            batch: int = 4096, seed: int = 0, control_variate: bool = True) -> NLLResult:
    """-E_data log p_theta(x0) in nats.

    With ``control_variate`` and Gaussian data, the per-sample value is
    S0 - log p_theta(x0) + log p_data(x0): same expectation, and the sampling
    noise of the data's own log-density drops out.
    """
    data.check_process(proc)
    x0 = data.sample(batch, np.random.default_rng([seed, 0xDA7A]))
    per_sample = -pf_ode_log_likelihood(field, proc, x0, ode)
    if control_variate and data.is_gaussian:
        per_sample = per_sample + data.log_density(x0) + entropy_S0(data)
    nll, err = mean_and_stderr(per_sample)
    return NLLResult(nll, err, per_sample, proc.dim)


# ---------------------------------------------------------------------------
# Monte-Carlo integrals over the time grid


@dataclass
class GridPass:
    """Per-node batch means (and stderrs) of score norms on shared draws."""

    grid: TimeGrid
    g2: np.ndarray
    drift_div: np.ndarray
    theta_sq: np.ndarray
    theta_sq_err: np.ndarray
    true_sq: np.ndarray | None = None
    true_sq_err: np.ndarray | None = None
    cross: np.ndarray | None = None
    cross_err: np.ndarray | None = None
    diff_sq: np.ndarray | None = None
    diff_sq_err: np.ndarray | None = None

    def half_weighted(self, values, errs):
        """1/2 sum_k g_k^2 dt_k values_k with propagated stderr."""
        return trapezoid(0.5 * self.grid.weights * self.g2, values, errs)


def grid_pass(field: ScoreField, data: DatasetSpec, proc: DiffusionProcess, grid: TimeGrid, batch: int,
              seed: int = 0, truth: ScoreField | None = None, common_draws: bool = False) -> GridPass:
    """Evaluate score norms at every grid node on x_t = a x0 + sqrt(v) z draws.

    With ``common_draws`` the same (x0, z) pairs are reused at every node,
    which makes the estimate a smooth function of t (useful for studying
    quadrature error); otherwise each node gets independent draws.
    """
    if batch < 1:
        raise LikelihoodError("empty batch")
    data.check_process(proc)
    if truth is not None and truth.proc != proc:
        raise LikelihoodError("field and truth are defined against different processes")
    times = grid.nodes
    m = len(times)
    out = {k: np.zeros(m) for k in ("theta_sq", "theta_sq_err")}
    if truth is not None:
        for k in ("true_sq", "cross", "diff_sq"):
            out[k] = np.zeros(m)
            out[k + "_err"] = np.zeros(m)
    if common_draws:
        rng = np.random.default_rng([seed, 0xC0])
        x0_c, z_c = data.sample(batch, rng), rng.standard_normal((batch, proc.dim))
    for k, t in enumerate(times):
        t = float(t)
        if common_draws:
            x0, z = x0_c, z_c
        else:
            rng = np.random.default_rng([seed, k])
            x0, z = data.sample(batch, rng), rng.standard_normal((batch, proc.dim))
        alpha, var = proc.marginal(t)
        x = alpha * x0 + math.sqrt(var) * z
        s = field.evaluate(x, t)
        out["theta_sq"][k], out["theta_sq_err"][k] = mean_and_stderr(np.sum(s * s, axis=1))
        if truth is not None:
            st = truth.evaluate(x, t)
            out["true_sq"][k], out["true_sq_err"][k] = mean_and_stderr(np.sum(st * st, axis=1))
            out["cross"][k], out["cross_err"][k] = mean_and_stderr(np.sum(s * st, axis=1))
            diff = s - st
            out["diff_sq"][k], out["diff_sq_err"][k] = mean_and_stderr(np.sum(diff * diff, axis=1))
    g2 = np.asarray(proc.g_squared(times), dtype=np.float64)
    ddiv = np.array([proc.drift_divergence(float(t)) for t in times])
    return GridPass(grid, g2, ddiv, **out)


def integral_I_theta(field: ScoreField, data: DatasetSpec, proc: DiffusionProcess, grid: TimeGrid | None = None,
                     batch: int = 4096, seed: int = 0, common_draws: bool = False) -> tuple[float, float]:
    """1/2 int g^2 E|s_theta|^2 dt by trapezoid over batch means."""
    gp = grid_pass(field, data, proc, grid or TimeGrid(), batch, seed, common_draws=common_draws)
    return gp.half_weighted(gp.theta_sq, gp.theta_sq_err)


def _i_diff_from_pass(gp: GridPass):
    direct = gp.half_weighted(gp.diff_sq, gp.diff_sq_err)
    polar_vals = gp.theta_sq + gp.true_sq - 2.0 * gp.cross
    polar_errs = np.sqrt(gp.theta_sq_err**2 + gp.true_sq_err**2 + 4.0 * gp.cross_err**2)
    polarized = gp.half_weighted(polar_vals, polar_errs)
    return direct, polarized


def integral_I_diff(field: ScoreField, truth: ScoreField, data: DatasetSpec, proc: DiffusionProcess,
                    grid: TimeGrid | None = None, batch: int = 4096, seed: int = 0):
    """Returns ``(direct, polarized)``, each a ``(value, stderr)`` pair."""
    gp = grid_pass(field, data, proc, grid or TimeGrid(), batch, seed, truth=truth)
    return _i_diff_from_pass(gp)


def drift_divergence_integral(proc: DiffusionProcess, grid: TimeGrid) -> float:
    return float(np.dot(grid.weights, [proc.drift_divergence(float(t)) for t in grid.nodes]))


# ---------------------------------------------------------------------------
# bound report


@dataclass
class BoundReport:
    d: int
    S0: float
    S1: float  # entropy of the terminal marginal p_1
    S1_equilibrium: float  # closed-form N(0, prior_variance I) entropy
    I_theta: float
    I_theta_err: float
    drift_div_integral: float
    system_integral: float
    system_integral_err: float
    nll_ode: float
    nll_ode_err: float
    bound: float
    gap: float
    gap_err: float
    clip_residual: float
    I_diff: float | None = None
    I_diff_err: float | None = None
    I_diff_polarization: float | None = None
    I_diff_polarization_err: float | None = None
    nll_decomposition: float | None = None
    nll_decomposition_err: float | None = None
    consistency_residual: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def bound_holds(self) -> bool:
        """gap >= -4 combined stderr."""
        return bool(self.gap >= -4.0 * self.gap_err)

    def recomputed_bound(self) -> float:
        return 0.5 * (self.S0 + self.S1) - 0.5 * self.system_integral

    def in_bpd(self) -> dict:
        keys = ("S0", "S1", "S1_equilibrium", "I_theta", "I_diff", "I_diff_polarization", "nll_ode", "nll_decomposition",
                "bound", "gap")
        return {k: (None if getattr(self, k) is None else to_bpd(getattr(self, k), self.d)) for k in keys}

    def to_dict(self) -> dict:
        out = asdict(self)
        out["bpd"] = self.in_bpd()
        out["bound_holds"] = self.bound_holds
        return out


def bound_and_gap(field: ScoreField, data: DatasetSpec, proc: DiffusionProcess, grid: TimeGrid | None = None,
                  batch: int = 4096, seed: int = 0, ode: ODEConfig | None = None,
                  truth: ScoreField | None = None, nll_batch: int | None = None) -> BoundReport:
    """Assemble S0, S1, the entropy-rate integral, the ODE NLL, and the bound.

    bound = (S0 + S1)/2 - 1/2 int Sdot_theta, with Sdot_theta = E[div f] +
    (g^2/2) E|s_theta|^2 and S1 the entropy of the terminal marginal. When
    ``truth`` is given, the decomposition NLL = bound + I_diff/2 is
    assembled as well.
    """
    grid = grid or TimeGrid()
    ode = ode or ODEConfig(t_min=grid.t_min, t_max=grid.t_max)
    S0, S1 = entropy_S0(data), marginal_entropy(data, proc, 1.0)
    gp = grid_pass(field, data, proc, grid, batch, seed, truth=truth)
    i_theta, i_theta_err = gp.half_weighted(gp.theta_sq, gp.theta_sq_err)
    div_int = drift_divergence_integral(proc, grid)
    sys_int, sys_err = div_int + i_theta, i_theta_err
    bound = 0.5 * (S0 + S1) - 0.5 * sys_int
    nll = nll_ode(field, data, proc, ode, batch=nll_batch or batch, seed=seed)
    gap = nll.nll - bound
    gap_err = math.sqrt(nll.stderr**2 + (0.5 * sys_err) ** 2)

    # integrand mass lost to clipping, by rectangle rule at the clipped ends
    w = gp.g2 * gp.theta_sq
    clip = 0.5 * (w[0] * grid.t_min + w[-1] * (1.0 - grid.t_max))

    report = BoundReport(
        d=proc.dim, S0=S0, S1=S1, S1_equilibrium=entropy_S1(proc), I_theta=i_theta, I_theta_err=i_theta_err, drift_div_integral=div_int,
        system_integral=sys_int, system_integral_err=sys_err, nll_ode=nll.nll, nll_ode_err=nll.stderr,
        bound=bound, gap=gap, gap_err=gap_err, clip_residual=float(clip),
        meta={"grid": grid.to_dict(), "batch": batch, "seed": seed, "ode_steps": ode.steps,
              "process": proc.to_dict(), "data": data.to_dict(), "field": field.variant},
    )
    if truth is not None:
        (idiff, idiff_err), (ipol, ipol_err) = _i_diff_from_pass(gp)
        report.I_diff, report.I_diff_err = idiff, idiff_err
        report.I_diff_polarization, report.I_diff_polarization_err = ipol, ipol_err
        dec = 0.5 * (S0 + S1) - 0.5 * div_int - 0.5 * i_theta + 0.5 * idiff
        # same draws feed I_theta and I_diff, so combine their errors linearly
        report.nll_decomposition = dec
        report.nll_decomposition_err = 0.5 * (i_theta_err + idiff_err)
        report.consistency_residual = abs(nll.nll - dec)
    return report


def true_score_identity(truth: ScoreField, data: DatasetSpec, proc: DiffusionProcess, grid: TimeGrid | None = None,
                        batch: int = 4096, seed: int = 0):
    """Both sides of int (g^2/2) E|s_true|^2 dt = (S1 - S0) - int E[div f] dt.

    Returns ``(lhs, lhs_err, rhs)``. S1 and S0 are the entropies of the
    marginals at the clipped grid ends, so clipping does not enter the check.
    """
    grid = grid or TimeGrid()
    lhs, err = integral_I_theta(truth, data, proc, grid, batch, seed)
    rhs = (marginal_entropy(data, proc, grid.t_max) - marginal_entropy(data, proc, grid.t_min)
           - drift_divergence_integral(proc, grid))
    return lhs, err, rhs


__all__ = [
    "BoundReport", "DatasetSpec", "GridPass", "LikelihoodError", "NLLResult", "NonFiniteState", "ODEConfig",
    "bound_and_gap", "drift_divergence_integral", "entropy_S0", "entropy_S1", "grid_pass", "integral_I_diff",
    "integral_I_theta", "marginal_entropy", "nll_ode", "pf_ode_log_likelihood", "to_bpd", "true_score_identity",
]
