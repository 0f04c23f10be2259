"""Asymptotic order parameters and precision of regularized margin classifiers.

The population is a two-class spiked model: class +/- has mean +/- mu * mu_hat
and covariance sigma^2 (I + sum_k lambda_k v_k v_k^T) with shared orthonormal
spike directions v_k.  In the proportional limit n/p -> alpha the trained
direction behaves like a Gaussian family driven by a handful of scalar order
parameters; this module solves the defining fixed-point equations and turns
the solution into per-class precision predictions.

Two evaluation paths exist for the conjugate-scale closure (``q_rule``):
``"trace"`` enforces q+ = tr(Sigma_+ M^-1)/p (the form implied by the
resolvent family itself) while ``"plain"`` uses the raw residual-correlation
closure q+ lambda / sigma+^2 = 1 + sum alpha G.  The trace rule is the
default; the plain rule is kept as a diagnostic (see
``explicit_form_diagnostic``) and both are arbitrated by the finite-size
Monte Carlo suite.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .gauss import Expectations, QuadratureError, expectations
from .losses import Loss, ProxError

__all__ = [
    "PopulationModel",
    "OrderParams",
    "PrecisionPoint",
    "PrecisionCurve",
    "ResolventError",
    "resolvent_moments",
    "solve_homogeneous",
    "solve_general",
    "predict_precision",
    "sweep_lambda",
    "default_lambda_grid",
    "explicit_form_diagnostic",
]

_RESIDUAL_TOL = 1e-9
_MAX_ITER = 500
_NEWTON_FAIL_CAP = 50
_DEFAULT_Q_RULE = "trace"


class ResolventError(RuntimeError):
    """The resolvent matrix stopped being positive definite (bad iterate)."""


@dataclass(frozen=True)
class PopulationModel:
    """Spiked-population parameters (ground truth or an estimate).

    mu: signal size ||mu|| (nonnegative).
    sigma_plus / sigma_minus: per-class noise levels.
    alpha_plus / alpha_minus: per-class sample ratios n_pm / p.
    lambda_plus / lambda_minus: spike strengths per class (length K).
    R: projections of the spike directions onto the unit signal direction.
    """

    mu: float
    sigma_plus: float
    sigma_minus: float
    alpha_plus: float
    alpha_minus: float
    lambda_plus: tuple[float, ...] = ()
    lambda_minus: tuple[float, ...] = ()
    R: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "lambda_plus", tuple(float(x) for x in self.lambda_plus))
        object.__setattr__(self, "lambda_minus", tuple(float(x) for x in self.lambda_minus))
        object.__setattr__(self, "R", tuple(float(x) for x in self.R))
        if self.mu < 0:
            raise ValueError("mu must be nonnegative")
        if not (self.sigma_plus > 0 and self.sigma_minus > 0):
            raise ValueError("noise levels must be positive")
        if not (self.alpha_plus > 0 and self.alpha_minus > 0):
            raise ValueError("sample ratios must be positive")
        if not len(self.lambda_plus) == len(self.lambda_minus) == len(self.R):
            raise ValueError("lambda_plus, lambda_minus and R must share length K")
        if any(l < 0 for l in self.lambda_plus + self.lambda_minus):
            raise ValueError("spike strengths must be nonnegative")
        if sum(r * r for r in self.R) > 1.0 + 1e-12:
            raise ValueError("sum of R_k^2 exceeds 1")

    @property
    def K(self) -> int:
        return len(self.R)

    @property
    def alpha_total(self) -> float:
        return self.alpha_plus + self.alpha_minus

    @property
    def R_tail(self) -> float:
        return math.sqrt(max(0.0, 1.0 - sum(r * r for r in self.R)))

    @property
    def is_symmetric(self) -> bool:
        return (
            self.sigma_plus == self.sigma_minus
            and self.alpha_plus == self.alpha_minus
            and self.lambda_plus == self.lambda_minus
        )

    def has_symmetric_covariance(self) -> bool:
        return self.sigma_plus == self.sigma_minus and self.lambda_plus == self.lambda_minus

    @classmethod
    def homogeneous(cls, mu, sigma, alpha, lambdas=(), R=()) -> "PopulationModel":
        """Symmetric model from the total sample ratio alpha = n/p."""
        lambdas = tuple(lambdas)
        return cls(
            mu=mu,
            sigma_plus=sigma,
            sigma_minus=sigma,
            alpha_plus=alpha / 2.0,
            alpha_minus=alpha / 2.0,
            lambda_plus=lambdas,
            lambda_minus=lambdas,
            R=tuple(R),
        )

    def swapped(self) -> "PopulationModel":
        """The model with the class roles exchanged."""
        return PopulationModel(
            mu=self.mu,
            sigma_plus=self.sigma_minus,
            sigma_minus=self.sigma_plus,
            alpha_plus=self.alpha_minus,
            alpha_minus=self.alpha_plus,
            lambda_plus=self.lambda_minus,
            lambda_minus=self.lambda_plus,
            R=self.R,
        )

    def to_dict(self) -> dict:
        return {
            "mu": self.mu,
            "sigma_plus": self.sigma_plus,
            "sigma_minus": self.sigma_minus,
            "alpha_plus": self.alpha_plus,
            "alpha_minus": self.alpha_minus,
            "K": self.K,
            "lambda_plus": list(self.lambda_plus),
            "lambda_minus": list(self.lambda_minus),
            "R": list(self.R),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PopulationModel":
        kwargs = {k: data[k] for k in (
            "mu", "sigma_plus", "sigma_minus", "alpha_plus", "alpha_minus")}
        kwargs["lambda_plus"] = data.get("lambda_plus", [])
        kwargs["lambda_minus"] = data.get("lambda_minus", [])
        kwargs["R"] = data.get("R", [])
        model = cls(**kwargs)
        if "K" in data and int(data["K"]) != model.K:
            raise ValueError("model K does not match spike vector lengths")
        return model

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "PopulationModel":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValueError(f"unreadable model file {path}: {exc}") from exc
        return cls.from_dict(data)


@dataclass
class OrderParams:
    """Fixed-point unknowns plus the derived resolvent quantities."""

    q0_plus: float
    q0_minus: float
    q_plus: float
    q_minus: float
    R: float
    w0: float
    xi_plus: float = 0.0
    xi_minus: float = 0.0
    xi0_plus: float = 0.0
    xi0_minus: float = 0.0
    R_hat: float = 0.0
    converged: bool = False
    residual_norm: float = math.inf


@dataclass(frozen=True)
class PrecisionPoint:
    """Per-lambda prediction: precision_pm = Phi((R mu +/- w0)/sqrt(q0_pm))."""

    lam: float
    precision_plus: float
    precision_minus: float
    balanced: float
    order: OrderParams


@dataclass
class PrecisionCurve:
    """Theory curve over a lambda grid with the refined argmax attached."""

    loss: Loss
    model: PopulationModel
    points: list[PrecisionPoint] = field(default_factory=list)
    lambda_star: float = math.nan
    precision_star: float = math.nan

    CSV_HEADER = (
        "lambda,precision_plus,precision_minus,balanced,"
        "q0_plus,q0_minus,q_plus,q_minus,R,w0,converged,residual"
    )

    def csv_rows(self):
        for pt in self.points:
            o = pt.order
            yield (
                f"{pt.lam:.6g},{pt.precision_plus:.6g},{pt.precision_minus:.6g},"
                f"{pt.balanced:.6g},{o.q0_plus:.6g},{o.q0_minus:.6g},{o.q_plus:.6g},"
                f"{o.q_minus:.6g},{o.R:.6g},{o.w0:.6g},{int(o.converged)},"
                f"{o.residual_norm:.6g}"
            )

    def write_csv(self, path) -> None:
        lines = [self.CSV_HEADER]
        lines.extend(self.csv_rows())
        Path(path).write_text("\n".join(lines) + "\n")

    @property
    def n_unconverged(self) -> int:
        return sum(1 for pt in self.points if not pt.order.converged)


def default_lambda_grid(lo: float = 1e-3, hi: float = 1e3, count: int = 50) -> np.ndarray:
    return np.logspace(math.log10(lo), math.log10(hi), count)


def resolvent_moments(model: PopulationModel, xi_plus, xi_minus, xi0_plus, xi0_minus,
                      r_hat, lam):
    """Limiting (q0_plus, q0_minus, R) for given resolvent coefficients.

    The resolvent M = xi+ Sigma+ + xi- Sigma- + lam I is diagonal in the shared
    spike basis with bulk eigenvalue m0 and spike eigenvalues m_k; the moments
    are exact p -> infinity limits of (1/p) E[w^T Sigma_pm w] and E[w^T mu_hat]/sqrt(p)
    for w drawn from the limiting Gaussian family.
    """
    sp2 = model.sigma_plus**2
    sm2 = model.sigma_minus**2
    m0 = xi_plus * sp2 + xi_minus * sm2 + lam
    lam_p = np.asarray(model.lambda_plus)
    lam_m = np.asarray(model.lambda_minus)
    mk = m0 + xi_plus * sp2 * lam_p + xi_minus * sm2 * lam_m
    if m0 <= 0 or np.any(mk <= 0):
        raise ResolventError("resolvent is not positive definite")

    r2 = np.asarray(model.R) ** 2
    tail2 = max(0.0, 1.0 - r2.sum())
    noise = (xi0_plus * sp2 + xi0_minus * sm2) / m0**2

    def q0_for(s2, lam_k):
        spikes = float(np.sum(r2 * (1.0 + lam_k) / mk**2)) if lam_k.size else 0.0
        return s2 * noise + r_hat**2 * s2 * (spikes + tail2 / m0**2)

    q0p = q0_for(sp2, lam_p)
    q0m = q0_for(sm2, lam_m)
    spikes_r = float(np.sum(r2 / mk)) if lam_p.size else 0.0
    r_lim = r_hat * (spikes_r + tail2 / m0)
    return q0p, q0m, r_lim


# ---------------------------------------------------------------------------
# homogeneous (symmetric) system: unknowns (q0, q, R), w0 = 0
# ---------------------------------------------------------------------------


def _check_iterate(x, n_log):
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)) or np.max(np.abs(x[:n_log])) > 300 \
            or np.max(np.abs(x[n_log:])) > 1e8:
        raise ValueError("iterate out of numeric range")


def _homog_state(loss, model, lam, x, q_rule):
    _check_iterate(x, 2)
    q0, q, r = math.exp(x[0]), math.exp(x[1]), x[2]
    sigma2 = model.sigma_plus**2
    alpha = model.alpha_total
    ex = expectations(loss, r * model.mu, math.sqrt(q0), q)
    s = math.sqrt(q0)
    xi = -alpha * ex.G / (s * q)
    xi0 = alpha * ex.H / q**2
    r_hat = alpha * model.mu * ex.F / q
    q0_star, _, r_star = resolvent_moments(model, 0.5 * xi, 0.5 * xi, 0.5 * xi0,
                                           0.5 * xi0, r_hat, lam)
    if q_rule == "trace":
        r3 = q * lam / sigma2 - 1.0 - alpha * ex.G / s
    else:
        r3 = q * lam / sigma2 - 1.0 - alpha * ex.G
    res = np.array([q0 - q0_star, r - r_star, r3])
    return res, ex, (xi, xi0, r_hat)


def _homog_picard(loss, model, lam, x, q_rule):
    _check_iterate(x, 2)
    q0, q, r = math.exp(x[0]), math.exp(x[1]), x[2]
    sigma2 = model.sigma_plus**2
    alpha = model.alpha_total
    ex = expectations(loss, r * model.mu, math.sqrt(q0), q)
    s = math.sqrt(q0)
    g_term = ex.G / s if q_rule == "trace" else ex.G
    q_new = sigma2 * (1.0 + alpha * g_term) / lam
    q_new = max(q_new, 1e-12)
    xi = -alpha * ex.G / (s * q)
    xi0 = alpha * ex.H / q**2
    r_hat = alpha * model.mu * ex.F / q
    q0_star, _, r_star = resolvent_moments(model, 0.5 * xi, 0.5 * xi, 0.5 * xi0,
                                           0.5 * xi0, r_hat, lam)
    target = np.array([math.log(max(q0_star, 1e-300)), math.log(q_new), r_star])
    return 0.5 * x + 0.5 * target


def solve_homogeneous(loss: Loss, model: PopulationModel, lam: float,
                      warm: OrderParams | None = None,
                      q_rule: str = _DEFAULT_Q_RULE) -> OrderParams:
    """Solve the symmetric three-parameter fixed point (w0 = 0).

    The model must have equal noise levels and spike strengths across classes
    (the caller's responsibility); only the total sample ratio enters.
    """
    if not model.has_symmetric_covariance():
        raise ValueError("solve_homogeneous needs sigma_plus == sigma_minus and equal spikes")
    if not lam > 0:
        raise ValueError("lambda must be positive")
    if warm is not None and warm.q0_plus > 0 and warm.q_plus > 0:
        x0 = np.array([math.log(warm.q0_plus), math.log(warm.q_plus), warm.R])
    else:
        sigma2 = model.sigma_plus**2
        x0 = np.array([math.log(sigma2), math.log(sigma2 / max(lam, 1.0)), 0.1])

    def res_fn(x):
        return _homog_state(loss, model, lam, x, q_rule)[0]

    def picard_fn(x):
        return _homog_picard(loss, model, lam, x, q_rule)

    x, norm, ok = _newton_with_picard(res_fn, picard_fn, x0)
    q0, q, r = math.exp(x[0]), math.exp(x[1]), x[2]
    _, ex, (xi, xi0, r_hat) = _homog_state(loss, model, lam, x, q_rule)
    return OrderParams(
        q0_plus=q0, q0_minus=q0, q_plus=q, q_minus=q, R=r, w0=0.0,
        xi_plus=0.5 * xi, xi_minus=0.5 * xi, xi0_plus=0.5 * xi0,
        xi0_minus=0.5 * xi0, R_hat=r_hat, converged=ok, residual_norm=norm,
    )


# ---------------------------------------------------------------------------
# general (heterogeneous) system: unknowns (q0+, q0-, t, R, w0), q_pm = t sigma_pm^2
# ---------------------------------------------------------------------------


def _general_state(loss, model, lam, x, q_rule):
    _check_iterate(x, 3)
    q0p, q0m, t = math.exp(x[0]), math.exp(x[1]), math.exp(x[2])
    r, w0 = x[3], x[4]
    sp2, sm2 = model.sigma_plus**2, model.sigma_minus**2
    qp, qm = t * sp2, t * sm2
    ap, am = model.alpha_plus, model.alpha_minus
    mu = model.mu
    ep = expectations(loss, r * mu + w0, math.sqrt(q0p), qp)
    em = expectations(loss, r * mu - w0, math.sqrt(q0m), qm)
    sqp, sqm = math.sqrt(q0p), math.sqrt(q0m)
    xi_p = -ap * ep.G / (sqp * qp)
    xi_m = -am * em.G / (sqm * qm)
    xi0_p = ap * ep.H / qp**2
    xi0_m = am * em.H / qm**2
    r_hat = mu * (ap * ep.F / qp + am * em.F / qm)
    q0p_star, q0m_star, r_star = resolvent_moments(
        model, xi_p, xi_m, xi0_p, xi0_m, r_hat, lam)
    if q_rule == "trace":
        g_sum = ap * ep.G / sqp + am * em.G / sqm
    else:
        g_sum = ap * ep.G + am * em.G
    res = np.array([
        q0p - q0p_star,
        q0m - q0m_star,
        r - r_star,
        ap * ep.F / qp - am * em.F / qm,
        t * lam - 1.0 - g_sum,
    ])
    return res, (ep, em), (xi_p, xi_m, xi0_p, xi0_m, r_hat)


def _general_picard(loss, model, lam, x, q_rule):
    _check_iterate(x, 3)
    q0p, q0m, t = math.exp(x[0]), math.exp(x[1]), math.exp(x[2])
    r, w0 = x[3], x[4]
    sp2, sm2 = model.sigma_plus**2, model.sigma_minus**2
    qp, qm = t * sp2, t * sm2
    ap, am = model.alpha_plus, model.alpha_minus
    mu = model.mu
    ep = expectations(loss, r * mu + w0, math.sqrt(q0p), qp)
    em = expectations(loss, r * mu - w0, math.sqrt(q0m), qm)
    sqp, sqm = math.sqrt(q0p), math.sqrt(q0m)
    if q_rule == "trace":
        g_sum = ap * ep.G / sqp + am * em.G / sqm
    else:
        g_sum = ap * ep.G + am * em.G
    t_new = max((1.0 + g_sum) / lam, 1e-12)
    xi_p = -ap * ep.G / (sqp * qp)
    xi_m = -am * em.G / (sqm * qm)
    xi0_p = ap * ep.H / qp**2
    xi0_m = am * em.H / qm**2
    r_hat = mu * (ap * ep.F / qp + am * em.F / qm)
    q0p_star, q0m_star, r_star = resolvent_moments(
        model, xi_p, xi_m, xi0_p, xi0_m, r_hat, lam)
    # one secant step on the class-balance residual drives w0
    bal = ap * ep.F / qp - am * em.F / qm
    h = 1e-6 * (1.0 + abs(w0))
    ep_h = expectations(loss, r * mu + w0 + h, math.sqrt(q0p), qp)
    em_h = expectations(loss, r * mu - w0 - h, math.sqrt(q0m), qm)
    bal_h = ap * ep_h.F / qp - am * em_h.F / qm
    slope = (bal_h - bal) / h
    w0_new = w0 - bal / slope if abs(slope) > 1e-14 else w0
    target = np.array([
        math.log(max(q0p_star, 1e-300)),
        math.log(max(q0m_star, 1e-300)),
        math.log(t_new),
        r_star,
        w0_new,
    ])
    return 0.5 * x + 0.5 * target


def solve_general(loss: Loss, model: PopulationModel, lam: float,
                  warm: OrderParams | None = None,
                  q_rule: str = _DEFAULT_Q_RULE) -> OrderParams:
    """Solve the five-parameter fixed point with heterogeneous classes.

    The shared conjugate scale t = q+/sigma+^2 = q-/sigma-^2 replaces the pair
    (q+, q-), which enforces the scale-matching identity exactly.
    """
    if not lam > 0:
        raise ValueError("lambda must be positive")
    sp2 = model.sigma_plus**2
    sm2 = model.sigma_minus**2
    if warm is not None and warm.q0_plus > 0 and warm.q_plus > 0:
        x0 = np.array([
            math.log(warm.q0_plus), math.log(warm.q0_minus),
            math.log(warm.q_plus / sp2), warm.R, warm.w0,
        ])
    else:
        x0 = np.array([
            math.log(sp2), math.log(sm2), math.log(1.0 / max(lam, 1.0)), 0.1, 0.0,
        ])

    def res_fn(x):
        return _general_state(loss, model, lam, x, q_rule)[0]

    def picard_fn(x):
        return _general_picard(loss, model, lam, x, q_rule)

    x, norm, ok = _newton_with_picard(res_fn, picard_fn, x0)
    q0p, q0m, t = math.exp(x[0]), math.exp(x[1]), math.exp(x[2])
    _, _, (xi_p, xi_m, xi0_p, xi0_m, r_hat) = _general_state(loss, model, lam, x, q_rule)
    return OrderParams(
        q0_plus=q0p, q0_minus=q0m, q_plus=t * sp2, q_minus=t * sm2,
        R=x[3], w0=x[4], xi_plus=xi_p, xi_minus=xi_m, xi0_plus=xi0_p,
        xi0_minus=xi0_m, R_hat=r_hat, converged=ok, residual_norm=norm,
    )


def _newton_with_picard(res_fn, picard_fn, x0, tol=_RESIDUAL_TOL,
                        max_iter=_MAX_ITER, fail_cap=_NEWTON_FAIL_CAP):
    """Damped Newton with finite-difference Jacobian and Picard fallback."""

    def safe_norm(x):
        try:
            return float(np.max(np.abs(res_fn(x))))
        except (ResolventError, QuadratureError, ProxError, OverflowError, ValueError):
            return math.inf

    def safe_picard(x):
        try:
            return picard_fn(x)
        except (ResolventError, QuadratureError, ProxError, OverflowError, ValueError):
            return None

    x = np.asarray(x0, dtype=float)
    norm = safe_norm(x)
    failures = 0
    for _ in range(max_iter):
        if norm <= tol:
            return x, norm, True
        if failures >= fail_cap or not math.isfinite(norm):
            x_new = safe_picard(x)
            norm_new = safe_norm(x_new) if x_new is not None else math.inf
            if math.isfinite(norm_new):
                x, norm = x_new, norm_new
            else:
                return x, norm, False
            continue
        r = res_fn(x)
        n = x.size
        jac = np.empty((n, n))
        jac_ok = True
        for i in range(n):
            h = 1e-6 * max(1.0, abs(x[i]))
            xh = x.copy()
            xh[i] += h
            try:
                jac[:, i] = (res_fn(xh) - r) / h
            except (ResolventError, QuadratureError, ProxError, OverflowError, ValueError):
                try:
                    xh[i] = x[i] - h
                    jac[:, i] = (r - res_fn(xh)) / h
                except (ResolventError, QuadratureError, ProxError, OverflowError, ValueError):
                    jac_ok = False
                    break
        if not jac_ok:
            failures += 1
            x_new = safe_picard(x)
            norm_new = safe_norm(x_new) if x_new is not None else math.inf
            if math.isfinite(norm_new):
                x, norm = x_new, norm_new
            continue
        try:
            step = np.linalg.solve(jac, -r)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(jac, -r, rcond=None)[0]
        improved = False
        scale = 1.0
        for _ in range(12):
            x_try = x + scale * step
            norm_try = safe_norm(x_try)
            if norm_try < norm:
                x, norm = x_try, norm_try
                improved = True
                break
            scale *= 0.5
        if not improved:
            failures += 1
            x_new = safe_picard(x)
            norm_new = safe_norm(x_new) if x_new is not None else math.inf
            if math.isfinite(norm_new):
                x, norm = x_new, norm_new
    return x, norm, norm <= tol


def predict_precision(order: OrderParams, model: PopulationModel,
                      lam: float = math.nan) -> PrecisionPoint:
    """Per-class precision Phi((R mu +/- w0)/sqrt(q0_pm)) from a solved point."""
    if order.q0_plus <= 0 or order.q0_minus <= 0:
        raise ValueError("predict_precision needs positive q0")
    zeta_p = (order.R * model.mu + order.w0) / math.sqrt(order.q0_plus)
    zeta_m = (order.R * model.mu - order.w0) / math.sqrt(order.q0_minus)
    pp = float(ndtr(zeta_p))
    pm = float(ndtr(zeta_m))
    return PrecisionPoint(lam=lam, precision_plus=pp, precision_minus=pm,
                          balanced=0.5 * (pp + pm), order=order)


def _pick_solver(model: PopulationModel, solver: str):
    if solver == "auto":
        solver = "homogeneous" if model.is_symmetric else "general"
    if solver == "homogeneous":
        return solve_homogeneous
    if solver == "general":
        return solve_general
    raise ValueError(f"unknown solver {solver!r}")


def sweep_lambda(loss: Loss, model: PopulationModel, grid,
                 solver: str = "auto", refine: bool = True,
                 q_rule: str = _DEFAULT_Q_RULE) -> PrecisionCurve:
    """Solve the fixed point along a lambda grid (largest first, warm-started).

    The returned curve is in ascending lambda order.  The argmax of balanced
    precision over converged points is refined by golden-section search
    between its grid neighbours to a relative lambda tolerance of 1e-3.
    """
    grid = np.asarray(sorted(float(g) for g in grid))
    if grid.size == 0 or grid[0] <= 0:
        raise ValueError("lambda grid must be nonempty and strictly positive")
    solve = _pick_solver(model, solver)

    points: list[PrecisionPoint] = []
    warm = None
    for lam in grid[::-1]:
        order = solve(loss, model, lam, warm=warm, q_rule=q_rule)
        if not order.converged:
            order_retry = solve(loss, model, lam, warm=None, q_rule=q_rule)
            if order_retry.converged:
                order = order_retry
        warm = order if order.converged else warm
        points.append(predict_precision(order, model, lam=lam)
                      if order.q0_plus > 0 and order.q0_minus > 0
                      else PrecisionPoint(lam, math.nan, math.nan, math.nan, order))
    points.reverse()

    curve = PrecisionCurve(loss=loss, model=model, points=points)
    conv = [pt for pt in points if pt.order.converged]
    if not conv:
        return curve
    best = max(conv, key=lambda pt: pt.balanced)
    curve.lambda_star, curve.precision_star = best.lam, best.balanced

    if refine:
        idx = points.index(best)
        if 0 < idx < len(points) - 1 and points[idx - 1].order.converged \
                and points[idx + 1].order.converged:
            lam_s, prec_s = _golden_refine(
                loss, model, solve, points[idx - 1].lam, points[idx + 1].lam,
                warm=best.order, q_rule=q_rule)
            if prec_s >= curve.precision_star:
                curve.lambda_star, curve.precision_star = lam_s, prec_s
    return curve


def _golden_refine(loss, model, solve, lam_lo, lam_hi, warm, q_rule,
                   rel_tol=1e-3):
    """Golden-section maximization of balanced precision on [lam_lo, lam_hi]."""
    phi = (math.sqrt(5.0) - 1.0) / 2.0
    lo, hi = math.log(lam_lo), math.log(lam_hi)
    cache = {}

    def value(t):
        if t not in cache:
            order = solve(loss, model, math.exp(t), warm=warm, q_rule=q_rule)
            cache[t] = (predict_precision(order, model).balanced
                        if order.converged else -math.inf)
        return cache[t]

    c = hi - phi * (hi - lo)
    d = lo + phi * (hi - lo)
    fc, fd = value(c), value(d)
    while hi - lo > rel_tol:
        if fc >= fd:
            hi, d, fd = d, c, fc
            c = hi - phi * (hi - lo)
            fc = value(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + phi * (hi - lo)
            fd = value(d)
    t_best = c if fc >= fd else d
    return math.exp(t_best), value(t_best)


def explicit_form_diagnostic(loss: Loss, model: PopulationModel, lam: float,
                             order: OrderParams) -> dict:
    """Residuals of the post-integration printed equations at a solved point.

    These closed forms (kept for diagnosis only) disagree with the resolvent
    path in denominator powers and normalization; the Monte Carlo suite
    arbitrates.  Returns the two residuals per system plus a flag marking a
    collapsed (nonpositive) denominator, which is reported but not fatal.
    """
    mu = model.mu
    ap, am = model.alpha_plus, model.alpha_minus
    sp, sm = model.sigma_plus, model.sigma_minus
    ep = expectations(loss, order.R * mu + order.w0, math.sqrt(order.q0_plus), order.q_plus)
    em = expectations(loss, order.R * mu - order.w0, math.sqrt(order.q0_minus), order.q_minus)
    lam_p = np.asarray(model.lambda_plus + (0.0,))
    lam_m = np.asarray(model.lambda_minus + (0.0,))
    r2 = np.asarray(model.R + (model.R_tail,)) ** 2
    denom = (1.0
             - ap * lam_p * ep.G / math.sqrt(order.q0_plus)
             - am * lam_m * em.G / math.sqrt(order.q0_minus))
    collapse = bool(np.any(denom <= 0))
    safe = np.where(denom > 0, denom, np.nan)

    pref_p = ap * mu / sp * ep.F + am * mu * sp / sm**2 * em.F
    pref_m = am * mu / sm * em.F + ap * mu * sm / sp**2 * ep.F
    q0p_rhs = ap * ep.H + am * em.H + pref_p**2 * float(np.nansum((1 + lam_p) * r2 / safe**2))
    q0m_rhs = ap * ep.H + am * em.H + pref_m**2 * float(np.nansum((1 + lam_m) * r2 / safe**2))
    r_rhs = pref_p * float(np.nansum(r2 / safe**2))
    out = {
        "collapse": collapse,
        "general_q0_plus": order.q0_plus - q0p_rhs,
        "general_q0_minus": order.q0_minus - q0m_rhs,
        "general_R": order.R - r_rhs,
    }
    if model.is_symmetric:
        alpha = model.alpha_total
        sigma = sp
        denom_h = 1.0 - alpha * lam_p * ep.G
        safe_h = np.where(denom_h > 0, denom_h, np.nan)
        out["collapse"] = collapse or bool(np.any(denom_h <= 0))
        lhs_r = order.R / math.sqrt(order.q0_plus)
        rhs_r = alpha * mu / sigma * ep.F * float(np.nansum(r2 / safe_h))
        rhs_q0 = alpha * ep.H + (alpha * mu / sigma * ep.F) ** 2 * float(
            np.nansum((1 + lam_p) * r2 / safe_h**2))
        out["homogeneous_R"] = lhs_r - rhs_r
        out["homogeneous_q0"] = 1.0 - rhs_q0
    return out
