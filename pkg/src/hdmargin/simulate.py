"""Finite-size Monte Carlo: spiked-model data, classifier training, precision.

The trainer minimizes

    sum_i V(y_i (x_i^T w / sqrt(p) + w0)) + (lambda/2) ||w||^2      (w0 free)

by consensus splitting: the coupling u = A wt (A the scaled, label-signed
design with an intercept column) is enforced by an augmented Lagrangian, the
per-sample subproblem is exactly the loss prox psi(., 1/rho), and the
quadratic step reuses a cached Cholesky factor until the penalty parameter
changes.  This shares the prox code with the theory solver, so the empirical
and analytic sides see the identical loss geometry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import ndtr

from .losses import Loss
from .theory import PopulationModel

__all__ = [
    "GeneratorSpec",
    "Dataset",
    "FittedClassifier",
    "MonteCarloPoint",
    "generate",
    "population_basis",
    "train",
    "objective",
    "population_precision",
    "monte_carlo_curve",
]

_NOISE_KINDS = ("gaussian", "rademacher-scaled")


@dataclass(frozen=True)
class GeneratorSpec:
    """Deterministic recipe for one synthetic dataset.

    The spike directions and the unit signal direction are drawn from a
    dedicated RNG stream keyed by the seed, so a spec reproduces both the
    population geometry and the sampled data bit for bit.
    """

    model: PopulationModel
    p: int
    n_plus: int
    n_minus: int
    seed: int
    noise: str = "gaussian"

    def __post_init__(self):
        if self.model.K >= self.p:
            raise ValueError("number of spikes must be smaller than p")
        if self.n_plus < 1 or self.n_minus < 1:
            raise ValueError("need at least one sample per class")
        if self.noise not in _NOISE_KINDS:
            raise ValueError(f"noise must be one of {_NOISE_KINDS}")

    @classmethod
    def from_model(cls, model: PopulationModel, p: int, seed: int,
                   noise: str = "gaussian") -> "GeneratorSpec":
        """Pick n_pm = round(alpha_pm p) and re-derive alphas so n_pm/p is exact."""
        n_plus = max(1, round(model.alpha_plus * p))
        n_minus = max(1, round(model.alpha_minus * p))
        exact = replace(model, alpha_plus=n_plus / p, alpha_minus=n_minus / p)
        return cls(model=exact, p=p, n_plus=n_plus, n_minus=n_minus,
                   seed=seed, noise=noise)

    @property
    def n(self) -> int:
        return self.n_plus + self.n_minus

    def with_seed(self, seed: int) -> "GeneratorSpec":
        return replace(self, seed=seed)


@dataclass
class Dataset:
    """n x p feature matrix with +/-1 labels and optional generator provenance."""

    features: np.ndarray
    labels: np.ndarray
    provenance: GeneratorSpec | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=float)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise ValueError("features must be n x p with one label per row")
        if not np.all(np.isin(self.labels, (-1.0, 1.0))):
            raise ValueError("labels must be +/-1")
        if not (np.any(self.labels == 1.0) and np.any(self.labels == -1.0)):
            raise ValueError("both classes must be present")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    def write_csv(self, path) -> None:
        p = self.p
        header = "label," + ",".join(f"f{j + 1}" for j in range(p))
        lines = [header]
        for y, row in zip(self.labels, self.features):
            lines.append(f"{int(y)}," + ",".join(repr(v) for v in row))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read_csv(cls, path) -> "Dataset":
        lines = Path(path).read_text().splitlines()
        if not lines or not lines[0].lower().startswith("label,"):
            raise ValueError(f"{path}: missing 'label,f1,...' header row")
        ncol = len(lines[0].split(","))
        labels, rows = [], []
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            parts = line.split(",")
            if len(parts) != ncol:
                raise ValueError(f"{path}:{lineno}: expected {ncol} columns, got {len(parts)}")
            try:
                y = float(parts[0])
                row = [float(v) for v in parts[1:]]
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric value") from None
            if y not in (-1.0, 1.0):
                raise ValueError(f"{path}:{lineno}: label must be +1 or -1")
            labels.append(y)
            rows.append(row)
        if not rows:
            raise ValueError(f"{path}: no data rows")
        return cls(features=np.array(rows), labels=np.array(labels))


@dataclass
class FittedClassifier:
    """Trained linear rule sign(x^T w / sqrt(p) + w0)."""

    w: np.ndarray
    w0: float
    lam: float
    loss: Loss
    kkt_residual: float
    converged: bool
    iterations: int


def population_basis(spec: GeneratorSpec):
    """The realized unit signal direction and spike directions (p x K).

    Deterministic in spec.seed: K + 1 seeded Gaussian vectors are
    orthonormalized, the first K are the spike directions, and the signal
    direction mixes them with the stated projections plus the orthogonal
    remainder.
    """
    rng = np.random.default_rng([spec.seed, 0x9E3779B9])
    k = spec.model.K
    raw = rng.standard_normal((spec.p, k + 1))
    basis, _ = np.linalg.qr(raw)
    v = basis[:, :k]
    tail = basis[:, k]
    r = np.asarray(spec.model.R)
    mu_hat = v @ r + spec.model.R_tail * tail if k else tail
    norm = np.linalg.norm(mu_hat)
    return mu_hat / norm, v


def generate(spec: GeneratorSpec) -> Dataset:
    """Draw one dataset from the two-class spiked factor model."""
    model = spec.model
    mu_hat, v = population_basis(spec)
    rng = np.random.default_rng([spec.seed, 0x51ED270B])
    k = model.K

    def draw(n, sign, sigma, lambdas):
        mean = sign * model.mu * mu_hat
        x = np.tile(mean, (n, 1))
        if k:
            z = rng.standard_normal((n, k))
            x += (z * sigma * np.sqrt(np.asarray(lambdas))) @ v.T
        if spec.noise == "gaussian":
            x += sigma * rng.standard_normal((n, spec.p))
        else:
            x += sigma * rng.choice((-1.0, 1.0), size=(n, spec.p))
        return x

    x_plus = draw(spec.n_plus, +1.0, model.sigma_plus, model.lambda_plus)
    x_minus = draw(spec.n_minus, -1.0, model.sigma_minus, model.lambda_minus)
    features = np.vstack([x_plus, x_minus])
    labels = np.concatenate([np.ones(spec.n_plus), -np.ones(spec.n_minus)])
    return Dataset(features=features, labels=labels, provenance=spec)


def objective(dataset: Dataset, loss: Loss, lam: float, w, w0,
              feature_scale: float | None = None) -> float:
    """Training objective sum V(y f(x)) + lam ||w||^2 / 2."""
    scale = 1.0 / math.sqrt(dataset.p) if feature_scale is None else feature_scale
    margins = dataset.labels * (dataset.features @ w * scale + w0)
    return float(np.sum(loss.value(margins)) + 0.5 * lam * np.dot(w, w))


def train(dataset: Dataset, loss: Loss, lam: float, *, tol: float = 1e-8,
          max_iter: int = 100_000, rho: float = 1.0, over_relax: float = 1.7,
          feature_scale: float | None = None,
          init: tuple[np.ndarray, float] | None = None) -> FittedClassifier:
    """Fit the regularized margin classifier by consensus splitting.

    Per-sample margins are driven to the prox of the loss while the ridge
    step solves a cached (p+1)-dimensional normal system; the penalty rho is
    rebalanced by factor 2 whenever the primal/dual residual ratio drifts
    past 10, and the coupling step is over-relaxed.  Convergence: both
    residuals below tol * (1 + scale).
    """
    if not lam > 0:
        raise ValueError("lambda must be positive")
    n, p = dataset.n, dataset.p
    scale = 1.0 / math.sqrt(p) if feature_scale is None else feature_scale
    a_mat = np.empty((n, p + 1))
    a_mat[:, :p] = dataset.labels[:, None] * dataset.features * scale
    a_mat[:, p] = dataset.labels

    gram = a_mat.T @ a_mat
    reg = np.zeros(p + 1)
    reg[:p] = lam

    def factor(rho_val):
        m = rho_val * gram
        m[np.diag_indices_from(m)] += reg
        return cho_factor(m, lower=True, overwrite_a=True)

    chol = factor(rho)
    if init is not None:
        wt = np.concatenate([init[0], [init[1]]])
        u = a_mat @ wt
    else:
        wt = np.zeros(p + 1)
        u = np.zeros(n)
    dual = np.zeros(n)

    kkt = math.inf
    best_kkt = math.inf
    best_wt = wt.copy()
    converged = False
    it = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for it in range(1, max_iter + 1):
            wt = cho_solve(chol, rho * (a_mat.T @ (u - dual)))
            v = a_mat @ wt
            v_relaxed = over_relax * v + (1.0 - over_relax) * u
            u_prev = u
            u = loss.prox(v_relaxed + dual, 1.0 / rho)
            dual = dual + v_relaxed - u

            r_primal = float(np.linalg.norm(v - u))
            r_dual = float(rho * np.linalg.norm(a_mat.T @ (u - u_prev)))
            eps_primal = tol * (1.0 + max(np.linalg.norm(v), np.linalg.norm(u)))
            eps_dual = tol * (1.0 + rho * np.linalg.norm(a_mat.T @ dual))
            kkt = max(r_primal / eps_primal, r_dual / eps_dual) * tol
            if math.isfinite(kkt) and kkt < best_kkt:
                best_kkt = kkt
                best_wt = wt.copy()
            if r_primal <= eps_primal and r_dual <= eps_dual:
                converged = True
                break
            if not np.all(np.isfinite(u)):  # diverged transient: restart from best
                wt = best_wt.copy()
                u = a_mat @ wt
                dual = np.zeros(n)
                rho = 1.0
                chol = factor(rho)
                continue
            if it % 10 == 0:
                if r_primal > 10.0 * r_dual:
                    rho *= 2.0
                    dual /= 2.0
                    chol = factor(rho)
                elif r_dual > 10.0 * r_primal:
                    rho /= 2.0
                    dual *= 2.0
                    chol = factor(rho)

    if not converged:
        wt, kkt = best_wt, best_kkt
    w = wt[:p].copy()
    w0 = _polish_intercept(loss, dataset.features @ w * scale, dataset.labels,
                           float(wt[p]))
    return FittedClassifier(w=w, w0=w0, lam=lam, loss=loss,
                            kkt_residual=kkt, converged=converged, iterations=it)


def _polish_intercept(loss: Loss, scores, labels, w0_start: float) -> float:
    """Exact conditional intercept with a minimum-norm tie-break.

    The intercept subproblem h(w0) = sum_i V(y_i s_i + y_i w0) is convex but
    can have a flat argmin interval whenever every margin sits on a linear
    piece of the loss (hinge with all samples active, DWD/LUM left branches),
    in which case the solver's w0 is arbitrary within the interval.  The
    canonical selection is the argmin point closest to zero (the vanishing
    intercept-ridge limit), which is the w0 = 0 branch of the symmetric
    fixed-point equations.

    For the hinge the argmin interval is available in closed form; otherwise
    bisection on h' finds a minimizer and zero replaces it when h(0) ties.
    """
    if loss.family == "svm":
        # breakpoints of the piecewise-linear h are t_i = y_i - s_i with
        # slope -n_plus + k after the k-th sorted one, so the argmin is
        # [t_(n_plus-1), t_(n_plus)]
        t = np.sort(labels - scores)
        n_plus = int(np.sum(labels > 0))
        lo, hi = t[n_plus - 1], t[n_plus]
        return float(min(max(lo, 0.0), hi))

    def slope(w0):
        return float(np.sum(labels * loss.deriv(labels * (scores + w0))))

    span = float(np.max(np.abs(scores))) + 2.0
    lo, hi = -span, span
    for _ in range(60):  # slope(-inf) = -n_plus, slope(+inf) = n_minus
        if slope(lo) <= 0.0:
            break
        lo *= 2.0
    for _ in range(60):
        if slope(hi) >= 0.0:
            break
        hi *= 2.0
    w0 = min(max(w0_start, lo), hi)
    for _ in range(100):
        if hi - lo <= 1e-12 * (1.0 + abs(hi)):
            break
        mid = 0.5 * (lo + hi)
        if slope(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    w0 = 0.5 * (lo + hi)

    def value(w0):
        return float(np.sum(loss.value(labels * (scores + w0))))

    if value(0.0) <= value(w0) + 1e-10 * (1.0 + abs(value(w0))):
        return 0.0
    return float(w0)


def population_precision(fit: FittedClassifier, model: PopulationModel,
                         spec: GeneratorSpec, n_test: int = 100_000):
    """Exact class-conditional precision of a fitted rule under the generator.

    Gaussian noise admits the closed form Phi((+/- mu^T w s + /- w0)/sqrt(w^T
    Sigma_pm w s^2)); other noise kinds fall back to a fresh seeded test set.
    """
    w = np.asarray(fit.w, dtype=float)
    norm = np.linalg.norm(w)
    if norm == 0:
        raise ValueError("zero-norm classifier has no defined precision")
    mu_hat, v = population_basis(spec)
    scale = 1.0 / math.sqrt(spec.p)

    if spec.noise == "gaussian":
        shift = model.mu * float(mu_hat @ w) * scale
        proj = v.T @ w if model.K else np.zeros(0)
        out = []
        for sign, sigma, lambdas in (
            (+1.0, model.sigma_plus, model.lambda_plus),
            (-1.0, model.sigma_minus, model.lambda_minus),
        ):
            quad = sigma**2 * (norm**2 + float(np.sum(np.asarray(lambdas) * proj**2)))
            zeta = (shift + sign * fit.w0) / (math.sqrt(quad) * scale)
            out.append(float(ndtr(zeta)))
        return out[0], out[1]

    test_spec = replace(spec, seed=spec.seed ^ 0x7E57DA7A,
                        n_plus=n_test // 2, n_minus=n_test // 2)
    data = generate(test_spec)
    scores = data.features @ w * scale + fit.w0
    correct = np.sign(scores) * data.labels > 0
    plus = data.labels > 0
    return float(correct[plus].mean()), float(correct[~plus].mean())


@dataclass
class MonteCarloPoint:
    """Aggregated replicate precision at one lambda."""

    lam: float
    mean: float
    se: float
    mean_plus: float
    mean_minus: float
    reps_converged: int
    reps: int


def _replicate_curve(spec: GeneratorSpec, loss: Loss, grid) -> tuple[list, list]:
    """Balanced (and per-class) precision across the grid for one dataset."""
    data = generate(spec)
    rows, flags = [], []
    init = None
    for lam in grid:  # descending: warm starts track the regularization path
        fit = train(data, loss, lam, init=init)
        if fit.converged:
            init = (fit.w, fit.w0)
        prec_p, prec_m = population_precision(fit, spec.model, spec)
        rows.append((0.5 * (prec_p + prec_m), prec_p, prec_m))
        flags.append(fit.converged)
    return rows, flags


def monte_carlo_curve(spec: GeneratorSpec, loss: Loss, grid, reps: int,
                      n_jobs: int = 1) -> list[MonteCarloPoint]:
    """Mean and standard error of precision over independent replicates.

    Replicate r draws its dataset from seed + r and is trained across the
    grid from the largest lambda down with warm starts.
    """
    if reps < 2:
        raise ValueError("need at least two replicates for a standard error")
    grid = np.asarray(sorted(float(g) for g in grid))[::-1]
    specs = [spec.with_seed(spec.seed + r) for r in range(reps)]
    if n_jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_replicate_curve, specs,
                                    [loss] * reps, [grid] * reps))
    else:
        results = [_replicate_curve(s, loss, grid) for s in specs]

    points = []
    for j, lam in enumerate(grid):
        vals = np.array([res[0][j][0] for res in results])
        plus = np.array([res[0][j][1] for res in results])
        minus = np.array([res[0][j][2] for res in results])
        conv = sum(1 for res in results if res[1][j])
        points.append(MonteCarloPoint(
            lam=float(lam),
            mean=float(vals.mean()),
            se=float(vals.std(ddof=1) / math.sqrt(reps)),
            mean_plus=float(plus.mean()),
            mean_minus=float(minus.mean()),
            reps_converged=conv,
            reps=reps,
        ))
    points.reverse()
    return points
