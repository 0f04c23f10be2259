"""Margin loss families (PLR, SVM, DWD, LUM) and their proximal maps.

Every loss here is convex, nonincreasing, asymptotic to -u as u -> -inf and
to 0 as u -> +inf, so its derivative lives in [-1, 0].  That bound gives a
guaranteed bracket [a, a + b] for the proximal root and makes the prox map
1-Lipschitz and nondecreasing in its first argument.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

__all__ = ["Loss", "ProxError", "plr", "svm", "dwd", "lum", "parse_loss"]

_PROX_TOL = 1e-12
_PROX_MAX_ITER = 200


class ProxError(RuntimeError):
    """Internal failure of the prox root finder (must not happen for valid losses)."""


@dataclass(frozen=True)
class Loss:
    """A tagged margin-loss family with evaluation, derivatives and prox.

    family: one of "plr", "svm", "dwd", "lum".
    q: DWD tail exponent (q > 0).
    a: LUM tail exponent (a > 0).
    c: LUM breakpoint parameter (c >= 0).
    """

    family: str
    q: float = 1.0
    a: float = 1.0
    c: float = 0.0

    def __post_init__(self):
        if self.family not in ("plr", "svm", "dwd", "lum"):
            raise ValueError(f"unknown loss family {self.family!r}")
        if self.family == "dwd" and not self.q > 0:
            raise ValueError("DWD requires q > 0")
        if self.family == "lum":
            if not self.a > 0:
                raise ValueError("LUM requires a > 0")
            if self.c < 0:
                raise ValueError("LUM requires c >= 0")

    # -- breakpoint of the piecewise families (None for plr/svm's value kink
    #    is at u=1 but handled by the closed-form prox) --
    @property
    def breakpoint(self) -> float | None:
        if self.family == "dwd":
            return self.q / (self.q + 1.0)
        if self.family == "lum":
            return self.c / (1.0 + self.c)
        return None

    def value(self, u):
        """Loss value V(u), elementwise."""
        u = np.asarray(u, dtype=float)
        if self.family == "plr":
            return np.logaddexp(0.0, -u)
        if self.family == "svm":
            return np.maximum(1.0 - u, 0.0)
        if self.family == "dwd":
            q = self.q
            brk = q / (q + 1.0)
            kappa = q**q / (q + 1.0) ** (q + 1.0)
            safe = np.maximum(u, brk)
            return np.where(u <= brk, 1.0 - u, kappa * safe ** (-q))
        # lum
        a, c = self.a, self.c
        brk = c / (1.0 + c)
        t = a + (1.0 + c) * np.maximum(u - brk, 0.0)
        return np.where(u <= brk, 1.0 - u, (a / t) ** a / (1.0 + c))

    def deriv(self, u):
        """Subgradient V'(u); at the SVM kink the left value -1 is returned."""
        u = np.asarray(u, dtype=float)
        if self.family == "plr":
            return -expit(-u)
        if self.family == "svm":
            return np.where(u <= 1.0, -1.0, 0.0)
        if self.family == "dwd":
            q = self.q
            brk = q / (q + 1.0)
            kappa = q**q / (q + 1.0) ** (q + 1.0)
            safe = np.maximum(u, brk)
            return np.where(u <= brk, -1.0, -q * kappa * safe ** (-q - 1.0))
        a, c = self.a, self.c
        brk = c / (1.0 + c)
        t = a + (1.0 + c) * np.maximum(u - brk, 0.0)
        return np.where(u <= brk, -1.0, -(a ** (a + 1.0)) * t ** (-a - 1.0))

    def deriv2(self, u):
        """Second derivative (0 on linear pieces; SVM everywhere)."""
        u = np.asarray(u, dtype=float)
        if self.family == "plr":
            s = expit(-u)
            return s * (1.0 - s)
        if self.family == "svm":
            return np.zeros_like(u)
        if self.family == "dwd":
            q = self.q
            brk = q / (q + 1.0)
            kappa = q**q / (q + 1.0) ** (q + 1.0)
            safe = np.maximum(u, brk)
            return np.where(u <= brk, 0.0, q * (q + 1.0) * kappa * safe ** (-q - 2.0))
        a, c = self.a, self.c
        brk = c / (1.0 + c)
        t = a + (1.0 + c) * np.maximum(u - brk, 0.0)
        d2 = (a + 1.0) * a ** (a + 1.0) * (1.0 + c) * t ** (-a - 2.0)
        return np.where(u <= brk, 0.0, d2)

    def prox(self, a, b):
        """psi(a, b) = argmin_u V(u) + (u - a)^2 / (2 b), elementwise; b > 0."""
        a_arr = np.asarray(a, dtype=float)
        scalar = a_arr.ndim == 0
        a_arr = np.atleast_1d(a_arr)
        b = float(b)
        if not b > 0:
            raise ValueError("prox requires b > 0")

        if self.family == "svm":
            out = np.where(a_arr >= 1.0, a_arr, np.where(a_arr >= 1.0 - b, 1.0, a_arr + b))
        elif self.family == "dwd" and self.q == 1.0:
            out = _prox_dwd1(a_arr, b)
        else:
            out = _prox_newton(self, a_arr, b)
        return float(out[0]) if scalar else out

    def prox_kinks(self, b: float):
        """Points (in the prox argument a) where a -> psi(a, b) loses smoothness."""
        if self.family == "svm":
            return [1.0 - b, 1.0]
        if self.family == "dwd":
            return [self.q / (self.q + 1.0) - b]
        if self.family == "lum":
            return [self.c / (1.0 + self.c) - b]
        return []

    def spec_string(self) -> str:
        if self.family == "dwd":
            return f"dwd:q={self.q:g}"
        if self.family == "lum":
            return f"lum:a={self.a:g},c={self.c:g}"
        return self.family

    def __str__(self) -> str:  # pragma: no cover - cosmetic
        return self.spec_string()


def _prox_dwd1(a, b):
    """Closed-form DWD(q=1) prox: linear branch, else the cubic 4u^3-4au^2-b=0."""
    with np.errstate(over="ignore", invalid="ignore"):
        return _prox_dwd1_impl(a, b)


def _prox_dwd1_impl(a, b):
    lin = a + b
    lo = np.maximum(a, 0.0)
    hi = lo + 1.0 + b  # sign change guaranteed: g(lo) = -b < 0 < g(hi)
    u = lo + (b / 4.0) ** (1.0 / 3.0)
    u = np.clip(u, lo, hi)
    # the root r satisfies r >= max(a, (b/4)^{1/3}) and g' is increasing above r,
    # so for u >= r (g >= 0): |u - r| <= g(u) / gp_floor certifies convergence
    gp_floor = 4.0 * np.maximum(a, (b / 4.0) ** (1.0 / 3.0)) ** 2
    for it in range(_PROX_MAX_ITER):
        g = 4.0 * u**3 - 4.0 * a * u**2 - b
        lo = np.where(g < 0.0, u, lo)
        hi = np.where(g > 0.0, u, hi)
        near = (g >= 0.0) & (g <= 0.5 * _PROX_TOL * gp_floor)
        done = (hi - lo <= _PROX_TOL) | near
        if np.all(done):
            u = np.where(near, u, 0.5 * (lo + hi))
            break
        if it % 2:  # alternate pure bisection so the bracket provably halves
            u = 0.5 * (lo + hi)
            continue
        gp = 12.0 * u**2 - 8.0 * a * u
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(gp > 0.0, g / np.where(gp > 0.0, gp, 1.0), 0.0)
        u_new = u - step
        bad = (u_new <= lo) | (u_new >= hi) | (gp <= 0.0)
        u = np.where(bad, 0.5 * (lo + hi), u_new)
    else:
        raise ProxError("DWD q=1 cubic solve did not converge")
    return np.where(a <= 0.5 - b, lin, u)


def _prox_newton(loss: Loss, a, b):
    """Bisection-safeguarded Newton on g(u) = V'(u) + (u - a)/b.

    V' in [-1, 0] brackets the root in [a, a + b]; the bracket is widened by
    doubling if a pathological loss ever violates that bound.
    """
    lo = a.copy()
    hi = a - b * loss.deriv(a)  # <= a + b, and an upper bracket since |V'| decreases
    hi = np.maximum(hi, lo)

    # expand by doubling until g(hi) >= 0 (no-op for the built-in families)
    width = np.maximum(hi - lo, 0.0)
    for _ in range(60):
        g_hi = loss.deriv(hi) + (hi - a) / b
        need = g_hi < 0.0
        if not np.any(need):
            break
        width = np.where(need, np.maximum(2.0 * width, 1e-6), width)
        hi = np.where(need, lo + width, hi)
    else:
        raise ProxError("prox bracket expansion failed")

    u = 0.5 * (lo + hi)
    for it in range(_PROX_MAX_ITER):
        g = loss.deriv(u) + (u - a) / b
        lo = np.where(g < 0.0, u, lo)
        hi = np.where(g > 0.0, u, hi)
        # g' >= 1/b, so |u - root| <= |g| * b; either bound may certify convergence
        done = (hi - lo <= _PROX_TOL) | (np.abs(g) * b <= 0.5 * _PROX_TOL)
        if np.all(done):
            return np.where(np.abs(g) * b <= 0.5 * _PROX_TOL, u, 0.5 * (lo + hi))
        if it % 2:  # alternate pure bisection so the bracket provably halves
            u = 0.5 * (lo + hi)
            continue
        gp = loss.deriv2(u) + 1.0 / b
        u_new = u - g / gp
        bad = (u_new <= lo) | (u_new >= hi)
        u = np.where(bad, 0.5 * (lo + hi), u_new)
    raise ProxError(f"prox root finder did not converge for {loss.spec_string()}")


def plr() -> Loss:
    return Loss("plr")


def svm() -> Loss:
    return Loss("svm")


def dwd(q: float = 1.0) -> Loss:
    return Loss("dwd", q=q)


def lum(a: float, c: float) -> Loss:
    return Loss("lum", a=a, c=c)


def parse_loss(spec: str) -> Loss:
    """Parse a loss specification string.

    Accepted forms: ``plr``, ``svm``, ``dwd:q=<float>``, ``lum:a=<float>,c=<float>``.
    """
    spec = spec.strip().lower()
    head, _, tail = spec.partition(":")
    params = {}
    if tail:
        for item in tail.split(","):
            key, eq, val = item.partition("=")
            if not eq:
                raise ValueError(f"malformed loss parameter {item!r} in {spec!r}")
            try:
                params[key.strip()] = float(val)
            except ValueError:
                raise ValueError(f"malformed loss parameter {item!r} in {spec!r}") from None
    if head == "plr":
        _expect_params(spec, params, set())
        return plr()
    if head == "svm":
        _expect_params(spec, params, set())
        return svm()
    if head == "dwd":
        _expect_params(spec, params, {"q"})
        return dwd(q=params.get("q", 1.0))
    if head == "lum":
        _expect_params(spec, params, {"a", "c"})
        if "a" not in params:
            raise ValueError(f"lum loss needs a= parameter: {spec!r}")
        return lum(a=params["a"], c=params.get("c", 0.0))
    raise ValueError(f"unknown loss spec {spec!r}")


def _expect_params(spec, params, allowed):
    extra = set(params) - allowed
    if extra:
        raise ValueError(f"unexpected parameters {sorted(extra)} in loss spec {spec!r}")
