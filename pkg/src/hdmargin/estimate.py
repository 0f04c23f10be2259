"""Spiked-model parameter estimation from a labeled data matrix.

Noise levels come from the entrywise MAD, the signal size from the debiased
norm of the class-mean difference, and the spikes from the sample-covariance
eigenvalues above the bulk detectability edge, corrected for the upward
eigenvalue bias and the eigenvector rotation of proportional-dimension
sampling.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .simulate import Dataset
from .theory import PopulationModel

__all__ = [
    "EstimationReport",
    "estimate_sigma",
    "estimate_mu",
    "estimate_spikes",
    "estimate_model",
    "detection_threshold",
    "debias_eigenvalue",
    "overlap_correction",
]

# median absolute deviation of N(0,1): Phi^{-1}(3/4)
MAD_NORMAL = 0.6744897501960817


@dataclass
class EstimationReport:
    """Estimated model plus the raw spectral evidence behind it."""

    model: PopulationModel
    sample_eigs_plus: list[float]
    sample_eigs_minus: list[float]
    threshold_plus: float
    threshold_minus: float
    homogeneous: bool
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "sample_eigs_plus": self.sample_eigs_plus,
            "sample_eigs_minus": self.sample_eigs_minus,
            "threshold_plus": self.threshold_plus,
            "threshold_minus": self.threshold_minus,
            "homogeneous": self.homogeneous,
            "warnings": self.warnings,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def estimate_sigma(class_matrix) -> float:
    """Noise level from the MAD of all matrix entries.

    The spread of the O(1/sqrt(p))-per-coordinate signal and spike components
    barely moves the median, so the entrywise MAD tracks the noise scale even
    with the class mean left in.
    """
    x = np.asarray(class_matrix, dtype=float)
    if x.size == 0:
        raise ValueError("empty matrix")
    mad = float(np.median(np.abs(x - np.median(x))))
    if mad == 0.0:
        raise ValueError("zero MAD: matrix is (half-)constant, no noise scale")
    return mad / MAD_NORMAL


def estimate_mu(mean_diff_norm: float, sigma_plus: float, sigma_minus: float,
                alpha_plus: float, alpha_minus: float) -> float:
    """Signal size from the class-mean difference, noise-debiased.

    ||xbar_+ - xbar_-||^2 concentrates on 4 mu^2 + sigma+^2/alpha+ +
    sigma-^2/alpha-; the radicand is clamped at zero (with a warning) when
    sampling noise pushes it negative.
    """
    rad = mean_diff_norm**2 - sigma_plus**2 / alpha_plus - sigma_minus**2 / alpha_minus
    if rad < 0.0:
        warnings.warn("mean-difference norm below its noise floor; estimating mu = 0")
        return 0.0
    return 0.5 * math.sqrt(rad)


def detection_threshold(alpha: float) -> float:
    """Centered bulk edge: spikes are detectable above (1 + sqrt(1/alpha))^2 - 1."""
    return (1.0 + math.sqrt(1.0 / alpha)) ** 2 - 1.0


def debias_eigenvalue(lam_tilde: float, alpha: float) -> float:
    """Invert the forward map lam_tilde = lam + 1/alpha + 1/(alpha lam)."""
    shifted = lam_tilde - 1.0 / alpha
    disc = shifted**2 - 4.0 / alpha
    if disc < 0.0:
        raise ValueError("eigenvalue below the debiasing boundary")
    return 0.5 * (shifted + math.sqrt(disc))


def overlap_correction(lam_hat: float, alpha: float) -> float:
    """Asymptotic |<sample eigenvector, population eigenvector>| for a spike.

    P(u, v) = sqrt((1 - 1/(v u^2)) / (1 + 1/(v u))) at u = debiased strength,
    v = sample ratio; real and positive strictly above the detection edge.
    """
    num = 1.0 - 1.0 / (alpha * lam_hat**2)
    den = 1.0 + 1.0 / (alpha * lam_hat)
    if num <= 0.0:
        raise ValueError("spike at or below the detection edge: overlap undefined")
    return math.sqrt(num / den)


def _spiked_spectrum(centered, sigma, divisor):
    """Eigenvalues (centered by -1) and eigenvectors of the standardized
    sample covariance, via SVD of the standardized data matrix."""
    z = centered / sigma
    _, svals, vt = np.linalg.svd(z, full_matrices=False)
    eigs = svals**2 / divisor - 1.0
    return eigs, vt


def estimate_spikes(class_matrix, alpha: float, mean_diff_direction,
                    sigma: float | None = None, divisor: int | None = None,
                    signal_norm: float | None = None):
    """Detected spikes of one (class-centered) matrix: list of (lam_hat, R_hat).

    The matrix is centered by its row mean, standardized by sigma (MAD
    estimate when not given), and its sample eigenvalues above the detection
    threshold are debiased.  Each retained eigenvector is projected onto the
    mean-difference direction and divided by the overlap correction; the
    eigenvector sign is resolved so projections are nonnegative.  signal_norm
    overrides the normalization of the projection (used to remove the noise
    inflation of the raw mean-difference norm).
    """
    x = np.asarray(class_matrix, dtype=float)
    n = x.shape[0]
    centered = x - x.mean(axis=0)
    if sigma is None:
        sigma = estimate_sigma(x)
    if divisor is None:
        divisor = max(n - 1, 1)
    direction = np.asarray(mean_diff_direction, dtype=float)
    norm = float(np.linalg.norm(direction)) if signal_norm is None else float(signal_norm)
    if norm <= 0:
        raise ValueError("mean-difference direction must be nonzero")

    eigs, vt = _spiked_spectrum(centered, sigma, divisor)
    threshold = detection_threshold(alpha)
    spikes = []
    dropped = []
    for eig, vec in zip(eigs, vt):
        if eig <= threshold:
            break  # eigenvalues are sorted descending
        try:
            lam_hat = debias_eigenvalue(eig, alpha)
            p_corr = overlap_correction(lam_hat, alpha)
        except ValueError:
            dropped.append(float(eig))
            continue
        proj = abs(float(direction @ vec)) / (norm * p_corr)
        spikes.append((float(lam_hat), min(proj, 1.0), float(eig)))
    return spikes, threshold, dropped


def estimate_model(dataset: Dataset, homogeneous: bool = False) -> EstimationReport:
    """Full pipeline: noise levels, signal size, spikes, admissible projections."""
    x = dataset.features
    y = dataset.labels
    x_plus = x[y > 0]
    x_minus = x[y < 0]
    n_plus, n_minus = x_plus.shape[0], x_minus.shape[0]
    p = x.shape[1]
    if n_plus == 0 or n_minus == 0:
        raise ValueError("both classes are required for estimation")
    alpha_plus = n_plus / p
    alpha_minus = n_minus / p
    notes: list[str] = []

    if homogeneous:
        sigma_plus = sigma_minus = estimate_sigma(x)
    else:
        sigma_plus = estimate_sigma(x_plus)
        sigma_minus = estimate_sigma(x_minus)

    mean_diff = x_plus.mean(axis=0) - x_minus.mean(axis=0)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        mu_hat = estimate_mu(float(np.linalg.norm(mean_diff)), sigma_plus,
                             sigma_minus, alpha_plus, alpha_minus)
    notes.extend(str(w.message) for w in caught)
    # projections are normalized by the debiased signal norm 2 mu_hat: the raw
    # mean-difference norm carries an O(1) noise inflation that never vanishes
    # in the proportional regime and would bias every R_k toward zero
    signal_norm = 2.0 * mu_hat if mu_hat > 0 else None
    if signal_norm is None:
        notes.append("mu estimate is zero; spike projections use the raw mean difference")

    if homogeneous:
        pooled = np.vstack([x_plus - x_plus.mean(axis=0), x_minus - x_minus.mean(axis=0)])
        alpha_tot = alpha_plus + alpha_minus
        spikes, thr, dropped = estimate_spikes(
            pooled, alpha_tot, mean_diff, sigma=sigma_plus,
            divisor=max(n_plus + n_minus - 2, 1), signal_norm=signal_norm)
        lam_hats = [s[0] for s in spikes]
        r_hats = [s[1] for s in spikes]
        raw_plus = [s[2] for s in spikes]
        raw_minus = list(raw_plus)
        lambda_plus = lam_hats
        lambda_minus = list(lam_hats)
        thr_plus = thr_minus = thr
    else:
        spikes_p, thr_plus, dropped_p = estimate_spikes(
            x_plus, alpha_plus, mean_diff, sigma=sigma_plus, signal_norm=signal_norm)
        spikes_m, thr_minus, dropped_m = estimate_spikes(
            x_minus, alpha_minus, mean_diff, sigma=sigma_minus, signal_norm=signal_norm)
        dropped = dropped_p + dropped_m
        # concatenate: class-+ spikes first, zero strength in the other class
        lambda_plus = [s[0] for s in spikes_p] + [0.0] * len(spikes_m)
        lambda_minus = [0.0] * len(spikes_p) + [s[0] for s in spikes_m]
        r_hats = [s[1] for s in spikes_p] + [s[1] for s in spikes_m]
        raw_plus = [s[2] for s in spikes_p]
        raw_minus = [s[2] for s in spikes_m]

    if dropped:
        notes.append(f"dropped {len(dropped)} spike(s) with undefined overlap correction")

    r_vec = np.array(r_hats)
    total = float(np.sum(r_vec**2))
    if total > 1.0:
        r_vec *= (1.0 - 1e-6) / math.sqrt(total)
        notes.append("projection energy exceeded 1; rescaled R to unit norm minus epsilon")

    model = PopulationModel(
        mu=mu_hat,
        sigma_plus=sigma_plus,
        sigma_minus=sigma_minus,
        alpha_plus=alpha_plus,
        alpha_minus=alpha_minus,
        lambda_plus=tuple(lambda_plus),
        lambda_minus=tuple(lambda_minus),
        R=tuple(r_vec),
    )
    return EstimationReport(
        model=model,
        sample_eigs_plus=[float(e) for e in raw_plus],
        sample_eigs_minus=[float(e) for e in raw_minus],
        threshold_plus=thr_plus,
        threshold_minus=thr_minus,
        homogeneous=homogeneous,
        warnings=notes,
    )
