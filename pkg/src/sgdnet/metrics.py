"""Image-quality metrics: affine-fit SNR and SSIM.

The SNR metric scores an estimate up to an affine ambiguity: it maximizes
20*log10(||x|| / ||x - a*xhat + b||) over scalars (a, b), which reduces to
simple linear regression of the truth on the estimate. Perfect matches hit
a +inf sentinel; CSV output caps values at 300 dB.

SSIM follows the standard formulation: mean local structural similarity
over Gaussian-weighted windows (11x11, sigma 1.5), constants
C1=(0.01*L)^2, C2=(0.03*L)^2 for dynamic range L.
"""

import csv
from dataclasses import dataclass

import numpy as np

__all__ = ["snr_db", "affine_fit", "ssim", "MetricReport",
           "write_metrics_csv", "SNR_CSV_CAP"]

SNR_CSV_CAP = 300.0


def affine_fit(xhat, x):
    """Scalars (a, b) minimizing ||x - a*xhat + b||. b carries the sign it
    has inside that residual (so the optimal offset is subtracted as -b)."""
    xh = np.asarray(xhat, dtype=np.float64).ravel()
    xv = np.asarray(x, dtype=np.float64).ravel()
    if xh.shape != xv.shape:
        raise ValueError("shape mismatch between estimate and truth")
    mh = xh.mean()
    mv = xv.mean()
    centered = xh - mh
    denom = float(np.sum(centered * centered))
    if denom == 0.0:
        a = 0.0
    else:
        a = float(np.sum((xv - mv) * centered) / denom)
    b = a * mh - mv  # residual is x - a*xhat + b
    return a, b


def snr_db(xhat, x):
    """Affine-fit SNR in dB; +inf when the fitted residual vanishes."""
    xv = np.asarray(x, dtype=np.float64).ravel()
    x_norm = float(np.sqrt(np.sum(xv * xv)))
    if x_norm == 0.0:
        raise ValueError("ground truth has zero norm")
    a, b = affine_fit(xhat, x)
    resid = xv - a * np.asarray(xhat, dtype=np.float64).ravel() + b
    r_norm = float(np.sqrt(np.sum(resid * resid)))
    if r_norm < 1e-300:
        return float("inf")
    return 20.0 * np.log10(x_norm / r_norm)


def _gaussian_window(size, sigma):
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def _window_means(img, window):
    k = window.shape[0]
    patches = np.lib.stride_tricks.sliding_window_view(img, (k, k))
    return np.tensordot(patches, window, axes=([2, 3], [0, 1]))


def ssim(xhat, x, dynamic_range):
    """Mean local SSIM over valid Gaussian windows. The 11x11 window
    shrinks to the largest odd size that fits very small images."""
    p = np.asarray(xhat, dtype=np.float64)
    q = np.asarray(x, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    if p.ndim != 2:
        raise ValueError("ssim expects 2-D images")
    if dynamic_range <= 0:
        raise ValueError("dynamic_range must be positive")
    size = min(11, p.shape[0], p.shape[1])
    if size % 2 == 0:
        size -= 1
    window = _gaussian_window(size, 1.5)
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2
    mu_p = _window_means(p, window)
    mu_q = _window_means(q, window)
    var_p = _window_means(p * p, window) - mu_p * mu_p
    var_q = _window_means(q * q, window) - mu_q * mu_q
    cov = _window_means(p * q, window) - mu_p * mu_q
    num = (2.0 * mu_p * mu_q + c1) * (2.0 * cov + c2)
    den = (mu_p * mu_p + mu_q * mu_q + c1) * (var_p + var_q + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    """Per-image metric values plus aggregates. SNR aggregates use values
    capped at the CSV cap so +inf sentinels stay finite."""

    snr_values: list
    ssim_values: list
    aggregates: dict

    @classmethod
    def from_pairs(cls, estimates, truths, dynamic_range=1.0):
        snrs = [snr_db(e, t) for e, t in zip(estimates, truths)]
        ssims = [ssim(e, t, dynamic_range) for e, t in zip(estimates, truths)]
        capped = np.minimum(snrs, SNR_CSV_CAP)
        agg = {
            "snr_mean": float(np.mean(capped)),
            "snr_median": float(np.median(capped)),
            "snr_std": float(np.std(capped)),
            "ssim_mean": float(np.mean(ssims)),
            "ssim_median": float(np.median(ssims)),
            "ssim_std": float(np.std(ssims)),
        }
        return cls(list(snrs), list(ssims), agg)


def write_metrics_csv(path, entries):
    """entries: iterable of dicts with image_id, method, snr_db, ssim.
    Infinite SNRs are written as the 300 dB cap."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["image_id", "method", "snr_db", "ssim"])
        for e in entries:
            v = min(float(e["snr_db"]), SNR_CSV_CAP)
            w.writerow([e["image_id"], e["method"], repr(v),
                        repr(float(e["ssim"]))])
