"""Mode-collapse metrics for 2D mixtures."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .data import MixtureSpec

KL_SMOOTHING = 1e-10


@dataclass
class MetricsReport:
    iteration: int
    modes_captured: int
    hq_percent: float
    kl: float
    loss_d: float = float("nan")
    loss_g: float = float("nan")
    xi: np.ndarray = field(default_factory=lambda: np.full(6, np.nan))
    wall_seconds: float = 0.0

    def row(self) -> list:
        return [self.iteration, self.modes_captured, self.hq_percent, self.kl,
                self.loss_d, self.loss_g, *list(self.xi), self.wall_seconds]


def _center_distances(samples: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = np.asarray(samples, dtype=np.float64)[:, None, :] - np.asarray(centers)[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def modes_captured(samples: np.ndarray, centers: np.ndarray, stds: np.ndarray) -> int:
    """Number of centers with at least one sample within one std."""
    if len(samples) == 0:
        raise ValueError("need at least one sample")
    d = _center_distances(samples, centers)
    return int(np.sum(np.any(d <= np.asarray(stds)[None, :], axis=0)))


def high_quality_percent(samples: np.ndarray, centers: np.ndarray, stds: np.ndarray,
                         arc=None) -> float:
    """Percentage of samples within 3 stds of their nearest component.

    With ``arc`` given (SmileFace), the curve competes with the centers and its
    threshold is three jitter stds around the curve.
    """
    if len(samples) == 0:
        raise ValueError("need at least one sample")
    d = _center_distances(samples, centers)
    thresh = np.broadcast_to(3.0 * np.asarray(stds)[None, :], d.shape)
    if arc is not None:
        d = np.concatenate([d, arc.distance(samples)[:, None]], axis=1)
        thresh = np.concatenate([thresh, np.full((len(samples), 1), 3.0 * arc.jitter)], axis=1)
    nearest = np.argmin(d, axis=1)
    rows = np.arange(len(samples))
    good = d[rows, nearest] <= thresh[rows, nearest]
    return 100.0 * float(np.mean(good))


def classify(samples: np.ndarray, centers: np.ndarray, arc=None) -> np.ndarray:
    """Index of the nearest component (the arc, if any, is the last class)."""
    d = _center_distances(samples, centers)
    if arc is not None:
        d = np.concatenate([d, arc.distance(samples)[:, None]], axis=1)
    return np.argmin(d, axis=1)


def kl_modes(generated: np.ndarray, centers: np.ndarray, reference: np.ndarray, arc=None) -> float:
    """KL(generated || reference) between nearest-component class histograms."""
    if len(generated) == 0 or len(reference) == 0:
        raise ValueError("both sample sets must be non-empty")
    n_cls = len(centers) + (arc is not None)
    p = np.bincount(classify(generated, centers, arc), minlength=n_cls) / len(generated)
    q = np.bincount(classify(reference, centers, arc), minlength=n_cls) / len(reference)
    p = (p + KL_SMOOTHING) / np.sum(p + KL_SMOOTHING)
    q = (q + KL_SMOOTHING) / np.sum(q + KL_SMOOTHING)
    return max(float(np.sum(p * np.log(p / q))), 0.0)


def frechet_2d(generated: np.ndarray, reference: np.ndarray) -> float:
    """Fréchet distance between Gaussian fits of two planar point sets."""
    a = np.asarray(generated, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("need at least two points per set")
    mu1, mu2 = a.mean(axis=0), b.mean(axis=0)
    reg = 1e-9 * np.eye(a.shape[1])
    s1 = np.cov(a, rowvar=False) + reg
    s2 = np.cov(b, rowvar=False) + reg
    covmean = linalg.sqrtm(s1 @ s2)
    covmean = np.real(covmean)
    value = float(np.sum((mu1 - mu2) ** 2) + np.trace(s1 + s2 - 2.0 * covmean))
    return max(value, 0.0)


def evaluate_samples(generated: np.ndarray, spec: MixtureSpec, reference: np.ndarray) -> tuple[int, float, float]:
    """(modes captured, %HQ, KL) for a dataset description."""
    return (modes_captured(generated, spec.means, spec.stds),
            high_quality_percent(generated, spec.means, spec.stds, spec.arc),
            kl_modes(generated, spec.means, reference, spec.arc))
