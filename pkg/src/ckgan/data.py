"""2D mixture datasets: Ring, Grid and SmileFace."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DATASETS = ("ring", "grid", "smile")


@dataclass(frozen=True)
class Arc:
    """Lower half of an axis-aligned ellipse plus isotropic jitter."""

    center: tuple[float, float] = (0.0, -0.3)
    semi_major: float = 0.6
    semi_minor: float = 0.5
    jitter: float = 0.01

    def points(self, phi: np.ndarray) -> np.ndarray:
        return np.stack([self.center[0] + self.semi_major * np.cos(phi),
                         self.center[1] - self.semi_minor * np.sin(phi)], axis=-1)

    def distance(self, pts: np.ndarray, resolution: int = 20001) -> np.ndarray:
        """Point-to-curve distance, against a dense polyline of the arc."""
        from scipy.spatial import cKDTree

        curve = self.points(np.linspace(0.0, np.pi, resolution))
        d, _ = cKDTree(curve).query(np.asarray(pts, dtype=np.float64))
        return d


@dataclass(frozen=True)
class MixtureSpec:
    means: np.ndarray                 # (K, 2)
    stds: np.ndarray                  # (K,)
    weights: np.ndarray               # (K,) or (K + 1,) when an arc is present
    arc: Arc | None = None

    def __post_init__(self):
        n_comp = len(self.means) + (self.arc is not None)
        if len(self.weights) != n_comp:
            raise ValueError("one weight per component is required")
        if abs(float(np.sum(self.weights)) - 1.0) > 1e-12 or np.any(self.weights < 0):
            raise ValueError("component weights must form a probability vector")
        if np.any(self.stds <= 0):
            raise ValueError("component stds must be positive")

    @property
    def n_modes(self) -> int:
        return len(self.means)


@dataclass(frozen=True)
class SmileConfig:
    eye_left: tuple[float, float] = (-0.4, 0.3)
    eye_right: tuple[float, float] = (0.4, 0.3)
    eye_var: float = 0.001
    arc: Arc = field(default_factory=Arc)
    weights: tuple[float, float, float] = (0.25, 0.25, 0.5)


def mixture(kind: str, smile: SmileConfig | None = None) -> MixtureSpec:
    """Ground-truth description of a dataset."""
    if kind == "ring":
        angles = 2 * np.pi * np.arange(8) / 8
        means = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        return MixtureSpec(means, np.full(8, 1e-4), np.full(8, 1 / 8))
    if kind == "grid":
        ticks = np.array([-4.0, -2.0, 0.0, 2.0, 4.0])
        means = np.array([(a, b) for a in ticks for b in ticks])
        return MixtureSpec(means, np.full(25, 5e-3), np.full(25, 1 / 25))
    if kind == "smile":
        s = smile or SmileConfig()
        means = np.array([s.eye_left, s.eye_right], dtype=np.float64)
        return MixtureSpec(means, np.full(2, np.sqrt(s.eye_var)), np.array(s.weights, dtype=np.float64), s.arc)
    raise ValueError(f"unknown dataset {kind!r}; choose from {DATASETS}")


def mode_centers(kind: str, smile: SmileConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian mode centers and their stds (SmileFace: the two eyes)."""
    spec = mixture(kind, smile)
    return spec.means.copy(), spec.stds.copy()


def sample(kind: str, n: int, rng: np.random.Generator, smile: SmileConfig | None = None) -> np.ndarray:
    """Draw ``n`` i.i.d. points of shape (n, 2)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    spec = mixture(kind, smile)
    comp = rng.choice(len(spec.weights), size=n, p=spec.weights)
    noise = rng.standard_normal((n, 2))
    out = np.empty((n, 2))
    gauss = comp < spec.n_modes
    out[gauss] = spec.means[comp[gauss]] + noise[gauss] * spec.stds[comp[gauss], None]
    if spec.arc is not None:
        on_arc = ~gauss
        phi = rng.uniform(0.0, np.pi, size=int(on_arc.sum()))
        out[on_arc] = spec.arc.points(phi) + noise[on_arc] * spec.arc.jitter
    return out


def make_noise(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform[-1, 1] latent codes of shape (n, dim)."""
    return rng.uniform(-1.0, 1.0, size=(n, dim))
