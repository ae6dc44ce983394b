"""Evaluation and posterior-analysis quantities.

Image error, mesh Hausdorff distance, the angular radius profile of a
drape silhouette, and closed-form diagonal-Gaussian utilities (KL, mixture
log likelihood, nearest-material ranking).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import directed_hausdorff
from scipy.special import logsumexp

from .render import CameraSpec

N_ANGLE_BINS = 360


class MetricError(ValueError):
    pass


def image_mse(predicted, reference) -> float:
    """Mean squared pixel difference between two equally sized images."""
    a = np.asarray(predicted, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"image shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def hausdorff(vertices_a, vertices_b) -> float:
    """Symmetric Hausdorff distance between two vertex sets, in meters."""
    a = np.atleast_2d(np.asarray(vertices_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(vertices_b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise MetricError("hausdorff needs nonempty vertex sets")
    if a.shape[1] != b.shape[1]:
        raise MetricError("vertex dimensionality mismatch")
    return max(directed_hausdorff(a, b)[0], directed_hausdorff(b, a)[0])


@dataclass(frozen=True)
class RadiusProfile:
    """Farthest-boundary radius per 1 degree ray from the silhouette centroid.

    radii is in meters; bins with no foreground pixel hold 0.0 and are
    flagged in empty_bins. centroid is the foreground centroid in world
    coordinates (meters).
    """
    radii: np.ndarray
    empty_bins: np.ndarray
    centroid: tuple

    @property
    def has_empty_bins(self) -> bool:
        return bool(self.empty_bins.any())

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["angle_deg", "radius_m"])
            for deg in range(N_ANGLE_BINS):
                writer.writerow([deg, repr(float(self.radii[deg]))])


def _fold_bins(dx, dy):
    """Angle bin per point, folded through quadrants so that a quarter-turn
    rotation (dx, dy) -> (-dy, dx) shifts every bin by exactly 90."""
    bins = np.empty(dx.shape, dtype=np.int64)

    def base(a, b):
        deg = np.degrees(np.arctan2(b, a))
        return np.clip(np.floor(deg).astype(np.int64), 0, 89)

    q1 = (dx > 0) & (dy >= 0)
    q2 = (dx <= 0) & (dy > 0)
    q3 = (dx < 0) & (dy <= 0)
    q4 = (dx >= 0) & (dy < 0)
    bins[q1] = base(dx[q1], dy[q1])
    bins[q2] = 90 + base(dy[q2], -dx[q2])
    bins[q3] = 180 + base(-dx[q3], -dy[q3])
    bins[q4] = 270 + base(-dy[q4], dx[q4])
    return bins


def radius_angle(silhouette, camera: CameraSpec,
                 threshold: float = 0.5) -> RadiusProfile:
    """Angular radius profile of a binarized silhouette.

    For each 1 degree ray from the foreground centroid, the radius of the
    farthest foreground pixel along that ray, converted to meters through
    the camera mapping. Rays with no pixel give radius 0 and a flag.
    """
    img = np.asarray(silhouette, dtype=np.float64)
    length = camera.resolution
    if img.shape != (length, length):
        raise MetricError(f"silhouette must be {(length, length)}")
    rows, cols = np.nonzero(img > threshold)
    n = rows.size
    if n == 0:
        raise MetricError("empty silhouette")

    # doubled centered pixel coordinates stay integers for even and odd
    # resolutions, so the centroid sums are exact and order independent
    px2 = 2 * cols.astype(np.int64) - (length - 1)
    py2 = (length - 1) - 2 * rows.astype(np.int64)
    cx2 = px2.sum() / n
    cy2 = py2.sum() / n
    dx = px2 - cx2
    dy = py2 - cy2

    off = (dx != 0) | (dy != 0)
    bins = _fold_bins(dx[off], dy[off])
    r_sq = dx[off] * dx[off] + dy[off] * dy[off]

    best = np.zeros(N_ANGLE_BINS)
    np.maximum.at(best, bins, r_sq)
    counts = np.bincount(bins, minlength=N_ANGLE_BINS)

    scale = 2.0 * camera.pixels_per_meter
    radii = np.sqrt(best) / scale
    centroid = (cx2 / scale + camera.center[0],
                cy2 / scale + camera.center[1])
    return RadiusProfile(radii=radii, empty_bins=counts == 0,
                         centroid=centroid)


@dataclass(frozen=True)
class GaussianPosteriorSummary:
    """Per-cloth diagonal Gaussian over material parameters."""
    label: str
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).ravel()
        std = np.asarray(self.std, dtype=np.float64).ravel()
        if mean.shape != std.shape:
            raise MetricError("mean/std length mismatch")
        if not np.all(std > 0):
            raise MetricError("stds must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)


def kl_diag_gauss(mean_p, std_p, mean_q, std_q) -> float:
    """KL(P || Q) between diagonal Gaussians, closed form."""
    mp = np.asarray(mean_p, dtype=np.float64).ravel()
    sp = np.asarray(std_p, dtype=np.float64).ravel()
    mq = np.asarray(mean_q, dtype=np.float64).ravel()
    sq = np.asarray(std_q, dtype=np.float64).ravel()
    if not (mp.shape == sp.shape == mq.shape == sq.shape):
        raise MetricError("dimension mismatch")
    if not (np.all(sp > 0) and np.all(sq > 0)):
        raise MetricError("stds must be positive")
    term = np.log(sq / sp) + (sp ** 2 + (mp - mq) ** 2) / (2.0 * sq ** 2) - 0.5
    return float(term.sum())


def gmm_loglik(components, tau) -> float:
    """Log density of tau under a uniform-weight mixture of the components."""
    if len(components) == 0:
        raise MetricError("need at least one mixture component")
    t = np.asarray(tau, dtype=np.float64).ravel()
    logs = np.array([_gauss_loglik(c, t) for c in components])
    return float(logsumexp(logs) - np.log(len(components)))


def _gauss_loglik(comp: GaussianPosteriorSummary, t) -> float:
    if t.shape != comp.mean.shape:
        raise MetricError("parameter dimension mismatch")
    z = (t - comp.mean) / comp.std
    return float(-0.5 * np.sum(z ** 2 + np.log(2.0 * np.pi * comp.std ** 2)))


def nearest_material(components, query):
    """Rank component labels by closeness to a posterior or a point.

    A GaussianPosteriorSummary query ranks ascending by KL(query || comp);
    an array query ranks descending by component log likelihood. Returns
    (label, score) pairs, ties broken by label.
    """
    if len(components) == 0:
        raise MetricError("need at least one component")
    if isinstance(query, GaussianPosteriorSummary):
        scored = [(kl_diag_gauss(query.mean, query.std, c.mean, c.std),
                   c.label) for c in components]
        scored.sort()
        return [(label, score) for score, label in scored]
    t = np.asarray(query, dtype=np.float64).ravel()
    scored = [(-_gauss_loglik(c, t), c.label) for c in components]
    scored.sort()
    return [(label, -neg) for neg, label in scored]
