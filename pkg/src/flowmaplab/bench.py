"""Toy datasets, sample-quality metrics, and JSON report emission."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .numerics import RngStream
from .oracle import GmmSpec

DATASET_KINDS = ("gaussian", "gmm-ring", "checkerboard", "two-moons")


@dataclass(frozen=True)
class DatasetSpec:
    """One of four 2-D toy distributions.

    ``gaussian`` uses (mean, scale); ``gmm-ring`` places ``modes``
    equal-weight components of width ``mode_scale`` on a circle of
    ``radius``; ``two-moons`` uses ``noise``.  ``labeled`` controls
    whether class labels (mixture component / moon index) are emitted.
    """

    kind: str = "gmm-ring"
    mean: tuple[float, float] = (0.0, 0.0)
    scale: float = 1.0
    modes: int = 8
    radius: float = 4.0
    mode_scale: float = 0.3
    noise: float = 0.1
    labeled: bool = True

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "gmm-ring" and self.modes < 1:
            raise ValueError("gmm-ring needs at least one mode")

    @property
    def num_classes(self) -> int:
        """Distinct labels this dataset emits (0 when unlabeled)."""
        if not self.labeled:
            return 0
        if self.kind == "gmm-ring":
            return self.modes
        if self.kind == "two-moons":
            return 2
        return 0

    def gmm(self) -> Optional[GmmSpec]:
        """Closed-form mixture when one exists (gaussian / gmm-ring)."""
        if self.kind == "gaussian":
            return GmmSpec(weights=(1.0,), means=(tuple(self.mean),), scales=(self.scale,))
        if self.kind == "gmm-ring":
            angles = 2.0 * np.pi * np.arange(self.modes) / self.modes
            means = tuple(
                (float(self.radius * np.cos(a)), float(self.radius * np.sin(a)))
                for a in angles
            )
            return GmmSpec(
                weights=tuple([1.0 / self.modes] * self.modes),
                means=means,
                scales=tuple([self.mode_scale] * self.modes),
            )
        return None


def sample_dataset(
    spec: DatasetSpec, n: int, rng: RngStream
) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Draw ``(points, labels)``; labels are None for unlabeled specs."""
    if spec.kind == "gaussian":
        x = np.asarray(spec.mean) + spec.scale * rng.normal((n, 2))
        return x, None
    if spec.kind == "gmm-ring":
        comp = rng.integers(0, spec.modes, (n,))
        centers = np.asarray(spec.gmm().means)
        x = centers[comp] + spec.mode_scale * rng.normal((n, 2))
        return x, (comp.astype(np.int64) if spec.labeled else None)
    if spec.kind == "checkerboard":
        x1 = rng.uniform((n,)) * 4.0 - 2.0
        x2 = rng.uniform((n,)) - rng.integers(0, 2, (n,)) * 2.0
        x2 = x2 + np.floor(x1) % 2
        return 2.0 * np.stack([x1, x2], axis=1), None
    # two-moons
    side = rng.integers(0, 2, (n,))
    ang = np.pi * rng.uniform((n,))
    x1 = np.where(side == 0, np.cos(ang), 1.0 - np.cos(ang))
    x2 = np.where(side == 0, np.sin(ang), 0.5 - np.sin(ang))
    x = np.stack([x1 - 0.5, x2 - 0.25], axis=1)
    x = 2.0 * x + spec.noise * rng.normal((n, 2))
    return x, (side.astype(np.int64) if spec.labeled else None)


def sliced_w2(
    a: np.ndarray, b: np.ndarray, n_projections: int = 128, rng: Optional[RngStream] = None
) -> float:
    """Sliced 2-Wasserstein distance between two point clouds.

    Averages the squared 1-D Wasserstein distance of the projections
    onto ``n_projections`` random unit directions, then takes the root.
    Equal-size clouds use the exact order-statistics formula; unequal
    sizes interpolate the empirical quantile functions.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"incompatible shapes {a.shape} vs {b.shape}")
    rng = rng or RngStream(0, "sliced-w2")
    dirs = rng.normal((n_projections, a.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa = np.sort(a @ dirs.T, axis=0)
    pb = np.sort(b @ dirs.T, axis=0)
    if a.shape[0] == b.shape[0]:
        w2_sq = np.mean((pa - pb) ** 2, axis=0)
    else:
        grid = (np.arange(max(a.shape[0], b.shape[0])) + 0.5) / max(a.shape[0], b.shape[0])
        qa_pos = (np.arange(a.shape[0]) + 0.5) / a.shape[0]
        qb_pos = (np.arange(b.shape[0]) + 0.5) / b.shape[0]
        w2_sq = np.empty(n_projections)
        for j in range(n_projections):
            qa = np.interp(grid, qa_pos, pa[:, j])
            qb = np.interp(grid, qb_pos, pb[:, j])
            w2_sq[j] = np.mean((qa - qb) ** 2)
    return float(np.sqrt(np.mean(w2_sq)))


def _mean_cross_dist(a: np.ndarray, b: np.ndarray, chunk: int = 512) -> float:
    total = 0.0
    for i in range(0, a.shape[0], chunk):
        d = np.sqrt(np.sum((a[i : i + chunk, None, :] - b[None, :, :]) ** 2, axis=-1))
        total += float(d.sum())
    return total / (a.shape[0] * b.shape[0])


def _mean_within_dist(a: np.ndarray, chunk: int = 512) -> float:
    n = a.shape[0]
    if n < 2:
        return 0.0
    total = 0.0
    for i in range(0, n, chunk):
        d = np.sqrt(np.sum((a[i : i + chunk, None, :] - a[None, :, :]) ** 2, axis=-1))
        total += float(d.sum())  # diagonal contributes zero
    return total / (n * (n - 1))


def energy_distance(a: np.ndarray, b: np.ndarray) -> float:
    """U-statistic energy distance 2 E|a-b| - E|a-a'| - E|b-b'|.

    Within-sample terms exclude the diagonal.  Zero iff the underlying
    distributions match (in expectation); computed in O(n m) chunks.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return 2.0 * _mean_cross_dist(a, b) - _mean_within_dist(a) - _mean_within_dist(b)


def mode_coverage(
    samples: np.ndarray, spec: GmmSpec, radius_mult: float = 3.0
) -> tuple[np.ndarray, float]:
    """Fraction of samples captured by each mixture component.

    A sample counts for its nearest component center if it lies within
    ``radius_mult`` times that component's scale; everything else lands
    in the remainder.  Returns ``(fractions, remainder)``.
    """
    x = np.asarray(samples, dtype=np.float64)
    centers = spec.means_arr
    scales = np.asarray(spec.scales, dtype=np.float64)
    d2 = np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=-1)
    nearest = np.argmin(d2, axis=1)
    within = d2[np.arange(x.shape[0]), nearest] <= (radius_mult * scales[nearest]) ** 2
    fracs = np.array(
        [float(np.mean((nearest == k) & within)) for k in range(spec.k)]
    )
    return fracs, float(1.0 - fracs.sum())


@dataclass
class MetricReport:
    sliced_w2: float
    energy_distance: float
    mode_coverage: Optional[list]
    mode_remainder: Optional[float]
    nfe: int
    wall_time: float
    n: int


def compute_metrics(
    samples: np.ndarray,
    reference: np.ndarray,
    rng: RngStream,
    gmm: Optional[GmmSpec] = None,
    nfe: int = 0,
    wall_time: float = 0.0,
    n_projections: int = 128,
) -> MetricReport:
    """Headline metric is sliced W2; energy distance and coverage support it."""
    cov, rem = (None, None)
    if gmm is not None:
        fracs, rem = mode_coverage(samples, gmm)
        cov = [float(f) for f in fracs]
    return MetricReport(
        sliced_w2=sliced_w2(samples, reference, n_projections, rng),
        energy_distance=energy_distance(samples, reference),
        mode_coverage=cov,
        mode_remainder=rem,
        nfe=nfe,
        wall_time=wall_time,
        n=int(samples.shape[0]),
    )


def config_digest(config: dict) -> str:
    """sha256 of the canonical (sorted, compact) JSON encoding."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def emit_report(path, report: MetricReport, config: dict, seed: int) -> dict:
    """Append one self-describing JSON line to ``path`` and return it."""
    payload = {
        "config_digest": config_digest(config),
        "seed": int(seed),
        **asdict(report),
    }
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(payload, sort_keys=True) + "\n")
    return payload
