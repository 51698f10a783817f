"""Per-unit realism scoring by Fréchet distance, and repair by ablation.

Each unit is scored by generating a batch of images, keeping the top-k by
that unit's mean featuremap activation, and measuring the Fréchet distance
between Gaussian statistics of their embeddings and a reference
distribution. Units that stand out with high scores are artifact suspects;
ablating the worst offenders repairs the generator, and dissection labels
can be filtered by the same scores.

The embedding is a stand-in for a pretrained feature extractor: by default a
bilinear downsample to 8x8x3, in which tile-structured artifacts remain
loud; a seeded random projection is available as an alternative.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import linalg as slinalg

from .nn import NetworkSpec, forward
from .dissect import DissectionReport, UnitLabel

UNREALISTIC = "unrealistic"
EIGEN_CLAMP_WARN = 1e-3


@dataclass
class EmbeddingSpec:
    kind: str = "downsample"      # downsample | random-projection
    dim: int = 192
    size: int = 8                 # downsample grid
    seed: int = 0                 # random projection seed

    def describe(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "size": self.size, "seed": self.seed}


def _bilinear_resize(images: np.ndarray, size: int) -> np.ndarray:
    n, c, h, w = images.shape
    # sample at pixel centers of the coarse grid
    ys = (np.arange(size) + 0.5) * h / size - 0.5
    xs = (np.arange(size) + 0.5) * w / size - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)
    wx = np.clip(xs - x0, 0.0, 1.0)
    top = (images[:, :, y0][:, :, :, x0] * (1 - wx) + images[:, :, y0][:, :, :, x1] * wx)
    bot = (images[:, :, y1][:, :, :, x0] * (1 - wx) + images[:, :, y1][:, :, :, x1] * wx)
    return top * (1 - wy)[None, None, :, None] + bot * wy[None, None, :, None]


def embed(images: np.ndarray, spec: Optional[EmbeddingSpec] = None) -> np.ndarray:
    """Feature matrix (N, D) for a batch of images; deterministic per spec."""
    spec = spec or EmbeddingSpec()
    if images.ndim != 4:
        raise ValueError(f"expected (N, 3, H, W) images, got shape {images.shape}")
    if len(images) == 0:
        raise ValueError("empty image batch")
    imgs = images.astype(np.float64)
    if spec.kind == "downsample":
        return _bilinear_resize(imgs, spec.size).reshape(len(imgs), -1)
    if spec.kind == "random-projection":
        flat = imgs.reshape(len(imgs), -1)
        rng = np.random.default_rng(spec.seed)
        proj = rng.standard_normal((flat.shape[1], spec.dim)) / np.sqrt(flat.shape[1])
        return flat @ proj
    raise ValueError(f"unknown embedding kind {spec.kind!r}")


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        asym = np.abs(self.cov - self.cov.T).max() if self.cov.size else 0.0
        if asym > 1e-6:
            raise ValueError(f"covariance asymmetric by {asym}")


def gaussian_stats(features: np.ndarray) -> GaussianStats:
    """Sample mean and unbiased covariance, symmetrized."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ValueError(f"need >= 2 feature rows, got shape {features.shape}")
    mean = features.mean(axis=0)
    cov = np.cov(features, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    cov = (cov + cov.T) / 2.0
    return GaussianStats(mean=mean, cov=cov, count=len(features))


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """Fréchet distance between two Gaussians:
    ||mu_a - mu_b||^2 + Tr(C_a + C_b - 2 (C_a C_b)^{1/2}).

    The matrix square root is taken through the symmetric product
    C_a^{1/2} C_b C_a^{1/2}; negative eigenvalues from numerical noise are
    clamped at zero, as is the final value.
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    diff = a.mean - b.mean
    va, ua = np.linalg.eigh(a.cov)
    va = np.clip(va, 0.0, None)
    sqrt_a = (ua * np.sqrt(va)) @ ua.T
    inner = sqrt_a @ b.cov @ sqrt_a
    inner = (inner + inner.T) / 2.0
    vals = np.linalg.eigvalsh(inner)
    vals = np.clip(vals, 0.0, None)
    trace_sqrt = np.sqrt(vals).sum()
    dist = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * trace_sqrt)
    return max(dist, 0.0)


@dataclass
class UnitFidScore:
    unit: int
    fid: float
    n_generate: int
    top_k: int
    clamped: bool = False

    def to_json(self) -> dict:
        return {"unit": self.unit, "fid": self.fid, "n_generate": self.n_generate,
                "top_k": self.top_k, "clamped": self.clamped}


def _generate(net: NetworkSpec, zs: np.ndarray, chunk: int = 128):
    images, acts = [], []
    for i in range(0, len(zs), chunk):
        res = forward(net, zs[i:i + chunk])
        images.append(res.image)
        acts.append(res.featuremap.mean(axis=(2, 3)))
    return np.concatenate(images), np.concatenate(acts)


def reference_stats(net: NetworkSpec, zs: np.ndarray,
                    disabled_units: Sequence[int] = (),
                    spec: Optional[EmbeddingSpec] = None) -> GaussianStats:
    """Embedding statistics of the generator with the given units ablated;
    used as the 'real' distribution for unit scores."""
    rs_needed = len(disabled_units) > 0
    images = []
    chunk = 128
    for i in range(0, len(zs), chunk):
        res = forward(net, zs[i:i + chunk])
        if rs_needed:
            r = res.featuremap.copy()
            r[:, list(disabled_units)] = 0.0
            from .nn import forward_from
            images.append(forward_from(net, r))
        else:
            images.append(res.image)
    return gaussian_stats(embed(np.concatenate(images), spec))


def unit_fid_scores(net: NetworkSpec, reference: GaussianStats, seed: int = 0,
                    n_generate: int = 2000, top_k: int = 200,
                    spec: Optional[EmbeddingSpec] = None,
                    units: Optional[Sequence[int]] = None) -> List[UnitFidScore]:
    """Score every unit (or a subset) from one shared generation pass.

    Images are ranked per unit by mean featuremap activation; ties keep the
    earlier sample. The top-k subset's embedding statistics are compared to
    the reference with the Fréchet distance.
    """
    if top_k > n_generate:
        raise ValueError(f"top_k {top_k} exceeds n_generate {n_generate}")
    if top_k < 2:
        raise ValueError("top_k must be >= 2 for covariance estimation")
    from .scenes import sample_z
    zs = sample_z(seed, n_generate, net.latent_dim)
    images, acts = _generate(net, zs)
    feats = embed(images, spec)
    d = acts.shape[1]
    unit_list = list(range(d)) if units is None else [int(u) for u in units]
    scores = []
    for u in unit_list:
        order = np.argsort(-acts[:, u], kind="stable")
        top = order[:top_k]
        stats = gaussian_stats(feats[top])
        vals = np.linalg.eigvalsh(stats.cov)
        clamped = bool(vals.min() < 0 and -vals.min() > EIGEN_CLAMP_WARN * np.trace(stats.cov))
        scores.append(UnitFidScore(unit=u, fid=frechet_distance(stats, reference),
                                   n_generate=n_generate, top_k=top_k, clamped=clamped))
    return scores


def unit_fid(unit: int, net: NetworkSpec, reference: GaussianStats, seed: int = 0,
             n_generate: int = 2000, top_k: int = 200,
             spec: Optional[EmbeddingSpec] = None) -> UnitFidScore:
    """Score a single unit; see :func:`unit_fid_scores`."""
    return unit_fid_scores(net, reference, seed=seed, n_generate=n_generate,
                           top_k=top_k, spec=spec, units=[unit])[0]


def rank_artifact_units(scores: Sequence[UnitFidScore]) -> List[UnitFidScore]:
    """Scores in descending FID order (worst realism first)."""
    return sorted(scores, key=lambda s: (-s.fid, s.unit))


def repair(scores: Sequence[UnitFidScore], top_m: int) -> List[int]:
    """Units to ablate everywhere for all subsequent generations."""
    if top_m < 0:
        raise ValueError("top_m must be >= 0")
    ranked = rank_artifact_units(scores)
    return sorted(s.unit for s in ranked[:top_m])


def filter_dissection_by_fid(report: DissectionReport,
                             scores: Sequence[UnitFidScore],
                             threshold: float) -> DissectionReport:
    """Mark units whose FID exceeds the threshold as unrealistic and drop
    them from the concept histogram."""
    by_unit: Dict[int, float] = {s.unit: s.fid for s in scores}
    missing = [u.unit for u in report.units if u.unit not in by_unit]
    if missing:
        raise ValueError(f"scores missing for units {missing[:8]}")
    units = []
    histogram: Dict[str, int] = {}
    for lab in report.units:
        if by_unit[lab.unit] >= threshold:
            units.append(UnitLabel(unit=lab.unit, concept=UNREALISTIC, iou=lab.iou,
                                   threshold=lab.threshold, pixel_acc=lab.pixel_acc,
                                   class_predictor=False, degenerate=lab.degenerate))
        else:
            units.append(lab)
            if lab.class_predictor:
                histogram[lab.concept] = histogram.get(lab.concept, 0) + 1
    return DissectionReport(layer=report.layer, units=units, histogram=histogram,
                            concepts=report.concepts, samples=report.samples,
                            ious=report.ious, fid_filter=float(threshold))
