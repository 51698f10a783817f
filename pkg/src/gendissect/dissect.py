"""Unit labeling by segmentation agreement.

A unit's one-channel featuremap, upsampled to image resolution and
thresholded, is compared against each concept's segmentation mask with an
intersection-over-union score. The threshold is chosen on a separate
validation sample to maximize the information quality ratio I(X;Y)/H(X,Y) of
the thresholded-activation/mask contingency. Each unit is then labeled with
its best-matching concept on a disjoint evaluation sample.

Because nearest upsampling replicates a cell's value across its whole
footprint, all pixel-level sums are computed exactly at cell granularity:
a cell contributes ``block**2`` pixels, of which ``S`` carry the concept.
Expectations follow the ratio-of-sums form (summed intersections over summed
unions), and contingencies pool all pixels of all images into one table.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import segment as segmod
from .nn import NetworkSpec, forward, infer_shapes

THRESHOLD_GRID_SIZE = 64
CLASS_PREDICTOR_ACC = 0.75
CLASS_PREDICTOR_IOU = 0.05
PART_PRESENCE_MIN = 0.05      # include parts only for concepts seen in >= 5% of samples
DEFAULT_VAL_SAMPLES = 200
DEFAULT_EVAL_SAMPLES = 1000


def info_quality_ratio(counts) -> float:
    """Mutual information over joint entropy for a 2x2 contingency table.

    ``counts`` is [[n00, n01], [n10, n11]] (first axis: thresholded unit,
    second: concept mask). Returns 0 when the joint entropy is 0; the
    convention 0*log(0) = 0 applies throughout.
    """
    c = np.asarray(counts, dtype=np.float64)
    if c.shape != (2, 2):
        raise ValueError(f"expected a 2x2 table, got shape {c.shape}")
    total = c.sum()
    if total <= 0:
        raise ValueError("contingency table must have positive total count")
    p = c / total
    px = p.sum(axis=1, keepdims=True)
    py = p.sum(axis=0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        h_terms = np.where(p > 0, p * np.log(p), 0.0)
        i_terms = np.where(p > 0, p * (np.log(p) - np.log(px) - np.log(py)), 0.0)
    joint_entropy = -h_terms.sum()
    if joint_entropy <= 0:
        return 0.0
    return float(i_terms.sum() / joint_entropy)


def _iqr_curve(n11, n10, n01, n00) -> np.ndarray:
    """Vectorized information quality ratio for arrays of table entries."""
    stack = np.stack([n00, n01, n10, n11], axis=-1).astype(np.float64)
    total = stack.sum(axis=-1, keepdims=True)
    p = stack / total
    p00, p01, p10, p11 = p[..., 0], p[..., 1], p[..., 2], p[..., 3]
    px0, px1 = p00 + p01, p10 + p11
    py0, py1 = p00 + p10, p01 + p11

    def plogp(v):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(v > 0, v * np.log(v), 0.0)

    h = -(plogp(p00) + plogp(p01) + plogp(p10) + plogp(p11))
    hx = -(plogp(px0) + plogp(px1))
    hy = -(plogp(py0) + plogp(py1))
    mi = hx + hy - h
    with np.errstate(divide="ignore", invalid="ignore"):
        iqr = np.where(h > 0, mi / h, 0.0)
    return iqr


@dataclass
class CellSample:
    """Per-cell activation and concept-coverage sums for a sample of images.

    ``activations``: (N, d, h, w) featuremaps. ``coverage[c]``: (N, h, w)
    counts of concept-c pixels inside each cell's upsampled footprint.
    ``block_pixels`` is the footprint size (upsample factor squared).
    """
    activations: np.ndarray
    coverage: Dict[str, np.ndarray]
    block_pixels: int
    base_rates: Dict[str, float]
    presence: Dict[str, float]        # fraction of images with >= 1 component


def downsample_counts(mask: np.ndarray, block: int) -> np.ndarray:
    h, w = mask.shape
    return mask.reshape(h // block, block, w // block, block).sum(axis=(1, 3))


def collect_cell_sample(net: NetworkSpec, universe, zs: np.ndarray,
                        layer_index: Optional[int] = None,
                        with_parts: bool = True) -> CellSample:
    """Render a latent batch, segment it, and reduce masks to cell coverage.

    ``layer_index`` selects which layer's output to dissect (default: the
    split layer). Part classes c-t/b/l/r are added for base concepts present
    in at least 5% of the sample.
    """
    if layer_index is None:
        layer_index = net.split_index - 1
    shapes = infer_shapes(net)
    if len(shapes[layer_index]) != 3:
        raise ValueError(f"layer {layer_index} output {shapes[layer_index]} is not a featuremap")
    feat_h = shapes[layer_index][1]
    img_h = shapes[-1][1]
    if img_h % feat_h:
        raise ValueError(f"image size {img_h} not divisible by featuremap size {feat_h}")
    block = img_h // feat_h

    acts = []
    results = []
    chunk = 64
    for i in range(0, len(zs), chunk):
        res = forward(net, zs[i:i + chunk], trace=True)
        acts.append(res.outputs[layer_index])
        for img in res.outputs[-1]:
            results.append(segmod.segment(img, universe))
    activations = np.concatenate(acts, axis=0)

    names = list(universe.names)
    presence = {}
    for name in names:
        hits = 0
        for res in results:
            if res.masks[name].any():
                hits += 1
        presence[name] = hits / len(results)

    expanded = []
    part_bases = [n for n in names if presence[n] >= PART_PRESENCE_MIN]
    part_universe = segmod.ConceptUniverse(
        concepts=[universe.spec(n) for n in part_bases]) if part_bases else None
    for res in results:
        if with_parts and part_universe is not None:
            expanded.append(segmod.expand_parts(res, part_universe))
        else:
            expanded.append(res)

    concept_names = list(names)
    if with_parts and part_bases:
        for n in part_bases:
            concept_names.extend(f"{n}-{s}" for s in segmod.PART_SUFFIXES)

    coverage = {}
    base_rates = {}
    n = len(expanded)
    for name in concept_names:
        cov = np.stack([downsample_counts(res.masks[name], block) for res in expanded])
        coverage[name] = cov.astype(np.int32)
        base_rates[name] = float(cov.sum() / (n * img_h * img_h))
    return CellSample(activations=activations, coverage=coverage,
                      block_pixels=block * block, base_rates=base_rates,
                      presence=presence)


@dataclass
class _SortedUnit:
    values: np.ndarray      # ascending flat activations
    order: np.ndarray
    degenerate: bool


def _sort_unit(acts_flat: np.ndarray) -> _SortedUnit:
    order = np.argsort(acts_flat, kind="stable")
    values = acts_flat[order]
    return _SortedUnit(values=values, order=order,
                       degenerate=bool(values[0] == values[-1]))


def threshold_grid(values: np.ndarray, size: int = THRESHOLD_GRID_SIZE) -> np.ndarray:
    """Candidate thresholds: quantiles of the activation pool.

    Half the levels are evenly spaced; the rest refine the upper tail
    geometrically, since an informative unit may fire on well under a
    percent of featuremap pixels. Midpoints of adjacent quantile values are
    added so that the gap between a sparse unit's off and on modes always
    contains a candidate regardless of where the firing rate falls between
    quantile levels.
    """
    half = size // 2
    even = np.arange(1, half + 1) / (half + 1)
    tail = 1.0 - (1.0 / 3.0) * 0.5 ** np.arange(size - half)
    qs = np.unique(np.concatenate([even, tail]))
    grid = np.unique(np.quantile(values, qs))
    mids = (grid[1:] + grid[:-1]) / 2.0
    return np.unique(np.concatenate([grid, mids]))


def _tables_for_grid(sorted_unit: _SortedUnit, cov_flat: np.ndarray,
                     block_pixels: int, grid: np.ndarray):
    cum_cov = np.concatenate([[0.0], np.cumsum(cov_flat[sorted_unit.order],
                                               dtype=np.float64)])
    total_cov = cum_cov[-1]
    n = len(sorted_unit.values)
    idx = np.searchsorted(sorted_unit.values, grid, side="right")
    n01 = cum_cov[idx]
    n11 = total_cov - n01
    n10 = (n - idx) * float(block_pixels) - n11
    n00 = idx * float(block_pixels) - n01
    return n11, n10, n01, n00


def select_threshold(acts: np.ndarray, coverage: np.ndarray, block_pixels: int,
                     grid_size: int = THRESHOLD_GRID_SIZE):
    """Pick the IQR-maximizing threshold on a validation sample.

    Args:
        acts: (N, h, w) one-unit featuremaps.
        coverage: (N, h, w) per-cell concept pixel counts.
        block_pixels: pixels per cell footprint.

    Returns:
        (threshold, iqr_value, degenerate_flag). Ties break toward the
        larger threshold; a constant-activation unit is flagged degenerate.
    """
    flat = acts.reshape(-1)
    su = _sort_unit(flat)
    if su.degenerate:
        return float(flat[0]), 0.0, True
    grid = threshold_grid(su.values, grid_size)
    n11, n10, n01, n00 = _tables_for_grid(su, coverage.reshape(-1).astype(np.float64),
                                          block_pixels, grid)
    iqr = _iqr_curve(n11, n10, n01, n00)
    best = iqr.max()
    best_idx = np.flatnonzero(iqr >= best - 1e-12)[-1]
    return float(grid[best_idx]), float(best), False


def iou(acts: np.ndarray, coverage: np.ndarray, block_pixels: int,
        threshold: float) -> float:
    """Ratio-of-sums IoU of the thresholded upsampled unit vs the concept mask."""
    above = acts > threshold
    inter = float(coverage[above].sum())
    union = float(above.sum() * block_pixels + coverage.sum() - inter)
    if union == 0:
        return 0.0
    return inter / union


def pixel_accuracy(acts: np.ndarray, coverage: np.ndarray, block_pixels: int,
                   threshold: float) -> float:
    above = acts > threshold
    n11 = float(coverage[above].sum())
    n01 = float(coverage.sum() - n11)
    n10 = float(above.sum() * block_pixels - n11)
    total = acts.size * block_pixels
    n00 = total - n11 - n01 - n10
    return (n11 + n00) / total


@dataclass
class UnitLabel:
    unit: int
    concept: str
    iou: float
    threshold: float
    pixel_acc: float
    class_predictor: bool
    degenerate: bool = False

    def to_json(self) -> dict:
        return {"unit": self.unit, "concept": self.concept, "iou": self.iou,
                "threshold": self.threshold, "pixel_acc": self.pixel_acc,
                "class_predictor": self.class_predictor, "degenerate": self.degenerate}


@dataclass
class DissectionReport:
    layer: int
    units: List[UnitLabel]
    histogram: Dict[str, int]
    concepts: List[str]
    samples: Dict[str, int]
    ious: Dict[str, List[float]] = field(default_factory=dict)   # per-concept IoU of every unit
    fid_filter: Optional[float] = None

    def label(self, unit: int) -> UnitLabel:
        return self.units[unit]

    def top_units(self, concept: str, n: int) -> List[int]:
        scores = np.asarray(self.ious[concept])
        order = np.argsort(-scores, kind="stable")
        return [int(u) for u in order[:n]]

    def interpretable_count(self) -> int:
        return sum(1 for u in self.units if u.class_predictor)

    def to_json(self) -> dict:
        return {"schema": "gd/1", "kind": "dissection-report", "layer": self.layer,
                "units": [u.to_json() for u in self.units],
                "histogram": dict(self.histogram), "concepts": list(self.concepts),
                "samples": dict(self.samples),
                "ious": {k: list(map(float, v)) for k, v in self.ious.items()},
                "fid_filter": self.fid_filter}

    @classmethod
    def from_json(cls, doc: dict) -> "DissectionReport":
        units = [UnitLabel(unit=u["unit"], concept=u["concept"], iou=u["iou"],
                           threshold=u["threshold"], pixel_acc=u["pixel_acc"],
                           class_predictor=u["class_predictor"],
                           degenerate=u.get("degenerate", False))
                 for u in doc["units"]]
        return cls(layer=doc["layer"], units=units, histogram=dict(doc["histogram"]),
                   concepts=list(doc["concepts"]), samples=dict(doc.get("samples", {})),
                   ious={k: list(v) for k, v in doc.get("ious", {}).items()},
                   fid_filter=doc.get("fid_filter"))


def label_units(net: NetworkSpec, universe, val_zs: np.ndarray, eval_zs: np.ndarray,
                layer_index: Optional[int] = None, with_parts: bool = True,
                min_val: int = DEFAULT_VAL_SAMPLES,
                min_eval: int = DEFAULT_EVAL_SAMPLES) -> DissectionReport:
    """Label every unit of a layer with its best concept by IoU.

    Thresholds are fitted per (unit, concept) on the validation latents;
    IoU, pixel accuracy and the class-predictor flag come from the disjoint
    evaluation latents. Deterministic given the latent batches.
    """
    if not universe.names:
        raise ValueError("empty concept universe")
    if len(val_zs) < min_val or len(eval_zs) < min_eval:
        raise ValueError(
            f"need >= {min_val} validation and >= {min_eval} evaluation samples, "
            f"got {len(val_zs)}/{len(eval_zs)}")
    val = collect_cell_sample(net, universe, val_zs, layer_index, with_parts)
    evl = collect_cell_sample(net, universe, eval_zs, layer_index, with_parts)
    concepts = [c for c in val.coverage if c in evl.coverage]

    d = val.activations.shape[1]
    labels = []
    ious = {c: [0.0] * d for c in concepts}
    for u in range(d):
        va = val.activations[:, u]
        ea = evl.activations[:, u]
        best = None
        for c in concepts:
            t, _, degenerate = select_threshold(va, val.coverage[c], val.block_pixels)
            score = 0.0 if degenerate else iou(ea, evl.coverage[c], evl.block_pixels, t)
            ious[c][u] = float(score)
            if best is None or score > best[0]:
                best = (score, c, t, degenerate)
        score, c, t, degenerate = best
        acc = pixel_accuracy(ea, evl.coverage[c], evl.block_pixels, t)
        labels.append(UnitLabel(
            unit=u, concept=c, iou=float(score), threshold=float(t),
            pixel_acc=float(acc),
            class_predictor=bool(acc > CLASS_PREDICTOR_ACC and score > CLASS_PREDICTOR_IOU),
            degenerate=degenerate))

    histogram: Dict[str, int] = {}
    for lab in labels:
        if lab.class_predictor:
            histogram[lab.concept] = histogram.get(lab.concept, 0) + 1
    layer = layer_index if layer_index is not None else net.split_index - 1
    return DissectionReport(layer=layer, units=labels, histogram=histogram,
                            concepts=concepts,
                            samples={"val": len(val_zs), "eval": len(eval_zs)},
                            ious=ious)


def compare_reports(reports: Sequence[DissectionReport]) -> dict:
    """Side-by-side comparison of dissection reports sharing a universe.

    Returns per-report interpretable-unit and per-concept counts plus
    pairwise set differences of interpretable units, and a rendered table.
    """
    if not reports:
        raise ValueError("need at least one report")
    base = set(reports[0].concepts)
    for rep in reports[1:]:
        if set(rep.concepts) != base:
            raise ValueError("reports do not share a concept universe")

    entries = []
    for rep in reports:
        entries.append({
            "layer": rep.layer,
            "interpretable_units": rep.interpretable_count(),
            "histogram": dict(rep.histogram),
        })
    diffs = []
    for i in range(len(reports) - 1):
        a = {u.unit for u in reports[i].units if u.class_predictor}
        b = {u.unit for u in reports[i + 1].units if u.class_predictor}
        hist_a, hist_b = reports[i].histogram, reports[i + 1].histogram
        keys = sorted(set(hist_a) | set(hist_b))
        diffs.append({
            "from": i, "to": i + 1,
            "gained": sorted(b - a), "lost": sorted(a - b),
            "histogram_delta": {k: hist_b.get(k, 0) - hist_a.get(k, 0) for k in keys},
        })

    concepts = sorted({k for e in entries for k in e["histogram"]})
    header = ["report", "interpretable"] + concepts
    rows = [header]
    for i, e in enumerate(entries):
        rows.append([str(i), str(e["interpretable_units"])]
                    + [str(e["histogram"].get(c, 0)) for c in concepts])
    widths = [max(len(r[j]) for r in rows) for j in range(len(header))]
    table = "\n".join("  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in rows)

    return {"schema": "gd/1", "kind": "report-comparison",
            "reports": entries, "diffs": diffs, "table": table}
