"""Oracle semantic segmentation for synthetic scenes.

A pixel belongs to a concept when its hue falls in the concept's band with
saturation and value above floors, and (for rect/disc concepts) when its
connected component matches the concept's canonical shape raster with
overlap >= 0.9. Stripe concepts segment by hue alone, which keeps region
classes (sky bands, building walls) robust to occlusion by foreground
shapes. The rules are total and deterministic; slightly perturbed renders
(post-intervention color scaling, overlays) still segment because bands are
wide and the shape test tolerates small erosion.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .geometry import footprint_patch

SAT_MIN = 0.25
VAL_MIN = 0.15
MIN_COMPONENT = 24     # pixels; rejects speckle from overlays
SHAPE_SCORE = 0.9

PART_SUFFIXES = ("t", "b", "l", "r")

_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=int)


@dataclass
class ConceptSpec:
    name: str
    hue_range: Tuple[float, float]
    shape: str                       # rect | disc | stripe
    sat_min: float = SAT_MIN
    val_min: float = VAL_MIN


@dataclass
class ConceptUniverse:
    concepts: List[ConceptSpec]

    def __post_init__(self):
        names = [c.name for c in self.concepts]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate concept names in universe: {names}")

    @property
    def names(self) -> List[str]:
        return [c.name for c in self.concepts]

    def spec(self, name: str) -> ConceptSpec:
        for c in self.concepts:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_json(self) -> dict:
        return {"schema": "gd/1", "kind": "concept-universe",
                "concepts": [{"name": c.name, "hue_range": list(c.hue_range),
                              "shape": c.shape, "sat_min": c.sat_min,
                              "val_min": c.val_min}
                             for c in self.concepts]}

    @classmethod
    def from_json(cls, doc: dict) -> "ConceptUniverse":
        concepts = []
        for c in doc["concepts"]:
            concepts.append(ConceptSpec(
                name=c["name"], hue_range=tuple(c["hue_range"]), shape=c["shape"],
                sat_min=c.get("sat_min", SAT_MIN), val_min=c.get("val_min", VAL_MIN)))
        return cls(concepts=concepts)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "ConceptUniverse":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


@dataclass
class Component:
    label: int
    pixel_count: int
    bbox: Tuple[int, int, int, int]   # (row0, col0, row1, col1), inclusive


@dataclass
class SegmentationResult:
    """Per-concept binary masks for one image; contains every universe concept."""
    masks: Dict[str, np.ndarray]
    shape: Tuple[int, int]

    def mask(self, concept: str) -> np.ndarray:
        return self.masks[concept]

    def coverage(self, concept: str) -> float:
        return float(self.masks[concept].mean())


def rgb_to_hsv(image01: np.ndarray):
    """Vectorized HSV from an rgb image in [0, 1], shape (3, H, W)."""
    r, g, b = image01
    mx = image01.max(axis=0)
    mn = image01.min(axis=0)
    rng = mx - mn
    hue = np.zeros_like(mx)
    m = rng > 1e-12
    idx = m & (mx == r)
    hue[idx] = ((g - b)[idx] / rng[idx]) % 6.0
    idx = m & (mx == g) & (mx != r)
    hue[idx] = 2.0 + (b - r)[idx] / rng[idx]
    idx = m & (mx == b) & (mx != r) & (mx != g)
    hue[idx] = 4.0 + (r - g)[idx] / rng[idx]
    hue /= 6.0
    sat = np.where(mx > 1e-12, rng / np.maximum(mx, 1e-12), 0.0)
    return hue, sat, mx


def connected_components(mask: np.ndarray):
    """4-connected labeling with per-component pixel counts and tight boxes."""
    labels, n = ndimage.label(mask, structure=_FOUR_CONN)
    comps = []
    for i, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        region = labels[sl] == i
        comps.append(Component(
            label=i, pixel_count=int(region.sum()),
            bbox=(sl[0].start, sl[1].start, sl[0].stop - 1, sl[1].stop - 1)))
    return labels, comps


def _template_score(region: np.ndarray, bbox, template: np.ndarray, shape) -> float:
    """Best overlap-over-union of the component against the template anchored
    at each bbox corner (border clipping moves the anchor off center)."""
    h, w = shape
    th, tw = template.shape
    r0, c0, r1, c1 = bbox
    best = 0.0
    for ar in {r0, r1 - th + 1}:
        for ac in {c0, c1 - tw + 1}:
            rr0, cc0 = max(ar, 0), max(ac, 0)
            rr1, cc1 = min(ar + th, h), min(ac + tw, w)
            if rr1 <= rr0 or cc1 <= cc0:
                continue
            placed = np.zeros(shape, dtype=bool)
            placed[rr0:rr1, cc0:cc1] = template[rr0 - ar:rr1 - ar, cc0 - ac:cc1 - ac]
            inter = np.logical_and(placed, region).sum()
            union = np.logical_or(placed, region).sum()
            if union and inter / union > best:
                best = inter / union
    return best


def _shape_filter(band: np.ndarray, spec: ConceptSpec) -> np.ndarray:
    if spec.shape == "stripe":
        return band
    labels, comps = connected_components(band)
    keep = np.zeros_like(band)
    template = footprint_patch("disc") if spec.shape == "disc" else None
    for comp in comps:
        if comp.pixel_count < MIN_COMPONENT:
            continue
        r0, c0, r1, c1 = comp.bbox
        if spec.shape == "rect":
            fill = comp.pixel_count / ((r1 - r0 + 1) * (c1 - c0 + 1))
            if fill < SHAPE_SCORE:
                continue
        else:
            region = labels == comp.label
            if _template_score(region, comp.bbox, template, band.shape) < SHAPE_SCORE:
                continue
        keep |= labels == comp.label
    return keep


def segment(image: np.ndarray, universe: ConceptUniverse) -> SegmentationResult:
    """Label every pixel of a [-1, 1] RGB image against the concept universe."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got shape {image.shape}")
    image01 = np.clip((image.astype(np.float64) + 1.0) / 2.0, 0.0, 1.0)
    hue, sat, val = rgb_to_hsv(image01)
    masks = {}
    for spec in universe.concepts:
        lo, hi = spec.hue_range
        band = (hue >= lo) & (hue <= hi) & (sat >= spec.sat_min) & (val >= spec.val_min)
        masks[spec.name] = _shape_filter(band, spec)
    return SegmentationResult(masks=masks, shape=image.shape[1:])


def segment_batch(images: np.ndarray, universe: ConceptUniverse) -> List[SegmentationResult]:
    return [segment(img, universe) for img in images]


def expand_parts(result: SegmentationResult, universe: ConceptUniverse) -> SegmentationResult:
    """Add c-t / c-b / c-l / c-r masks: halves of each connected component's
    bounding box, computed per component. Odd extents give the extra row to
    the top half and the extra column to the left half."""
    masks = dict(result.masks)
    for spec in universe.concepts:
        base = result.masks[spec.name]
        parts = {s: np.zeros_like(base) for s in PART_SUFFIXES}
        labels, comps = connected_components(base)
        for comp in comps:
            region = labels == comp.label
            r0, c0, r1, c1 = comp.bbox
            mid_r = r0 + (r1 - r0 + 2) // 2       # ceil of half height
            mid_c = c0 + (c1 - c0 + 2) // 2
            top = np.zeros_like(base)
            top[r0:mid_r, :] = True
            left = np.zeros_like(base)
            left[:, c0:mid_c] = True
            parts["t"] |= region & top
            parts["b"] |= region & ~top
            parts["l"] |= region & left
            parts["r"] |= region & ~left
        for s in PART_SUFFIXES:
            masks[f"{spec.name}-{s}"] = parts[s]
    return SegmentationResult(masks=masks, shape=result.shape)


def base_rate(results: Sequence[SegmentationResult], concept: str) -> float:
    """Mean fraction of pixels labeled ``concept`` over a sample.

    An exact 0.0 is the zero-rate flag: normalization downstream must refuse
    to divide by it.
    """
    if not results:
        raise ValueError("base_rate needs a non-empty sample")
    return float(np.mean([res.masks[concept].mean() for res in results]))
