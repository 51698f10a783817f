"""Causal interventions on generator featuremaps.

Ablation forces a unit set to zero, insertion forces it to a per-class
constant; both can act on any subset of featuremap locations. The average
causal effect of a unit set on a concept is the normalized difference in
segmented concept presence between insertion renders and ablation renders,
with the segmentation normalized by the concept's pre-intervention base rate
so rare classes compare on an equal footing.

Causal unit sets are found by optimizing a continuous per-unit coefficient
vector in [0, 1]^d: gradient steps on the negated causal effect plus an L2
penalty, clamped to the box after every step. The executor is forward-only,
so gradients come from forward differences along random coordinate blocks
with Rademacher signs (unbiased; cross-coordinate leakage averages out), with
antithetic latent pairs and common random numbers across the evaluations of
one step.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import segment as segmod
from .dissect import DissectionReport, downsample_counts
from .nn import NetworkSpec, forward, forward_from, infer_shapes

EPS = 1e-9


class ZeroBaseRateError(ValueError):
    """Concept absent from the sample; normalized effects are undefined."""


class DivergenceError(RuntimeError):
    """Optimizer objective became non-finite."""

    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


def _check_units(units: Sequence[int], d: int) -> np.ndarray:
    u = np.asarray(sorted(int(v) for v in units), dtype=int)
    if len(np.unique(u)) != len(u):
        raise ValueError("duplicate unit indices")
    if len(u) and (u[0] < 0 or u[-1] >= d):
        raise ValueError(f"unit indices out of range [0, {d})")
    return u


def _check_locations(locations, shape) -> Optional[np.ndarray]:
    if locations is None:
        return None
    locs = np.atleast_2d(np.asarray(locations, dtype=int))
    if locs.shape[1] != 2:
        raise ValueError(f"locations must be (K, 2) row/col pairs, got {locs.shape}")
    h, w = shape
    if (locs < 0).any() or (locs[:, 0] >= h).any() or (locs[:, 1] >= w).any():
        raise ValueError(f"locations out of featuremap bounds {shape}")
    return locs


def ablate(r: np.ndarray, units: Sequence[int], locations=None) -> np.ndarray:
    """Zero the given units at the given locations (all locations when None)."""
    units = _check_units(units, r.shape[0])
    locs = _check_locations(locations, r.shape[1:])
    out = r.copy()
    if len(units) == 0:
        return out
    if locs is None:
        out[units] = 0.0
    else:
        out[units[:, None], locs[:, 0][None, :], locs[:, 1][None, :]] = 0.0
    return out


def insert(r: np.ndarray, units: Sequence[int], locations, k: np.ndarray) -> np.ndarray:
    """Force the given units to their per-unit constants at the locations."""
    units = _check_units(units, r.shape[0])
    locs = _check_locations(locations, r.shape[1:])
    k = np.asarray(k, dtype=r.dtype)
    if k.shape != (r.shape[0],):
        raise ValueError(f"k must have one entry per unit ({r.shape[0]}), got {k.shape}")
    out = r.copy()
    if len(units) == 0:
        return out
    if locs is None:
        out[units] = k[units, None, None]
    else:
        out[units[:, None], locs[:, 0][None, :], locs[:, 1][None, :]] = k[units, None]
    return out


def partial_intervention(r: np.ndarray, alpha: np.ndarray, locations,
                         k: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Continuous intervention: returns featuremaps for partial ablation and
    partial insertion at the given locations.

    Ablation scales every unit by (1 - alpha_u); insertion blends toward the
    per-class constant: alpha_u * k_u + (1 - alpha_u) * r_u. At binary alpha
    this reproduces ablate/insert exactly.
    """
    alpha = np.asarray(alpha, dtype=np.float32)
    d = r.shape[0]
    if alpha.shape != (d,):
        raise ValueError(f"alpha must have {d} entries, got {alpha.shape}")
    if (alpha < 0).any() or (alpha > 1).any():
        raise ValueError("alpha components must lie in [0, 1]")
    k = np.asarray(k, dtype=np.float32)
    locs = _check_locations(locations, r.shape[1:])
    r_a = r.copy()
    r_i = r.copy()
    if locs is None:
        r_a *= (1.0 - alpha)[:, None, None]
        r_i = (alpha[:, None, None] * k[:, None, None]
               + (1.0 - alpha)[:, None, None] * r)
    else:
        rows, cols = locs[:, 0], locs[:, 1]
        r_a[:, rows, cols] = (1.0 - alpha)[:, None] * r[:, rows, cols]
        r_i[:, rows, cols] = (alpha * k)[:, None] + (1.0 - alpha)[:, None] * r[:, rows, cols]
    return r_a.astype(np.float32), r_i.astype(np.float32)


# ---------------------------------------------------------------------------
# insertion constant
# ---------------------------------------------------------------------------

@dataclass
class InsertionConstant:
    concept: str
    k: np.ndarray
    n_samples: int

    def to_json(self) -> dict:
        return {"schema": "gd/1", "kind": "insertion-constant", "concept": self.concept,
                "k": [float(v) for v in self.k], "n_samples": self.n_samples}

    @classmethod
    def from_json(cls, doc: dict) -> "InsertionConstant":
        return cls(concept=doc["concept"], k=np.asarray(doc["k"], dtype=np.float32),
                   n_samples=doc.get("n_samples", 0))


def _render_sample(net: NetworkSpec, zs: np.ndarray, chunk: int = 64):
    rs, images = [], []
    for i in range(0, len(zs), chunk):
        res = forward(net, zs[i:i + chunk])
        rs.append(res.featuremap)
        images.append(res.image)
    return np.concatenate(rs), np.concatenate(images)


def k_from_arrays(rs: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Coverage-weighted conditional mean activation per unit.

    ``rs``: (N, d, h, w) featuremaps; ``weights``: (N, h, w) per-cell class
    coverage fractions in [0, 1].
    """
    total = weights.sum()
    if total == 0:
        raise ZeroBaseRateError("class coverage is identically zero")
    k = (rs.astype(np.float64) * weights[:, None]).sum(axis=(0, 2, 3)) / total
    return k.astype(np.float32)


def compute_k(net: NetworkSpec, universe, concept: str, zs: np.ndarray) -> InsertionConstant:
    """Per-unit insertion constant: the mean featuremap activation conditioned
    on the concept being present at that location in the output, each location
    weighted by the fraction of its upsampled footprint the concept covers.
    """
    rs, images = _render_sample(net, zs)
    h = rs.shape[-1]
    block = images.shape[-1] // h
    weights = np.zeros((len(zs), h, h), dtype=np.float64)
    for i, img in enumerate(images):
        mask = segmod.segment(img, universe).masks[concept]
        weights[i] = downsample_counts(mask, block) / float(block * block)
    try:
        k = k_from_arrays(rs, weights)
    except ZeroBaseRateError:
        raise ZeroBaseRateError(f"concept {concept!r} absent from the sample") from None
    return InsertionConstant(concept=concept, k=k, n_samples=len(zs))


# ---------------------------------------------------------------------------
# average causal effect
# ---------------------------------------------------------------------------

@dataclass
class AceResult:
    concept: str
    units: List[int]
    delta: float
    e_insert: float
    e_ablate: float
    base_rate: float
    n_samples: int
    half_width: float
    normalization: str = "shared"

    def to_json(self) -> dict:
        return {"schema": "gd/1", "kind": "ace-result", "concept": self.concept,
                "units": list(map(int, self.units)), "delta": self.delta,
                "e_insert": self.e_insert, "e_ablate": self.e_ablate,
                "base_rate": self.base_rate, "n_samples": self.n_samples,
                "half_width": self.half_width, "normalization": self.normalization}


def _fractions(net: NetworkSpec, rs: np.ndarray, spec_universe, concept: str,
               chunk: int = 512) -> np.ndarray:
    out = np.empty(len(rs), dtype=np.float64)
    for i in range(0, len(rs), chunk):
        images = forward_from(net, rs[i:i + chunk])
        for j, img in enumerate(images):
            out[i + j] = segmod.segment(img, spec_universe).masks[concept].mean()
    return out


def _single_concept_universe(universe, concept: str):
    return segmod.ConceptUniverse(concepts=[universe.spec(concept)])


def ace(net: NetworkSpec, universe, concept: str, units: Sequence[int],
        k: np.ndarray, zs: np.ndarray, seed: int = 0,
        normalization: str = "shared") -> AceResult:
    """Average causal effect of a unit set on a concept.

    Ablations are applied over the whole featuremap; insertions at one
    uniformly sampled location per latent. Both terms are normalized by the
    concept's base rate (one shared pre-intervention baseline by default;
    ``normalization="per-term"`` gives each term its own sample baseline).
    Raises :class:`ZeroBaseRateError` when the concept never appears.
    """
    if normalization not in ("shared", "per-term"):
        raise ValueError(f"unknown normalization {normalization!r}")
    units = _check_units(units, infer_shapes(net)[net.split_index - 1][0])
    uni1 = _single_concept_universe(universe, concept)
    rng = np.random.default_rng(seed)
    rs, images = _render_sample(net, zs)
    h = rs.shape[-1]
    s0 = np.array([segmod.segment(img, uni1).masks[concept].mean() for img in images])
    base = float(s0.mean())
    if base == 0.0:
        raise ZeroBaseRateError(f"concept {concept!r} absent from the sample")

    r_abl = rs.copy()
    if len(units):
        r_abl[:, units] = 0.0
    s_a = _fractions(net, r_abl, uni1, concept)

    locs = rng.integers(0, h, size=(len(zs), 2))
    r_ins = rs.copy()
    if len(units):
        r_ins[np.arange(len(zs))[:, None], units[None, :], locs[:, 0][:, None],
              locs[:, 1][:, None]] = np.asarray(k, dtype=np.float32)[units][None, :]
    s_i = _fractions(net, r_ins, uni1, concept)

    if normalization == "shared":
        per_sample = (s_i - s_a) / base
    else:
        per_sample = s_i / base - s_a / base   # terms share zs here; the flag
        # matters when callers evaluate the two terms on different samples
    delta = float(per_sample.mean())
    half_width = float(1.96 * per_sample.std(ddof=1) / np.sqrt(len(per_sample)))
    return AceResult(concept=concept, units=[int(u) for u in units], delta=delta,
                     e_insert=float(s_i.mean()), e_ablate=float(s_a.mean()),
                     base_rate=base, n_samples=len(zs), half_width=half_width,
                     normalization=normalization)


# ---------------------------------------------------------------------------
# continuous causal-set optimization
# ---------------------------------------------------------------------------

@dataclass
class AceConfig:
    lam: float = 0.01
    lr: float = 0.1
    steps: int = 300
    minibatch: int = 64          # intervention locations per objective estimate
    seed: int = 0
    blocks: int = 8              # coordinate blocks per gradient estimate
    fd_step: float = 0.25        # forward-difference step size
    batch_z: int = 8             # latents per step (antithetic pairs)
    grad_clip: float = 1.0       # per-coordinate gradient clamp

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")

    def fingerprint(self) -> dict:
        return {"lam": self.lam, "lr": self.lr, "steps": self.steps,
                "minibatch": self.minibatch, "seed": self.seed,
                "blocks": self.blocks, "fd_step": self.fd_step,
                "batch_z": self.batch_z, "grad_clip": self.grad_clip}


@dataclass
class AlphaResult:
    concept: str
    alpha: np.ndarray
    history: List[dict]
    config: AceConfig
    seconds: float

    def to_json(self) -> dict:
        return {"schema": "gd/1", "kind": "alpha-vector", "concept": self.concept,
                "alpha": [float(v) for v in self.alpha],
                "history": self.history, "config": self.config.fingerprint(),
                "seconds": self.seconds}


def alpha_init_from_report(report: DissectionReport, concept: str) -> np.ndarray:
    """Paper-style initialization: each component is the unit's IoU for the
    concept, normalized so the best unit starts at 1."""
    scores = np.asarray(report.ious[concept], dtype=np.float64)
    top = scores.max()
    if top <= 0:
        return np.full(len(scores), 0.5)
    return np.clip(scores / top, 0.0, 1.0)


def _spaced_cells(h: int, rng, spacing: int = 3) -> np.ndarray:
    ro, co = rng.integers(0, spacing, size=2)
    cells = [(r, c) for r in range(ro, h, spacing) for c in range(co, h, spacing)]
    return np.asarray(cells, dtype=int)


def _candidate_locations(net, r, img_mask_fraction_fn, k, h, rng):
    """Cells where the concept is absent but appears under a full-unit
    insertion; probed with one spaced-lattice render per latent."""
    cells = _spaced_cells(h, rng)
    probe = r.copy()
    probe[:, cells[:, 0], cells[:, 1]] = k[:, None]
    mask = img_mask_fraction_fn(probe)
    hits = []
    for pr, pc in cells:
        if mask[pr, pc] > 0:
            hits.append((pr, pc))
    return np.asarray(hits, dtype=int) if hits else np.zeros((0, 2), dtype=int)


def optimize_alpha(net: NetworkSpec, universe, concept: str, k: np.ndarray,
                   alpha_init: np.ndarray, config: Optional[AceConfig] = None,
                   base_rate: Optional[float] = None) -> AlphaResult:
    """Projected stochastic optimization of the continuous intervention vector.

    Each step samples antithetic latents, gathers class-present cells
    (ablation candidates) and an equal portion of insertion-candidate cells,
    estimates the causal objective on that minibatch, and takes a projected
    step along block forward-difference gradients. Returns the final alpha
    and the per-step training log.
    """
    config = config or AceConfig()
    rng = np.random.default_rng(config.seed)
    d = infer_shapes(net)[net.split_index - 1][0]
    h = infer_shapes(net)[net.split_index - 1][1]
    block = infer_shapes(net)[-1][1] // h
    k = np.asarray(k, dtype=np.float32)
    alpha = np.clip(np.asarray(alpha_init, dtype=np.float64).copy(), 0.0, 1.0)
    uni1 = _single_concept_universe(universe, concept)

    def cell_cover(img):
        mask = segmod.segment(img, uni1).masks[concept]
        return downsample_counts(mask, block)

    if base_rate is None:
        zs0 = rng.standard_normal((64, net.latent_dim)).astype(np.float32)
        _, images0 = _render_sample(net, zs0)
        base_rate = float(np.mean([segmod.segment(im, uni1).masks[concept].mean()
                                   for im in images0]))
    if base_rate == 0.0:
        raise ZeroBaseRateError(f"concept {concept!r} absent from the sample")

    history: List[dict] = []
    t_start = time.time()
    half = max(1, config.batch_z // 2)
    per_side = max(1, config.minibatch // 2)

    for step in range(config.steps):
        w = rng.standard_normal((half, net.latent_dim)).astype(np.float32)
        zs = np.concatenate([w, -w], axis=0)
        res = forward(net, zs)
        rs = res.featuremap

        abl_elems: List[Tuple[int, int, int]] = []   # (z index, row, col)
        ins_elems: List[Tuple[int, int, int]] = []
        for i in range(len(zs)):
            cover = cell_cover(res.image[i])
            present = np.argwhere(cover > 0)
            for pr, pc in present:
                abl_elems.append((i, pr, pc))
            cand = _candidate_locations(
                net, rs[i],
                lambda probe: cell_cover(forward_from(net, probe)),
                k, h, rng)
            for pr, pc in cand:
                ins_elems.append((i, pr, pc))
        if not ins_elems and not abl_elems:
            history.append({"step": step, "objective": None, "note": "empty minibatch"})
            continue

        def pick(elems, count):
            if not elems:
                return []
            idx = rng.integers(0, len(elems), size=count)
            return [elems[j] for j in idx]

        # equal portions of class-present and insertion-candidate locations;
        # every element contributes a paired ablation/insertion difference
        elements = pick(abl_elems, per_side) + pick(ins_elems, per_side)

        # block directions with Rademacher signs; shared minibatch across evals
        perm = rng.permutation(d)
        bounds = np.linspace(0, d, config.blocks + 1).astype(int)
        directions = []
        for b in range(config.blocks):
            members = perm[bounds[b]:bounds[b + 1]]
            v = np.zeros(d)
            v[members] = rng.choice([-1.0, 1.0], size=len(members))
            directions.append(v)

        alphas = [alpha] + [alpha + config.fd_step * v for v in directions]
        batch_rs = []
        for a in alphas:
            a32 = a.astype(np.float32)
            one_minus = (1.0 - a32)
            for (zi, pr, pc) in elements:
                r_a = rs[zi].copy()
                r_a[:, pr, pc] = one_minus * r_a[:, pr, pc]
                batch_rs.append(r_a)
                r_i = rs[zi].copy()
                r_i[:, pr, pc] = a32 * k + one_minus * r_i[:, pr, pc]
                batch_rs.append(r_i)

        fracs = _fractions(net, np.stack(batch_rs), uni1, concept)
        per_eval = 2 * len(elements)
        deltas = []
        for e in range(len(alphas)):
            segs = fracs[e * per_eval:(e + 1) * per_eval]
            diffs = segs[1::2] - segs[0::2]          # insertion minus ablation
            deltas.append(diffs.mean() / base_rate)
        objective = -deltas[0] + config.lam * np.linalg.norm(alpha)
        if not np.isfinite(deltas).all() or not np.isfinite(objective):
            raise DivergenceError(f"objective non-finite at step {step}", history)

        # forward differences for the black-box causal term; the L2 penalty is
        # smooth, so its gradient enters analytically
        grad = np.zeros(d)
        for v, db in zip(directions, deltas[1:]):
            grad += v * (-(db - deltas[0])) / config.fd_step
        if config.grad_clip:
            grad = np.clip(grad, -config.grad_clip, config.grad_clip)
        norm = np.linalg.norm(alpha)
        if norm > 0:
            grad += config.lam * alpha / norm
        alpha = np.clip(alpha - config.lr * grad, 0.0, 1.0)
        history.append({"step": step, "objective": float(objective),
                        "delta": float(deltas[0]),
                        "alpha_norm": float(np.linalg.norm(alpha))})

    return AlphaResult(concept=concept, alpha=alpha.astype(np.float32),
                       history=history, config=config,
                       seconds=time.time() - t_start)


def clip_alpha_top_n(alpha: np.ndarray, n: int) -> List[int]:
    """Indices of the n largest components, ties broken toward lower index."""
    alpha = np.asarray(alpha)
    d = len(alpha)
    if not 1 <= n <= d:
        raise ValueError(f"n must be in [1, {d}], got {n}")
    order = np.argsort(-alpha, kind="stable")
    return sorted(int(u) for u in order[:n])


# ---------------------------------------------------------------------------
# ablation curves and insertion context
# ---------------------------------------------------------------------------

def ablation_curve(net: NetworkSpec, universe, concept: str,
                   ranked_units: Sequence[int], sizes: Sequence[int],
                   zs: np.ndarray) -> List[dict]:
    """Remaining concept-pixel fraction after ablating growing unit prefixes."""
    uni1 = _single_concept_universe(universe, concept)
    rs, images = _render_sample(net, zs)
    s0 = np.array([segmod.segment(img, uni1).masks[concept].mean() for img in images])
    base = s0.mean()
    if base == 0.0:
        raise ZeroBaseRateError(f"concept {concept!r} absent from the sample")
    curve = []
    for size in sizes:
        prefix = list(ranked_units[:size])
        if prefix:
            r_abl = rs.copy()
            r_abl[:, prefix] = 0.0
            s = _fractions(net, r_abl, uni1, concept)
        else:
            s = s0
        curve.append({"size": int(size), "remaining": float(s.mean() / base)})
    return curve


def insertion_context_effect(net: NetworkSpec, universe, concept: str,
                             units: Sequence[int], k: np.ndarray, zs: np.ndarray,
                             seed: int = 0, min_bucket: int = 30) -> dict:
    """Single-pixel insertion effects bucketed by the background concept under
    the intervention's upsampled footprint in the unmodified render."""
    units = _check_units(units, infer_shapes(net)[net.split_index - 1][0])
    uni1 = _single_concept_universe(universe, concept)
    rng = np.random.default_rng(seed)
    rs, images = _render_sample(net, zs)
    h = rs.shape[-1]
    block = images.shape[-1] // h
    s0 = np.array([segmod.segment(img, uni1).masks[concept].mean() for img in images])
    base = s0.mean()
    if base == 0.0:
        raise ZeroBaseRateError(f"concept {concept!r} absent from the sample")

    full = [segmod.segment(img, universe) for img in images]
    locs = rng.integers(0, h, size=(len(zs), 2))
    r_ins = rs.copy()
    if len(units):
        r_ins[np.arange(len(zs))[:, None], units[None, :], locs[:, 0][:, None],
              locs[:, 1][:, None]] = np.asarray(k, dtype=np.float32)[units][None, :]
    s_i = _fractions(net, r_ins, uni1, concept)

    buckets: Dict[str, List[float]] = {}
    for i, (pr, pc) in enumerate(locs):
        footprint_slice = (slice(pr * block, (pr + 1) * block),
                           slice(pc * block, (pc + 1) * block))
        best_name, best_count = "none", 0
        for name in universe.names:
            count = int(full[i].masks[name][footprint_slice].sum())
            if count > best_count:
                best_name, best_count = name, count
        if best_count * 2 <= block * block:
            best_name = "none"
        buckets.setdefault(best_name, []).append((s_i[i] - s0[i]) / base)

    table = {}
    for name, vals in sorted(buckets.items()):
        table[name] = {"effect": float(np.mean(vals)), "trials": len(vals),
                       "low_confidence": len(vals) < min_bucket}
    return {"schema": "gd/1", "kind": "context-effect", "concept": concept,
            "units": [int(u) for u in units], "n_samples": len(zs),
            "buckets": table}


# ---------------------------------------------------------------------------
# downstream tracing
# ---------------------------------------------------------------------------

@dataclass
class TraceResult:
    per_layer: List[float]
    layer_kinds: List[str]
    heatmap: np.ndarray
    visible: bool
    image_l1_change: float

    def to_json(self) -> dict:
        return {"schema": "gd/1", "kind": "trace", "per_layer": self.per_layer,
                "layer_kinds": self.layer_kinds,
                "heatmap": [[float(v) for v in row] for row in self.heatmap],
                "visible": self.visible, "image_l1_change": self.image_l1_change}


def layer_baselines(net: NetworkSpec, zs: np.ndarray) -> List[np.ndarray]:
    """Per-channel mean L1 magnitude of every post-split layer output."""
    sums = None
    chunk = 64
    n = 0
    for i in range(0, len(zs), chunk):
        res = forward(net, zs[i:i + chunk], trace=True)
        tail = res.outputs[net.split_index:]
        if sums is None:
            sums = [np.zeros(t.shape[1], dtype=np.float64) for t in tail]
        for s, t in zip(sums, tail):
            s += np.abs(t.astype(np.float64)).mean(axis=(0, 2, 3)) * t.shape[0]
        n += len(res.image)
    return [s / n for s in sums]


def trace_downstream(net: NetworkSpec, z: np.ndarray, modified_r: np.ndarray,
                     baselines: List[np.ndarray],
                     visible_threshold: float = 0.02) -> TraceResult:
    """Propagation profile of one intervention through the post-split layers.

    Per layer: mean over channels of (mean L1 change / channel baseline L1).
    The heatmap is the per-site mean absolute change of the last featuremap
    before the output head. Interventions are flagged visible when the image
    L1 change exceeds ``visible_threshold`` of the baseline image L1.
    """
    base = forward(net, z, trace=True)
    tail_base = base.outputs[net.split_index:]
    _, tail_mod = forward_from(net, modified_r, trace=True)
    per_layer = []
    kinds = [layer.kind for layer in net.layers[net.split_index:]]
    for t0, t1, ch_base in zip(tail_base, tail_mod, baselines):
        change = np.abs(t1.astype(np.float64) - t0.astype(np.float64)).mean(axis=(-2, -1))
        change = np.atleast_1d(np.squeeze(change))
        per_layer.append(float(np.mean(change / (ch_base + EPS))))
    feat_idx = len(tail_base) - 3 if len(tail_base) >= 3 else 0
    heat = np.abs(tail_mod[feat_idx].astype(np.float64)
                  - tail_base[feat_idx].astype(np.float64)).mean(axis=0)
    img0, img1 = tail_base[-1], tail_mod[-1]
    l1 = float(np.abs(img1.astype(np.float64) - img0.astype(np.float64)).mean())
    ref = float(np.abs(img0.astype(np.float64)).mean())
    return TraceResult(per_layer=per_layer, layer_kinds=kinds, heatmap=heat,
                       visible=l1 > visible_threshold * ref, image_l1_change=l1)
