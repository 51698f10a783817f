"""Synthetic generators with analytically planted causal units.

The generator family built here is the ground-truth substrate for every
analysis in this package. A latent vector ``z`` feeds a two-layer dense head
``h`` that emits a 64-channel 8x8 featuremap ``r``; a convolutional tail ``f``
decodes ``r`` into a 64x64 RGB image. The weights of both halves are
constructed, not trained, so the causal structure is known exactly:

* Each planted concept (door, tree, sky) owns a disjoint set of units. The
  tail renders the concept's shape at a featuremap cell exactly when the mean
  activation of its units at that cell crosses a gate level.
* Doors additionally require building context: the gate is coupled to the
  mean of the structure units (which encode the building region), and a
  second AND stage vetoes door rendering outside it. Inserting door units
  into the sky therefore changes nothing in the image, mirroring the
  context dependence the analyses are meant to detect.
* A few designated artifact units are routed into a high-frequency tiled
  blotch overlaid on the image with strength proportional to their
  activation.
* The remaining units drive building structure, per-concept color jitter,
  and background texture only.

Scene grammar: a fixed horizon splits the image into a hazy upper region and
a building-colored lower region; sky may gate on as a stripe across the top
row of cells; trees gate on at cells in the upper region; doors gate on at
cells inside the building region. Concepts appear in roughly a quarter of
samples each.

Calibration summary (r-space activation levels): concept units sit near 3.0
at gated cells and below 0.5 elsewhere; gates in the tail fire well inside
that gap, and the per-class insertion constant (the class-conditional
coverage-weighted mean activation) lands above every gate level by
construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import ndtri

from .geometry import BLOCK, DIAMOND, FM, HORIZ, IMG, VERT, concept_footprint, footprint_patch
from .nn import DTYPE, LayerSpec, NetworkSpec, forward

PAINT = IMG // 2       # resolution at which regions are painted (then upsampled x2)

N_STRUCT = 16          # units encoding the building region
N_JITTER = 5           # door/tree/sky/building hue jitter + global brightness
CONCEPTS = ("door", "tree", "sky")

# r-space activation calibration: tree units run hotter because their wide
# footprint dilutes the class-conditional mean the insertion constant uses
CONCEPT_ON = {"door": 3.0, "tree": 4.0, "sky": 3.0}
ACT_NOISE = 0.2
TREE_SKY_BASE = 0.05
DOOR_BASE = 0.055
DOOR_BASE_SKYROW = 0.30    # door units rest higher in the sky stripe, so an
                           # identical insertion there is a smaller featuremap
                           # change than one in the building region
STRUCT_ON = 1.0
STRUCT_NOISE = 0.1
STRUCT_OFF = 0.02
TEX_BASE = 0.3
TEX_NOISE = 0.25

# tail-side gates: (threshold, width); a gate is fully open at threshold+width
DOOR_GATE = (1.75, 0.10)   # applied to mean(door units) + mean(structure units)
TREE_GATE = (0.55, 0.12)
SKY_GATE = (0.85, 0.20)
BLDG_GATE = (0.30, 0.20)   # applied to mean(structure units)

# latent score thresholds (scores are exactly standard normal)
SITE_TAU = 1.675           # per-site gate rate ~4.7% -> ~25% of scenes show the concept
SKY_TAU = float(ndtri(0.75))
SCORE_WIDTH = 0.08         # softness of latent-score steps

DOOR_SITES = tuple((6, c) for c in range(1, 7))
TREE_SITES = tuple((2, c) for c in range(1, 7))
SKY_ROW = 0
HORIZON_ROW = 4            # building occupies featuremap rows >= 4

# colors as rgb in [0, 1] after tanh; hue jitter deltas stay inside each hue band
COLOR = {
    "door": (0.72, 0.36, 0.12),
    "tree": (0.15, 0.62, 0.20),
    "sky": (0.30, 0.55, 0.85),
    "building": (0.62, 0.57, 0.30),
    "haze": (0.55, 0.55, 0.58),
}
JITTER_DELTA = {
    "door": (0.00, 0.03, -0.01),
    "tree": (-0.03, 0.00, 0.03),
    "sky": (0.04, -0.03, 0.00),
    "building": (0.00, 0.02, -0.01),
}
HUE_BAND = {
    "door": (0.005, 0.108),
    "building": (0.115, 0.205),
    "tree": (0.260, 0.440),
    "sky": (0.500, 0.680),
}
BRIGHT_AMP = 0.06          # global brightness jitter amplitude (pre-tanh, equal RGB)
TEX_AMP = 0.25
TEX_MEAN = TEX_BASE + TEX_NOISE * 0.75
ARTIFACT_PAINT = 0.115      # pre-tanh overlay per unit of artifact-channel value


class ConfigError(ValueError):
    """Raised for infeasible generator configurations."""


class PlantedOverlapError(ValueError):
    """Raised when artifact units overlap planted concept units."""


@dataclass
class GeneratorConfig:
    latent_dim: int = 32
    channels: int = 64
    feat_size: int = 8
    image_size: int = 64
    concept_units: Dict[str, int] = field(
        default_factory=lambda: {"door": 8, "tree": 8, "sky": 8})
    artifact_unit_count: int = 4

    def validate(self) -> None:
        size = self.image_size
        if size < 16 or size & (size - 1):
            raise ConfigError(f"image_size must be a power of two >= 16, got {size}")
        if self.feat_size != FM or self.image_size != IMG:
            raise ConfigError(
                f"builder is calibrated to {FM}x{FM} featuremaps and {IMG}x{IMG} images")
        unknown = set(self.concept_units) - set(CONCEPTS)
        if unknown:
            raise ConfigError(f"unknown concepts {sorted(unknown)}; supported: {CONCEPTS}")
        planted = sum(self.concept_units.values())
        reserved = N_STRUCT + N_JITTER + 1   # structure + jitter + at least one texture unit
        if planted + self.artifact_unit_count + reserved > self.channels:
            raise ConfigError(
                f"{planted} planted + {self.artifact_unit_count} artifact units exceed "
                f"capacity ({self.channels} channels minus {reserved} reserved)")
        if self.latent_dim < 16:
            raise ConfigError(f"latent_dim must be >= 16, got {self.latent_dim}")


@dataclass
class PlantedConcept:
    name: str
    units: List[int]
    shape: str                      # rect | disc | stripe
    sites: List[Tuple[int, int]]    # featuremap cells where the concept can gate on
    gate_level: float               # r-space mean-activation threshold for rendering
    color: Tuple[float, float, float]


@dataclass
class ArtifactPattern:
    """Tiled blotch: each artifact unit activates as amplitude * tile value.

    Each unit's high tiles sit on their own 2x2 cell sub-lattice (the
    ``phases`` entry picks the class), so overlays from several units never
    flatten into a constant."""
    phases: List[int]               # sub-lattice class per unit, 0..3
    signs: List[int]                # +1 paints bright, -1 paints dark
    tile_low: float = 0.2
    tile_high: float = 1.8
    amplitude: float = 1.3

    def tile(self, index: int, pr: int, pc: int) -> float:
        cls = ((pr % 2) * 2 + (pc % 2))
        return self.tile_high if cls == self.phases[index] % 4 else self.tile_low


@dataclass
class PlantedTruth:
    concepts: List[PlantedConcept]
    artifact_units: List[int]
    structure_units: List[int]
    jitter_units: Dict[str, int]
    texture_units: List[int]
    artifact_pattern: Optional[ArtifactPattern]
    config: GeneratorConfig
    seed: int
    builder_meta: dict = field(default_factory=dict)

    def concept(self, name: str) -> PlantedConcept:
        for c in self.concepts:
            if c.name == name:
                return c
        raise KeyError(name)

    @property
    def planted_units(self) -> set:
        out = set()
        for c in self.concepts:
            out.update(c.units)
        return out


def sample_z(seed: int, count: int, latent_dim: int = 32) -> np.ndarray:
    """Deterministic batch of standard-normal latents, shape (count, latent_dim)."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    return rng.standard_normal((count, latent_dim), dtype=np.float32)



# ---------------------------------------------------------------------------
# latent head construction
# ---------------------------------------------------------------------------

class _FeatureBank:
    """Rows of the first dense layer: features of the form relu(w . z - tau).

    Directions are unit-norm so each score w . z is exactly standard normal,
    which pins gate rates to normal quantiles.
    """

    def __init__(self, latent_dim: int, rng: np.random.Generator):
        self.latent_dim = latent_dim
        self.rng = rng
        self.rows: List[np.ndarray] = []
        self.offsets: List[float] = []

    def direction(self) -> np.ndarray:
        v = self.rng.standard_normal(self.latent_dim)
        return v / np.linalg.norm(v)

    def _add(self, w: np.ndarray, offset: float) -> int:
        self.rows.append(w)
        self.offsets.append(offset)
        return len(self.rows) - 1

    def pair(self, tau: float, width: float, w: Optional[np.ndarray] = None):
        """Two relu features whose difference is clamp(score - tau, 0, width)."""
        if w is None:
            w = self.direction()
        return self._add(w, -tau), self._add(w, -tau - width)

    @property
    def size(self) -> int:
        return len(self.rows)

    def dense(self) -> LayerSpec:
        kernel = np.stack(self.rows).astype(DTYPE)
        bias = np.asarray(self.offsets, dtype=DTYPE)
        return LayerSpec("dense", kernel=kernel, bias=bias)


def _step_coefs(pair, scale, width):
    lo, hi = pair
    return [(lo, scale / width), (hi, -scale / width)]


def _clamp_coefs(pair, scale):
    lo, hi = pair
    return [(lo, scale), (hi, -scale)]


# ---------------------------------------------------------------------------
# tail construction
# ---------------------------------------------------------------------------

class _Conv:
    def __init__(self, in_names: Sequence[str], out_names: Sequence[str], ksize: int = 1):
        self.in_idx = {n: i for i, n in enumerate(in_names)}
        self.out_idx = {n: i for i, n in enumerate(out_names)}
        self.out_names = list(out_names)
        self.kernel = np.zeros((len(out_names), len(in_names), ksize, ksize))
        self.bias = np.zeros(len(out_names))
        self.center = ksize // 2

    def tap(self, out: str, inp: str, coef: float, dy: int = 0, dx: int = 0):
        self.kernel[self.out_idx[out], self.in_idx[inp],
                    self.center + dy, self.center + dx] += coef

    def passthrough(self, names: Sequence[str]):
        for n in names:
            self.tap(n, n, 1.0)

    def set_bias(self, out: str, value: float):
        self.bias[self.out_idx[out]] = value

    def layer(self) -> LayerSpec:
        pad = self.kernel.shape[-1] // 2
        return LayerSpec("conv2d", kernel=self.kernel.astype(DTYPE),
                         bias=self.bias.astype(DTYPE), padding=pad)


def _pre_tanh(rgb):
    v = 2.0 * np.asarray(rgb, dtype=np.float64) - 1.0
    return np.arctanh(v)


def _pre_delta(base, delta):
    b = np.asarray(base, dtype=np.float64)
    d = np.asarray(delta, dtype=np.float64)
    return (_pre_tanh(b + d) - _pre_tanh(b - d)) / 2.0


def _build_tail(unit_groups: dict, pattern: ArtifactPattern) -> List[LayerSpec]:
    """Convolutional layers from r to the image; see the module docstring for
    the staged gate -> dilate -> occlude -> paint pipeline."""
    d = unit_groups["channels"]
    units_in = [f"u{i}" for i in range(d)]
    jit_names = ["j_door", "j_tree", "j_sky", "j_bldg", "j_bright"]

    # stage A @8x8: linear gate inputs, then relu, gates, context AND
    a1_out = ["door_lo", "door_hi", "tree_lo", "tree_hi", "sky_lo", "sky_hi",
              "bldg_lo", "bldg_hi", "art_b", "art_d"] + jit_names + ["tex"]
    a1 = _Conv(units_in, a1_out)
    for u in unit_groups["door"]:
        a1.tap("door_lo", f"u{u}", 1.0 / len(unit_groups["door"]))
        a1.tap("door_hi", f"u{u}", 1.0 / len(unit_groups["door"]))
    for u in unit_groups["struct"]:
        for ch in ("door_lo", "door_hi", "bldg_lo", "bldg_hi"):
            a1.tap(ch, f"u{u}", 1.0 / len(unit_groups["struct"]))
    for u in unit_groups["tree"]:
        a1.tap("tree_lo", f"u{u}", 1.0 / len(unit_groups["tree"]))
        a1.tap("tree_hi", f"u{u}", 1.0 / len(unit_groups["tree"]))
    for u in unit_groups["sky"]:
        a1.tap("sky_lo", f"u{u}", 1.0 / len(unit_groups["sky"]))
        a1.tap("sky_hi", f"u{u}", 1.0 / len(unit_groups["sky"]))
    for name, (lo_hi, gate) in {"door": ("door", DOOR_GATE), "tree": ("tree", TREE_GATE),
                                "sky": ("sky", SKY_GATE), "bldg": ("bldg", BLDG_GATE)}.items():
        a1.set_bias(f"{lo_hi}_lo", -gate[0])
        a1.set_bias(f"{lo_hi}_hi", -(gate[0] + gate[1]))
    for u, sign in zip(unit_groups["artifact"], pattern.signs):
        a1.tap("art_b" if sign > 0 else "art_d", f"u{u}", 1.0)
    for jn, u in zip(jit_names, unit_groups["jitter"]):
        a1.tap(jn, f"u{u}", 1.0)
    for u in unit_groups["texture"]:
        a1.tap("tex", f"u{u}", 1.0 / max(1, len(unit_groups["texture"])))

    a3_out = ["and_door", "tree", "sky", "bldg", "art_b", "art_d"] + jit_names + ["tex"]
    a3 = _Conv(a1_out, a3_out)
    a3.tap("and_door", "door_lo", 1.0 / DOOR_GATE[1])
    a3.tap("and_door", "door_hi", -1.0 / DOOR_GATE[1])
    a3.tap("and_door", "bldg_lo", 1.0 / BLDG_GATE[1])
    a3.tap("and_door", "bldg_hi", -1.0 / BLDG_GATE[1])
    a3.set_bias("and_door", -1.5)
    a3.tap("tree", "tree_lo", 1.0 / TREE_GATE[1])
    a3.tap("tree", "tree_hi", -1.0 / TREE_GATE[1])
    a3.tap("sky", "sky_lo", 1.0 / SKY_GATE[1])
    a3.tap("sky", "sky_hi", -1.0 / SKY_GATE[1])
    a3.tap("bldg", "bldg_lo", 1.0 / BLDG_GATE[1])
    a3.tap("bldg", "bldg_hi", -1.0 / BLDG_GATE[1])
    a3.passthrough(["art_b", "art_d", "tex"] + jit_names)

    mask_names = ["door", "tree", "sky", "bldg", "art_b", "art_d"] + jit_names + ["tex"]
    a5 = _Conv(a3_out, mask_names)
    a5.tap("door", "and_door", 2.0)
    a5.passthrough([n for n in mask_names if n != "door"])

    # stage B @16x16: vertical door growth, first disc growth; saturate at 1
    b2_out = mask_names + ["door_sat", "tree_sat"]
    b2 = _Conv(mask_names, b2_out, ksize=3)
    for dy, dx in VERT:
        b2.tap("door", "door", 1.0, dy, dx)
        b2.tap("door_sat", "door", 1.0, dy, dx)
    b2.set_bias("door_sat", -1.0)
    for dy, dx in DIAMOND:
        b2.tap("tree", "tree", 1.0, dy, dx)
        b2.tap("tree_sat", "tree", 1.0, dy, dx)
    b2.set_bias("tree_sat", -1.0)
    b2.passthrough([n for n in mask_names if n not in ("door", "tree")])

    b4 = _Conv(b2_out, mask_names)
    b4.tap("door", "door", 1.0)
    b4.tap("door", "door_sat", -1.0)
    b4.tap("tree", "tree", 1.0)
    b4.tap("tree", "tree_sat", -1.0)
    b4.passthrough([n for n in mask_names if n not in ("door", "tree")])

    # stage C @32x32: horizontal door growth, second disc growth
    c2 = _Conv(mask_names, b2_out, ksize=3)
    for dy, dx in HORIZ:
        c2.tap("door", "door", 1.0, dy, dx)
        c2.tap("door_sat", "door", 1.0, dy, dx)
    c2.set_bias("door_sat", -1.0)
    for dy, dx in DIAMOND:
        c2.tap("tree", "tree", 1.0, dy, dx)
        c2.tap("tree_sat", "tree", 1.0, dy, dx)
    c2.set_bias("tree_sat", -1.0)
    c2.passthrough([n for n in mask_names if n not in ("door", "tree")])

    c4 = _Conv(b2_out, mask_names)
    c4.tap("door", "door", 1.0)
    c4.tap("door", "door_sat", -1.0)
    c4.tap("tree", "tree", 1.0)
    c4.tap("tree", "tree_sat", -1.0)
    c4.passthrough([n for n in mask_names if n not in ("door", "tree")])

    # stage D @32x32: occlusion priority (tree/door over sky/building), masked
    # jitters via the relu shift trick, then linear paint in pre-tanh space
    d2_out = ["v_door", "v_tree", "sky_occ", "bldg_occ", "haze",
              "art_b", "art_d"] + jit_names + ["tex"]
    d2 = _Conv(mask_names, d2_out)
    d2.tap("v_door", "door", 1.0)
    d2.tap("v_tree", "tree", 1.0)
    d2.tap("sky_occ", "sky", 1.0)
    d2.tap("sky_occ", "tree", -1.0)
    d2.set_bias("sky_occ", -0.5)
    d2.tap("bldg_occ", "bldg", 1.0)
    d2.tap("bldg_occ", "door", -1.0)
    d2.tap("bldg_occ", "tree", -1.0)
    d2.set_bias("bldg_occ", -0.5)
    for n in ("door", "tree", "sky", "bldg"):
        d2.tap("haze", n, -1.0)
    d2.set_bias("haze", 0.5)
    d2.passthrough(["art_b", "art_d", "tex"] + jit_names)

    d4_out = ["v_door", "v_tree", "v_sky", "v_bldg", "v_haze",
              "mj_door", "mj_tree", "mj_sky", "mj_bldg",
              "j_bright", "art_b", "art_d", "tex"]
    d4 = _Conv(d2_out, d4_out)
    d4.tap("v_door", "v_door", 1.0)
    d4.tap("v_tree", "v_tree", 1.0)
    d4.tap("v_sky", "sky_occ", 2.0)
    d4.tap("v_bldg", "bldg_occ", 2.0)
    d4.tap("v_haze", "haze", 2.0)
    # masked jitter: relu(j - 10 + 10 v) equals j exactly where the mask is 1
    for mj, j, v, coef in (("mj_door", "j_door", "v_door", 10.0),
                           ("mj_tree", "j_tree", "v_tree", 10.0),
                           ("mj_sky", "j_sky", "sky_occ", 20.0),
                           ("mj_bldg", "j_bldg", "bldg_occ", 20.0)):
        d4.tap(mj, j, 1.0)
        d4.tap(mj, v, coef)
        d4.set_bias(mj, -10.0)
    d4.passthrough(["j_bright", "art_b", "art_d", "tex"])

    paint = _Conv(d4_out, ["red", "green", "blue"])
    pre = {name: _pre_tanh(COLOR[key]) for name, key in
           (("v_door", "door"), ("v_tree", "tree"), ("v_sky", "sky"),
            ("v_bldg", "building"), ("v_haze", "haze"))}
    deltas = {name: _pre_delta(COLOR[key], JITTER_DELTA[key]) for name, key in
              (("mj_door", "door"), ("mj_tree", "tree"),
               ("mj_sky", "sky"), ("mj_bldg", "building"))}
    for i, ch in enumerate(("red", "green", "blue")):
        for v_name, p in pre.items():
            paint.tap(ch, v_name, p[i])
        for mj_name, dcol in deltas.items():
            v_name = mj_name.replace("mj_", "v_")
            paint.tap(ch, v_name, -dcol[i])       # recenter: jitter j=1 is neutral
            paint.tap(ch, mj_name, dcol[i])
        paint.tap(ch, "j_bright", BRIGHT_AMP)
        paint.tap(ch, "art_b", ARTIFACT_PAINT)
        paint.tap(ch, "art_d", -ARTIFACT_PAINT)
        paint.tap(ch, "tex", TEX_AMP)
        paint.set_bias(ch, -BRIGHT_AMP - TEX_MEAN * TEX_AMP)

    relu = lambda: LayerSpec("leaky-relu", slope=0.0)
    ups = lambda: LayerSpec("upsample-nearest", factor=2)
    return [a1.layer(), relu(), a3.layer(), relu(), a5.layer(),
            ups(), b2.layer(), relu(), b4.layer(),
            ups(), c2.layer(), relu(), c4.layer(),
            d2.layer(), relu(), d4.layer(), relu(), paint.layer(),
            ups(), LayerSpec("tanh")]


# ---------------------------------------------------------------------------
# builder
# ---------------------------------------------------------------------------

def build_planted_generator(config: Optional[GeneratorConfig] = None,
                            seed: int = 0) -> Tuple[NetworkSpec, PlantedTruth]:
    """Construct a planted generator and its ground-truth description.

    Deterministic given (config, seed). Raises :class:`ConfigError` for
    infeasible configurations.
    """
    config = config or GeneratorConfig()
    config.validate()
    rng = np.random.default_rng(seed)
    d = config.channels

    perm = [int(v) for v in rng.permutation(d)]
    groups = {"channels": d}
    cursor = 0
    for name in CONCEPTS:
        n = config.concept_units.get(name, 0)
        groups[name] = sorted(perm[cursor:cursor + n])
        cursor += n
    groups["artifact"] = sorted(perm[cursor:cursor + config.artifact_unit_count])
    cursor += config.artifact_unit_count
    groups["struct"] = sorted(perm[cursor:cursor + N_STRUCT])
    cursor += N_STRUCT
    groups["jitter"] = perm[cursor:cursor + N_JITTER]
    cursor += N_JITTER
    groups["texture"] = sorted(perm[cursor:])

    bank = _FeatureBank(config.latent_dim, rng)
    sky_pair = bank.pair(SKY_TAU, SCORE_WIDTH)
    door_pairs = [bank.pair(SITE_TAU, SCORE_WIDTH) for _ in DOOR_SITES]
    tree_pairs = [bank.pair(SITE_TAU, SCORE_WIDTH) for _ in TREE_SITES]
    noise_pairs = {u: bank.pair(-1.0, 2.0) for u in range(d)}     # clamp(s+1, 0, 2)
    jitter_pairs = [bank.pair(-1.0, 2.0) for _ in range(N_JITTER)]

    n_out = d * FM * FM
    w3 = np.zeros((n_out, bank.size))
    b3 = np.zeros(n_out)
    xi = 0.5 + 0.5 * rng.random((d, FM, FM))          # fixed per-(unit, cell) noise scaling

    def row(u, pr, pc):
        return (u * FM + pr) * FM + pc

    def add(u, pr, pc, coefs):
        for feat, coef in coefs:
            w3[row(u, pr, pc), feat] += coef

    for name, sites, pairs in (("door", DOOR_SITES, door_pairs),
                               ("tree", TREE_SITES, tree_pairs)):
        for (pr, pc), pair in zip(sites, pairs):
            for u in groups[name]:
                add(u, pr, pc, _step_coefs(pair, CONCEPT_ON[name], SCORE_WIDTH))
    for pc in range(FM):
        for u in groups["sky"]:
            add(u, SKY_ROW, pc, _step_coefs(sky_pair, CONCEPT_ON["sky"], SCORE_WIDTH))

    for u in groups["door"]:
        for pr in range(FM):
            for pc in range(FM):
                b3[row(u, pr, pc)] = DOOR_BASE_SKYROW if pr == SKY_ROW else DOOR_BASE
                add(u, pr, pc, _clamp_coefs(noise_pairs[u], ACT_NOISE * xi[u, pr, pc]))
    for name in ("tree", "sky"):
        for u in groups[name]:
            for pr in range(FM):
                for pc in range(FM):
                    b3[row(u, pr, pc)] = TREE_SKY_BASE
                    add(u, pr, pc, _clamp_coefs(noise_pairs[u], ACT_NOISE * xi[u, pr, pc]))

    for u in groups["struct"]:
        for pr in range(FM):
            for pc in range(FM):
                b3[row(u, pr, pc)] = STRUCT_OFF
                add(u, pr, pc, _clamp_coefs(noise_pairs[u], STRUCT_NOISE * xi[u, pr, pc]))
                if pr >= HORIZON_ROW:
                    b3[row(u, pr, pc)] += STRUCT_ON

    for u, pair in zip(groups["jitter"], jitter_pairs):
        for pr in range(FM):
            for pc in range(FM):
                add(u, pr, pc, _clamp_coefs(pair, 1.0))

    for u in groups["texture"]:
        for pr in range(FM):
            for pc in range(FM):
                b3[row(u, pr, pc)] = TEX_BASE
                add(u, pr, pc, _clamp_coefs(noise_pairs[u], TEX_NOISE * xi[u, pr, pc]))

    n_art = config.artifact_unit_count
    # bright units on the 0/3 lattice diagonal, dark on 1/2: the net overlay
    # stays a true checker even when all amplitudes coincide
    pattern = ArtifactPattern(
        phases=[(0, 1, 3, 2)[i % 4] for i in range(n_art)],
        signs=[1 if i % 2 == 0 else -1 for i in range(n_art)],
    )
    for j, u in enumerate(groups["artifact"]):
        for pr in range(FM):
            for pc in range(FM):
                b3[row(u, pr, pc)] = 0.02
                add(u, pr, pc, _clamp_coefs(noise_pairs[u],
                                            pattern.amplitude * pattern.tile(j, pr, pc)))

    head = [bank.dense(), LayerSpec("leaky-relu", slope=0.0),
            LayerSpec("dense", kernel=w3.astype(DTYPE), bias=b3.astype(DTYPE),
                      out_shape=(d, FM, FM))]
    tail = _build_tail(groups, pattern)
    net = NetworkSpec(layers=head + tail, split_index=len(head),
                      latent_dim=config.latent_dim)
    net.validate()

    gate_levels = {
        "door": DOOR_GATE[0] - (STRUCT_ON + STRUCT_OFF + STRUCT_NOISE * 0.75),
        "tree": TREE_GATE[0],
        "sky": SKY_GATE[0],
    }
    shapes = {"door": "rect", "tree": "disc", "sky": "stripe"}
    sites = {"door": list(DOOR_SITES), "tree": list(TREE_SITES),
             "sky": [(SKY_ROW, c) for c in range(FM)]}
    concepts = [PlantedConcept(name=name, units=groups[name], shape=shapes[name],
                               sites=sites[name], gate_level=gate_levels[name],
                               color=COLOR[name])
                for name in CONCEPTS if groups.get(name)]
    truth = PlantedTruth(
        concepts=concepts,
        artifact_units=groups["artifact"],
        structure_units=groups["struct"],
        jitter_units=dict(zip(("door", "tree", "sky", "building", "brightness"),
                              groups["jitter"])),
        texture_units=groups["texture"],
        artifact_pattern=pattern,
        config=config,
        seed=seed,
        builder_meta={"noise_pairs": {str(u): list(noise_pairs[u]) for u in range(d)},
                      "head_layers": 3},
    )
    return net, truth


def plant_artifact_units(net: NetworkSpec, truth: PlantedTruth,
                         unit_indices: Sequence[int],
                         pattern: Optional[ArtifactPattern] = None) -> Tuple[NetworkSpec, PlantedTruth]:
    """Reroute the blotch overlay to a different set of units.

    The chosen units' featuremap rows are rewritten to tiled activations and
    the tail's artifact channels are rewired to read them. Units overlapping
    planted concepts are rejected.
    """
    unit_indices = sorted(int(u) for u in unit_indices)
    overlap = set(unit_indices) & truth.planted_units
    if overlap:
        raise PlantedOverlapError(f"units {sorted(overlap)} already carry planted concepts")
    if pattern is None:
        pattern = ArtifactPattern(phases=[(0, 1, 3, 2)[i % 4] for i in range(len(unit_indices))],
                                  signs=[1 if i % 2 == 0 else -1 for i in range(len(unit_indices))])
    noise_pairs = truth.builder_meta["noise_pairs"]
    n_head = truth.builder_meta["head_layers"]

    layers = list(net.layers)
    h3 = layers[n_head - 1]
    w3 = h3.kernel.copy()
    b3 = h3.bias.copy()
    for j, u in enumerate(unit_indices):
        lo, hi = noise_pairs[str(u)]
        for pr in range(FM):
            for pc in range(FM):
                idx = (u * FM + pr) * FM + pc
                w3[idx, :] = 0.0
                tile = pattern.amplitude * pattern.tile(j, pr, pc)
                w3[idx, lo] = tile
                w3[idx, hi] = -tile
                b3[idx] = 0.02
    layers[n_head - 1] = LayerSpec("dense", kernel=w3, bias=b3, out_shape=h3.out_shape)

    a1 = layers[n_head]
    kernel = a1.kernel.copy()
    names = ["door_lo", "door_hi", "tree_lo", "tree_hi", "sky_lo", "sky_hi",
             "bldg_lo", "bldg_hi", "art_b", "art_d"]
    bright, dark = names.index("art_b"), names.index("art_d")
    kernel[bright, :, 0, 0] = np.where(kernel[bright, :, 0, 0] != 0, 0, 0)
    kernel[bright] = 0.0
    kernel[dark] = 0.0
    for u, sign in zip(unit_indices, pattern.signs):
        kernel[bright if sign > 0 else dark, u, 0, 0] = 1.0
    layers[n_head] = LayerSpec("conv2d", kernel=kernel, bias=a1.bias.copy(),
                               padding=a1.padding)

    new_net = NetworkSpec(layers=layers, split_index=net.split_index,
                          latent_dim=net.latent_dim)
    new_truth = PlantedTruth(
        concepts=truth.concepts, artifact_units=unit_indices,
        structure_units=truth.structure_units, jitter_units=truth.jitter_units,
        texture_units=truth.texture_units, artifact_pattern=pattern,
        config=truth.config, seed=truth.seed, builder_meta=truth.builder_meta)
    return new_net, new_truth


# ---------------------------------------------------------------------------
# analytic scene readout (the rendering rule of the truth, usable as an oracle)
# ---------------------------------------------------------------------------

def gate_maps(truth: PlantedTruth, r: np.ndarray) -> Dict[str, np.ndarray]:
    """Boolean FM x FM on/off maps per concept plus the building region,
    decoded from a featuremap by the planted rendering rule."""
    m_struct = r[truth.structure_units].mean(axis=0)
    building = m_struct >= BLDG_GATE[0] + BLDG_GATE[1]
    out = {"building": building}
    for c in truth.concepts:
        m = r[c.units].mean(axis=0)
        if c.name == "door":
            on = (m + m_struct >= DOOR_GATE[0] + DOOR_GATE[1]) & building
        elif c.name == "tree":
            on = m >= TREE_GATE[0] + TREE_GATE[1]
        else:
            on = m >= SKY_GATE[0] + SKY_GATE[1]
        out[c.name] = on
    return out


def expected_masks(truth: PlantedTruth, r: np.ndarray) -> Dict[str, np.ndarray]:
    """Per-concept IMG x IMG coverage masks implied by a featuremap.

    This is the renderer's own coverage record: it re-derives what the tail
    will paint from the gate maps and shape geometry, without running the
    tail. Occlusion priority matches the tail (foreground over sky/building).
    """
    gates = gate_maps(truth, r)
    masks = {}
    for c in truth.concepts:
        mask = np.zeros((IMG, IMG), dtype=bool)
        if c.shape == "stripe":
            if gates[c.name][SKY_ROW].all():
                mask |= concept_footprint("stripe", (SKY_ROW, 0))
        else:
            for pr, pc in zip(*np.nonzero(gates[c.name])):
                mask |= concept_footprint(c.shape, (pr, pc))
        masks[c.name] = mask
    building = np.repeat(np.repeat(gates["building"], BLOCK, axis=0), BLOCK, axis=1)
    door = masks.get("door", np.zeros((IMG, IMG), bool))
    tree = masks.get("tree", np.zeros((IMG, IMG), bool))
    if "sky" in masks:
        masks["sky"] = masks["sky"] & ~tree & ~door
    masks["building"] = building & ~door & ~tree
    return masks


def artifact_activation(pattern: ArtifactPattern, index: int, amplitude_scale: float) -> np.ndarray:
    """Tiled activation map for one artifact unit at a given amplitude."""
    out = np.zeros((FM, FM), dtype=np.float32)
    for pr in range(FM):
        for pc in range(FM):
            out[pr, pc] = pattern.amplitude * pattern.tile(index, pr, pc) * amplitude_scale
    return out


def blotch_energy(image: np.ndarray) -> float:
    """L2 energy of the tile-frequency component of an image.

    Tile means are filtered with a 2x2 checker kernel, which annihilates flat
    regions and straight axis-aligned edges but responds maximally to the
    alternating tile lattice the artifact units paint.
    """
    img = image.astype(np.float64)
    tiles = img.reshape(img.shape[0], FM, BLOCK, FM, BLOCK).mean(axis=(2, 4))
    resp = (tiles[:, :-1, :-1] - tiles[:, :-1, 1:]
            - tiles[:, 1:, :-1] + tiles[:, 1:, 1:])
    return float(np.sqrt(np.mean(resp ** 2)))


# ---------------------------------------------------------------------------
# truth sidecar
# ---------------------------------------------------------------------------

def save_truth(truth: PlantedTruth, path) -> None:
    doc = {
        "schema": "gd/1",
        "kind": "planted-truth",
        "seed": truth.seed,
        "config": asdict(truth.config),
        "concepts": [asdict(c) for c in truth.concepts],
        "artifact_units": truth.artifact_units,
        "structure_units": truth.structure_units,
        "jitter_units": truth.jitter_units,
        "texture_units": truth.texture_units,
        "artifact_pattern": asdict(truth.artifact_pattern) if truth.artifact_pattern else None,
        "builder_meta": truth.builder_meta,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def load_truth(path) -> PlantedTruth:
    with open(path) as fh:
        doc = json.load(fh)
    if not str(doc.get("schema", "")).startswith("gd/1"):
        raise ValueError(f"unsupported schema {doc.get('schema')!r}")
    config = GeneratorConfig(**doc["config"])
    concepts = [PlantedConcept(name=c["name"], units=list(c["units"]), shape=c["shape"],
                               sites=[tuple(s) for s in c["sites"]],
                               gate_level=c["gate_level"], color=tuple(c["color"]))
                for c in doc["concepts"]]
    pattern = None
    if doc.get("artifact_pattern"):
        pattern = ArtifactPattern(**doc["artifact_pattern"])
    return PlantedTruth(
        concepts=concepts, artifact_units=list(doc["artifact_units"]),
        structure_units=list(doc["structure_units"]), jitter_units=doc["jitter_units"],
        texture_units=list(doc["texture_units"]), artifact_pattern=pattern,
        config=config, seed=doc["seed"], builder_meta=doc.get("builder_meta", {}))


def default_universe():
    """Concept universe matching the planted scene family (foreground shapes
    plus the building region used for context analysis)."""
    from .segment import ConceptSpec, ConceptUniverse
    return ConceptUniverse(concepts=[
        ConceptSpec("door", HUE_BAND["door"], "rect"),
        ConceptSpec("tree", HUE_BAND["tree"], "disc"),
        ConceptSpec("sky", HUE_BAND["sky"], "stripe"),
        ConceptSpec("building", HUE_BAND["building"], "stripe"),
    ])
