import numpy as np
import pytest

from gendissect import dissect, intervene, nn, scenes, segment


@pytest.fixture(scope="module")
def door_k(planted, universe):
    net, _ = planted
    return intervene.compute_k(net, universe, "door", scenes.sample_z(401, 300))


def test_ablate_empty_set_is_identity(sample_400):
    _, res = sample_400
    r = res.featuremap[0]
    assert np.array_equal(intervene.ablate(r, []), r)


def test_ablate_everything_zeroes(sample_400):
    _, res = sample_400
    r = res.featuremap[0]
    out = intervene.ablate(r, range(64))
    assert np.all(out == 0.0)
    assert not np.all(r == 0.0)


def test_ablate_specific_locations(sample_400):
    _, res = sample_400
    r = res.featuremap[0]
    out = intervene.ablate(r, [3, 5], [(1, 2), (4, 4)])
    assert out[3, 1, 2] == 0.0 and out[5, 4, 4] == 0.0
    mask = np.ones_like(r, dtype=bool)
    mask[[3, 5], 1, 2] = False
    mask[[3, 5], 4, 4] = False
    assert np.array_equal(out[mask], r[mask])


def test_ablate_planted_doors_removes_them(planted, universe, sample_400):
    net, truth = planted
    _, res = sample_400
    units = truth.concept("door").units
    before = after = 0
    for i in range(150):
        before += segment.segment(res.image[i], universe).masks["door"].sum()
        r2 = intervene.ablate(res.featuremap[i], units)
        after += segment.segment(nn.forward_from(net, r2), universe).masks["door"].sum()
    assert before > 0
    assert after < 0.1 * before


def test_insert_empty_identity_and_overwrite(planted, sample_400, door_k):
    _, res = sample_400
    r = res.featuremap[0]
    assert np.array_equal(intervene.insert(r, [], [(0, 0)], door_k.k), r)
    units = [2, 7]
    locs = [(3, 3)]
    ins_then_abl = intervene.ablate(intervene.insert(r, units, locs, door_k.k), units, locs)
    abl_only = intervene.ablate(r, units, locs)
    assert np.array_equal(ins_then_abl, abl_only)


def test_insert_door_on_building_context(planted, universe, door_k):
    # new door component intersecting the upsampled footprint in >= 70% of trials
    net, truth = planted
    units = truth.concept("door").units
    zs = scenes.sample_z(402, 100)
    fwd = nn.forward(net, zs)
    rng = np.random.default_rng(0)
    hits = trials = 0
    for i in range(100):
        r = fwd.featuremap[i]
        gates = scenes.gate_maps(truth, r)
        building_cells = np.argwhere(gates["building"] & ~gates["door"])
        if not len(building_cells):
            continue
        cell = tuple(building_cells[rng.integers(0, len(building_cells))])
        r2 = intervene.insert(r, units, [cell], door_k.k)
        seg = segment.segment(nn.forward_from(net, r2), universe)
        footprint = scenes.concept_footprint("rect", cell)
        trials += 1
        if (seg.masks["door"] & footprint).sum() > 0:
            hits += 1
    assert trials >= 80
    assert hits / trials >= 0.70


def test_k_from_arrays_constant_unit():
    # unit constant at a, concept covering every pixel -> k = a
    rs = np.full((5, 3, 4, 4), 0.0, dtype=np.float32)
    rs[:, 1] = 2.5
    weights = np.ones((5, 4, 4))
    k = intervene.k_from_arrays(rs, weights)
    assert k[1] == pytest.approx(2.5)
    assert k[0] == pytest.approx(0.0)


def test_compute_k_absent_concept(planted, universe):
    net, _ = planted
    uni = segment.ConceptUniverse(concepts=universe.concepts + [
        segment.ConceptSpec("violet", (0.80, 0.90), "rect")])
    with pytest.raises(intervene.ZeroBaseRateError):
        intervene.compute_k(net, uni, "violet", scenes.sample_z(403, 50))


def test_compute_k_exceeds_gate_level(planted, universe, door_k):
    net, truth = planted
    for concept in ("door", "tree", "sky"):
        if concept == "door":
            ic = door_k
        else:
            ic = intervene.compute_k(net, universe, concept, scenes.sample_z(404, 300))
        planted_c = truth.concept(concept)
        mean_k = float(np.mean(ic.k[planted_c.units]))
        assert mean_k > planted_c.gate_level, (concept, mean_k, planted_c.gate_level)


def test_ace_empty_set_is_exactly_zero(planted, universe, door_k):
    net, _ = planted
    res = intervene.ace(net, universe, "door", [], door_k.k, scenes.sample_z(405, 60))
    assert res.delta == 0.0
    assert res.half_width == 0.0


def test_ace_planted_beats_random_sets(planted, universe, door_k):
    net, truth = planted
    zs = scenes.sample_z(406, 150)
    planted_res = intervene.ace(net, universe, "door", truth.concept("door").units,
                                door_k.k, zs)
    rng = np.random.default_rng(1)
    pool = sorted(set(range(64)) - set(truth.concept("door").units))
    random_deltas = []
    for _ in range(5):
        units = sorted(rng.choice(pool, size=8, replace=False))
        random_deltas.append(abs(intervene.ace(net, universe, "door", units,
                                               door_k.k, zs).delta))
    assert planted_res.delta > 10 * np.median(random_deltas)


def test_ace_cross_concept_independence(planted, universe, door_k):
    net, truth = planted
    zs = scenes.sample_z(407, 150)
    door_delta = intervene.ace(net, universe, "door", truth.concept("door").units,
                               door_k.k, zs).delta
    cross = intervene.ace(net, universe, "door", truth.concept("tree").units,
                          door_k.k, zs).delta
    assert abs(cross) < 0.1 * door_delta


def test_ace_delta_is_ratio_form(planted, universe, door_k):
    net, truth = planted
    res = intervene.ace(net, universe, "door", truth.concept("door").units,
                        door_k.k, scenes.sample_z(408, 80))
    assert res.delta == pytest.approx((res.e_insert - res.e_ablate) / res.base_rate,
                                      rel=1e-9)


def test_partial_intervention_alpha_zero_bit_exact(planted, sample_400, door_k):
    net, _ = planted
    r = sample_400[1].featuremap[0]
    alpha = np.zeros(64, dtype=np.float32)
    r_a, r_i = intervene.partial_intervention(r, alpha, None, door_k.k)
    img = nn.forward_from(net, r)
    assert np.array_equal(nn.forward_from(net, r_a), img)
    assert np.array_equal(nn.forward_from(net, r_i), img)


def test_partial_intervention_binary_matches_discrete(planted, sample_400, door_k):
    # binary alpha reproduces ablate/insert exactly on random (U, P, z) triples
    _, res = sample_400
    rng = np.random.default_rng(2)
    for trial in range(25):
        r = res.featuremap[rng.integers(0, 400)]
        units = sorted(rng.choice(64, size=rng.integers(1, 12), replace=False))
        locs = [(int(a), int(b)) for a, b in rng.integers(0, 8, size=(3, 2))]
        alpha = np.zeros(64, dtype=np.float32)
        alpha[units] = 1.0
        r_a, r_i = intervene.partial_intervention(r, alpha, locs, door_k.k)
        assert np.array_equal(r_a, intervene.ablate(r, units, locs))
        assert np.array_equal(r_i, intervene.insert(r, units, locs, door_k.k))


def test_partial_intervention_intermediate_value(planted, universe, door_k):
    # door pixels at alpha=0.5 lie between the alpha=0 and alpha=1 values
    net, truth = planted
    zs = scenes.sample_z(409, 200)
    fwd = nn.forward(net, zs)
    units = truth.concept("door").units
    counts = {}
    for level in (0.0, 0.5, 1.0):
        alpha = np.zeros(64, dtype=np.float32)
        alpha[units] = level
        total = 0
        for i in range(200):
            _, r_i = intervene.partial_intervention(fwd.featuremap[i], alpha, None,
                                                    door_k.k)
            total += segment.segment(nn.forward_from(net, r_i), universe).masks["door"].sum()
        counts[level] = total
    assert counts[0.0] < counts[0.5] < counts[1.0]


def test_optimize_alpha_l2_domination(planted, universe, door_k):
    net, _ = planted
    init = np.full(64, 0.8, dtype=np.float64)
    config = intervene.AceConfig(lam=10.0, lr=0.1, steps=15, minibatch=16,
                                 blocks=4, batch_z=4, seed=5)
    out = intervene.optimize_alpha(net, universe, "door", door_k.k, init, config)
    assert np.linalg.norm(out.alpha) < 0.1 * np.linalg.norm(init)


def test_optimize_alpha_deterministic(planted, universe, door_k):
    net, _ = planted
    init = np.full(64, 0.3, dtype=np.float64)
    config = intervene.AceConfig(steps=5, minibatch=12, blocks=4, batch_z=4, seed=6)
    a = intervene.optimize_alpha(net, universe, "door", door_k.k, init, config)
    b = intervene.optimize_alpha(net, universe, "door", door_k.k, init, config)
    assert np.array_equal(a.alpha, b.alpha)


def test_clip_alpha_top_n():
    alpha = np.array([0.9, 0.9, 0.1, 0.5])
    assert intervene.clip_alpha_top_n(alpha, 2) == [0, 1]
    assert intervene.clip_alpha_top_n(alpha, 4) == [0, 1, 2, 3]
    one_hot = np.zeros(8)
    one_hot[5] = 1.0
    assert intervene.clip_alpha_top_n(one_hot, 1) == [5]
    with pytest.raises(ValueError):
        intervene.clip_alpha_top_n(alpha, 0)


def test_ablation_curve_properties(planted, universe):
    net, truth = planted
    units = truth.concept("door").units
    zs = scenes.sample_z(410, 300)
    curve = intervene.ablation_curve(net, universe, "door", units,
                                     sizes=range(0, 9), zs=zs)
    assert curve[0]["remaining"] == pytest.approx(1.0)
    assert curve[-1]["remaining"] <= 0.1
    values = [pt["remaining"] for pt in curve]
    for a, b in zip(values, values[1:]):
        assert b <= a + 0.02


def test_insertion_context_building_vs_sky(planted, universe, door_k):
    net, truth = planted
    table = intervene.insertion_context_effect(
        net, universe, "door", truth.concept("door").units, door_k.k,
        scenes.sample_z(411, 400), seed=3)
    buckets = table["buckets"]
    assert buckets["building"]["effect"] > 0
    sky_effect = abs(buckets.get("sky", {"effect": 0.0})["effect"])
    assert sky_effect < 0.1 * buckets["building"]["effect"]


def test_insertion_context_empty_units(planted, universe, door_k):
    net, _ = planted
    table = intervene.insertion_context_effect(net, universe, "door", [], door_k.k,
                                               scenes.sample_z(412, 80), seed=4)
    for entry in table["buckets"].values():
        assert entry["effect"] == 0.0


def test_insertion_context_low_confidence_flag(planted, universe, door_k):
    net, truth = planted
    table = intervene.insertion_context_effect(
        net, universe, "door", truth.concept("door").units, door_k.k,
        scenes.sample_z(413, 40), seed=5)
    for entry in table["buckets"].values():
        if entry["trials"] < 30:
            assert entry["low_confidence"]


def test_trace_null_intervention_zero_profile(planted):
    net, _ = planted
    baselines = intervene.layer_baselines(net, scenes.sample_z(414, 40))
    z = scenes.sample_z(415, 1)[0]
    r = nn.forward(net, z).featuremap
    trace = intervene.trace_downstream(net, z, r, baselines)
    assert all(v == 0.0 for v in trace.per_layer)
    assert not trace.visible
    assert np.all(trace.heatmap == 0.0)


def test_trace_profile_finite_nonnegative(planted, door_k):
    net, truth = planted
    baselines = intervene.layer_baselines(net, scenes.sample_z(414, 40))
    z = scenes.sample_z(416, 1)[0]
    r = nn.forward(net, z).featuremap
    r2 = intervene.insert(r, truth.concept("door").units, [(6, 3)], door_k.k)
    trace = intervene.trace_downstream(net, z, r2, baselines)
    assert all(np.isfinite(v) and v >= 0 for v in trace.per_layer)
    assert any(v > 0 for v in trace.per_layer)


def test_trace_building_exceeds_sky(planted, door_k):
    net, truth = planted
    baselines = intervene.layer_baselines(net, scenes.sample_z(414, 40))
    units = truth.concept("door").units
    zs = scenes.sample_z(417, 40)
    prof_b, prof_s = [], []
    for i in range(40):
        z = zs[i]
        r = nn.forward(net, z).featuremap
        for cell, sink in (((6, 3), prof_b), ((0, 3), prof_s)):
            r2 = intervene.insert(r, units, [cell], door_k.k)
            sink.append(intervene.trace_downstream(net, z, r2, baselines).per_layer)
    mean_b = np.mean(prof_b, axis=0)
    mean_s = np.mean(prof_s, axis=0)
    assert np.all(mean_b > mean_s)
