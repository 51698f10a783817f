import numpy as np
import pytest

from gendissect import nn, scenes, segment


def test_sample_z_deterministic():
    a = scenes.sample_z(7, 5)
    b = scenes.sample_z(7, 5)
    assert np.array_equal(a, b)
    assert a.shape == (5, 32) and a.dtype == np.float32


def test_sample_z_mean_bound():
    zs = scenes.sample_z(3, 10_000)
    means = zs.mean(axis=0)
    assert np.all(means > -0.05) and np.all(means < 0.05)


def test_sample_z_seeds_differ():
    assert not np.array_equal(scenes.sample_z(1, 1), scenes.sample_z(2, 1))


def test_build_deterministic(planted):
    net, truth = planted
    net2, truth2 = scenes.build_planted_generator(seed=0)
    for a, b in zip(net.layers, net2.layers):
        if a.kernel is not None:
            assert np.array_equal(a.kernel, b.kernel)
            assert np.array_equal(a.bias, b.bias)
    assert truth2.concept("door").units == truth.concept("door").units


def test_planted_unit_sets_disjoint(planted):
    _, truth = planted
    seen = set()
    for c in truth.concepts:
        assert not (set(c.units) & seen)
        seen.update(c.units)
    assert not (set(truth.artifact_units) & seen)
    assert all(u < truth.config.channels for u in seen)


def test_infeasible_config_rejected():
    cfg = scenes.GeneratorConfig(concept_units={"door": 20, "tree": 20, "sky": 20})
    with pytest.raises(scenes.ConfigError):
        scenes.build_planted_generator(cfg, seed=0)
    with pytest.raises(scenes.ConfigError):
        scenes.GeneratorConfig(image_size=48).validate()


def test_zeroing_door_units_removes_all_doors(planted, universe, sample_400):
    net, truth = planted
    _, res = sample_400
    door_units = truth.concept("door").units
    before = after = 0
    for i in range(120):
        r = res.featuremap[i]
        before += segment.segment(res.image[i], universe).masks["door"].sum()
        r2 = r.copy()
        r2[door_units] = 0.0
        after += segment.segment(nn.forward_from(net, r2), universe).masks["door"].sum()
    assert before > 0
    assert after == 0


def test_insertion_at_building_cell_creates_door(planted, universe):
    net, truth = planted
    door = truth.concept("door")
    zs = scenes.sample_z(55, 30)
    res = nn.forward(net, zs)
    hits = 0
    for i in range(30):
        r = res.featuremap[i].copy()
        base_doors = scenes.gate_maps(truth, r)["door"]
        cell = (6, 3)
        if base_doors[cell]:
            continue
        r[door.units, cell[0], cell[1]] = 3.0
        seg = segment.segment(nn.forward_from(net, r), universe)
        footprint = scenes.concept_footprint("rect", cell)
        if (seg.masks["door"] & footprint).sum() > 0.5 * footprint.sum():
            hits += 1
    assert hits >= 25


def test_random_disjoint_ablation_barely_moves_doors(planted, universe, sample_400):
    # measured over 200 seeded samples during generator self-test
    net, truth = planted
    _, res = sample_400
    rng = np.random.default_rng(9)
    pool = sorted(set(range(64)) - truth.planted_units - set(truth.artifact_units))
    units = rng.choice(pool, size=8, replace=False)
    before = after = 0
    for i in range(200):
        r = res.featuremap[i]
        before += segment.segment(res.image[i], universe).masks["door"].sum()
        r2 = r.copy()
        r2[units] = 0.0
        after += segment.segment(nn.forward_from(net, r2), universe).masks["door"].sum()
    assert before > 0
    assert abs(after - before) / before < 0.05


def test_cross_concept_ablation_independence(planted, universe, sample_400):
    net, truth = planted
    _, res = sample_400
    tree_units = truth.concept("tree").units
    before = after = 0
    for i in range(200):
        before += segment.segment(res.image[i], universe).masks["door"].sum()
        r2 = res.featuremap[i].copy()
        r2[tree_units] = 0.0
        after += segment.segment(nn.forward_from(net, r2), universe).masks["door"].sum()
    assert abs(after - before) / before < 0.05


def test_artifact_units_drive_blotch_energy(planted):
    net, truth = planted
    zs = scenes.sample_z(77, 64)
    res = nn.forward(net, zs)
    energies_off = []
    energies_max = []
    for i in range(64):
        r = res.featuremap[i].copy()
        r[truth.artifact_units] = 0.0
        energies_off.append(scenes.blotch_energy(nn.forward_from(net, r)))
        r2 = res.featuremap[i].copy()
        # max activation: the amplitude clamp tops out at 2
        for j, u in enumerate(truth.artifact_units):
            r2[u] = scenes.artifact_activation(truth.artifact_pattern, j, 2.0)
        energies_max.append(scenes.blotch_energy(nn.forward_from(net, r2)))
    background = np.mean(energies_off)
    assert np.mean(energies_max) > 10 * background


def test_artifact_activation_ranks_blotch_energy(planted):
    # top decile by artifact activation has strictly higher mean energy than bottom
    net, truth = planted
    zs = scenes.sample_z(78, 1000)
    res = nn.forward(net, zs)
    act = res.featuremap[:, truth.artifact_units].mean(axis=(1, 2, 3))
    order = np.argsort(act)
    lo, hi = order[:100], order[-100:]
    e_lo = np.mean([scenes.blotch_energy(res.image[i]) for i in lo])
    e_hi = np.mean([scenes.blotch_energy(res.image[i]) for i in hi])
    assert e_hi > e_lo


def test_plant_artifact_units_rejects_overlap(planted):
    net, truth = planted
    door_unit = truth.concept("door").units[0]
    with pytest.raises(scenes.PlantedOverlapError):
        scenes.plant_artifact_units(net, truth, [door_unit])


def test_plant_artifact_units_moves_routing(planted):
    net, truth = planted
    new_units = truth.texture_units[:2]
    net2, truth2 = scenes.plant_artifact_units(net, truth, new_units)
    z = scenes.sample_z(5, 1)[0]
    r = nn.forward(net2, z).featuremap.copy()
    r[truth2.artifact_units] = 0.0
    quiet = scenes.blotch_energy(nn.forward_from(net2, r))
    r2 = nn.forward(net2, z).featuremap.copy()
    for j, u in enumerate(truth2.artifact_units):
        r2[u] = scenes.artifact_activation(truth2.artifact_pattern, j, 2.0)
    loud = scenes.blotch_energy(nn.forward_from(net2, r2))
    assert loud > 3 * quiet
    # old artifact units no longer reach the image
    r3 = nn.forward(net2, z).featuremap.copy()
    r3[truth.artifact_units] = 4.0
    img_a = nn.forward_from(net2, r3)
    r3[truth.artifact_units] = 0.0
    img_b = nn.forward_from(net2, r3)
    assert np.allclose(img_a, img_b)


def test_concept_appearance_rates(planted, sample_400):
    _, truth = planted
    _, res = sample_400
    rates = {c.name: 0 for c in truth.concepts}
    for i in range(400):
        gm = scenes.gate_maps(truth, res.featuremap[i])
        for name in rates:
            rates[name] += bool(gm[name].any())
    for name, count in rates.items():
        assert 0.15 <= count / 400 <= 0.40, (name, count / 400)


def test_truth_sidecar_round_trip(planted, tmp_path):
    _, truth = planted
    path = tmp_path / "truth.json"
    scenes.save_truth(truth, path)
    loaded = scenes.load_truth(path)
    assert loaded.concept("door").units == truth.concept("door").units
    assert loaded.artifact_units == truth.artifact_units
    assert loaded.concept("tree").gate_level == pytest.approx(
        truth.concept("tree").gate_level)


def test_forward_golden_snapshot(planted):
    # frozen at first verified build; guards against silent drift in the
    # builder or executor
    import hashlib
    from gendissect.nn import forward
    net, _ = planted
    z = scenes.sample_z(17, 1)[0]
    img = forward(net, z).image
    digest = hashlib.sha256(img.tobytes()).hexdigest()
    assert digest == "94daee443be0f4147d4adead5b13b34e09f6a9726fc9119368a24e9a2efab4af"
