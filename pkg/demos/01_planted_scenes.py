"""Build a planted generator, render scenes, and inspect the ground truth.

The generator is constructed, not trained: designated unit sets provably
cause doors, trees, and the sky stripe, a few units inject blotch artifacts,
and the rest carry building structure, color jitter, and texture. This
script renders a contact sheet, prints the planted assignment, and saves the
weights + truth sidecar that the other demos (and the CLI) consume.

Run:  python3 demos/01_planted_scenes.py
"""

import pathlib

import numpy as np

from gendissect import persist, scenes, weights
from gendissect.nn import forward

OUT = pathlib.Path(__file__).resolve().parent / "out"
OUT.mkdir(exist_ok=True)

net, truth = scenes.build_planted_generator(seed=0)
print("planted generator: 64 units at 8x8, image 64x64")
for concept in truth.concepts:
    print(f"  {concept.name:5s} units {concept.units}  shape={concept.shape}  "
          f"gate level {concept.gate_level:.2f}")
print(f"  artifact units {truth.artifact_units}")
print(f"  structure units {truth.structure_units}")

model_path = OUT / "planted.gdw"
weights.save_weights(net, model_path)
scenes.save_truth(truth, str(model_path) + ".truth.json")
print(f"saved weights -> {model_path}")

# contact sheet: 6x6 scenes
zs = scenes.sample_z(7, 36)
images = forward(net, zs).image
rows = [np.concatenate(list(images[i * 6:(i + 1) * 6]), axis=2) for i in range(6)]
persist.save_png(np.concatenate(rows, axis=1), OUT / "scenes.png")
print(f"contact sheet -> {OUT / 'scenes.png'}")

# how often does each concept appear?
rates = {c.name: 0 for c in truth.concepts}
zs = scenes.sample_z(8, 400)
res = forward(net, zs)
for i in range(400):
    gates = scenes.gate_maps(truth, res.featuremap[i])
    for name in rates:
        rates[name] += bool(gates[name].any())
for name, count in rates.items():
    print(f"  {name} appears in {count / 4:.0f}% of scenes")

energy = np.mean([scenes.blotch_energy(res.image[i]) for i in range(100)])
print(f"  mean blotch energy across scenes: {energy:.3f}")
