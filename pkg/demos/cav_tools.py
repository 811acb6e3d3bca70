"""Checking a striped CAV three ways: sorting, deep dream and saliency.

Run: python demos/cav_tools.py  (writes PPM files under demo_out/)
"""
# %%
from pathlib import Path

import numpy as np

from cavlab.cav import train_cav
from cavlab.dataset import (ConceptSet, DatasetSpec, generate_controlled, generate_texture_concepts,
                            strip_captions, write_ppm)
from cavlab.extras import (DreamConfig, activation_maximize, contact_sheet, saliency_map, sort_by_concept,
                           write_heatmap_ppm)
from cavlab.model import TrainConfig, reference_model, train

out = Path("demo_out")
out.mkdir(exist_ok=True)

# %% A caption-free texture classifier gives the CAVs something to find.
classes = ("striped", "checker", "dotted", "meshed", "blobs", "crosses")
ds = strip_captions(generate_controlled(DatasetSpec(classes=classes, samples_per_class=600, heldout_per_class=50)))
model, _ = train(reference_model(num_classes=len(classes)), ds.train, TrainConfig(epochs=15))

cs = generate_texture_concepts(["striped", "dotted", "random"], n=30, seed=0)
striped = train_cav(model, "relu3", cs["striped"], cs["random"])
dotted = train_cav(model, "relu3", cs["dotted"], cs["random"])
print(f"striped CAV held-out accuracy {striped.heldout_accuracy:.2f}")

# %% Sorting: three fresh striped images hidden among solid colours.
solids = generate_texture_concepts(["solid-red", "solid-blue", "solid-yellow"], n=9, seed=5)
fresh = generate_texture_concepts(["striped"], n=3, seed=5)["striped"]
images = np.concatenate([s.examples for s in solids.values()] + [fresh.examples])
ranked = sort_by_concept(model, "relu3", striped, ConceptSet("mix", images))
print("top five:", [(i, round(c, 3)) for i, c in ranked[:5]], "(striped are 27, 28, 29)")
write_ppm(out / "sorted.ppm", contact_sheet(images[[i for i, _ in ranked]], cols=10))

# %% Deep dream: ascend the striped direction from noise.
x, trace = activation_maximize(model, "relu3", striped, DreamConfig(steps=150))
a = model.activation_at("relu3", x)
print(f"dream objective {trace[0]:.3f} -> {trace[-1]:.3f}; "
      f"striped projection {a @ striped.vector:.3f}, dotted {a @ dotted.vector:.3f}")
write_ppm(out / "dream.ppm", x)

# %% Saliency of the striped class on a held-out image.
img = ds.heldout.inputs[0]
write_heatmap_ppm(saliency_map(model, int(ds.heldout.labels[0]), img), out / "saliency.ppm")
print(f"wrote {', '.join(sorted(p.name for p in out.iterdir()))}")
