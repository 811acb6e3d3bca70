"""Does the network read the picture or the caption?

Trains the reference net on captioned texture images at one noise level,
measures how much it loses when captions are removed, and asks TCAV the
same question through image and caption concepts.
Run: python demos/controlled_captions.py [noise_p]
"""
# %%
import sys

import numpy as np

from cavlab.dataset import (DatasetSpec, concept_caption_set, concept_image_set, generate_controlled,
                            random_image_set, strip_captions)
from cavlab.model import TrainConfig, accuracy, reference_model, train
from cavlab.tcav import significance_test

p = float(sys.argv[1]) if len(sys.argv) > 1 else 0.0
ds = generate_controlled(DatasetSpec(noise_p=p, seed=0))
print(f"noise p={p}: {len(ds.train)} training images, caption agreement {ds.train.caption_agreement():.3f}")

# %% Train, then evaluate with and without captions.
model, losses = train(reference_model(seed=0), ds.train, TrainConfig(epochs=15))
held = ds.heldout
clean = accuracy(model, held.inputs, held.labels)
stripped_held = strip_captions(held)
bare = accuracy(model, stripped_held.inputs, stripped_held.labels)
print(f"held-out accuracy {clean:.3f}, without captions {bare:.3f}")

# %% TCAV per class: image concept vs caption concept, 100 runs each to keep it quick.
pool = random_image_set(ds.train, 300, seed=1)
for k, name in enumerate(ds.spec.classes):
    inputs = held.inputs[held.labels == k][:100]
    image = concept_image_set(ds.train, k).take(np.arange(50))
    caption = concept_caption_set(ds.train, k, seed=2).take(np.arange(50))
    r_img = significance_test(model, "fc1", image, pool, k, inputs, runs=100)
    r_cap = significance_test(model, "fc1", caption, pool, k, inputs, runs=100)
    star = lambda r: "" if r.significant else "*"
    print(f"{name:8s} image {r_img.mean:.2f}{star(r_img):1s}  caption {r_cap.mean:.2f}{star(r_cap):1s}")
print("* = not significant at 0.05 / 2")
