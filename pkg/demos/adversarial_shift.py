"""Do TCAV score distributions notice a targeted FGSM attack?

Images pushed into class 0 by one signed-gradient step are scored
against the same CAVs as real class-0 images; a large KS statistic
means the concept sensitivities of fooled inputs look different.
Run: python demos/adversarial_shift.py
"""
# %%
import numpy as np

from cavlab.dataset import (DatasetSpec, concept_caption_set, concept_image_set, generate_controlled,
                            generate_texture_concepts, random_image_set)
from cavlab.extras import AttackConfig, fgsm_attack
from cavlab.model import TrainConfig, reference_model, train
from cavlab.tcav import score_distribution_compare, significance_test

ds = generate_controlled(DatasetSpec(noise_p=0.3))
model, _ = train(reference_model(), ds.train, TrainConfig(epochs=15))
held, target = ds.heldout, 0

# %% Push other classes toward the target with the smallest step that fools most of them.
others = held.inputs[held.labels != target]
for eps in (0.01, 0.02, 0.05):
    adv = fgsm_attack(model, others, AttackConfig(eps, target))
    fooled = adv[model.predict(adv) == target]
    if len(fooled) >= len(others) / 2:
        break
print(f"eps={eps}: {len(fooled)} of {len(others)} attacked images now read as class {target}")

# %% Same CAVs (same seeds), two input sets: real target images and fooled ones.
clean = held.inputs[held.labels == target][:100]
pool = random_image_set(ds.train, 300, seed=1)
concepts = generate_texture_concepts(["striped", "checker", "dotted"], n=50, seed=3)
for k in range(ds.spec.num_classes):
    concepts[f"image{k}"] = concept_image_set(ds.train, k).take(np.arange(50), name=f"image{k}")
    concepts[f"caption{k}"] = concept_caption_set(ds.train, k, seed=2).take(np.arange(50), name=f"caption{k}")
for layer in ("relu2", "fc1"):
    a = [significance_test(model, layer, c, pool, target, clean, runs=100, master_seed=7) for c in concepts.values()]
    b = [significance_test(model, layer, c, pool, target, fooled[:100], runs=100, master_seed=7)
         for c in concepts.values()]
    for e in score_distribution_compare(a, b):
        print(f"{layer:5s} {e.key[0]:9s} mean shift {e.mean_delta:+.3f}  KS {e.ks_statistic:.2f}"
              f"{'  <- flagged' if e.flagged else ''}")
