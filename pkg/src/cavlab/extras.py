"""Ways to sanity-check a CAV: sorting, deep dream, saliency, FGSM."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .cav import Cav
from .dataset import ConceptSet, example_digest, write_ppm
from .errors import ShapeError, TrainingDivergedError


def cosine(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def sort_by_concept(model, layer: str, cav: Cav, images: ConceptSet, check_provenance: bool = True):
    """Rank images by cosine similarity between f_l(x) and the CAV, most similar first.

    Returns ``[(index, cosine), ...]``; ties keep input order.  Images the CAV
    was trained on are rejected when the CAV carries example digests.
    """
    if cav.layer != layer or cav.m != model.width(layer):
        raise ShapeError(f"CAV for {cav.layer!r} (m={cav.m}) does not fit layer {layer!r}")
    if check_provenance and cav.train_digests:
        seen = set(cav.train_digests)
        overlap = [i for i, img in enumerate(images.examples) if example_digest(img) in seen]
        if overlap:
            raise ValueError(f"images {overlap[:5]} were used to train the CAV")
    acts = model.activation_at(layer, images.examples)
    norms = np.linalg.norm(acts, axis=1)
    cos = np.where(norms > 0, acts @ cav.vector / np.where(norms > 0, norms, 1.0), 0.0)
    cos = np.clip(cos, -1.0, 1.0)
    order = np.lexsort((np.arange(len(cos)), -cos))
    return [(int(i), float(cos[i])) for i in order]


@dataclass(frozen=True)
class DreamConfig:
    steps: int = 200
    step_size: float = 0.01
    start: np.ndarray | None = None
    jitter: int = 0
    l2: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size < 0 or self.jitter < 0 or self.l2 < 0:
            raise ValueError("step_size, jitter and l2 must be non-negative")


def dream_objective(model, layer, cav: Cav, x, l2: float) -> float:
    return float(model.activation_at(layer, x) @ cav.vector - l2 * np.sum(x * x))


def activation_maximize(model, layer: str, cav: Cav, cfg: DreamConfig = DreamConfig()):
    """Gradient ascent on v . f_l(x) - l2 * |x|^2 from noise or a given image.

    Each step evaluates the gradient (on a copy rolled by up to ``jitter``
    pixels when jitter is on), takes a step of ``step_size`` times the normalised
    gradient and clips to [0, 1].  Returns ``(image, trace)`` where
    ``trace`` holds the un-jittered objective before each step and after
    the last one.
    """
    if cav.layer != layer or cav.m != model.width(layer):
        raise ShapeError(f"CAV for {cav.layer!r} (m={cav.m}) does not fit layer {layer!r}")
    rng = np.random.default_rng(cfg.seed)
    if cfg.start is None:
        x = rng.uniform(0.4, 0.6, model.input_shape)
    else:
        x = np.array(cfg.start, dtype=np.float64)
        if x.shape != tuple(model.input_shape):
            raise ShapeError(f"start image {x.shape} does not match model input {model.input_shape}")
    i = model._index(layer)
    v = cav.vector
    trace = [dream_objective(model, layer, cav, x, cfg.l2)]
    for step in range(cfg.steps):
        if cfg.step_size == 0:
            trace.append(trace[-1])
            continue
        dy, dx = rng.integers(-cfg.jitter, cfg.jitter + 1, 2) if cfg.jitter else (0, 0)
        shifted = np.roll(x, (dy, dx), axis=(0, 1))
        tape = ad.Tape()
        leaf = tape.watch(shifted[None])
        act = ad.flatten(model._run(leaf, 0, i + 1))
        obj = ad.sub(ad.matmul(act, v), ad.mul(ad.reduce_sum(ad.mul(leaf, leaf)), cfg.l2))
        (g,) = tape.gradient(ad.reduce_sum(obj), [leaf])
        g = np.roll(g.data[0], (-dy, -dx), axis=(0, 1))
        scale = np.mean(np.abs(g))
        if not np.isfinite(scale):
            raise TrainingDivergedError(f"dream gradient became non-finite at step {step}", step=step)
        if scale > 0:
            x = np.clip(x + cfg.step_size * g / scale, 0.0, 1.0)
        trace.append(dream_objective(model, layer, cav, x, cfg.l2))
        if not np.isfinite(trace[-1]):
            raise TrainingDivergedError(f"dream objective became non-finite at step {step}", step=step)
    return x, trace


def saliency_map(model, k: int, x, reduce: bool = True) -> np.ndarray:
    """Gradient of the class-``k`` logit w.r.t. each input pixel.

    With ``reduce`` the absolute gradient is summed over channels, giving
    one value per pixel.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != tuple(model.input_shape):
        raise ShapeError(f"input {x.shape} does not match model input {model.input_shape}")
    g = model.input_gradient(x, k=k)
    return np.abs(g).sum(axis=-1) if reduce and g.ndim == 3 else g


def heatmap_image(sal: np.ndarray) -> np.ndarray:
    top = sal.max()
    t = sal / top if top > 0 else np.zeros_like(sal)
    return np.stack([t, t ** 2, np.zeros_like(t)], axis=-1)


def write_heatmap_ppm(sal: np.ndarray, path) -> None:
    write_ppm(path, heatmap_image(sal))


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    target: int
    pixel_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")


def fgsm_attack(model, x, cfg: AttackConfig) -> np.ndarray:
    """One targeted FGSM step: descend the cross-entropy of the target class.

    ``x' = clip(x - eps * sign(grad_x CE(target)))``; works on one image or
    a batch.
    """
    if not 0 <= cfg.target < model.num_classes:
        raise ValueError(f"target {cfg.target} out of range [0, {model.num_classes})")
    x = np.asarray(x, dtype=np.float64)
    if cfg.epsilon == 0:
        return x.copy()
    g = model.input_gradient(x, labels=cfg.target)
    lo, hi = cfg.pixel_range
    adv = np.clip(x - cfg.epsilon * np.sign(g), lo, hi)
    # x - eps can round to a point just outside the ball; step back toward x by one ulp.
    over = np.abs(adv - x) > cfg.epsilon
    while over.any():
        adv[over] = np.nextafter(adv[over], x[over])
        over = np.abs(adv - x) > cfg.epsilon
    return adv


def contact_sheet(images, cols: int = 10, pad: int = 1) -> np.ndarray:
    images = np.asarray(images)
    n, h, w, c = images.shape
    rows = -(-n // cols)
    sheet = np.ones((rows * (h + pad) + pad, cols * (w + pad) + pad, c))
    for i, img in enumerate(images):
        r, q = divmod(i, cols)
        y0, x0 = pad + r * (h + pad), pad + q * (w + pad)
        sheet[y0:y0 + h, x0:x0 + w] = img
    return sheet


def write_trace_json(trace, path) -> None:
    with open(path, "w") as fh:
        json.dump({"objective": [float(t) for t in trace]}, fh, indent=1)
        fh.write("\n")
