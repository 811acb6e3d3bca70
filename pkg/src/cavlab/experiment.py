"""Image-vs-caption ground-truth experiment on the captioned dataset.

For each noise level a model is trained, then every class gets two
numbers: how well the model does once captions are removed (the
ground-truth proxy) and significance-tested TCAV scores for an image
concept and a caption concept.  A cell is consistent when both rank the
two concepts the same way.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .cav import ProbeConfig
from .dataset import (DatasetSpec, concept_caption_set, concept_image_set, generate_controlled,
                      random_image_set, strip_captions)
from .model import TrainConfig, reference_model, train
from .tcav import TcavReport, significance_test

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = ("p", "class", "acc_clean", "acc_stripped", "tcavq_image", "tcavq_caption",
                   "p_image", "p_caption", "consistent")


@dataclass(frozen=True)
class ExperimentConfig:
    noise_list: tuple[float, ...] = (0.0, 0.3, 0.7, 1.0)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=15))
    model_seed: int = 0
    layer: str = "fc1"
    runs: int = 500
    alpha: float = 0.05
    bonferroni_m: int = 2
    concept_size: int = 50
    pool_size: int = 300
    class_inputs: int = 100
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    master_seed: int = 0
    workers: int | None = None

    def __post_init__(self):
        if any(not 0.0 <= p <= 1.0 for p in self.noise_list):
            raise ValueError("noise levels must lie in [0, 1]")
        object.__setattr__(self, "noise_list", tuple(float(p) for p in self.noise_list))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dataset"] = self.dataset.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "dataset" in d:
            d["dataset"] = DatasetSpec.from_dict(d["dataset"])
        if "train" in d:
            d["train"] = TrainConfig(**d["train"])
        if "probe" in d:
            d["probe"] = ProbeConfig(**d["probe"])
        return cls(**d)


@dataclass
class CellResult:
    p: float
    class_index: int
    acc_clean: float
    acc_stripped: float
    reliance_clean: float
    reliance_stripped: float
    image: TcavReport
    caption: TcavReport

    @property
    def image_reliant(self) -> bool:
        """Ground-truth proxy: the model keeps over half its skill on caption-free images."""
        return self.reliance_stripped >= 0.5 * self.reliance_clean

    @property
    def tcav_prefers_image(self) -> bool | None:
        if self.image.mean == self.caption.mean:
            return None
        return self.image.mean > self.caption.mean

    @property
    def consistent(self) -> bool:
        return self.tcav_prefers_image is not None and self.tcav_prefers_image == self.image_reliant

    @property
    def winner(self) -> TcavReport:
        return self.image if self.image_reliant else self.caption

    def row(self) -> dict:
        return {
            "p": self.p,
            "class": self.class_index,
            "acc_clean": self.acc_clean,
            "acc_stripped": self.acc_stripped,
            "tcavq_image": self.image.mean,
            "tcavq_caption": self.caption.mean,
            "p_image": self.image.p_value,
            "p_caption": self.caption.p_value,
            "consistent": int(self.consistent),
        }


def youden(pred: np.ndarray, labels: np.ndarray, k: int) -> float:
    """Recall of class k minus the rate at which other classes are called k."""
    pos = labels == k
    tpr = float(np.mean(pred[pos] == k)) if pos.any() else 0.0
    fpr = float(np.mean(pred[~pos] == k)) if (~pos).any() else 0.0
    return tpr - fpr


@dataclass
class NoiseResult:
    p: float
    model: object
    losses: list
    cells: list


def run_noise_level(p: float, cfg: ExperimentConfig) -> NoiseResult:
    spec = DatasetSpec.from_dict({**cfg.dataset.to_dict(), "noise_p": p})
    ds = generate_controlled(spec)
    model = reference_model(spec.image_size, spec.num_classes, seed=cfg.model_seed)
    model, losses = train(model, ds.train, cfg.train)
    held = ds.heldout
    stripped = strip_captions(held)
    pred_clean = model.predict(held.inputs)
    pred_stripped = model.predict(stripped.inputs)
    pool = random_image_set(ds.train, cfg.pool_size, seed=cfg.master_seed + 1)
    cells = []
    for k in range(spec.num_classes):
        mask = held.labels == k
        image = concept_image_set(ds.train, k)
        caption = concept_caption_set(ds.train, k, seed=cfg.master_seed + 2)
        image = image.take(np.arange(min(cfg.concept_size, len(image))))
        caption = caption.take(np.arange(min(cfg.concept_size, len(caption))))
        inputs = held.inputs[mask][:cfg.class_inputs]
        common = dict(runs=cfg.runs, alpha=cfg.alpha, bonferroni_m=cfg.bonferroni_m, probe=cfg.probe,
                      workers=cfg.workers, class_name=spec.classes[k])
        r_img = significance_test(model, cfg.layer, image, pool, k, inputs, master_seed=cfg.master_seed, **common)
        r_cap = significance_test(model, cfg.layer, caption, pool, k, inputs, master_seed=cfg.master_seed, **common)
        cell = CellResult(p, k, float(np.mean(pred_clean[mask] == k)), float(np.mean(pred_stripped[mask] == k)),
                          youden(pred_clean, held.labels, k), youden(pred_stripped, held.labels, k), r_img, r_cap)
        log.info("p=%.2f class=%d acc %.3f -> %.3f  tcav image %.3f caption %.3f  consistent=%s",
                 p, k, cell.acc_clean, cell.acc_stripped, r_img.mean, r_cap.mean, cell.consistent)
        cells.append(cell)
    return NoiseResult(p, model, losses, cells)


def run_experiment(cfg: ExperimentConfig = ExperimentConfig()) -> list[NoiseResult]:
    return [run_noise_level(p, cfg) for p in cfg.noise_list]


def summary_csv(results) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, SUMMARY_COLUMNS, lineterminator="\n")
    w.writeheader()
    for res in results:
        for cell in res.cells:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in cell.row().items()})
    return buf.getvalue()
