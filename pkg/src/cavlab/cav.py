"""Concept activation vectors: linear probes on frozen layer activations."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import write_tnsr
from .dataset import ConceptSet, example_digest
from .errors import CavlabError, InseparableError, ShapeError


@dataclass(frozen=True)
class ProbeConfig:
    """Settings of the L2-regularised logistic probe.

    ``l2`` is measured after activations are centred and rescaled to unit
    mean squared norm, so one value works across layers of any scale.
    ``learning_rate=None`` uses the inverse Lipschitz constant of the loss.
    """

    probe_kind: str = "logistic"
    epochs: int = 500
    learning_rate: float | None = None
    l2: float = 1e-3
    heldout_fraction: float = 1 / 3
    seed: int = 0

    def __post_init__(self):
        if self.probe_kind != "logistic":
            raise ValueError(f"unsupported probe kind {self.probe_kind!r}")
        if not 0 < self.heldout_fraction < 1:
            raise ValueError("heldout_fraction must lie in (0, 1)")
        if self.epochs < 1 or self.l2 < 0:
            raise ValueError("epochs must be >= 1 and l2 >= 0")
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    def to_dict(self):
        return asdict(self)


@dataclass(eq=False)
class Cav:
    concept: str
    negative_id: str
    layer: str
    vector: np.ndarray
    heldout_accuracy: float
    train_seed: int
    relative: bool = False
    probe_config: dict = field(default_factory=dict)
    train_digests: tuple[str, ...] = ()

    @property
    def m(self) -> int:
        return len(self.vector)

    def negated(self) -> "Cav":
        return Cav(self.concept, self.negative_id, self.layer, -self.vector, self.heldout_accuracy,
                   self.train_seed, self.relative, self.probe_config, self.train_digests)

    def to_dict(self) -> dict:
        return {
            "concept": self.concept,
            "negative_id": self.negative_id,
            "layer": self.layer,
            "m": self.m,
            "vector": [float(v) for v in self.vector],
            "heldout_accuracy": float(self.heldout_accuracy),
            "train_seed": int(self.train_seed),
            "relative": self.relative,
            "probe_config": self.probe_config,
            "train_digests": list(self.train_digests),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Cav":
        vec = np.asarray(d["vector"], dtype=np.float64)
        if "m" in d and d["m"] != len(vec):
            raise ShapeError(f"CAV declares m={d['m']} but stores {len(vec)} values")
        return cls(d["concept"], d["negative_id"], d["layer"], vec, float(d["heldout_accuracy"]),
                   int(d["train_seed"]), bool(d.get("relative", False)), d.get("probe_config", {}),
                   tuple(d.get("train_digests", ())))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "Cav":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save_tnsr(self, path) -> None:
        write_tnsr(path, self.vector)


def stratified_split(y: np.ndarray, heldout_fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Index arrays (train, heldout) with each label split in the same proportion."""
    train, held = [], []
    for label in (1, 0):
        idx = np.flatnonzero(y == label)
        if len(idx) < 2:
            raise ValueError("each side needs at least 2 examples to split off a held-out set")
        idx = rng.permutation(idx)
        n_held = min(max(int(round(len(idx) * heldout_fraction)), 1), len(idx) - 1)
        held.append(idx[:n_held])
        train.append(idx[n_held:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(held))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def logistic_gd(x: np.ndarray, y: np.ndarray, l2: float, epochs: int, learning_rate=None):
    """Full-batch gradient descent on mean log-loss + (l2/2)|w|^2.

    ``x`` must already be centred.  Returns ``(w, b)``.
    """
    w, b = logistic_gd_batch(x[None], y[None], l2, epochs, learning_rate)
    return w[0], float(b[0])


def logistic_gd_batch(x: np.ndarray, y: np.ndarray, l2: float, epochs: int, learning_rate=None):
    """``logistic_gd`` on a stack of equally sized problems ``x[r], y[r]`` at once.

    Starting from zero, the weights stay in the row span of ``x``, so when
    there are fewer samples than features the iteration runs on dual
    coefficients ``w = x.T @ alpha`` with the same iterates at lower cost.
    Each problem is computed slice by slice, so its result does not depend
    on what else is in the stack.
    """
    r_, n, m = x.shape
    t = y.astype(np.float64)
    dual = n < m
    xt = np.swapaxes(x, 1, 2)
    gram = x @ xt if dual else None
    top = np.linalg.eigvalsh(gram if dual else xt @ x)[:, -1] / n
    lr = np.full(r_, float(learning_rate)) if learning_rate is not None else 1.0 / (0.25 * top + l2 + 1e-12)
    lr = lr[:, None]
    lr_b = learning_rate if learning_rate is not None else 4.0
    coef = np.zeros((r_, n if dual else m))
    b = np.zeros(r_)
    for _ in range(epochs):
        z = (gram @ coef[..., None] if dual else x @ coef[..., None])[..., 0] + b[:, None]
        res = (_sigmoid(z) - t) / n
        if dual:
            coef = coef - lr * (res + l2 * coef)
        else:
            coef = coef - lr * ((xt @ res[..., None])[..., 0] + l2 * coef)
        b = b - lr_b * res.sum(axis=1)
    w = (xt @ coef[..., None])[..., 0] if dual else coef
    return w, b


@dataclass
class ProbeResult:
    vector: np.ndarray
    heldout_accuracy: float
    train_index: np.ndarray
    heldout_index: np.ndarray


def _prepare(pos_acts, neg_acts, cfg: ProbeConfig):
    pos_acts = np.asarray(pos_acts, dtype=np.float64)
    neg_acts = np.asarray(neg_acts, dtype=np.float64)
    if pos_acts.ndim != 2 or neg_acts.ndim != 2 or pos_acts.shape[1] != neg_acts.shape[1]:
        raise ShapeError(f"activation sets disagree: {pos_acts.shape} vs {neg_acts.shape}")
    if len(pos_acts) + len(neg_acts) < 4:
        raise ValueError("need at least 4 examples in total to train and hold out")
    x = np.concatenate([pos_acts, neg_acts])
    y = np.concatenate([np.ones(len(pos_acts), dtype=np.int64), np.zeros(len(neg_acts), dtype=np.int64)])
    rng = np.random.default_rng(cfg.seed)
    tr, ho = stratified_split(y, cfg.heldout_fraction, rng)
    mu = x[tr].mean(axis=0)
    xc = x[tr] - mu
    scale = np.sqrt(np.mean(np.sum(xc * xc, axis=1)))
    if not np.isfinite(scale) or scale <= 1e-12 * max(1.0, float(np.abs(mu).max(initial=0.0))):
        raise InseparableError("activations are identical across examples; no direction separates them")
    return x, y, tr, ho, mu, scale


def _finish(prep, w, b) -> ProbeResult:
    x, y, tr, ho, mu, scale = prep
    norm = np.linalg.norm(w)
    if not np.isfinite(norm) or norm == 0.0:
        raise InseparableError("probe weights vanished; classes are indistinguishable at this layer")
    v = w / norm
    proj = (x[tr] - mu) @ v
    if proj[y[tr] == 1].mean() < proj[y[tr] == 0].mean():
        v, w, b = -v, -w, -b
    pred = ((x[ho] - mu) / scale) @ w + b > 0
    acc = float(np.mean(pred == (y[ho] == 1)))
    return ProbeResult(v, acc, tr, ho)


def fit_probes(pairs, cfgs) -> list:
    """Fit many probes, batching those with equal shapes and settings.

    ``pairs`` holds ``(pos_acts, neg_acts)``; ``cfgs`` one ProbeConfig per
    pair.  Each entry of the result is a ProbeResult or the exception that
    probe raised; results equal those of ``fit_probe`` bit for bit.
    """
    out: list = [None] * len(pairs)
    groups: dict = {}
    preps = {}
    for i, ((pos, neg), cfg) in enumerate(zip(pairs, cfgs)):
        try:
            prep = _prepare(pos, neg, cfg)
        except (CavlabError, ValueError) as e:
            out[i] = e
            continue
        preps[i] = prep
        key = (len(prep[2]), prep[0].shape[1], cfg.l2, cfg.epochs, cfg.learning_rate)
        groups.setdefault(key, []).append(i)
    for (_, _, l2, epochs, lr), idx in groups.items():
        xs = np.stack([(preps[i][0][preps[i][2]] - preps[i][4]) / preps[i][5] for i in idx])
        ys = np.stack([preps[i][1][preps[i][2]] for i in idx])
        ws, bs = logistic_gd_batch(xs, ys, l2, epochs, lr)
        for j, i in enumerate(idx):
            try:
                out[i] = _finish(preps[i], ws[j], float(bs[j]))
            except CavlabError as e:
                out[i] = e
    return out


def fit_probe(pos_acts: np.ndarray, neg_acts: np.ndarray, cfg: ProbeConfig = ProbeConfig()) -> ProbeResult:
    """Train the concept-vs-negative probe on activation rows; return its unit normal.

    The vector is oriented so training positives project above training
    negatives on average.
    """
    (res,) = fit_probes([(pos_acts, neg_acts)], [cfg])
    if isinstance(res, Exception):
        raise res
    return res


def _activations(model, layer, concept: ConceptSet, batch=256):
    if tuple(concept.input_shape) != tuple(model.input_shape):
        raise ShapeError(f"concept {concept.name!r} has inputs {concept.input_shape}, "
                         f"model expects {tuple(model.input_shape)}")
    ex = concept.examples
    return np.concatenate([model.activation_at(layer, ex[i:i + batch]) for i in range(0, len(ex), batch)])


def train_cav(model, layer: str, positives: ConceptSet, negatives: ConceptSet,
              cfg: ProbeConfig = ProbeConfig(), negative_id: str | None = None) -> Cav:
    res = fit_probe(_activations(model, layer, positives), _activations(model, layer, negatives), cfg)
    digests = tuple(example_digest(e) for e in positives.examples) + tuple(example_digest(e) for e in negatives.examples)
    return Cav(positives.name, negative_id or negatives.name, layer, res.vector, res.heldout_accuracy,
               cfg.seed, False, cfg.to_dict(), digests)


def train_relative_cav(model, layer: str, concepts: list[ConceptSet], cfg: ProbeConfig = ProbeConfig()) -> list[Cav]:
    """One CAV per concept, each trained against the union of the others."""
    if len(concepts) < 2:
        raise ValueError("relative CAVs need at least two concepts")
    acts = [_activations(model, layer, c) for c in concepts]
    cavs = []
    for i, c in enumerate(concepts):
        rest = np.concatenate([a for j, a in enumerate(acts) if j != i])
        res = fit_probe(acts[i], rest, cfg)
        others = "+".join(o.name for j, o in enumerate(concepts) if j != i)
        digests = tuple(example_digest(e) for o in concepts for e in o.examples)
        cavs.append(Cav(c.name, others, layer, res.vector, res.heldout_accuracy, cfg.seed, True,
                        cfg.to_dict(), digests))
    return cavs


def probeable_layers(model) -> list[str]:
    """Interior layers worth probing: every layer except flatten and the logits."""
    names = []
    for spec in model.layers[:-1]:
        if spec.kind != "flatten":
            names.append(spec.name)
    return names


def probe_layers(model, positives: ConceptSet, negatives: ConceptSet, cfg: ProbeConfig = ProbeConfig(),
                 layers=None) -> dict[str, float]:
    """Held-out probe accuracy per layer."""
    layers = probeable_layers(model) if layers is None else layers
    return {layer: train_cav(model, layer, positives, negatives, cfg).heldout_accuracy for layer in layers}


def resample_negatives(pool: ConceptSet, size: int, seed: int) -> ConceptSet:
    if size > len(pool):
        raise ValueError(f"pool has {len(pool)} examples, cannot draw {size}")
    if size < 1:
        raise ValueError("size must be positive")
    idx = np.random.default_rng(seed).choice(len(pool), size=size, replace=False)
    return pool.take(idx, name=f"{pool.name}@{seed}")
