"""Procedural images: captioned class textures and concept example sets.

Every image is a pure function of ``(seed, index)``.  Pixel values are
multiples of 1/255 stored at float32 precision, which keeps both PPM and
TNSR round trips exact.
"""
from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autodiff import read_tnsr, write_tnsr
from .errors import FormatError

DEFAULT_VOCABULARY = ("zebra", "cab", "cucumber", "rabbit", "lamp", "boat")
CLASS_TEXTURES = ("stripes", "checker", "dotted")


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid, held at float32 precision."""
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return q.astype(np.float32).astype(np.float64)


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng([int(k) & 0xFFFFFFFF for k in key])


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def _color(rng):
    return rng.uniform(0.0, 1.0, 3)


def _contrasting_pair(rng):
    # Keep the two colours of a pattern visibly apart.
    while True:
        a, b = _color(rng), _color(rng)
        if np.abs(a - b).sum() > 0.6:
            return a, b


def _grid(h, w):
    return np.mgrid[0:h, 0:w].astype(np.float64)


# -- texture generators ---------------------------------------------------------
# Each takes (rng, h, w) and returns an (h, w, 3) float image in [0, 1].

def striped(rng, h, w):
    """Sinusoidal bands along a random orientation."""
    yy, xx = _grid(h, w)
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(4.0, 9.0)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
    t = (wave > 0).astype(np.float64) * 0.8 + 0.1 + 0.1 * wave
    a, b = _contrasting_pair(rng)
    return a + (b - a) * t[..., None]


def checkered(rng, h, w):
    yy, xx = _grid(h, w)
    cell = rng.integers(3, 7)
    oy, ox = rng.integers(0, cell, 2)
    t = (((yy + oy) // cell + (xx + ox) // cell) % 2)
    a, b = _contrasting_pair(rng)
    return a + (b - a) * t[..., None]


def blobs(rng, h, w):
    yy, xx = _grid(h, w)
    img = np.broadcast_to(_color(rng), (h, w, 3)).copy()
    for _ in range(rng.integers(4, 9)):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(2.5, 6.0)
        img[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = _color(rng)
    return img


def dotted(rng, h, w):
    """Regular lattice of small dots."""
    yy, xx = _grid(h, w)
    spacing = rng.uniform(5.0, 8.0)
    radius = rng.uniform(1.2, 2.0)
    oy, ox = rng.uniform(0, spacing, 2)
    dy = (yy + oy) % spacing - spacing / 2
    dx = (xx + ox) % spacing - spacing / 2
    t = (dy * dy + dx * dx <= radius * radius).astype(np.float64)
    a, b = _contrasting_pair(rng)
    return a + (b - a) * t[..., None]


def meshed(rng, h, w):
    """Thin crossing grid lines."""
    yy, xx = _grid(h, w)
    spacing = int(rng.integers(4, 8))
    oy, ox = rng.integers(0, spacing, 2)
    t = (((yy + oy) % spacing) == 0) | (((xx + ox) % spacing) == 0)
    a, b = _contrasting_pair(rng)
    return a + (b - a) * t.astype(np.float64)[..., None]


_SOLID = {
    "red": (0.85, 0.1, 0.1),
    "green": (0.1, 0.75, 0.15),
    "blue": (0.1, 0.2, 0.85),
    "yellow": (0.9, 0.85, 0.1),
}


def _solid(color):
    def gen(rng, h, w):
        c = np.clip(np.asarray(color) + rng.normal(0, 0.05, 3), 0, 1)
        return np.broadcast_to(c, (h, w, 3)).copy()
    gen.__name__ = "solid"
    return gen


def crosses(rng, h, w):
    """A few plus-shaped strokes on a plain background (a composite shape)."""
    img = np.broadcast_to(_color(rng), (h, w, 3)).copy()
    for _ in range(rng.integers(1, 4)):
        size = int(rng.integers(4, 8))
        thick = int(rng.integers(1, 3))
        cy, cx = rng.integers(size, h - size), rng.integers(size, w - size)
        col = _color(rng)
        img[cy - size:cy + size + 1, cx - thick // 2:cx + thick // 2 + 1] = col
        img[cy - thick // 2:cy + thick // 2 + 1, cx - size:cx + size + 1] = col
    return img


def noise(rng, h, w):
    return rng.uniform(0, 1, (h, w, 3))


def random_image(rng, h, w):
    """Random pick among all other generators, used for negative pools."""
    gens = [striped, checkered, blobs, dotted, meshed, crosses, noise, _solid(_color(rng))]
    return gens[rng.integers(len(gens))](rng, h, w)


TEXTURES = {
    "striped": striped,
    "stripes": striped,
    "checkered": checkered,
    "checker": checkered,
    "blobs": blobs,
    "dotted": dotted,
    "meshed": meshed,
    "crosses": crosses,
    "noise": noise,
    "random": random_image,
    **{f"solid-{c}": _solid(v) for c, v in _SOLID.items()},
}


def render_texture(name, rng, shape=(32, 32, 3), pixel_noise=0.03):
    if name not in TEXTURES:
        raise KeyError(f"unknown texture {name!r}; known: {', '.join(sorted(TEXTURES))}")
    h, w, c = shape
    img = TEXTURES[name](rng, h, w)
    if pixel_noise:
        img = img + rng.normal(0, pixel_noise, img.shape)
    if c != 3:
        img = img.mean(axis=-1, keepdims=True).repeat(c, axis=-1)
    return quantize(img)


# -- caption glyphs ---------------------------------------------------------------

GLYPH_ROWS, GLYPH_COLS, CELL_WIDTH = 5, 3, 3


def glyph(word: str) -> np.ndarray:
    """Fixed 5x3 binary pattern for a word, derived from a hash of its text."""
    bits = int.from_bytes(hashlib.sha256(word.encode("utf-8")).digest()[:4], "little")
    cells = np.array([(bits >> i) & 1 for i in range(GLYPH_ROWS * GLYPH_COLS)], dtype=bool)
    return cells.reshape(GLYPH_ROWS, GLYPH_COLS)


def draw_caption(img: np.ndarray, word: str, band: int) -> np.ndarray:
    """Write the glyph for ``word`` in white, centred in the bottom band."""
    out = img.copy()
    h, w, _ = img.shape
    gw = GLYPH_COLS * CELL_WIDTH
    x0 = (w - gw) // 2
    r0 = h - band + (band - GLYPH_ROWS) // 2
    cells = np.repeat(glyph(word), CELL_WIDTH, axis=1)
    region = out[r0:r0 + GLYPH_ROWS, x0:x0 + gw]
    region[cells] = 1.0
    return out


# -- controlled dataset ----------------------------------------------------------

@dataclass(frozen=True)
class DatasetSpec:
    classes: tuple[str, ...] = CLASS_TEXTURES
    image_size: tuple[int, int, int] = (32, 32, 3)
    samples_per_class: int = 600
    heldout_per_class: int = 150
    noise_p: float = 0.0
    caption_height: int = 6
    vocabulary: tuple[str, ...] = DEFAULT_VOCABULARY
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "vocabulary", tuple(self.vocabulary))
        object.__setattr__(self, "image_size", tuple(self.image_size))
        if not 0.0 <= self.noise_p <= 1.0:
            raise ValueError(f"noise_p must lie in [0, 1], got {self.noise_p}")
        if len(self.vocabulary) < len(self.classes):
            raise ValueError(f"vocabulary has {len(self.vocabulary)} words for {len(self.classes)} classes")
        if len(self.vocabulary) < 2 and self.noise_p > 0:
            raise ValueError("caption noise needs at least two vocabulary words")
        if not 0 < self.caption_height < self.image_size[0]:
            raise ValueError("caption_height must be positive and smaller than the image height")
        if self.caption_height < GLYPH_ROWS:
            raise ValueError(f"caption_height must fit a {GLYPH_ROWS}-row glyph")
        if self.samples_per_class < 0 or self.heldout_per_class < 0:
            raise ValueError("sample counts must be non-negative")
        for name in self.classes:
            if name not in TEXTURES:
                raise ValueError(f"unknown class texture {name!r}")
        patterns = {glyph(wd).tobytes() for wd in self.vocabulary}
        if len(patterns) != len(self.vocabulary):
            raise ValueError("two vocabulary words share a glyph pattern")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown dataset spec fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(eq=False)
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    caption_labels: np.ndarray
    split: np.ndarray           # "train" / "heldout"
    sample_ids: np.ndarray
    spec: DatasetSpec
    stripped: bool = False

    def __len__(self):
        return len(self.labels)

    def subset(self, mask) -> "LabeledDataset":
        return LabeledDataset(self.inputs[mask], self.labels[mask], self.caption_labels[mask],
                              self.split[mask], self.sample_ids[mask], self.spec, self.stripped)

    @property
    def train(self) -> "LabeledDataset":
        return self.subset(self.split == "train")

    @property
    def heldout(self) -> "LabeledDataset":
        return self.subset(self.split == "heldout")

    def of_class(self, k: int) -> "LabeledDataset":
        return self.subset(self.labels == k)

    def caption_agreement(self) -> float:
        return float(np.mean(self.caption_labels == self.labels)) if len(self) else float("nan")


def _texture_for(spec: DatasetSpec, sample_id: int, label: int) -> np.ndarray:
    return render_texture(spec.classes[label], _rng(spec.seed, sample_id, 0), spec.image_size)


def generate_controlled(spec: DatasetSpec) -> LabeledDataset:
    """Class textures with a caption glyph in the bottom band.

    With probability ``noise_p`` the caption names a uniformly random
    vocabulary word other than the correct one.
    """
    per_class = spec.samples_per_class + spec.heldout_per_class
    n = per_class * spec.num_classes
    inputs = np.empty((n,) + spec.image_size)
    labels = np.repeat(np.arange(spec.num_classes), per_class)
    split = np.tile(np.array(["train"] * spec.samples_per_class + ["heldout"] * spec.heldout_per_class), spec.num_classes)
    captions = np.empty(n, dtype=np.int64)
    vocab = len(spec.vocabulary)
    for i in range(n):
        k = int(labels[i])
        rng = _rng(spec.seed, i, 1)
        word = k
        if rng.uniform() < spec.noise_p:
            word = int(rng.integers(vocab - 1))
            word += word >= k
        captions[i] = word
        inputs[i] = draw_caption(_texture_for(spec, i, k), spec.vocabulary[word], spec.caption_height)
    return LabeledDataset(inputs, labels, captions, split, np.arange(n), spec)


def strip_captions(ds: LabeledDataset) -> LabeledDataset:
    """Replace the caption band with the continuation of the image's own texture."""
    spec = ds.spec
    band = spec.caption_height
    out = ds.inputs.copy()
    for j, (sid, k) in enumerate(zip(ds.sample_ids, ds.labels)):
        out[j, -band:] = _texture_for(spec, int(sid), int(k))[-band:]
    return LabeledDataset(out, ds.labels.copy(), ds.caption_labels.copy(), ds.split.copy(),
                          ds.sample_ids.copy(), spec, stripped=True)


@dataclass(eq=False)
class ConceptSet:
    name: str
    examples: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        self.examples = np.asarray(self.examples, dtype=np.float64)
        if self.examples.ndim < 2 or len(self.examples) == 0:
            raise ValueError(f"concept set {self.name!r} is empty")

    def __len__(self):
        return len(self.examples)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.examples.shape[1:]

    def take(self, idx, name=None) -> "ConceptSet":
        return ConceptSet(name or self.name, self.examples[np.asarray(idx)], self.provenance)


def example_digest(img: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(img, dtype=np.float64).tobytes()).hexdigest()[:16]


def concept_image_set(ds: LabeledDataset, k: int) -> ConceptSet:
    """Caption-stripped images of class ``k``."""
    if not 0 <= k < ds.spec.num_classes:
        raise ValueError(f"class {k} does not exist")
    sel = ds.subset(ds.labels == k)
    if len(sel) == 0:
        raise ValueError(f"no images of class {k}")
    return ConceptSet(f"image:{ds.spec.classes[k]}", strip_captions(sel).inputs,
                      f"controlled dataset seed={ds.spec.seed} class={k} stripped")


def shuffle_pixels(img: np.ndarray, rng, keep_rows: int = 0) -> np.ndarray:
    """Permute pixel positions outside the bottom ``keep_rows`` rows."""
    h, w, c = img.shape
    out = img.copy()
    top = out[:h - keep_rows].reshape(-1, c)
    out[:h - keep_rows] = top[rng.permutation(len(top))].reshape(h - keep_rows, w, c)
    return out


def concept_caption_set(ds: LabeledDataset, word: int, seed: int = 0) -> ConceptSet:
    """Images captioned with ``word``: caption band kept, all other pixels shuffled."""
    if not 0 <= word < len(ds.spec.vocabulary):
        raise ValueError(f"word {word} is not in the vocabulary")
    idx = np.flatnonzero(ds.caption_labels == word)
    if len(idx) == 0:
        raise ValueError(f"no image carries caption {ds.spec.vocabulary[word]!r}")
    band = ds.spec.caption_height
    ex = np.stack([shuffle_pixels(ds.inputs[i], _rng(seed, ds.sample_ids[i], 2), band) for i in idx])
    return ConceptSet(f"caption:{ds.spec.vocabulary[word]}", ex,
                      f"controlled dataset seed={ds.spec.seed} caption={word} shuffle_seed={seed}")


def random_image_set(ds: LabeledDataset, n: int, seed: int = 0) -> ConceptSet:
    """Fully pixel-shuffled dataset images: a structure-free negative pool."""
    rng = _rng(seed, 3)
    idx = rng.choice(len(ds), size=n, replace=n > len(ds))
    ex = np.stack([shuffle_pixels(ds.inputs[i], _rng(seed, i, j, 4)) for j, i in enumerate(idx)])
    return ConceptSet("random", ex, f"shuffled controlled images seed={seed}")


def generate_texture_concepts(names, n: int = 30, seed: int = 0, shape=(32, 32, 3)) -> dict[str, ConceptSet]:
    if n < 2:
        raise ValueError("concept sets need at least 2 examples")
    out = {}
    for name in names:
        if name not in TEXTURES:
            raise KeyError(f"unknown texture concept {name!r}; known: {', '.join(sorted(TEXTURES))}")
        key = _name_key(name)
        ex = np.stack([render_texture(name, _rng(seed, key, i, 5), shape) for i in range(n)])
        out[name] = ConceptSet(name, ex, f"procedural {name} n={n} seed={seed}")
    return out


# -- PPM concept directories -------------------------------------------------------

def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    h, w, _ = img.shape
    data = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _ppm_tokens(data: bytes, count: int):
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header")
        tokens.append(int(data[start:pos]))
    return tokens, pos + 1


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    try:
        if data[:2] != b"P6":
            raise FormatError("not a binary PPM (P6) file")
        (w, h, maxval), pos = _ppm_tokens(data, 3)
        if maxval != 255:
            raise FormatError(f"unsupported maxval {maxval}")
        raw = data[pos:pos + w * h * 3]
        if len(raw) != w * h * 3:
            raise FormatError("truncated pixel data")
    except (FormatError, ValueError) as e:
        raise FormatError(f"{path}: {e}") from None
    img = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3) / 255.0
    return img.astype(np.float32).astype(np.float64)


def save_concept_dir(concept: ConceptSet, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(concept.examples):
        write_ppm(path / f"{i:05d}.ppm", img)
    meta = {"name": concept.name, "provenance": concept.provenance, "count": len(concept)}
    (path / "concept.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_concept_dir(path, name=None) -> ConceptSet:
    path = Path(path)
    files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".ppm") if path.is_dir() else []
    if not files:
        raise ValueError(f"{path}: no PPM images found")
    images = []
    for f in files:
        img = read_ppm(f)
        if images and img.shape != images[0].shape:
            raise FormatError(f"{f}: size {img.shape} differs from {images[0].shape}")
        images.append(img)
    provenance = f"directory {path}"
    meta = path / "concept.json"
    if meta.exists():
        info = json.loads(meta.read_text())
        name = name or info.get("name")
        provenance = info.get("provenance") or provenance
    return ConceptSet(name or path.name, np.stack(images), provenance)


# -- dataset manifests ---------------------------------------------------------------

def save_dataset(ds: LabeledDataset, directory) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_tnsr(directory / "inputs.tnsr", ds.inputs)
    manifest = {
        "spec": ds.spec.to_dict(),
        "inputs": "inputs.tnsr",
        "labels": ds.labels.tolist(),
        "caption_labels": ds.caption_labels.tolist(),
        "split": ds.split.tolist(),
        "sample_ids": ds.sample_ids.tolist(),
        "stripped": ds.stripped,
        "caption_agreement": ds.caption_agreement(),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def load_dataset(directory) -> LabeledDataset:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{directory / 'manifest.json'}: {e}") from None
    spec = DatasetSpec.from_dict(manifest["spec"])
    inputs = read_tnsr(directory / manifest["inputs"])
    labels = np.asarray(manifest["labels"], dtype=np.int64)
    if len(inputs) != len(labels):
        raise FormatError(f"{directory}: {len(inputs)} inputs but {len(labels)} labels")
    return LabeledDataset(inputs, labels, np.asarray(manifest["caption_labels"], dtype=np.int64),
                          np.asarray(manifest["split"]), np.asarray(manifest["sample_ids"], dtype=np.int64),
                          spec, bool(manifest.get("stripped", False)))
