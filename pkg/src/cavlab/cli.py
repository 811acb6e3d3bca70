"""Command-line front end.

Every invocation writes one run manifest (JSON) next to its outputs,
recording the arguments, master seed, input and output digests, wall
clock and library versions.  Exit codes: 0 ok, 2 bad input, 3 numeric
failure, 4 significance-test abort.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .autodiff import write_tnsr
from .cav import Cav, ProbeConfig, probe_layers, train_cav
from .dataset import (DatasetSpec, concept_caption_set, concept_image_set, generate_controlled,
                      generate_texture_concepts, load_concept_dir, load_dataset, random_image_set, read_ppm,
                      save_concept_dir, save_dataset, strip_captions, write_ppm)
from .errors import (CavlabError, FormatError, GradientError, InseparableError, ShapeError,
                     SignificanceAbortError, TrainingDivergedError)
from .experiment import ExperimentConfig, run_noise_level, summary_csv, youden
from .extras import (AttackConfig, DreamConfig, activation_maximize, contact_sheet, fgsm_attack, saliency_map,
                     sort_by_concept, write_heatmap_ppm, write_trace_json)
from .model import TrainConfig, load_model, reference_model, save_model, train
from .tcav import bar_chart_rows, reports_to_csv, significance_test

log = logging.getLogger("cavlab")

SEED_ENV = "CAVLAB_SEED"
EXIT_OK, EXIT_BAD_INPUT, EXIT_NUMERIC, EXIT_ABORT = 0, 2, 3, 4
MANIFEST_NAME = "run_manifest.json"


class BadInput(CavlabError):
    pass


# -- run manifest ----------------------------------------------------------------------

def file_digest(path) -> str:
    """sha256 of a file, or of every file under a directory in sorted order."""
    path = Path(path)
    h = hashlib.sha256()
    if path.is_dir():
        for p in sorted(q for q in path.rglob("*") if q.is_file() and q.name != MANIFEST_NAME):
            h.update(p.relative_to(path).as_posix().encode() + b"\0")
            h.update(p.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    master_seed: int
    inputs: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    wall_clock_s: float = 0.0
    versions: dict = field(default_factory=dict)
    exit_code: int = 0
    error: str = ""

    def input(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"{path}: no such file or directory")
        self.inputs[str(path)] = file_digest(path)
        return path

    def output(self, path) -> Path:
        self.outputs.append(str(path))
        return Path(path)

    def finish(self, started: float, exit_code: int, error: str = "") -> dict:
        self.wall_clock_s = round(time.perf_counter() - started, 3)
        self.exit_code = exit_code
        self.error = error
        self.versions = {"cavlab": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                         "python": platform.python_version()}
        d = asdict(self)
        d["outputs"] = [{"path": p, "sha256": file_digest(p) if Path(p).exists() else None}
                        for p in sorted(set(self.outputs))]
        return d


# -- helpers ---------------------------------------------------------------------------

def _json_arg(text: str | None, what: str) -> dict:
    """A JSON object given inline or as a path to a file."""
    if text is None:
        return {}
    try:
        raw = Path(text).read_text() if not text.lstrip().startswith("{") else text
    except OSError as e:
        raise BadInput(f"{what}: {e}") from None
    try:
        value = json.loads(raw)
    except json.JSONDecodeError as e:
        raise BadInput(f"{what} is not valid JSON: {e}") from None
    if not isinstance(value, dict):
        raise BadInput(f"{what} must be a JSON object")
    return value


def _build(cls, d: dict, what: str):
    try:
        return cls(**d)
    except TypeError as e:
        raise BadInput(f"{what}: {e}") from None


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def _write_text(m: RunManifest, path, text: str) -> None:
    m.output(path).write_text(text)


def _write_json(m: RunManifest, path, obj) -> None:
    _write_text(m, path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _probe(args, seed) -> ProbeConfig:
    d = {"seed": seed, **_json_arg(getattr(args, "probe", None), "--probe")}
    return _build(ProbeConfig, d, "--probe")


def _load_concept(m: RunManifest, path) -> object:
    return load_concept_dir(m.input(path))


# -- commands --------------------------------------------------------------------------

def cmd_gen_data(args, m: RunManifest) -> None:
    d = _json_arg(args.spec, "--spec")
    if args.seed is not None or "seed" not in d:
        d["seed"] = m.master_seed
    spec = DatasetSpec.from_dict(d)
    m.config["spec"] = spec.to_dict()
    ds = generate_controlled(spec)
    out = Path(args.out)
    manifest = save_dataset(ds, out)
    m.output(out / "manifest.json")
    m.output(out / "inputs.tnsr")
    print(f"{len(ds)} images, caption agreement {manifest['caption_agreement']:.3f}")


def cmd_gen_concepts(args, m: RunManifest) -> None:
    out = Path(args.out)
    concepts = []
    if args.textures:
        shape = tuple(args.shape)
        concepts += generate_texture_concepts(args.textures.split(","), n=args.n, seed=m.master_seed,
                                              shape=shape).values()
    if args.data:
        ds = load_dataset(m.input(args.data)).train
        for k in args.image_class or []:
            concepts.append(concept_image_set(ds, k).take(np.arange(min(args.n, int(np.sum(ds.labels == k))))))
        for k in args.caption_class or []:
            c = concept_caption_set(ds, k, seed=m.master_seed)
            concepts.append(c.take(np.arange(min(args.n, len(c)))))
        if args.random:
            concepts.append(random_image_set(ds, args.random, seed=m.master_seed))
    elif args.image_class or args.caption_class or args.random:
        raise BadInput("--image-class/--caption-class/--random need --data")
    if not concepts:
        raise BadInput("nothing to generate: give --textures and/or --data with a concept kind")
    for c in concepts:
        d = out / c.name.replace(":", "-")
        save_concept_dir(c, d)
        for p in sorted(d.iterdir()):
            m.output(p)
        print(f"{c.name}: {len(c)} images")


def cmd_train(args, m: RunManifest) -> None:
    ds = load_dataset(m.input(args.data))
    d = _json_arg(args.config, "--config")
    model_seed = d.pop("model_seed", m.master_seed)
    d.setdefault("seed", m.master_seed)
    cfg = _build(TrainConfig, d, "--config")
    m.config["train"] = asdict(cfg)
    model = reference_model(ds.spec.image_size, ds.spec.num_classes, seed=model_seed)
    model, losses = train(model, ds.train, cfg)
    save_model(model, m.output(args.model))
    _write_json(m, str(args.model) + ".losses.json", {"epoch_loss": [float(x) for x in losses]})
    print(f"trained {cfg.epochs} epochs, final loss {losses[-1] if losses else float('nan'):.4f}")


def cmd_eval(args, m: RunManifest) -> None:
    model = load_model(m.input(args.model))
    ds = load_dataset(m.input(args.data))
    if args.split != "all":
        ds = ds.train if args.split == "train" else ds.heldout
    if args.strip_captions:
        ds = strip_captions(ds)
    if len(ds) == 0:
        raise BadInput(f"split {args.split!r} is empty")
    pred = model.predict(ds.inputs)
    k = model.num_classes
    report = {
        "split": args.split,
        "stripped": ds.stripped,
        "n": len(ds),
        "accuracy": float(np.mean(pred == ds.labels)),
        "per_class_accuracy": [float(np.mean(pred[ds.labels == c] == c)) if np.any(ds.labels == c) else None
                               for c in range(k)],
        "youden": [youden(pred, ds.labels, c) for c in range(k)],
    }
    if args.out:
        _write_json(m, args.out, report)
    print(json.dumps(report, sort_keys=True))


def cmd_learn_cav(args, m: RunManifest) -> None:
    model = load_model(m.input(args.model))
    pos = _load_concept(m, args.positive)
    neg = _load_concept(m, args.negative)
    cav = train_cav(model, args.layer, pos, neg, _probe(args, m.master_seed))
    cav.save(m.output(args.out))
    if args.tnsr:
        cav.save_tnsr(m.output(args.tnsr))
    print(f"CAV {cav.concept} vs {cav.negative_id} at {cav.layer}: held-out accuracy {cav.heldout_accuracy:.3f}")


def cmd_tcav(args, m: RunManifest) -> None:
    model = load_model(m.input(args.model))
    ds = load_dataset(m.input(args.data))
    held = ds.heldout if len(ds.heldout) else ds
    if args.strip_captions:
        held = strip_captions(held)
    pool = _load_concept(m, args.pool)
    concepts = [_load_concept(m, c) for c in args.concept]
    classes = args.class_index if args.class_index else list(range(model.num_classes))
    probe = _probe(args, m.master_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for k in classes:
        if not 0 <= k < model.num_classes:
            raise BadInput(f"class {k} out of range [0, {model.num_classes})")
        inputs = held.inputs[held.labels == k][:args.class_inputs]
        for c in concepts:
            r = significance_test(model, args.layer, c, pool, k, inputs, runs=args.runs, alpha=args.alpha,
                                  bonferroni_m=args.m, negatives_size=args.negatives_size, probe=probe,
                                  master_seed=m.master_seed, mode=args.mode, workers=args.workers,
                                  class_name=ds.spec.classes[k] if k < ds.spec.num_classes else "")
            _write_text(m, out / f"report_{c.name}_class{k}_{args.layer}.json", r.to_json())
            reports.append(r)
            print(f"class {k} {c.name}: TCAV_Q {r.mean:.3f} +- {r.std:.3f}  p={r.p_value:.3g}"
                  f"{'' if r.significant else '  (not significant)'}")
    _write_text(m, out / "reports.csv", reports_to_csv(reports))
    for k in classes:
        _write_text(m, out / f"bars_class{k}.csv", bar_chart_rows([r for r in reports if r.class_index == k]))


def cmd_sort(args, m: RunManifest) -> None:
    model = load_model(m.input(args.model))
    cav = Cav.load(m.input(args.cav))
    images = _load_concept(m, args.images)
    ranking = sort_by_concept(model, cav.layer, cav, images, check_provenance=not args.allow_overlap)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(m, out / "ranking.json", {"layer": cav.layer, "concept": cav.concept,
                                          "ranking": [{"index": i, "cosine": c} for i, c in ranking]})
    n = min(args.top, len(ranking))
    order = [i for i, _ in ranking]
    write_ppm(m.output(out / "most_similar.ppm"), contact_sheet(images.examples[order[:n]], cols=n))
    write_ppm(m.output(out / "least_similar.ppm"), contact_sheet(images.examples[order[::-1][:n]], cols=n))


def cmd_dream(args, m: RunManifest) -> None:
    model = load_model(m.input(args.model))
    cav = Cav.load(m.input(args.cav))
    start = read_ppm(m.input(args.start)) if args.start else None
    cfg = DreamConfig(steps=args.steps, step_size=args.step_size, start=start, jitter=args.jitter, l2=args.l2,
                      seed=m.master_seed)
    x, trace = activation_maximize(model, cav.layer, cav, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ppm(m.output(out / "dream.ppm"), x)
    write_tnsr(m.output(out / "dream.tnsr"), x)
    write_trace_json(trace, m.output(out / "trace.json"))
    print(f"objective {trace[0]:.4f} -> {trace[-1]:.4f}")


def cmd_saliency(args, m: RunManifest) -> None:
    model = load_model(m.input(args.model))
    x = read_ppm(m.input(args.image))
    k = args.class_index if args.class_index is not None else int(model.predict(x[None])[0])
    sal = saliency_map(model, k, x)
    write_heatmap_ppm(sal, m.output(args.out))
    write_tnsr(m.output(str(args.out) + ".tnsr"), sal)


def cmd_attack(args, m: RunManifest) -> None:
    model = load_model(m.input(args.model))
    cfg = AttackConfig(args.epsilon, args.target)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.image:
        x = read_ppm(m.input(args.image))[None]
    else:
        ds = load_dataset(m.input(args.data)).heldout
        x = ds.inputs if args.source_class is None else ds.inputs[ds.labels == args.source_class]
    adv = fgsm_attack(model, x, cfg)
    pred = model.predict(adv)
    write_tnsr(m.output(out / "adversarial.tnsr"), adv)
    if args.image:
        write_ppm(m.output(out / "adversarial.ppm"), adv[0])
    summary = {"epsilon": args.epsilon, "target": args.target, "n": len(adv),
               "success_rate": float(np.mean(pred == args.target)),
               "linf": float(np.max(np.abs(adv - x))) if len(adv) else 0.0,
               "successful": np.flatnonzero(pred == args.target).tolist()}
    _write_json(m, out / "attack.json", summary)
    print(f"{summary['success_rate']:.3f} of {len(adv)} inputs now classified as class {args.target}")


def cmd_probe_layers(args, m: RunManifest) -> None:
    model = load_model(m.input(args.model))
    pos = _load_concept(m, args.positive)
    neg = _load_concept(m, args.negative)
    acc = probe_layers(model, pos, neg, _probe(args, m.master_seed), layers=args.layers)
    _write_json(m, args.out, {"concept": pos.name, "negative": neg.name, "accuracy": acc})
    for layer, a in acc.items():
        print(f"{layer}: {a:.3f}")


def cmd_experiment(args, m: RunManifest) -> None:
    d = _json_arg(args.config, "--config")
    d["noise_list"] = args.noise_list if args.noise_list is not None else d.get("noise_list", (0, .3, .7, 1))
    d.setdefault("master_seed", m.master_seed)
    for key in ("runs", "layer", "workers"):
        if getattr(args, key) is not None:
            d[key] = getattr(args, key)
    cfg = ExperimentConfig.from_dict(d)
    m.config["experiment"] = cfg.to_dict()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for p in cfg.noise_list:
        try:
            res = run_noise_level(p, cfg)
        except CavlabError as e:
            raise type(e)(f"noise level p={p}: {e}") from e
        results.append(res)
        sub = out / f"p{p:g}"
        sub.mkdir(exist_ok=True)
        save_model(res.model, m.output(sub / "model.cavm"))
        reports = [r for cell in res.cells for r in (cell.image, cell.caption)]
        _write_text(m, sub / "reports.csv", reports_to_csv(reports))
        _write_json(m, sub / "reports.json", [r.to_dict() for r in reports])
        for cell in res.cells:
            print(f"p={p:g} class {cell.class_index}: acc {cell.acc_clean:.2f} -> {cell.acc_stripped:.2f} stripped, "
                  f"TCAV image {cell.image.mean:.2f} caption {cell.caption.mean:.2f}, "
                  f"{'consistent' if cell.consistent else 'INCONSISTENT'}")
    _write_text(m, out / "summary.csv", summary_csv(results))
    cells = [c for r in results for c in r.cells]
    print(f"{sum(c.consistent for c in cells)} of {len(cells)} cells consistent")


# -- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cavlab", description="Concept activation vectors and TCAV on toy images.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, fn, help_):
        s = sub.add_parser(name, help=help_)
        s.set_defaults(fn=fn)
        s.add_argument("--seed", type=int, default=None, help=f"master seed (default: ${SEED_ENV} or 0)")
        s.add_argument("--manifest", default=None, help="where to write the run manifest")
        return s

    s = cmd("gen-data", cmd_gen_data, "generate the captioned texture dataset")
    s.add_argument("--spec", help="dataset spec as JSON (inline or a file path)")
    s.add_argument("--out", required=True)

    s = cmd("gen-concepts", cmd_gen_concepts, "write concept image directories (PPM)")
    s.add_argument("--out", required=True)
    s.add_argument("--textures", help="comma-separated texture names")
    s.add_argument("--n", type=int, default=30)
    s.add_argument("--shape", type=int, nargs=3, default=(32, 32, 3))
    s.add_argument("--data", help="dataset directory for image/caption/random concepts")
    s.add_argument("--image-class", type=int, action="append")
    s.add_argument("--caption-class", type=int, action="append")
    s.add_argument("--random", type=int, default=0, help="size of a shuffled-pixel random pool")

    s = cmd("train", cmd_train, "train the reference network")
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True, help="checkpoint to write")
    s.add_argument("--config", help="training config JSON")

    s = cmd("eval", cmd_eval, "evaluate a checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--split", choices=("train", "heldout", "all"), default="heldout")
    s.add_argument("--strip-captions", action="store_true")
    s.add_argument("--out")

    def probe_args(s):
        s.add_argument("--probe", help="probe config JSON (epochs, l2, heldout_fraction, ...)")

    s = cmd("learn-cav", cmd_learn_cav, "learn a CAV from concept and negative directories")
    s.add_argument("--model", required=True)
    s.add_argument("--layer", required=True)
    s.add_argument("--positive", required=True)
    s.add_argument("--negative", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--tnsr", help="also write the vector as TNSR")
    probe_args(s)

    s = cmd("tcav", cmd_tcav, "significance-tested TCAV scores")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True, help="dataset whose held-out images are the class inputs")
    s.add_argument("--layer", required=True)
    s.add_argument("--concept", required=True, action="append")
    s.add_argument("--pool", required=True, help="negative pool directory")
    s.add_argument("--class", dest="class_index", type=int, action="append")
    s.add_argument("--class-inputs", type=int, default=100)
    s.add_argument("--strip-captions", action="store_true")
    s.add_argument("--runs", type=int, default=500)
    s.add_argument("--alpha", type=float, default=0.05)
    s.add_argument("--m", type=int, default=2, help="Bonferroni factor")
    s.add_argument("--negatives-size", type=int)
    s.add_argument("--mode", choices=("one-sample", "two-sample"), default="one-sample")
    s.add_argument("--workers", type=int)
    s.add_argument("--out", required=True)
    probe_args(s)

    s = cmd("sort", cmd_sort, "rank images by similarity to a CAV")
    s.add_argument("--model", required=True)
    s.add_argument("--cav", required=True)
    s.add_argument("--images", required=True)
    s.add_argument("--top", type=int, default=10)
    s.add_argument("--allow-overlap", action="store_true", help="skip the training-image check")
    s.add_argument("--out", required=True)

    s = cmd("dream", cmd_dream, "activation maximisation along a CAV")
    s.add_argument("--model", required=True)
    s.add_argument("--cav", required=True)
    s.add_argument("--steps", type=int, default=200)
    s.add_argument("--step-size", type=float, default=0.01)
    s.add_argument("--jitter", type=int, default=0, help="max integer roll per step")
    s.add_argument("--l2", type=float, default=1e-3)
    s.add_argument("--start", help="PPM image to start from (default: noise)")
    s.add_argument("--out", required=True)

    s = cmd("saliency", cmd_saliency, "gradient saliency heatmap")
    s.add_argument("--model", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--class", dest="class_index", type=int)
    s.add_argument("--out", required=True, help="heatmap PPM")

    s = cmd("attack", cmd_attack, "targeted FGSM")
    s.add_argument("--model", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--image")
    g.add_argument("--data")
    s.add_argument("--source-class", type=int)
    s.add_argument("--target", type=int, required=True)
    s.add_argument("--epsilon", type=float, required=True)
    s.add_argument("--out", required=True)

    s = cmd("probe-layers", cmd_probe_layers, "held-out linear probe accuracy per layer")
    s.add_argument("--model", required=True)
    s.add_argument("--positive", required=True)
    s.add_argument("--negative", required=True)
    s.add_argument("--layers", nargs="+")
    s.add_argument("--out", required=True)
    probe_args(s)

    s = cmd("experiment", cmd_experiment, "image-vs-caption ground-truth experiment")
    s.add_argument("--noise-list", type=_float_list)
    s.add_argument("--config", help="experiment config JSON")
    s.add_argument("--runs", type=int)
    s.add_argument("--layer")
    s.add_argument("--workers", type=int)
    s.add_argument("--out", required=True)
    return p


def _manifest_path(args) -> Path:
    if args.manifest:
        return Path(args.manifest)
    if getattr(args, "out", None) is None:
        # train writes only a checkpoint; eval may print only
        model = Path(args.model)
        return model.with_name(f"{model.name}.{args.command}.manifest.json")
    out = Path(args.out)
    if out.is_dir() or out.suffix == "":
        return out / MANIFEST_NAME
    return out.with_name(out.name + ".manifest.json")


def _resolve_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise BadInput(f"${SEED_ENV} must be an integer, got {env!r}") from None


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    started = time.perf_counter()
    config = {k: v for k, v in vars(args).items() if k not in ("fn", "verbose")}
    m = RunManifest(args.command, config, 0)
    code, error = EXIT_OK, ""
    try:
        m.master_seed = _resolve_seed(args)
        args.fn(args, m)
    except SignificanceAbortError as e:
        code, error = EXIT_ABORT, str(e)
    except (TrainingDivergedError, GradientError, InseparableError, FloatingPointError) as e:
        code, error = EXIT_NUMERIC, str(e)
    except (BadInput, FormatError, ShapeError, FileNotFoundError, NotADirectoryError, KeyError, ValueError,
            TypeError) as e:
        code, error = EXIT_BAD_INPUT, str(e)
    if error:
        print(f"cavlab {args.command}: error: {error}", file=sys.stderr)
    path = _manifest_path(args)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(m.finish(started, code, error), indent=1, sort_keys=True, default=str) + "\n")
    except OSError as e:
        print(f"cavlab {args.command}: could not write manifest {path}: {e}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
