"""Command-line entry point: synth, train_disc, select, train_detector, adapt, eval, stats, roc.

Every command writes ``manifest.json`` into ``--out`` before anything else
and completes it with the hashes of its outputs at the end. Inputs are
artifact directories produced by earlier commands; their manifests are
checked before use.

Exit codes: 0 success, 2 configuration error, 3 input-hash mismatch,
4 numerical failure.
"""

import argparse
import hashlib
import json
import os
import sys
from dataclasses import replace

from . import __version__
from .boxes import BBox
from .detector import DetectorModel, Detection, detect_many, read_detections, write_detections
from .discriminator import DiscriminatorModel, write_log
from .evaluation import compute_roc, dataset_stats, interpolate_miss_rate, plot_roc_svg
from .pipeline import (ConfigError, ExperimentConfig, ResultRow, SeedData, evaluate_model, imposters_from,
                       load_dataset, plan_for, plan_slug, run_schedule, save_dataset, synthesize,
                       train_disc_for, write_results_csv)
from .scene import SamplingError

EXIT_OK, EXIT_CONFIG, EXIT_HASH, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST = "manifest.json"


class HashMismatch(RuntimeError):
    """An input artifact is missing, incomplete or modified since it was written."""


# -- manifests -----------------------------------------------------------------


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump(obj, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _artifact_dir(path):
    return path if os.path.isdir(path) else os.path.dirname(os.path.abspath(path))


def verify_artifact(path):
    """Check ``path`` (an artifact directory or a file inside one) against its manifest.

    Returns (manifest, content hash of the input).
    """
    if not os.path.exists(path):
        raise HashMismatch(f"missing input artifact: {path}")
    directory = _artifact_dir(path)
    mpath = os.path.join(directory, MANIFEST)
    if not os.path.exists(mpath):
        raise HashMismatch(f"no manifest for input artifact: {path}")
    with open(mpath, encoding="utf-8") as fh:
        manifest = json.load(fh)
    outputs = manifest.get("outputs")
    if outputs is None:
        raise HashMismatch(f"input artifact {path} comes from an unfinished run")
    if os.path.isdir(path):
        targets = outputs
    else:
        rel = os.path.relpath(os.path.abspath(path), os.path.abspath(directory)).replace(os.sep, "/")
        if rel not in outputs:
            raise HashMismatch(f"{path} is not listed in its manifest")
        targets = {rel: outputs[rel]}
    for rel, digest in targets.items():
        full = os.path.join(directory, rel)
        if not os.path.exists(full):
            raise HashMismatch(f"missing file {rel} of input artifact {directory}")
        if sha256_file(full) != digest:
            raise HashMismatch(f"hash mismatch for {rel} of input artifact {directory}")
    content = sha256_file(mpath) if os.path.isdir(path) else next(iter(targets.values()))
    return manifest, content


class Run:
    """One command invocation: manifest first, outputs, then the completed manifest."""

    def __init__(self, args, config, inputs):
        self.out = args.out
        os.makedirs(self.out, exist_ok=True)
        self.input_manifests = {}
        hashes = {}
        for name, path in inputs.items():
            if path is None:
                continue
            manifest, digest = verify_artifact(path)
            self.input_manifests[name] = manifest
            hashes[name] = digest
        self.manifest = {"command": args.command, "config": config.to_json(), "seed": args.seed,
                         "version": __version__, "outputDir": args.out, "inputs": hashes, "outputs": None}
        self.extra = {}
        _dump(self.manifest, self.path(MANIFEST))
        self.written = []

    def path(self, rel):
        return os.path.join(self.out, rel)

    def wrote(self, *rels):
        self.written.extend(rels)

    def finish(self):
        self.manifest.update(self.extra)
        self.manifest["outputs"] = {rel: sha256_file(self.path(rel)) for rel in sorted(set(self.written))}
        _dump(self.manifest, self.path(MANIFEST))


def _dataset_input(path, role, name=None):
    manifest, _ = verify_artifact(path)
    target = manifest.get("domain") == "target"
    return load_dataset(path, name=name, role=role, target=target)


def _load_config(args):
    return ExperimentConfig.load(args.config) if args.config else ExperimentConfig()


# -- commands ------------------------------------------------------------------


def cmd_synth(args, config):
    if args.count is None or args.count < 0:
        raise ConfigError("synth needs --count N with N >= 0")
    run = Run(args, config, {})
    role = "S" if args.domain == "source" else "T"
    try:
        ds = synthesize(config, args.seed, args.domain, args.count, args.domain, role, args.jobs)
    except SamplingError as exc:
        raise ConfigError(str(exc)) from exc
    run.wrote(*save_dataset(ds, args.out))
    run.extra.update({"domain": args.domain, "count": args.count, "imageSize": list(config.image_size)})
    run.finish()


def cmd_train_disc(args, config):
    run = Run(args, config, {"real": args.real, "synthetic": args.synthetic})
    real = _dataset_input(args.real, "T")
    synth = _dataset_input(args.synthetic, "S")
    data = SeedData(args.seed, synth, real, None, synth, None)
    disc, snapshots, records = train_disc_for(config, data)
    for snap in snapshots:
        rel = f"disc.epoch{snap.epoch}.ckpt"
        snap.save(run.path(rel))
        run.wrote(rel)
    disc.save(run.path("disc.ckpt"))
    write_log(records, run.path("disc_log.csv"))
    run.wrote("disc.ckpt", "disc_log.csv")
    run.finish()


def cmd_select(args, config):
    run = Run(args, config, {"disc": args.disc, "pool": args.pool})
    disc = DiscriminatorModel.load(args.disc)
    pool_manifest = run.input_manifests["pool"]
    pool = _dataset_input(args.pool, "S")
    data = SeedData(args.seed, None, None, None, None, pool)
    k = args.k if args.k is not None else config.k_default
    imposters, chosen = imposters_from(config, data, disc, k)
    chosen = replace(chosen, pool_id=run.manifest["inputs"]["pool"])
    chosen.save(run.path("imposters.json"))
    run.wrote("imposters.json", *save_dataset(imposters, args.out))
    run.extra.update({"domain": pool_manifest.get("domain", "source"), "count": len(imposters),
                      "imageSize": pool_manifest.get("imageSize")})
    run.finish()


def cmd_train_detector(args, config):
    run = Run(args, config, {"data": args.data})
    ds = _dataset_input(args.data, "S")
    plan = plan_for("S", config)
    model, _ = run_schedule(plan, {"S": ds}, config, args.seed)
    model.save(run.path("detector.ckpt"))
    run.wrote("detector.ckpt")
    run.finish()


def cmd_adapt(args, config):
    run = Run(args, config, {"source": args.source, "target": args.target, "imposters": args.imposters,
                             "test": args.test})
    datasets = {"S": _dataset_input(args.source, "S"), "T": _dataset_input(args.target, "T")}
    if args.imposters:
        datasets["I"] = _dataset_input(args.imposters, "I")
    test = _dataset_input(args.test, "targetTest") if args.test else None
    tag = run.manifest["inputs"].get("imposters")
    cache, rows = {}, []
    for name in config.schedules:
        plan = plan_for(name, config)
        model, stage_models = run_schedule(plan, datasets, config, args.seed, cache=cache, imposter_tag=tag)
        for i, m in enumerate(stage_models):
            rel = f"{plan_slug(name)}.stage{i}.ckpt"
            m.save(run.path(rel))
            run.wrote(rel)
        if test is not None:
            ev = evaluate_model(model, test, args.fppi, config.nms_iou)
            rows.append(ResultRow(name, args.seed, ev.miss_rate_50, ev.miss_rate_70))
    if test is not None:
        write_results_csv(rows, run.path("results.csv"))
        run.wrote("results.csv")
    run.finish()


def _detections_from(path, ds, model, config):
    if model is not None:
        return detect_many(model, ds.tensor(), nms_iou=config.nms_iou)
    if os.path.isdir(path):
        other = _dataset_input(path, "targetTest")
        return [[Detection(BBox(b.x, b.y, b.w, b.h), 1.0) for b in lab.boxes] for lab in other.labels]
    _, dets = read_detections(path)
    if len(dets) != len(ds):
        raise ConfigError(f"{path} has detections for {len(dets)} images, dataset has {len(ds)}")
    return dets


def _write_roc(run, per_image, overlap, fppi, stem):
    curve = compute_roc(per_image, overlap)
    curve.write_csv(run.path(f"{stem}.csv"))
    plot_roc_svg([curve], run.path(f"{stem}.svg"), fppi_target=fppi)
    run.wrote(f"{stem}.csv", f"{stem}.svg")
    return curve


def cmd_eval(args, config):
    if (args.model is None) == (args.detections is None):
        raise ConfigError("eval needs exactly one of --model or --detections")
    run = Run(args, config, {"model": args.model, "detections": args.detections, "data": args.data})
    ds = _dataset_input(args.data, "targetTest")
    model = DetectorModel.load(args.model) if args.model else None
    dets = _detections_from(args.detections, ds, model, config)
    write_detections(run.path("detections.jsonl"), dets, [f"{i:06d}" for i in range(len(dets))])
    run.wrote("detections.jsonl")
    per_image = [(d, list(l.boxes)) for d, l in zip(dets, ds.labels)]
    rates = []
    for overlap in (0.5, 0.7):
        curve = _write_roc(run, per_image, overlap, args.fppi, f"roc_overlap{overlap:g}")
        rates.append(interpolate_miss_rate(curve, args.fppi)[0])
    name = os.path.splitext(os.path.basename(args.model or args.detections.rstrip("/\\")))[0]
    write_results_csv([ResultRow(name, args.seed, rates[0], rates[1])], run.path("results.csv"))
    run.wrote("results.csv")
    run.finish()
    print(f"missRate@{args.fppi:g}FPPI overlap0.5={rates[0]:.6f} overlap0.7={rates[1]:.6f}")


def cmd_roc(args, config):
    if args.detections is None:
        raise ConfigError("roc needs --detections")
    run = Run(args, config, {"detections": args.detections, "data": args.data})
    ds = _dataset_input(args.data, "targetTest")
    dets = _detections_from(args.detections, ds, None, config)
    per_image = [(d, list(l.boxes)) for d, l in zip(dets, ds.labels)]
    curve = _write_roc(run, per_image, args.overlap, args.fppi, "roc")
    run.finish()
    print(f"missRate@{args.fppi:g}FPPI overlap{args.overlap:g}={interpolate_miss_rate(curve, args.fppi)[0]:.6f}")


def cmd_stats(args, config):
    run = Run(args, config, {"data": args.data})
    ds = _dataset_input(args.data, "S")
    stats = dataset_stats(ds.labels)
    stats.write_csv(run.path("stats.csv"))
    stats.plot_svg(run.path("stats.svg"))
    run.wrote("stats.csv", "stats.svg")
    run.finish()


COMMANDS = {"synth": cmd_synth, "train_disc": cmd_train_disc, "select": cmd_select,
            "train_detector": cmd_train_detector, "adapt": cmd_adapt, "eval": cmd_eval,
            "stats": cmd_stats, "roc": cmd_roc}


# -- argument parsing ------------------------------------------------------------


def _u64(text):
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="experiment configuration (JSON)")
    common.add_argument("--seed", type=_u64, default=0, help="global seed (U64)")
    common.add_argument("--out", metavar="DIR", required=True, help="output directory")
    common.add_argument("--jobs", type=_positive_int, default=1, help="worker processes for scene rendering")

    p = argparse.ArgumentParser(prog="precarious", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="sample and render a dataset")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--domain", choices=("source", "target"), default="source")

    s = sub.add_parser("train_disc", parents=[common], help="train the real-vs-synthetic discriminator")
    s.add_argument("--real", required=True, metavar="DIR")
    s.add_argument("--synthetic", required=True, metavar="DIR")

    s = sub.add_parser("select", parents=[common], help="select the top-k imposters from a pool")
    s.add_argument("--disc", required=True, metavar="CKPT")
    s.add_argument("--pool", required=True, metavar="DIR")
    s.add_argument("--k", type=int)

    s = sub.add_parser("train_detector", parents=[common], help="train a detector on one dataset")
    s.add_argument("--data", required=True, metavar="DIR")

    s = sub.add_parser("adapt", parents=[common], help="run the configured adaptation schedules")
    s.add_argument("--source", required=True, metavar="DIR")
    s.add_argument("--target", required=True, metavar="DIR")
    s.add_argument("--imposters", metavar="DIR")
    s.add_argument("--test", metavar="DIR", help="target test set; writes results.csv")
    s.add_argument("--fppi", type=float, default=0.1)

    s = sub.add_parser("eval", parents=[common], help="ROC and miss rate at both overlaps")
    s.add_argument("--data", required=True, metavar="DIR")
    s.add_argument("--model", metavar="CKPT")
    s.add_argument("--detections", metavar="PATH", help="detections JSONL, or a dataset dir used as detections")
    s.add_argument("--fppi", type=float, default=0.1)

    s = sub.add_parser("roc", parents=[common], help="ROC at one overlap")
    s.add_argument("--data", required=True, metavar="DIR")
    s.add_argument("--detections", required=True, metavar="PATH")
    s.add_argument("--overlap", type=float, choices=(0.5, 0.7), default=0.5)
    s.add_argument("--fppi", type=float, default=0.1)

    s = sub.add_parser("stats", parents=[common], help="people-per-image and person-type statistics")
    s.add_argument("--data", required=True, metavar="DIR")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = _load_config(args)
        if args.command == "select" and args.k is not None and args.k < 0:
            raise ConfigError("--k must be non-negative")
        COMMANDS[args.command](args, config)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except HashMismatch as exc:
        print(f"input check failed: {exc}", file=sys.stderr)
        return EXIT_HASH
    except (FloatingPointError, OverflowError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
