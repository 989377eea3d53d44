"""Command line entry point.

    gradleak run --config exp.ini [--workers N] [--seed S] [--output DIR]
    gradleak gen-data --output DIR [--n 100 --classes 2 --size 32 --seed 0]
    gradleak attack-one [--config exp.ini] [--image-id I | --image-file F] [--defense TOKEN]
    gradleak metrics A.ppm B.ppm [--ssim-mode windowed]
    gradleak sweep-plotdata REPORT.csv [--kind laplace] [--output FILE]

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
``GRADLEAK_LOG`` sets the log level (DEBUG, INFO, WARNING, ...).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data, experiment, flsim, metrics
from .attacks import run_attack
from .config import ConfigError, from_sections, load_config, parse_defense

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("gradleak")


def _setup_logging():
    level = os.environ.get("GRADLEAK_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _load(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else from_sections({})
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seeds([args.seed])
    if getattr(args, "output", None):
        cfg = cfg.with_output(args.output)
    return cfg


def cmd_run(args) -> int:
    cfg = _load(args)
    out = experiment.run_experiment(cfg, args.workers)
    print(out / "report.csv")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    if args.n <= 0 or args.size <= 0 or not 1 <= args.classes <= len(data.PHANTOM_CLASSES):
        raise ConfigError("gen-data needs n > 0, size > 0 and 1 <= classes <= 4")
    samples = data.phantom_dataset(args.n, args.classes, args.seed, args.size)
    norm = data.channel_stats([s.image for s in samples])
    manifest = data.DatasetManifest("phantom", samples,
                                    list(data.PHANTOM_CLASSES[:args.classes]), norm)
    print(data.write_dataset(args.output, manifest))
    return EXIT_OK


def cmd_attack_one(args) -> int:
    cfg = _load(args)
    corpus = experiment.prepare_corpus(cfg)
    if args.image_file:
        s = data.load_image(args.image_file, args.label)
        img = s.image
        if img.shape[0] == 1:
            img = np.repeat(img, 3, axis=0)
        _, h, w = cfg.model.input_dims
        if img.shape[1:] != (h, w):
            img = data.resize_bilinear(img, h, w)
        label = args.label if args.label >= 0 else 0
        image_id = s.source_id
    else:
        if not 0 <= args.image_id < len(corpus.pixels):
            raise ConfigError(f"--image-id {args.image_id} out of range for "
                              f"{len(corpus.pixels)} images")
        img, label = corpus.pixels[args.image_id].image, corpus.pixels[args.image_id].label
        image_id = str(args.image_id)
    try:
        defense = parse_defense(args.defense, cfg.defense_grid[0].seed) if args.defense \
            else cfg.defense_grid[0]
    except ValueError as exc:
        raise ConfigError(f"--defense: {exc}") from None
    seed = cfg.seeds[0]
    x = img if corpus.norm is None else data.normalize(img, *corpus.norm)
    params = experiment.initial_params(cfg, corpus)
    client = flsim.ClientState(0, [(x, label)], None if defense.kind == "none" else defense)
    _, record = flsim.run_round([client], params, cfg.model, cfg.fl.lr, 0, seed)
    result = run_attack(flsim.intercept(record, 0), params, cfg.model,
                        replace(cfg.attack, seed=seed), truth=img, norm=corpus.norm)
    doc = json.loads(result.to_json())
    doc = {"image_id": image_id, "noise_kind": defense.kind,
           "noise_scale": metrics.format_float(experiment.noise_value(defense)), **doc}
    print(json.dumps(doc))
    if args.save:
        data.save_image(result.reconstructed, args.save)
    return EXIT_OK


def cmd_metrics(args) -> int:
    a = data.load_image(args.a).image
    b = data.load_image(args.b).image
    if a.shape != b.shape:
        raise ConfigError(f"images differ in dims: {list(a.shape)} vs {list(b.shape)}")
    f = metrics.format_float
    print(json.dumps({"mse": f(metrics.mse(a, b)),
                      "ssim": f(metrics.ssim(a, b, args.ssim_mode, args.window)),
                      "psnr": f(metrics.psnr(a, b))}))
    return EXIT_OK


def cmd_sweep(args) -> int:
    path = Path(args.report)
    if path.is_dir():
        path = path / "report.csv"
    if not path.is_file():
        raise ConfigError(f"report {path} does not exist")
    rows = experiment.read_report(path)
    f = metrics.format_float
    lines = ["noise_scale,mean_ssim,mean_mse"]
    lines += [f"{f(s)},{f(m_s)},{f(m_m)}" for s, m_s, m_m in experiment.sweep_points(rows, args.kind)]
    text = "\n".join(lines) + "\n"
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gradleak", description="Gradient leakage attack/defense experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run a full experiment from a config file")
    r.add_argument("--config", required=True)
    r.add_argument("--workers", type=int, default=None)
    r.add_argument("--seed", type=int, default=None, help="replace the config's seed list")
    r.add_argument("--output", default=None, help="override experiment.output_dir")
    r.set_defaults(func=cmd_run)

    g = sub.add_parser("gen-data", help="write a phantom corpus to a directory")
    g.add_argument("--output", required=True)
    g.add_argument("--n", type=int, default=100)
    g.add_argument("--classes", type=int, default=2)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    a = sub.add_parser("attack-one", help="attack a single image, print JSON")
    a.add_argument("--config", default=None)
    a.add_argument("--image-id", type=int, default=0)
    a.add_argument("--image-file", default=None)
    a.add_argument("--label", type=int, default=-1, help="label for --image-file")
    a.add_argument("--defense", default=None, help="e.g. laplace:0.001")
    a.add_argument("--seed", type=int, default=None)
    a.add_argument("--save", default=None, help="write the reconstruction to this .ppm")
    a.set_defaults(func=cmd_attack_one)

    m = sub.add_parser("metrics", help="compare two PGM/PPM images")
    m.add_argument("a")
    m.add_argument("b")
    m.add_argument("--ssim-mode", choices=("global", "windowed"), default="global")
    m.add_argument("--window", type=int, default=8)
    m.set_defaults(func=cmd_metrics)

    s = sub.add_parser("sweep-plotdata", help="noise_scale, mean_ssim, mean_mse from a report")
    s.add_argument("report", help="report.csv or a run directory")
    s.add_argument("--kind", default=None, help="keep only this noise kind (plus 'none')")
    s.add_argument("--output", default=None)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any failure past validation is a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
