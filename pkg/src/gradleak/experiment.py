"""End-to-end experiment: data, optional training, FL rounds, attack grid, reports.

The federated part is cheap and runs sequentially; every (image, defense,
seed) attack is then an independent task, so a process pool can execute them
in any order and the sorted report is the same.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__, data, flsim, metrics, nn
from .attacks import AttackConfig, run_attack
from .config import ConfigError, ExperimentConfig
from .defenses import DefenseConfig

log = logging.getLogger("gradleak")

REPORT_COLUMNS = ("image_id", "attack", "model", "noise_kind", "noise_scale", "iterations",
                  "final_mse", "final_ssim", "success", "wall_time_s")


@dataclass
class Corpus:
    pixels: list[data.ImageSample]  # [0, 1] images at model resolution
    norm: tuple[list[float], list[float]] | None

    def model_input(self, i: int) -> np.ndarray:
        img = self.pixels[i].image
        return img if self.norm is None else data.normalize(img, *self.norm)


@dataclass
class AttackTask:
    image_id: int
    defense: DefenseConfig
    seed: int
    round: int
    params: nn.ParamSet
    update: nn.GradientUpdate
    truth: np.ndarray


def prepare_corpus(cfg: ExperimentConfig) -> Corpus:
    ds = cfg.dataset
    c, h, w = cfg.model.input_dims
    if ds.source == "phantom":
        samples = data.phantom_dataset(ds.n, ds.classes, ds.seed, ds.size, out_size=h)
    else:
        try:
            manifest = data.load_dataset(ds.source)
        except FileNotFoundError as exc:
            raise ConfigError(f"dataset.source: {exc}") from None
        samples = []
        for s in manifest.samples:
            img = s.image
            if img.shape[0] == 1 and c == 3:
                img = np.repeat(img, 3, axis=0)
            if img.shape[1:] != (h, w):
                img = data.resize_bilinear(img, h, w)
            samples.append(data.ImageSample(img, s.label, s.source_id))
        if not samples:
            raise ConfigError(f"dataset.source: no images found under {ds.source}")
    bad = [s.label for s in samples if not 0 <= s.label < cfg.model.num_classes]
    if bad:
        raise ConfigError(f"model.num_classes = {cfg.model.num_classes} but the dataset has "
                          f"label {bad[0]}")
    norm = data.channel_stats([s.image for s in samples]) if ds.normalize else None
    return Corpus(samples, norm)


def initial_params(cfg: ExperimentConfig, corpus: Corpus) -> nn.ParamSet:
    params = nn.build_model(cfg.model, cfg.model_seed)
    if cfg.train.epochs > 0:
        k = max(1, int(math.floor(cfg.train.fraction * len(corpus.pixels))))
        train = [(corpus.model_input(i), corpus.pixels[i].label) for i in range(k)]
        params = nn.train_local(params, cfg.model, train, cfg.train.epochs, cfg.train.lr,
                                cfg.train.seed)
        log.info("trained %d epochs on %d images, accuracy %.3f", cfg.train.epochs, k,
                 nn.accuracy(params, cfg.model, train))
    return params


def _clients(cfg: ExperimentConfig, corpus: Corpus,
             defense: DefenseConfig) -> list[flsim.ClientState]:
    """Round-robin split of the corpus; client k holds images k, k+C, k+2C, ..."""
    n = len(corpus.pixels)
    nc = min(cfg.fl.clients, n)
    d = None if defense.kind == "none" else defense
    return [flsim.ClientState(k, [(corpus.model_input(i), corpus.pixels[i].label)
                                  for i in range(k, n, nc)], d) for k in range(nc)]


def build_tasks(cfg: ExperimentConfig, corpus: Corpus, params0: nn.ParamSet) -> list[AttackTask]:
    """Simulate FL once per (defense, seed) and capture each target image's update.

    Image ``i`` lives on client ``i mod C`` at local position ``i div C``, so the
    cyclic batch schedule transmits it in round ``i div C``.
    """
    ids = cfg.image_ids(len(corpus.pixels))
    nc = min(cfg.fl.clients, len(corpus.pixels))
    rounds = max(cfg.fl.rounds, max(i // nc for i in ids) + 1)
    tasks = []
    for defense in cfg.defense_grid:
        for seed in cfg.seeds:
            clients = _clients(cfg, corpus, defense)
            params = params0
            wanted = {i // nc: [] for i in ids}
            for i in ids:
                wanted[i // nc].append(i)
            for t in range(rounds):
                new, record = flsim.run_round(clients, params, cfg.model, cfg.fl.lr, t, seed,
                                              cfg.fl.batch)
                for i in wanted.get(t, []):
                    tasks.append(AttackTask(i, defense, seed, t, params,
                                            flsim.intercept(record, i % nc),
                                            corpus.pixels[i].image))
                params = new
    return tasks


def _run_task(task: AttackTask, spec: nn.ModelSpec, attack: AttackConfig, norm):
    cfg = replace(attack, seed=task.seed)
    return run_attack(task.update, task.params, spec, cfg, truth=task.truth, norm=norm)


def _run_task_star(args):
    return _run_task(*args)


def noise_value(defense: DefenseConfig) -> float:
    """Report column ``noise_scale``: noise scale, or the kept fraction for top-k."""
    return defense.keep_fraction if defense.kind == "topk" else defense.noise_scale


def report_row(task: AttackTask, result, cfg: ExperimentConfig) -> dict[str, str]:
    f = metrics.format_float
    return {
        "image_id": str(task.image_id),
        "attack": cfg.attack.method,
        "model": cfg.model.arch,
        "noise_kind": task.defense.kind,
        "noise_scale": f(noise_value(task.defense)),
        "iterations": str(result.iterations),
        "final_mse": f(result.final_mse),
        "final_ssim": f(result.final_ssim),
        "success": "true" if result.success else "false",
        "wall_time_s": f(result.wall_time_s),
    }


def _row_key(task: AttackTask):
    return (task.image_id, noise_value(task.defense), task.defense.kind, task.seed)


def render_csv(rows: list[dict[str, str]]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def read_report(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _stats(values: list[float]) -> tuple[float, float]:
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std())


def summarize(rows: list[dict[str, str]]) -> list[dict]:
    """Per-defense aggregates recomputed from the (already rounded) report rows."""
    groups: dict[tuple[str, float], list[dict]] = {}
    for r in rows:
        groups.setdefault((r["noise_kind"], float(r["noise_scale"])), []).append(r)
    out = []
    for (kind, scale), rs in sorted(groups.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        ssim = [float(r["final_ssim"]) for r in rs]
        mse = [float(r["final_mse"]) for r in rs]
        wt = [float(r["wall_time_s"]) for r in rs]
        entry = {"noise_kind": kind, "noise_scale": scale, "runs": len(rs),
                 "asr": sum(r["success"] == "true" for r in rs) / len(rs)}
        for name, vals in (("mse", mse), ("ssim", ssim), ("wall_time_s", wt)):
            m, s = _stats(vals)
            entry[f"{name}_mean"], entry[f"{name}_std"] = m, s
        out.append(entry)
    return out


def sweep_points(rows: list[dict[str, str]], kind: str | None = None) -> list[tuple[float, float, float]]:
    """(noise_scale, mean_ssim, mean_mse) per scale; ``none`` rows count as scale 0."""
    by: dict[float, list[dict]] = {}
    for r in rows:
        k = r["noise_kind"]
        if kind is not None and k not in (kind, "none"):
            continue
        by.setdefault(0.0 if k == "none" else float(r["noise_scale"]), []).append(r)
    return [(s, float(np.mean([float(r["final_ssim"]) for r in rs])),
             float(np.mean([float(r["final_mse"]) for r in rs]))) for s, rs in sorted(by.items())]


def _recon_dir(out: Path, task: AttackTask, cfg: ExperimentConfig) -> Path:
    single = len(cfg.defense_grid) == 1 and len(cfg.seeds) == 1
    if single:
        return out / "recon" / str(task.image_id)
    variant = task.defense.label().replace(":", "-")
    return out / "recon" / f"{task.image_id}__{variant}__s{task.seed}"


def _ext(img) -> str:
    return ".pgm" if img.shape[0] == 1 else ".ppm"


def default_workers() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def execute(cfg: ExperimentConfig, workers: int | None = None):
    """Run every attack task; returns (tasks, results) in report order."""
    corpus = prepare_corpus(cfg)
    params0 = initial_params(cfg, corpus)
    tasks = sorted(build_tasks(cfg, corpus, params0), key=_row_key)
    workers = default_workers() if workers is None else workers
    args = [(t, cfg.model, cfg.attack, corpus.norm) for t in tasks]
    log.info("%d attack tasks on %d worker(s)", len(tasks), workers)
    if workers <= 1 or len(tasks) <= 1:
        results = [_run_task_star(a) for a in args]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_task_star, args))
    return tasks, results


def run_experiment(cfg: ExperimentConfig, workers: int | None = None,
                   write_strips: bool = True) -> Path:
    tasks, results = execute(cfg, workers)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [report_row(t, r, cfg) for t, r in zip(tasks, results)]
    (out / "report.csv").write_text(render_csv(rows))
    summary = {"attack": cfg.attack.method, "model": cfg.model.arch,
               "threshold": cfg.attack.success_ssim, "ssim_mode": cfg.attack.ssim_mode,
               "groups": summarize(rows)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    failures = [(t.image_id, r.diagnostic) for t, r in zip(tasks, results) if r.failed]
    manifest = {"version": __version__, "config": cfg.sections,
                "rows": len(rows), "failed_runs": [{"image_id": i, "diagnostic": d}
                                                   for i, d in failures]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    if write_strips:
        for t, r in zip(tasks, results):
            d = _recon_dir(out, t, cfg)
            for it, img in r.checkpoints:
                data.save_image(img, d / f"{it}{_ext(img)}")
            data.save_image(t.truth, d / f"truth{_ext(t.truth)}")
    for i, d in failures:
        log.warning("attack on image %d aborted: %s", i, d)
    return out
