"""Experiment configuration: INI-style ``[section]`` / ``key = value`` files.

Grammar (every key optional, defaults shown by :func:`default_sections`)::

    [experiment]  name, images, seeds, output_dir
    [dataset]     source, n, classes, size, seed, normalize
    [model]       arch, size, num_classes, activation, init, seed
    [train]       epochs, lr, seed, fraction
    [fl]          clients, rounds, lr, batch
    [attack]      method, optimizer, iterations, lr, history, init, init_value,
                  tv_weight, checkpoint_every, success_ssim, ssim_mode
    [defense]     grid, seed

``images`` is either a count (``10``) or an explicit id list (``0, 3, 7``).
``seeds`` is a comma list.  ``grid`` is a comma list of defense tokens:
``none``, ``laplace:0.001``, ``gaussian:0.01``, ``topk:0.25`` or a noise level
written ``laplace:L200``.  Lines starting with ``#`` or ``;`` are comments.
"""

from __future__ import annotations

import configparser
import json
from dataclasses import dataclass, field
from pathlib import Path

from .attacks import METHODS, AttackConfig, default_optimizer
from .defenses import KINDS, DefenseConfig
from .nn import ModelSpec
from .optim import OptimizerConfig


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending key."""


def default_sections() -> dict[str, dict[str, str]]:
    return {
        "experiment": {"name": "experiment", "images": "1", "seeds": "0",
                       "output_dir": "runs/experiment"},
        "dataset": {"source": "phantom", "n": "8", "classes": "2", "size": "32", "seed": "0",
                    "normalize": "false"},
        "model": {"arch": "cnn4", "size": "32", "num_classes": "2", "activation": "sigmoid",
                  "init": "fan_in", "seed": "0"},
        "train": {"epochs": "0", "lr": "0.01", "seed": "0", "fraction": "0.75"},
        "fl": {"clients": "4", "rounds": "1", "lr": "0.01", "batch": "1"},
        "attack": {"method": "dlg", "optimizer": "", "iterations": "", "lr": "",
                   "history": "10", "init": "", "init_value": "0.5", "tv_weight": "0.0001",
                   "checkpoint_every": "20", "success_ssim": "0.9", "ssim_mode": "global"},
        "defense": {"grid": "none", "seed": "0"},
    }


@dataclass(frozen=True)
class DatasetConfig:
    source: str = "phantom"  # "phantom" or a directory path
    n: int = 8
    classes: int = 2
    size: int = 32
    seed: int = 0
    normalize: bool = False


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 0
    lr: float = 0.01
    seed: int = 0
    fraction: float = 0.75  # leading share of the corpus used for local training


@dataclass(frozen=True)
class FLConfig:
    clients: int = 4
    rounds: int = 1
    lr: float = 0.01
    batch: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    dataset: DatasetConfig
    model: ModelSpec
    model_seed: int
    train: TrainConfig
    fl: FLConfig
    attack: AttackConfig
    defense_grid: tuple[DefenseConfig, ...]
    images: tuple[int, ...] | int
    seeds: tuple[int, ...]
    output_dir: str
    sections: dict = field(default_factory=dict, compare=False, repr=False)

    def image_ids(self, available: int) -> list[int]:
        ids = list(range(self.images)) if isinstance(self.images, int) else list(self.images)
        bad = [i for i in ids if not 0 <= i < available]
        if bad:
            raise ConfigError(f"experiment.images: ids {bad} out of range for {available} images")
        return ids

    def with_seeds(self, seeds) -> "ExperimentConfig":
        sections = {k: dict(v) for k, v in self.sections.items()}
        sections["experiment"]["seeds"] = ", ".join(str(s) for s in seeds)
        return from_sections(sections)

    def with_output(self, path) -> "ExperimentConfig":
        sections = {k: dict(v) for k, v in self.sections.items()}
        sections["experiment"]["output_dir"] = str(path)
        return from_sections(sections)

    def to_text(self) -> str:
        lines = []
        for name, body in self.sections.items():
            lines.append(f"[{name}]")
            lines.extend(f"{k} = {v}" for k, v in body.items())
            lines.append("")
        return "\n".join(lines)


# ---------------------------------------------------------------- parsing helpers


def _get(sections, sec, key, conv, check=None, what=""):
    raw = sections[sec][key]
    try:
        v = conv(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{sec}.{key}: cannot parse {raw!r} ({exc})") from None
    if check is not None and not check(v):
        raise ConfigError(f"{sec}.{key}: {raw!r} is invalid; {what}")
    return v


def _bool(s: str) -> bool:
    t = s.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected true/false")


def _int_list(s: str) -> tuple[int, ...]:
    items = [t.strip() for t in s.split(",") if t.strip()]
    if not items:
        raise ValueError("empty list")
    return tuple(int(t) for t in items)


def parse_defense(token: str, seed: int = 0) -> DefenseConfig:
    """``none`` | ``laplace:0.001`` | ``gaussian:0.01`` | ``topk:0.5`` | ``laplace:L100``."""
    token = token.strip()
    kind, _, arg = token.partition(":")
    kind = kind.strip().lower()
    if kind not in KINDS:
        raise ValueError(f"unknown defense kind {kind!r} in {token!r}")
    if kind == "none":
        if arg:
            raise ValueError(f"'none' takes no argument: {token!r}")
        return DefenseConfig("none", seed=seed)
    if not arg:
        raise ValueError(f"defense {token!r} needs an argument after ':'")
    if kind == "topk":
        return DefenseConfig("topk", keep_fraction=float(arg), seed=seed)
    if arg[0] in "Ll":
        return DefenseConfig(kind, level=int(arg[1:]), seed=seed)
    return DefenseConfig(kind, scale=float(arg), seed=seed)


def _read_sections(path: Path) -> dict[str, dict[str, str]]:
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    if path.suffix == ".json":
        # a manifest.json from an earlier run
        try:
            doc = json.loads(path.read_text())
            return {s: {k: str(v) for k, v in body.items()} for s, body in doc["config"].items()}
        except (ValueError, KeyError, AttributeError) as exc:
            raise ConfigError(f"{path}: not a run manifest ({exc})") from None
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return {s: dict(cp[s]) for s in cp.sections()}


def load_config(path) -> ExperimentConfig:
    return from_sections(_read_sections(Path(path)))


def from_sections(given: dict[str, dict[str, str]]) -> ExperimentConfig:
    """Merge ``given`` over the defaults, validating every key."""
    sections = default_sections()
    for sec, body in given.items():
        if sec not in sections:
            raise ConfigError(f"unknown section [{sec}]; expected one of {sorted(sections)}")
        for key, value in body.items():
            if key not in sections[sec]:
                raise ConfigError(f"unknown key {sec}.{key}; expected one of "
                                  f"{sorted(sections[sec])}")
            sections[sec][key] = str(value).strip()
    s = sections

    positive = (lambda v: v > 0, "must be > 0")
    nonneg = (lambda v: v >= 0, "must be >= 0")

    ds = DatasetConfig(
        source=s["dataset"]["source"] or "phantom",
        n=_get(s, "dataset", "n", int, *positive),
        classes=_get(s, "dataset", "classes", int, lambda v: 1 <= v <= 4, "must be in 1..4"),
        size=_get(s, "dataset", "size", int, *positive),
        seed=_get(s, "dataset", "seed", int, *nonneg),
        normalize=_get(s, "dataset", "normalize", _bool),
    )

    size = _get(s, "model", "size", int, *positive)
    try:
        model = ModelSpec(arch=s["model"]["arch"], input_dims=(3, size, size),
                          num_classes=_get(s, "model", "num_classes", int),
                          activation=s["model"]["activation"], init=s["model"]["init"])
    except ValueError as exc:
        raise ConfigError(f"[model]: {exc}") from None
    model_seed = _get(s, "model", "seed", int, *nonneg)

    train = TrainConfig(
        epochs=_get(s, "train", "epochs", int, *nonneg),
        lr=_get(s, "train", "lr", float, *positive),
        seed=_get(s, "train", "seed", int, *nonneg),
        fraction=_get(s, "train", "fraction", float, lambda v: 0 < v <= 1, "must lie in (0, 1]"),
    )
    fl = FLConfig(
        clients=_get(s, "fl", "clients", int, *positive),
        rounds=_get(s, "fl", "rounds", int, *positive),
        lr=_get(s, "fl", "lr", float, *nonneg),
        batch=_get(s, "fl", "batch", int, lambda v: v == 1,
                   "attacks reconstruct single images, so batch must be 1"),
    )

    a = s["attack"]
    method = a["method"]
    if method not in METHODS:
        raise ConfigError(f"attack.method: {method!r} is not one of {METHODS}")
    base = default_optimizer(method)
    try:
        opt = OptimizerConfig(
            kind=a["optimizer"] or base.kind,
            max_iters=_get(s, "attack", "iterations", int) if a["iterations"] else base.max_iters,
            lr=_get(s, "attack", "lr", float) if a["lr"] else base.lr,
            lbfgs_history=_get(s, "attack", "history", int),
        )
        attack = AttackConfig(
            method=method, optimizer=opt, init=a["init"] or None,
            init_value=_get(s, "attack", "init_value", float),
            tv_weight=_get(s, "attack", "tv_weight", float),
            checkpoint_every=_get(s, "attack", "checkpoint_every", int),
            success_ssim=_get(s, "attack", "success_ssim", float),
            ssim_mode=a["ssim_mode"],
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"[attack]: {exc}") from None
    if attack.ssim_mode not in ("global", "windowed"):
        raise ConfigError(f"attack.ssim_mode: {attack.ssim_mode!r} is not global/windowed")

    dseed = _get(s, "defense", "seed", int, *nonneg)
    tokens = [t for t in s["defense"]["grid"].split(",") if t.strip()]
    if not tokens:
        raise ConfigError("defense.grid: empty")
    grid = []
    for t in tokens:
        try:
            grid.append(parse_defense(t, dseed))
        except ValueError as exc:
            raise ConfigError(f"defense.grid: {exc}") from None
    labels = [d.label() for d in grid]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"defense.grid: duplicate entries in {labels}")

    raw_images = s["experiment"]["images"]
    if "," in raw_images:
        images = _get(s, "experiment", "images", _int_list)
    else:
        images = _get(s, "experiment", "images", int, *positive)
    seeds = _get(s, "experiment", "seeds", _int_list)
    if len(set(seeds)) != len(seeds) or min(seeds) < 0:
        raise ConfigError(f"experiment.seeds: need distinct nonnegative seeds, got {list(seeds)}")

    return ExperimentConfig(
        name=s["experiment"]["name"], dataset=ds, model=model, model_seed=model_seed,
        train=train, fl=fl, attack=attack, defense_grid=tuple(grid), images=images,
        seeds=tuple(seeds), output_dir=s["experiment"]["output_dir"], sections=s)
