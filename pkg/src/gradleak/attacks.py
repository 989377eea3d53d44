"""Gradient inversion: rebuild a private input from an intercepted update.

Three attacks share one loop: a dummy image (and for DLG a dummy label) is
pushed through the shared model, its parameter gradients are compared with
the intercepted ones, and the mismatch is minimized by differentiating
through the backward pass.

* ``dlg``: L2 gradient distance, image and soft label optimized jointly by L-BFGS.
* ``cpl``: L2 gradient distance, label inferred from the last-layer bias
  gradient and held fixed, constant initialization, L-BFGS over the image.
* ``gradinv``: 1 - cosine similarity plus total variation, inferred label, Adam.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import metrics
from .nn import GradientUpdate, ModelSpec, ParamSet, logits, one_hot
from .optim import OptimizerAbort, OptimizerConfig, minimize

METHODS = ("dlg", "cpl", "gradinv")
INITS = ("gaussian", "uniform", "constant", "patterned")

DEFAULT_ITERS = {"dlg": 200, "cpl": 200, "gradinv": 24_000}


def default_optimizer(method: str) -> OptimizerConfig:
    if method == "gradinv":
        return OptimizerConfig(kind="adam", max_iters=DEFAULT_ITERS[method], lr=0.1)
    return OptimizerConfig(kind="lbfgs", max_iters=DEFAULT_ITERS[method], lr=1.0)


@dataclass(frozen=True)
class AttackConfig:
    method: str = "dlg"
    optimizer: OptimizerConfig | None = None
    init: str | None = None
    init_value: float = 0.5
    tv_weight: float = 1e-4
    checkpoint_every: int = 20
    success_ssim: float = metrics.DEFAULT_THRESHOLD
    ssim_mode: str = "global"
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown attack method {self.method!r}")
        if self.optimizer is None:
            object.__setattr__(self, "optimizer", default_optimizer(self.method))
        if self.init is None:
            object.__setattr__(self, "init", {"dlg": "gaussian", "cpl": "patterned",
                                              "gradinv": "gaussian"}[self.method])
        if self.init not in INITS:
            raise ValueError(f"unknown init {self.init!r}")
        if not 0 < self.success_ssim <= 1:
            raise ValueError("success_ssim must lie in (0, 1]")
        if self.tv_weight < 0:
            raise ValueError("tv_weight must be >= 0")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")


@dataclass
class AttackResult:
    method: str
    reconstructed: np.ndarray
    inferred_label: int | list[float]
    loss_trace: list[float]
    checkpoints: list[tuple[int, np.ndarray]]
    final_mse: float
    final_ssim: float
    success: bool
    wall_time_s: float
    iterations: int
    stop_reason: str
    failed: bool = False
    diagnostic: str = ""

    def to_json(self, include_image: bool = False) -> str:
        f = metrics.format_float
        doc = {
            "method": self.method,
            "inferred_label": self.inferred_label if isinstance(self.inferred_label, int)
            else [f(v) for v in self.inferred_label],
            "iterations": self.iterations,
            "stop_reason": self.stop_reason,
            "loss_trace": [f(v) for v in self.loss_trace],
            "checkpoint_iterations": [i for i, _ in self.checkpoints],
            "final_mse": f(self.final_mse),
            "final_ssim": f(self.final_ssim),
            "success": self.success,
            "wall_time_s": f(self.wall_time_s),
            "failed": self.failed,
            "diagnostic": self.diagnostic,
        }
        if include_image:
            doc["reconstructed_dims"] = list(self.reconstructed.shape)
            doc["reconstructed"] = [f(v) for v in self.reconstructed.reshape(-1)]
        return json.dumps(doc)


# ---------------------------------------------------------------- building blocks


def _model_input(x: ad.Node, norm) -> ad.Node:
    if norm is None:
        return x
    mean, std = norm
    c = x.shape[0]
    m = np.broadcast_to(np.asarray(mean, dtype=np.float64).reshape(-1, 1, 1), x.shape)
    s = np.broadcast_to(np.asarray(std, dtype=np.float64).reshape(-1, 1, 1), x.shape)
    if m.shape[0] != c:
        raise ValueError("normalization has the wrong number of channels")
    return ad.mul(ad.sub(x, ad.constant(m)), ad.constant(1.0 / s))


def _check_target(g_target: GradientUpdate, params: ParamSet):
    if g_target.names != params.names:
        raise ValueError("gradient names do not match the model parameters")
    for (name, p), g in zip(params, g_target.tensors):
        if p.shape != g.shape:
            raise ad.ShapeError(f"{name}: target gradient dims {list(g.shape)} vs parameter "
                                f"dims {list(p.shape)}")


def dummy_gradients(dummy_x, dummy_y, params: ParamSet, spec: ModelSpec, norm=None) -> list:
    """Parameter gradients at (dummy_x, dummy_y), kept differentiable."""
    weights = [ad.variable(t) for t in params.tensors]
    x = _model_input(ad._node(dummy_x), norm)
    out = logits(dict(zip(params.names, weights)), spec, x)
    loss = ad.softmax_cross_entropy(out, dummy_y)
    return ad.grad(loss, weights, differentiable=True)


def _l2_distance(grads, g_target: GradientUpdate) -> ad.Node:
    total = None
    for g, t in zip(grads, g_target.tensors):
        term = ad.sum_squares(ad.sub(g, ad.constant(t)))
        total = term if total is None else ad.add(total, term)
    return total


def _cosine_distance(grads, g_target: GradientUpdate) -> ad.Node:
    """1 - cos(g, t), computed as half the squared distance of the unit vectors.

    The two forms agree exactly in real arithmetic; this one stays >= 0 and is
    exactly 0 at alignment, where 1 - cos would lose everything to rounding.
    """
    gg = None
    for g in grads:
        s = ad.sum_squares(g)
        gg = s if gg is None else ad.add(gg, s)
    inv = ad.div(ad.constant(np.array(1.0)), ad.sqrt(gg))
    t64 = [t.astype(np.float64) for t in g_target.tensors]
    t_norm = math.sqrt(sum(float(np.sum(t * t)) for t in t64))
    total = None
    for g, t in zip(grads, t64):
        unit = ad.mul(g, ad.broadcast_to(ad.reshape(inv, (1,) * g.ndim), g.shape))
        term = ad.sum_squares(ad.sub(unit, ad.constant(t / t_norm)))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 0.5)


def gradient_match_loss(dummy_x, dummy_y, params: ParamSet, spec: ModelSpec,
                        g_target: GradientUpdate, norm=None) -> ad.Node:
    """Sum of squared differences between dummy and target parameter gradients.

    ``dummy_x`` / ``dummy_y`` may be Nodes, in which case the result can be
    differentiated with respect to them.
    """
    _check_target(g_target, params)
    return _l2_distance(dummy_gradients(dummy_x, dummy_y, params, spec, norm), g_target)


def cosine_match_loss(dummy_x, dummy_y, params, spec, g_target, norm=None) -> ad.Node:
    _check_target(g_target, params)
    return _cosine_distance(dummy_gradients(dummy_x, dummy_y, params, spec, norm), g_target)


def total_variation(x) -> ad.Node:
    """Anisotropic TV: sum of absolute vertical and horizontal neighbour differences."""
    x = ad._node(x)
    if x.ndim != 3 or x.shape[1] < 2 or x.shape[2] < 2:
        raise ad.ShapeError(f"total_variation needs C x H x W with H, W >= 2, got {list(x.shape)}")
    all_ = slice(None)
    dv = ad.sub(ad.take(x, (all_, slice(1, None), all_)), ad.take(x, (all_, slice(None, -1), all_)))
    dh = ad.sub(ad.take(x, (all_, all_, slice(1, None))), ad.take(x, (all_, all_, slice(None, -1))))
    return ad.add(ad.sum(ad.abs(dv)), ad.sum(ad.abs(dh)))


def infer_label_from_gradients(g_target: GradientUpdate, spec: ModelSpec | None = None) -> int:
    """Class whose final-layer bias gradient is most negative.

    For a single example under softmax cross-entropy the bias gradient is
    softmax - onehot, negative only at the true class.  Ties go to the lowest
    index.
    """
    bias_names = [n for n in g_target.names if n.endswith(".b")]
    if not bias_names:
        raise ValueError("update has no bias gradient for a final layer")
    b = g_target[bias_names[-1]].astype(np.float64)
    if spec is not None and b.shape != (spec.num_classes,):
        raise ValueError(f"last bias gradient has dims {list(b.shape)}, expected "
                         f"[{spec.num_classes}]")
    return int(np.argmin(b))


# ---------------------------------------------------------------- attack driver


def initial_image(cfg: AttackConfig, dims: Sequence[int]) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, 0x1D6])))
    dtype = ad.working_dtype()
    if cfg.init == "gaussian":
        x = rng.normal(0.5, 0.1, size=dims)
    elif cfg.init == "uniform":
        x = rng.uniform(0.0, 1.0, size=dims)
    elif cfg.init == "constant":
        x = np.full(dims, cfg.init_value)
    else:  # patterned: flat mid-grey
        x = np.full(dims, 0.5)
    return np.clip(x, 0.0, 1.0).astype(dtype)


def _clamp_image(xs):
    return [np.clip(xs[0], 0.0, 1.0).astype(xs[0].dtype)] + list(xs[1:])


def _l2_objective(params, spec, g_target, label, norm):
    y_fixed = ad.constant(one_hot(label, spec.num_classes)) if label is not None else None

    def f(xs):
        x = ad.variable(xs[0])
        if y_fixed is None:
            z = ad.variable(xs[1])
            leaves = [x, z]
            y = ad.softmax(z)
        else:
            leaves, y = [x], y_fixed
        loss = _l2_distance(dummy_gradients(x, y, params, spec, norm), g_target)
        return float(loss.value), ad.grad(loss, leaves)

    return f


def _cosine_objective(params, spec, g_target, label, tv_weight, norm):
    y = ad.constant(one_hot(label, spec.num_classes))

    def f(xs):
        x = ad.variable(xs[0])
        loss = _cosine_distance(dummy_gradients(x, y, params, spec, norm), g_target)
        if tv_weight > 0:
            loss = ad.add(loss, ad.scale(total_variation(x), tv_weight))
        return float(loss.value), ad.grad(loss, [x])

    return f


def _evaluate(truth, recon, cfg):
    if truth is None:
        return math.nan, math.nan, False
    truth = np.asarray(truth)
    s = metrics.ssim(truth, recon, cfg.ssim_mode)
    return metrics.mse(truth, recon), s, s >= cfg.success_ssim


def run_attack(g_target: GradientUpdate, params: ParamSet, spec: ModelSpec, cfg: AttackConfig,
               truth=None, x_init=None, label_init=None, norm=None) -> AttackResult:
    """Reconstruct the input behind ``g_target``.

    ``truth`` (the private image, [0, 1] scale) is used only to score the
    result.  ``x_init`` / ``label_init`` override the configured starting
    point; for DLG ``label_init`` is the unconstrained logit vector fed to
    softmax.  ``norm=(mean, std)`` is applied inside the model input so the
    dummy stays in pixel space.
    """
    _check_target(g_target, params)
    start = time.perf_counter()
    dims = spec.input_dims
    x0 = initial_image(cfg, dims) if x_init is None else \
        np.clip(np.asarray(x_init), 0, 1).astype(ad.working_dtype())
    if x0.shape != dims:
        raise ad.ShapeError(f"initial image dims {list(x0.shape)} vs model input {list(dims)}")

    if cfg.method == "dlg":
        z0 = np.zeros(spec.num_classes, dtype=ad.working_dtype()) if label_init is None \
            else np.asarray(label_init, dtype=ad.working_dtype())
        start_point = [x0, z0]
        f = _l2_objective(params, spec, g_target, None, norm)
        label = None
    elif cfg.method == "cpl":
        label = infer_label_from_gradients(g_target, spec) if label_init is None else int(label_init)
        start_point = [x0]
        f = _l2_objective(params, spec, g_target, label, norm)
    else:
        if g_target.norm() == 0:
            raise ValueError("cosine matching needs a target gradient with nonzero norm")
        label = infer_label_from_gradients(g_target, spec) if label_init is None else int(label_init)
        start_point = [x0]
        f = _cosine_objective(params, spec, g_target, label, cfg.tv_weight, norm)

    checkpoints = [(0, x0.copy())]

    def on_step(it, xs):
        if cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            checkpoints.append((it, xs[0].copy()))

    failed, diagnostic = False, ""
    try:
        xs, trace = minimize(f, start_point, cfg.optimizer, project=_clamp_image, callback=on_step)
        recon = xs[0]
        loss_trace = [trace.initial_loss] + trace.losses
        iterations, stop = len(trace), trace.stop_reason
        final_z = xs[1] if cfg.method == "dlg" else None
    except OptimizerAbort as exc:
        recon = checkpoints[-1][1]
        loss_trace, iterations, stop = [], exc.iteration, "aborted"
        failed, diagnostic = True, str(exc)
        final_z = None
    if checkpoints[-1][0] != iterations:
        checkpoints.append((iterations, recon.copy()))

    if cfg.method == "dlg":
        if final_z is None:
            inferred = [math.nan] * spec.num_classes
        else:
            with ad.no_grad():
                inferred = [float(v) for v in ad.softmax(ad.constant(final_z)).value]
    else:
        inferred = label
    mse_v, ssim_v, ok = _evaluate(truth, recon, cfg)
    return AttackResult(cfg.method, recon, inferred, loss_trace, checkpoints, mse_v, ssim_v,
                        ok and not failed, time.perf_counter() - start, iterations, stop,
                        failed, diagnostic)


def dlg_attack(g_target, params, spec, cfg=None, **kw) -> AttackResult:
    cfg = cfg or AttackConfig("dlg")
    if cfg.method != "dlg":
        raise ValueError("dlg_attack needs cfg.method == 'dlg'")
    return run_attack(g_target, params, spec, cfg, **kw)


def cpl_attack(g_target, params, spec, cfg=None, **kw) -> AttackResult:
    cfg = cfg or AttackConfig("cpl")
    if cfg.method != "cpl":
        raise ValueError("cpl_attack needs cfg.method == 'cpl'")
    return run_attack(g_target, params, spec, cfg, **kw)


def gradinv_attack(g_target, params, spec, cfg=None, **kw) -> AttackResult:
    cfg = cfg or AttackConfig("gradinv")
    if cfg.method != "gradinv":
        raise ValueError("gradinv_attack needs cfg.method == 'gradinv'")
    return run_attack(g_target, params, spec, cfg, **kw)
