"""L-BFGS, Adam and SGD.

The minimizers take ``f(xs) -> (loss, grads)`` over a list of arrays and
work on the concatenated flat vector.  An optional ``project`` callback maps
every accepted iterate back onto the feasible set (pixel clamping).
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .nn import GradientUpdate, ParamSet

Objective = Callable[[list[np.ndarray]], tuple[float, list[np.ndarray]]]


class OptimizerAbort(RuntimeError):
    """Raised when the objective returns a non-finite loss or gradient."""

    def __init__(self, iteration: int, message: str):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "lbfgs"
    max_iters: int = 300
    lr: float = 1.0
    lbfgs_history: int = 10
    lbfgs_line_search: str = "backtracking-armijo"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    tolerance: float = 1e-10
    armijo_c: float = 1e-4
    backtrack_shrink: float = 0.5
    max_backtracks: int = 20
    curvature_eps: float = 1e-10

    def __post_init__(self):
        if self.kind not in ("lbfgs", "adam", "sgd"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        b1, b2 = self.adam_betas
        if not (0 < b1 < 1 and 0 < b2 < 1):
            raise ValueError("adam betas must lie in (0, 1)")
        if self.lbfgs_history < 1:
            raise ValueError("lbfgs_history must be >= 1")
        if self.lbfgs_line_search != "backtracking-armijo":
            raise ValueError(f"unsupported line search {self.lbfgs_line_search!r}")


@dataclass
class Trace:
    """Loss after each executed iteration, plus the loss at the start point.

    ``returned`` counts the steps taken to reach the iterate handed back (0 is the
    start point); None means the last one.
    """

    initial_loss: float
    losses: list[float] = field(default_factory=list)
    stop_reason: str = "max_iters"
    evaluations: int = 0
    returned: int | None = None

    def __len__(self):
        return len(self.losses)

    @property
    def final_loss(self) -> float:
        """Loss of the returned iterate."""
        seq = [self.initial_loss] + self.losses
        return seq[-1] if self.returned is None else seq[self.returned]


class _Flat:
    """Packs a list of arrays into one float64 vector and back."""

    def __init__(self, xs: Sequence[np.ndarray]):
        self.shapes = [x.shape for x in xs]
        self.dtypes = [x.dtype for x in xs]
        self.sizes = [x.size for x in xs]

    def pack(self, xs) -> np.ndarray:
        return np.concatenate([np.asarray(x, dtype=np.float64).reshape(-1) for x in xs])

    def unpack(self, v: np.ndarray) -> list[np.ndarray]:
        out, i = [], 0
        for shape, dtype, n in zip(self.shapes, self.dtypes, self.sizes):
            out.append(v[i:i + n].reshape(shape).astype(dtype))
            i += n
        return out


def _evaluate(f, flat, v, iteration, trace):
    loss, grads = f(flat.unpack(v))
    trace.evaluations += 1
    g = flat.pack(grads)
    if not (math.isfinite(loss) and np.all(np.isfinite(g))):
        raise OptimizerAbort(iteration, f"non-finite objective (loss={loss})")
    return float(loss), g


def _settle(flat, v, project):
    """Round to working precision, apply the projection, return float64."""
    xs = flat.unpack(v)
    if project is not None:
        xs = project(xs)
    return flat.pack(xs)


def _two_loop(g, pairs):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    s, y, _ = pairs[-1]
    q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def lbfgs_minimize(f: Objective, x0: Sequence[np.ndarray], cfg: OptimizerConfig,
                   project=None, callback=None) -> tuple[list[np.ndarray], Trace]:
    """Two-loop L-BFGS with backtracking Armijo line search.

    A step is accepted only if it lowers the loss by the Armijo margin measured
    along the (projected) displacement, so the loss trace never increases.
    ``callback(iteration, xs)`` runs after every accepted step.
    """
    flat = _Flat(x0)
    x = _settle(flat, flat.pack(x0), project)
    trace = Trace(initial_loss=0.0)
    loss, g = _evaluate(f, flat, x, 0, trace)
    trace.initial_loss = loss
    pairs: deque = deque(maxlen=cfg.lbfgs_history)

    for it in range(1, cfg.max_iters + 1):
        if np.linalg.norm(g) < cfg.tolerance:
            trace.stop_reason = "gradient_tolerance"
            break
        accepted = None
        for attempt in ("quasi_newton", "steepest"):
            if attempt == "quasi_newton" and pairs:
                d = _two_loop(g, list(pairs))
                step = cfg.lr
                if g @ d >= 0:
                    continue
            else:
                if attempt == "steepest" and not pairs:
                    break
                pairs.clear()
                d = -g
                step = cfg.lr / np.linalg.norm(g)
            for _ in range(cfg.max_backtracks + 1):
                x_new = _settle(flat, x + step * d, project)
                disp = x_new - x
                expected = min(float(g @ disp), 0.0)
                if expected < 0:
                    loss_new, g_new = _evaluate(f, flat, x_new, it, trace)
                    if loss_new <= loss + cfg.armijo_c * expected and loss_new <= loss:
                        accepted = (x_new, loss_new, g_new)
                        break
                step *= cfg.backtrack_shrink
            if accepted is not None:
                break
        if accepted is None:
            trace.stop_reason = "line_search_failed"
            break
        x_new, loss_new, g_new = accepted
        s, y = x_new - x, g_new - g
        sy = float(s @ y)
        if sy > cfg.curvature_eps:
            pairs.append((s, y, 1.0 / sy))
        x, loss, g = x_new, loss_new, g_new
        trace.losses.append(loss)
        if callback is not None:
            callback(it, flat.unpack(x))
    return flat.unpack(x), trace


def adam_minimize(f: Objective, x0: Sequence[np.ndarray], cfg: OptimizerConfig,
                  project=None, callback=None) -> tuple[list[np.ndarray], Trace]:
    """Adam with bias correction and constant step size ``cfg.lr``.

    ``trace.losses[k]`` is the loss after step k+1; the objective is evaluated
    once per step plus once at the start.  Adam is not a descent method, so the
    lowest-loss iterate is returned rather than the last (earliest on ties).
    """
    flat = _Flat(x0)
    b1, b2 = cfg.adam_betas
    x = _settle(flat, flat.pack(x0), project)
    trace = Trace(initial_loss=0.0)
    loss, g = _evaluate(f, flat, x, 0, trace)
    trace.initial_loss = loss
    best_x, best_loss, trace.returned = x, loss, 0
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    for it in range(1, cfg.max_iters + 1):
        if np.linalg.norm(g) < cfg.tolerance:
            trace.stop_reason = "gradient_tolerance"
            break
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** it)
        v_hat = v / (1 - b2 ** it)
        x = _settle(flat, x - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps), project)
        loss, g = _evaluate(f, flat, x, it, trace)
        trace.losses.append(loss)
        if loss < best_loss:
            best_x, best_loss, trace.returned = x, loss, it
        if callback is not None:
            callback(it, flat.unpack(x))
    return flat.unpack(best_x), trace


def minimize(f: Objective, x0, cfg: OptimizerConfig, project=None, callback=None):
    if cfg.kind == "lbfgs":
        return lbfgs_minimize(f, x0, cfg, project, callback)
    if cfg.kind == "adam":
        return adam_minimize(f, x0, cfg, project, callback)
    raise ValueError(f"{cfg.kind!r} is not a minimizer; use sgd_step for SGD")


def sgd_step(params: ParamSet, grads: GradientUpdate, lr: float) -> ParamSet:
    """p' = p - lr * g for every parameter; advances ``step_count`` by one."""
    if lr < 0:
        raise ValueError("lr must be >= 0")
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    out = []
    for (name, p), g in zip(params, grads.tensors):
        if p.shape != g.shape:
            raise ValueError(f"{name}: parameter dims {list(p.shape)} vs gradient dims "
                             f"{list(g.shape)}")
        out.append((p - p.dtype.type(lr) * g.astype(p.dtype)).astype(p.dtype))
    return params.with_tensors(out, steps=1)
