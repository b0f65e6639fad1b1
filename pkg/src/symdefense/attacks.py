"""Adversarial example generation.

Three families share one feasibility contract: every output lies in the
``eps``-ball around its source image (L2 or Linf) and inside ``[0, 1]``.

* ``pgd`` -- fixed-step projected gradient descent on cross-entropy, targeted
  by default (random non-true target), step ``2.5 * eps / steps``, zero start.
* ``square_attack`` -- score-based random search with square-shaped updates
  on the margin loss, untargeted.
* ``adaptive_symmetry_pgd`` -- untargeted PGD ascending the summed loss of all
  four symmetric views of the image.

Each public function works on one image; the ``*_batch`` variants do the same
work for many images at once with one random stream per image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence, TextIO

import numpy as np

from .group import ELEMENTS, E, GroupElement, apply, pullback
from .nn import DTYPE, Network, argmax_lowest, forward_batch, loss_and_grads_batch

FAMILIES = ("pgd", "square", "adaptive_pgd")
NORMS = ("l2", "linf")
DEFAULT_P_INIT = {"l2": 0.02, "linf": 0.01}


@dataclass(frozen=True)
class AttackSpec:
    family: str = "pgd"
    norm: str = "linf"
    eps: float = 8 / 255
    steps_or_queries: int = 40
    targeted: bool | None = None
    seed: int = 0
    p_init: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if not self.eps >= 0:
            raise ValueError("eps must be non-negative")
        if self.steps_or_queries < 1:
            raise ValueError("steps_or_queries must be at least 1")
        if self.targeted is None:
            object.__setattr__(self, "targeted", self.family == "pgd")
        if self.family == "square":
            if self.targeted:
                raise ValueError("square attack is untargeted")
            if self.p_init is None:
                object.__setattr__(self, "p_init", DEFAULT_P_INIT[self.norm])
            if not 0 < self.p_init <= 1:
                raise ValueError("p_init must lie in (0, 1]")
        if self.family == "adaptive_pgd" and self.targeted:
            raise ValueError("adaptive symmetry PGD is untargeted")

    @property
    def step_size(self) -> float:
        return 2.5 * self.eps / self.steps_or_queries


@dataclass
class AdvResult:
    x_adv: np.ndarray
    queries_used: int
    success: bool
    final_loss: float
    target: int | None = None
    #: square attack only: margin of every accepted iterate, starting with the initialization
    margin_trace: list[float] = field(default_factory=list)


# ---------------------------------------------------------------------------
# primitives


def _norms(delta: np.ndarray, norm: str) -> np.ndarray:
    flat = delta.reshape(len(delta), -1)
    if norm == "l2":
        return np.sqrt((flat.astype(np.float64) ** 2).sum(axis=1))
    return np.abs(flat).max(axis=1) if flat.shape[1] else np.zeros(len(delta))


def perturbation_norm(delta: np.ndarray, norm: str) -> float:
    return float(_norms(np.asarray(delta)[None], norm)[0])


def project(delta: np.ndarray, norm: str, eps: float) -> np.ndarray:
    """Project one perturbation onto the ``norm`` ball of radius ``eps``."""
    return project_batch(np.asarray(delta)[None], norm, eps)[0]


def project_batch(delta: np.ndarray, norm: str, eps: float) -> np.ndarray:
    if eps < 0:
        raise ValueError("eps must be non-negative")
    if norm == "linf":
        return np.clip(delta, -eps, eps).astype(delta.dtype, copy=False)
    if norm != "l2":
        raise ValueError(f"unknown norm {norm!r}")
    out = delta.copy()
    norms = _norms(delta, "l2")
    over = norms > eps
    if np.any(over):
        scale = (eps / norms[over]).astype(delta.dtype)
        out[over] = delta[over] * scale.reshape(-1, *([1] * (delta.ndim - 1)))
    return out


def pick_target(true_label: int, num_classes: int, rng: np.random.Generator) -> int:
    """Uniform draw among the labels other than ``true_label``."""
    if num_classes < 2:
        raise ValueError("need at least two classes to pick a target")
    t = int(rng.integers(num_classes - 1))
    return t + 1 if t >= true_label else t


def margin_loss(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """True-class logit minus the largest other logit."""
    idx = np.arange(len(labels))
    true = logits[idx, labels]
    other = logits.copy()
    other[idx, labels] = -np.inf
    return true - other.max(axis=1)


def _batched(x, labels) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=DTYPE)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if x.ndim != 4 or len(x) != len(labels):
        raise ValueError(f"expected (N, C, H, W) images with N labels, got {x.shape} and {labels.shape}")
    return x, labels


def _seeds(spec: AttackSpec, n: int, seeds: Sequence | None) -> list:
    """Entropy for one random stream per sample (``spec.seed`` alone for a single image)."""
    if seeds is None:
        return [spec.seed] if n == 1 else [[spec.seed, i] for i in range(n)]
    if len(seeds) != n:
        raise ValueError("need one seed per sample")
    return list(seeds)


def _direction(grad: np.ndarray, norm: str) -> np.ndarray:
    if norm == "linf":
        return np.sign(grad).astype(DTYPE)
    g = grad.reshape(len(grad), -1).astype(np.float64)
    n = np.maximum(np.sqrt((g ** 2).sum(axis=1)), 1e-12)
    return (grad / n.reshape(-1, *([1] * (grad.ndim - 1)))).astype(DTYPE)


# ---------------------------------------------------------------------------
# gradient objectives


def symmetry_loss_and_grad(net: Network, x: np.ndarray, labels: np.ndarray,
                           elements: Sequence[GroupElement] = ELEMENTS) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample ``sum_g CE(net(apply(g, x)), y)`` and its input gradient."""
    n = len(x)
    views = np.concatenate([apply(g, x, check=False) for g in elements])
    out = loss_and_grads_batch(net, views, np.tile(labels, len(elements)), wrt_input=True)
    loss = out.loss.reshape(len(elements), n).sum(axis=0)
    grad = np.zeros_like(x)
    for k, g in enumerate(elements):
        grad += pullback(g, out.input_grad[k * n:(k + 1) * n])
    return loss, grad


def _pgd_loop(net, x, labels, spec: AttackSpec, objective: Callable, ascend: bool,
              trace: Callable | None = None) -> tuple[np.ndarray, np.ndarray]:
    alpha = DTYPE(spec.step_size)
    delta = np.zeros_like(x)
    x_adv = x.copy()
    for step in range(spec.steps_or_queries):
        loss, grad = objective(x_adv)
        if trace is not None:
            trace(step, loss, _norms(delta, spec.norm))
        d = _direction(grad, spec.norm)
        delta = delta + alpha * d if ascend else delta - alpha * d
        delta = project_batch(delta, spec.norm, spec.eps)
        x_adv = np.clip(x + delta, 0, 1).astype(DTYPE)
        delta = x_adv - x
    loss, _ = objective(x_adv)
    if trace is not None:
        trace(spec.steps_or_queries, loss, _norms(delta, spec.norm))
    return x_adv, loss


def _ce_objective(net, labels):
    def objective(xa):
        out = loss_and_grads_batch(net, xa, labels, wrt_input=True)
        return out.loss, out.input_grad
    return objective


def _line_trace(stream: TextIO | None):
    if stream is None:
        return None

    def write(step, loss, norms):
        for lo, no in zip(np.atleast_1d(loss), np.atleast_1d(norms)):
            stream.write(f"{step}\t{float(lo):.9g}\t{float(no):.9g}\n")
    return write


# ---------------------------------------------------------------------------
# PGD


def pgd_batch(net: Network, x: np.ndarray, labels: Sequence[int], spec: AttackSpec,
              seeds: Sequence | None = None, targets: Sequence[int] | None = None,
              trace: TextIO | None = None) -> list[AdvResult]:
    if spec.family != "pgd":
        raise ValueError(f"pgd called with a {spec.family} spec")
    x, labels = _batched(x, labels)
    if spec.targeted:
        if targets is None:
            targets = [pick_target(int(y), net.num_classes, np.random.default_rng(s))
                       for y, s in zip(labels, _seeds(spec, len(x), seeds))]
        goal = np.asarray(targets, dtype=np.int64)
    else:
        goal = labels
    x_adv, loss = _pgd_loop(net, x, goal, spec, _ce_objective(net, goal),
                            ascend=not spec.targeted, trace=_line_trace(trace))
    pred = argmax_lowest(forward_batch(net, x_adv))
    hit = pred == goal if spec.targeted else pred != labels
    return [AdvResult(x_adv[i], spec.steps_or_queries, bool(hit[i]), float(loss[i]),
                      int(goal[i]) if spec.targeted else None)
            for i in range(len(x))]


def pgd(net: Network, x: np.ndarray, true_label: int, spec: AttackSpec,
        target: int | None = None, trace: TextIO | None = None) -> AdvResult:
    """Projected gradient descent on a single image.

    Targeted specs pick the target from ``spec.seed`` unless ``target`` is given.
    """
    return pgd_batch(net, np.asarray(x)[None], [true_label], spec,
                     targets=None if target is None else [target], trace=trace)[0]


# ---------------------------------------------------------------------------
# adaptive symmetry PGD


def adaptive_symmetry_pgd_batch(net: Network, x: np.ndarray, labels: Sequence[int], spec: AttackSpec,
                                elements: Sequence[GroupElement] = ELEMENTS,
                                trace: TextIO | None = None) -> list[AdvResult]:
    if spec.family != "adaptive_pgd":
        raise ValueError(f"adaptive_symmetry_pgd called with a {spec.family} spec")
    x, labels = _batched(x, labels)
    if tuple(elements) == (E,):
        objective = _ce_objective(net, labels)
    else:
        def objective(xa):
            return symmetry_loss_and_grad(net, xa, labels, elements)
    x_adv, loss = _pgd_loop(net, x, labels, spec, objective, ascend=True, trace=_line_trace(trace))
    pred = argmax_lowest(forward_batch(net, x_adv))
    return [AdvResult(x_adv[i], spec.steps_or_queries, bool(pred[i] != labels[i]), float(loss[i]))
            for i in range(len(x))]


def adaptive_symmetry_pgd(net: Network, x: np.ndarray, true_label: int, spec: AttackSpec,
                          elements: Sequence[GroupElement] = ELEMENTS,
                          trace: TextIO | None = None) -> AdvResult:
    return adaptive_symmetry_pgd_batch(net, np.asarray(x)[None], [true_label], spec, elements, trace)[0]


# ---------------------------------------------------------------------------
# Square Attack


def p_schedule(p_init: float, it: int, n_queries: int) -> float:
    """Square-size fraction at iteration ``it``, halving at the standard milestones
    (defined for a 10000-query run and rescaled to ``n_queries``)."""
    it = int(it / n_queries * 10000)
    for bound, div in ((10, 1), (50, 2), (200, 4), (500, 8), (1000, 16),
                       (2000, 32), (4000, 64), (6000, 128), (8000, 256)):
        if it <= bound:
            return p_init / div
    return p_init / 512


def _eta_rectangles(x: int, y: int) -> np.ndarray:
    delta = np.zeros((x, y))
    cx, cy = x // 2 + 1, y // 2 + 1
    r, q = cx - 1, cy - 1
    for k in range(max(cx, cy)):
        delta[max(r, 0):min(r + 2 * k + 1, x), max(q, 0):min(q + 2 * k + 1, y)] += 1.0 / (k + 1) ** 2
        r -= 1
        q -= 1
    return delta / np.sqrt((delta ** 2).sum())


def _eta(s: int, rng: np.random.Generator) -> np.ndarray:
    delta = np.zeros((s, s))
    delta[:s // 2] = _eta_rectangles(s // 2, s)
    delta[s // 2:] = -_eta_rectangles(s - s // 2, s)
    delta /= np.sqrt((delta ** 2).sum())
    if rng.random() > 0.5:
        delta = delta.T
    return delta


def _signs(rng, shape) -> np.ndarray:
    return rng.choice(np.array([-1.0, 1.0]), size=shape)


def _l2_normalize(d: np.ndarray) -> np.ndarray:
    return d / (np.sqrt((d ** 2).sum()) + 1e-12)


def _square_init(x: np.ndarray, spec: AttackSpec, rng) -> np.ndarray:
    c, h, w = x.shape
    if spec.norm == "linf":
        return np.clip(x + spec.eps * _signs(rng, (c, 1, w)), 0, 1).astype(DTYPE)
    s = max(h // 5, 1)
    start = (h - s * 5) // 2
    delta = np.zeros(x.shape)
    if s >= 2:
        vh = start
        for _ in range(h // s):
            vw = start
            for _ in range(w // s):
                if vh + s <= h and vw + s <= w:
                    delta[:, vh:vh + s, vw:vw + s] += _eta(s, rng)[None] * _signs(rng, (c, 1, 1))
                vw += s
            vh += s
    else:
        delta = _signs(rng, x.shape)
    return np.clip(x + _l2_normalize(delta) * spec.eps, 0, 1).astype(DTYPE)


def _square_propose(x: np.ndarray, x_best: np.ndarray, spec: AttackSpec, p: float, rng) -> np.ndarray:
    c, h, w = x.shape
    n_features = x.size
    eps = spec.eps
    if spec.norm == "linf":
        s = min(max(int(round(math.sqrt(p * n_features / c))), 1), h, w)
        vh, vw = rng.integers(0, h - s + 1), rng.integers(0, w - s + 1)
        x_new = x_best.astype(np.float64)
        x_new[:, vh:vh + s, vw:vw + s] += 2.0 * eps * _signs(rng, (c, 1, 1))
        x_new = np.clip(x_new, x - eps, x + eps)
        return np.clip(x_new, 0, 1).astype(DTYPE)

    s = max(int(round(math.sqrt(p * n_features / c))), 3)
    if s % 2 == 0:
        s += 1
    s = min(s, h, w)
    delta = (x_best - x).astype(np.float64)
    vh, vw = rng.integers(0, h - s + 1), rng.integers(0, w - s + 1)
    vh2, vw2 = rng.integers(0, h - s + 1), rng.integers(0, w - s + 1)
    win1 = delta[:, vh:vh + s, vw:vw + s]
    norms_win1 = np.sqrt((win1 ** 2).sum(axis=(1, 2), keepdims=True))
    mask = np.zeros(x.shape, dtype=bool)
    mask[:, vh:vh + s, vw:vw + s] = True
    mask[:, vh2:vh2 + s, vw2:vw2 + s] = True
    norm_image = np.sqrt((delta ** 2).sum())
    norm_windows = np.sqrt(((delta * mask) ** 2).sum())

    new = _eta(s, rng)[None] * _signs(rng, (c, 1, 1)) + win1 / (1e-12 + norms_win1)
    budget = max(eps ** 2 - norm_image ** 2, 0.0) / c + norm_windows ** 2
    new = new / (1e-12 + np.sqrt((new ** 2).sum(axis=(1, 2), keepdims=True))) * np.sqrt(budget)
    delta[:, vh2:vh2 + s, vw2:vw2 + s] = 0.0
    delta[:, vh:vh + s, vw:vw + s] = new
    return np.clip(x + _l2_normalize(delta) * eps, 0, 1).astype(DTYPE)


def square_attack_batch(net: Network, x: np.ndarray, labels: Sequence[int], spec: AttackSpec,
                        seeds: Sequence | None = None) -> list[AdvResult]:
    if spec.family != "square":
        raise ValueError(f"square_attack called with a {spec.family} spec")
    x, labels = _batched(x, labels)
    n = len(x)
    budget = spec.steps_or_queries
    rngs = [np.random.default_rng(s) for s in _seeds(spec, n, seeds)]

    def query(images, ys):
        logits = forward_batch(net, images)
        return margin_loss(logits, ys), argmax_lowest(logits) != ys

    margin, fooled = query(x, labels)
    queries = np.ones(n, dtype=np.int64)
    x_best = x.copy()
    traces: list[list[float]] = [[] for _ in range(n)]

    # the stripe initialization is the first iterate, accepted unconditionally
    todo = np.flatnonzero(~fooled & (queries < budget))
    if todo.size:
        init = np.stack([_square_init(x[i], spec, rngs[i]) for i in todo])
        m, f = query(init, labels[todo])
        queries[todo] += 1
        for k, i in enumerate(todo):
            x_best[i], margin[i], fooled[i] = init[k], m[k], f[k]
            traces[i].append(float(m[k]))

    it = 0
    while True:
        active = np.flatnonzero(~fooled & (queries < budget))
        if active.size == 0:
            break
        p = p_schedule(spec.p_init, it, budget)
        props = np.stack([_square_propose(x[i], x_best[i], spec, p, rngs[i]) for i in active])
        m, f = query(props, labels[active])
        queries[active] += 1
        better = m < margin[active]
        for k, i in enumerate(active):
            if better[k]:
                x_best[i], margin[i], fooled[i] = props[k], m[k], f[k]
                traces[i].append(float(m[k]))
        it += 1

    return [AdvResult(x_best[i], int(queries[i]), bool(fooled[i]), float(margin[i]),
                      margin_trace=traces[i]) for i in range(n)]


def square_attack(net: Network, x: np.ndarray, true_label: int, spec: AttackSpec) -> AdvResult:
    """Score-based random search (untargeted) on a single image."""
    return square_attack_batch(net, np.asarray(x)[None], [true_label], spec)[0]


# ---------------------------------------------------------------------------


def run_attack_batch(net: Network, x: np.ndarray, labels: Sequence[int], spec: AttackSpec,
                     seeds: Sequence | None = None) -> list[AdvResult]:
    """Dispatch on ``spec.family``."""
    if spec.family == "pgd":
        return pgd_batch(net, x, labels, spec, seeds=seeds)
    if spec.family == "square":
        return square_attack_batch(net, x, labels, spec, seeds=seeds)
    return adaptive_symmetry_pgd_batch(net, x, labels, spec)
