"""Linear probes (L2 logistic regression fitted by L-BFGS) and their metrics."""
from __future__ import annotations

import csv
import itertools
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import expit, log_expit, logsumexp
from scipy.stats import rankdata


class ProbeError(ValueError):
    pass


# -- resampling -------------------------------------------------------------

def random_oversample(inputs, labels, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Resample minority classes with replacement up to the majority count.

    The original rows come first, in their original order, followed by the
    drawn duplicates grouped by class.
    """
    x, y, _ = _oversample(np.asarray(inputs), np.asarray(labels), seed)
    return x, y


def oversample_indices(labels, seed: int = 0) -> np.ndarray:
    return _oversample(np.zeros((len(labels), 0)), np.asarray(labels), seed)[2]


def _oversample(x: np.ndarray, y: np.ndarray, seed: int):
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2:
        raise ProbeError("over-sampling needs at least two classes")
    rng = np.random.default_rng(seed)
    target = counts.max()
    extra = []
    for cls, count in zip(classes, counts):
        if count < target:
            members = np.flatnonzero(y == cls)
            extra.append(rng.choice(members, size=target - count, replace=True))
    idx = np.concatenate([np.arange(len(y)), *extra]) if extra else np.arange(len(y))
    return x[idx], y[idx], idx


# -- model --------------------------------------------------------------------

@dataclass
class ProbeModel:
    weights: np.ndarray  # (1, dim) for binary, (n_classes, dim) otherwise
    bias: np.ndarray
    classes: np.ndarray
    C: float
    converged: bool
    iterations: int
    loss_history: list[float] = field(default_factory=list, repr=False)
    task: str = ""

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.classes)


def _unpack(theta: np.ndarray, n_rows: int, dim: int):
    w = theta[: n_rows * dim].reshape(n_rows, dim)
    b = theta[n_rows * dim:]
    return w, b


def logistic_loss_and_grad(theta: np.ndarray, x: np.ndarray, y_index: np.ndarray,
                           n_classes: int, C: float) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood plus ``||W||^2 / (2 C n)``; bias unpenalised.

    ``y_index`` holds class positions ``0..n_classes-1``. Two classes use a
    single sigmoid row, more classes a full softmax.
    """
    n, dim = x.shape
    rows = 1 if n_classes == 2 else n_classes
    w, b = _unpack(theta, rows, dim)
    if n_classes == 2:
        z = x @ w[0] + b[0]
        t = (y_index == 1).astype(np.float64)
        nll = -(t * log_expit(z) + (1.0 - t) * log_expit(-z)).sum()
        r = expit(z) - t
        gw = (r @ x)[None, :]
        gb = np.array([r.sum()])
    else:
        z = x @ w.T + b
        lse = logsumexp(z, axis=1)
        nll = (lse - z[np.arange(n), y_index]).sum()
        p = np.exp(z - lse[:, None])
        p[np.arange(n), y_index] -= 1.0
        gw = p.T @ x
        gb = p.sum(axis=0)
    loss = (nll + 0.5 * (w * w).sum() / C) / n
    grad = np.concatenate([(gw + w / C).ravel(), gb]) / n
    return float(loss), grad


# -- L-BFGS -------------------------------------------------------------------

def _cubic_min(a, fa, ga, b, fb, gb):
    d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - ga * gb
    if disc < 0:
        return None
    d2 = math.copysign(math.sqrt(disc), b - a)
    denom = gb - ga + 2.0 * d2
    if denom == 0:
        return None
    return b - (b - a) * (gb + d2 - d1) / denom


def strong_wolfe(phi: Callable[[float], tuple[float, float]], f0: float, g0: float,
                 alpha0: float = 1.0, c1: float = 1e-4, c2: float = 0.9,
                 max_steps: int = 30) -> tuple[float, float, float] | None:
    """Line search for a step with sufficient decrease and strong curvature.

    ``phi(alpha)`` returns ``(f, df/dalpha)``. Returns ``(alpha, f, slope)`` or
    ``None`` when no acceptable step was found.
    """

    def zoom(lo, f_lo, g_lo, hi, f_hi, g_hi):
        for _ in range(max_steps):
            a = _cubic_min(lo, f_lo, g_lo, hi, f_hi, g_hi)
            span = abs(hi - lo)
            if a is None or not (min(lo, hi) + 0.1 * span <= a <= max(lo, hi) - 0.1 * span):
                a = 0.5 * (lo + hi)
            fa, ga = phi(a)
            if fa > f0 + c1 * a * g0 or fa >= f_lo:
                hi, f_hi, g_hi = a, fa, ga
            else:
                if abs(ga) <= -c2 * g0:
                    return a, fa, ga
                if ga * (hi - lo) >= 0:
                    hi, f_hi, g_hi = lo, f_lo, g_lo
                lo, f_lo, g_lo = a, fa, ga
            if span < 1e-14:
                break
        # fall back to the best sufficient-decrease point found
        if lo > 0 and f_lo <= f0 + c1 * lo * g0:
            return lo, f_lo, g_lo
        return None

    a_prev, f_prev, g_prev = 0.0, f0, g0
    a = alpha0
    for i in range(max_steps):
        fa, ga = phi(a)
        if fa > f0 + c1 * a * g0 or (i > 0 and fa >= f_prev):
            return zoom(a_prev, f_prev, g_prev, a, fa, ga)
        if abs(ga) <= -c2 * g0:
            return a, fa, ga
        if ga >= 0:
            return zoom(a, fa, ga, a_prev, f_prev, g_prev)
        a_prev, f_prev, g_prev = a, fa, ga
        a *= 2.0
    return None


@dataclass
class LbfgsResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    converged: bool
    iterations: int
    history: list[float]


def lbfgs(fun: Callable[[np.ndarray], tuple[float, np.ndarray]], x0: np.ndarray,
          tol: float = 1e-6, max_iter: int = 1000, memory: int = 10) -> LbfgsResult:
    """Minimise ``fun`` (returning value and gradient) with limited-memory BFGS.

    Converged means the gradient max-norm dropped to ``tol``. Raises
    :class:`ProbeError` naming the iteration if the objective turns non-finite.
    """
    x = np.array(x0, dtype=np.float64)
    f, g = fun(x)
    if not np.isfinite(f):
        raise ProbeError("non-finite loss at iteration 0")
    history = [f]
    s_hist: deque[np.ndarray] = deque(maxlen=memory)
    y_hist: deque[np.ndarray] = deque(maxlen=memory)
    it = 0
    while it < max_iter:
        if np.abs(g).max() <= tol:
            return LbfgsResult(x, f, g, True, it, history)
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, yv in zip(reversed(s_hist), reversed(y_hist)):
            rho = 1.0 / (yv @ s)
            a = rho * (s @ q)
            alphas.append((a, rho, s, yv))
            q -= a * yv
        if s_hist:
            s, yv = s_hist[-1], y_hist[-1]
            q *= (s @ yv) / (yv @ yv)
        else:
            q /= max(np.linalg.norm(g), 1.0)
        for a, rho, s, yv in reversed(alphas):
            q += s * (a - rho * (yv @ q))
        direction = -q
        slope = g @ direction
        if slope >= 0:
            # not a descent direction: restart from steepest descent
            s_hist.clear()
            y_hist.clear()
            direction = -g / max(np.linalg.norm(g), 1.0)
            slope = g @ direction

        it += 1
        cache: dict[float, tuple[float, np.ndarray]] = {}

        def phi(alpha: float, _x=x, _d=direction):
            fx, gx = fun(_x + alpha * _d)
            if not np.isfinite(fx):
                raise ProbeError(f"non-finite loss at iteration {it}")
            cache[alpha] = (fx, gx)
            return fx, float(gx @ _d)

        found = strong_wolfe(phi, f, slope)
        if found is None:
            return LbfgsResult(x, f, g, bool(np.abs(g).max() <= tol), it, history)
        alpha, f_new, _ = found
        g_new = cache[alpha][1]
        s = alpha * direction
        yv = g_new - g
        if yv @ s > 1e-12 * (s @ s):
            s_hist.append(s)
            y_hist.append(yv)
        x = x + s
        f, g = f_new, g_new
        history.append(f)
    return LbfgsResult(x, f, g, bool(np.abs(g).max() <= tol), it, history)


# -- training / prediction --------------------------------------------------------

def train_logistic_probe(inputs, labels, C: float = 1.0, tol: float = 1e-6,
                         max_iter: int = 1000, seed: int = 0, *, oversample: bool = False,
                         task: str = "") -> ProbeModel:
    """Fit an L2-regularised logistic (binary) or softmax (multi-class) probe.

    With ``oversample`` the training set is first balanced by
    :func:`random_oversample` using ``seed``; otherwise ``seed`` is unused
    because the optimiser starts from zero.
    """
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or len(x) != len(y):
        raise ProbeError(f"inputs {x.shape} do not match {len(y)} labels")
    if not np.isfinite(x).all():
        raise ProbeError("inputs contain non-finite values")
    if C <= 0:
        raise ProbeError("C must be positive")
    classes = np.unique(y)
    if len(classes) < 2:
        raise ProbeError("a probe needs at least two classes")
    if oversample:
        x, y = random_oversample(x, y, seed)
    y_index = np.searchsorted(classes, y)
    k = len(classes)
    rows = 1 if k == 2 else k
    dim = x.shape[1]
    res = lbfgs(lambda th: logistic_loss_and_grad(th, x, y_index, k, C),
                np.zeros(rows * dim + rows), tol=tol, max_iter=max_iter)
    w, b = _unpack(res.x, rows, dim)
    return ProbeModel(w.copy(), b.copy(), classes, float(C), res.converged, res.iterations,
                      res.history, task)


def predict_scores(model: ProbeModel, inputs) -> np.ndarray:
    """Class probabilities, one column per entry of ``model.classes``."""
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if x.shape[1] != model.dim:
        raise ProbeError(f"input dim {x.shape[1]} != model dim {model.dim}")
    z = x @ model.weights.T + model.bias
    if model.n_classes == 2:
        p1 = expit(z[:, 0])
        return np.column_stack([1.0 - p1, p1])
    return np.exp(z - logsumexp(z, axis=1, keepdims=True))


def predict_labels(model: ProbeModel, inputs) -> np.ndarray:
    return model.classes[np.argmax(predict_scores(model, inputs), axis=1)]


# -- metrics --------------------------------------------------------------------

def binary_auc(scores, labels) -> float:
    """Mann-Whitney estimate of P(score_pos > score_neg), ties counting 1/2."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ProbeError("AUC needs both positive and negative samples")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def ovo_auc(per_class_scores, labels, classes=None) -> float:
    """Macro average over class pairs of the two directed pairwise AUCs.

    Column ``c`` of ``per_class_scores`` scores ``classes[c]`` (default
    ``0..K-1``). Pairs with a class absent from ``labels`` are skipped.
    """
    scores = np.asarray(per_class_scores, dtype=np.float64)
    y = np.asarray(labels)
    classes = np.arange(scores.shape[1]) if classes is None else np.asarray(classes)
    values = []
    for ci, cj in itertools.combinations(range(len(classes)), 2):
        a, b = classes[ci], classes[cj]
        subset = (y == a) | (y == b)
        if not (y == a).any() or not (y == b).any():
            continue
        ys = y[subset]
        auc_i = binary_auc(scores[subset, ci], ys == a)
        auc_j = binary_auc(scores[subset, cj], ys == b)
        values.append(0.5 * (auc_i + auc_j))
    if not values:
        raise ProbeError("no class pair has both classes present")
    return float(np.mean(values))


def cosine_distance(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ProbeError("cosine distance of a zero vector")
    return float(np.clip(1.0 - (u @ v) / (nu * nv), 0.0, 2.0))


def confusion_matrix(predicted, labels, n_classes: int) -> np.ndarray:
    """Row-normalised percentages; row = true class, column = prediction."""
    counts = np.zeros((n_classes, n_classes), dtype=np.float64)
    np.add.at(counts, (np.asarray(labels, dtype=int), np.asarray(predicted, dtype=int)), 1.0)
    totals = counts.sum(axis=1, keepdims=True)
    return np.divide(100.0 * counts, totals, out=np.zeros_like(counts), where=totals > 0)


def attraction_coefficient(series) -> float:
    """Negated OLS slope of AUC (in percentage points) against bin index.

    Positive means the probe does better on close pairs, i.e. the word pulls
    representations together. NaN entries (bins lacking a class) are dropped.
    """
    auc = np.asarray(series, dtype=np.float64)
    idx = np.arange(len(auc), dtype=np.float64)
    keep = np.isfinite(auc)
    auc, idx = auc[keep], idx[keep]
    if len(auc) < 2:
        raise ProbeError("attraction coefficient needs at least two bins")
    xc = idx - idx.mean()
    slope = (xc @ (auc - auc.mean())) / (xc @ xc)
    return float(-100.0 * slope) + 0.0  # no negative zero


# -- persistence ------------------------------------------------------------------

def save_probe(model: ProbeModel, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# task={model.task},dim={model.dim},classes={' '.join(map(str, model.classes))},"
                 f"C={model.C!r},converged={str(model.converged).lower()},"
                 f"iterations={model.iterations}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "bias", *[f"w{i}" for i in range(model.dim)]])
        for r in range(model.weights.shape[0]):
            w.writerow([r, repr(float(model.bias[r])), *[repr(float(v)) for v in model.weights[r]]])


def load_probe(path: str | Path) -> ProbeModel:
    with open(path, newline="", encoding="utf-8") as fh:
        header = fh.readline()[2:].strip()
        meta = dict(item.split("=", 1) for item in header.split(","))
        rows = list(csv.reader(fh))[1:]
    classes = np.array([int(c) if c.lstrip("-").isdigit() else c for c in meta["classes"].split()])
    bias = np.array([float(r[1]) for r in rows])
    weights = np.array([[float(v) for v in r[2:]] for r in rows])
    return ProbeModel(weights, bias, classes, float(meta["C"]), meta["converged"] == "true",
                      int(meta["iterations"]), [], meta["task"])
