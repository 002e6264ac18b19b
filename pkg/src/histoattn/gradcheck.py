"""Central finite differences and an analytic-vs-numeric gradient checker."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Optional

import numpy as np

from .tensor import Tensor

DEFAULT_H = 1e-5
DEFAULT_TOL = 1e-4
# Denominator floor for the relative error; gradients smaller than this are
# judged on absolute error scaled by the floor.
REL_FLOOR = 1e-6


def _value(out) -> float:
    if isinstance(out, Tensor):
        if out.data.size != 1:
            raise ValueError("objective must return a scalar")
        return float(out.data.reshape(()))
    return float(out)


def finite_difference_grad(f: Callable[[Tensor], object], x: Tensor, h: float = DEFAULT_H,
                           indices: Optional[np.ndarray] = None) -> np.ndarray:
    """(f(x + h e_i) - f(x - h e_i)) / 2h for each element i of ``x``.

    ``x.data`` is perturbed in place and restored. With ``indices`` only those
    flat positions are evaluated; the rest of the result is NaN.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    flat = x.data.reshape(-1)
    grad = np.full(flat.shape, np.nan) if indices is not None else np.empty(flat.shape)
    todo = range(flat.size) if indices is None else indices
    for i in todo:
        orig = flat[i]
        flat[i] = orig + h
        fp = _value(f(x))
        flat[i] = orig - h
        fm = _value(f(x))
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


@dataclass
class GroupResult:
    name: str
    max_rel_error: float
    checked: int
    refined: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def _central(f, flat: np.ndarray, i: int, h: float) -> tuple[float, float]:
    orig = flat[i]
    flat[i] = orig + h
    fp = _value(f(None))
    flat[i] = orig - h
    fm = _value(f(None))
    flat[i] = orig
    return fp, fm


def _near_kink(f, flat: np.ndarray, i: int, h: float, f0: float, tol: float) -> bool:
    """True when a ReLU/max switch lies within ``h`` of ``flat[i]``.

    For a smooth function the second difference scales linearly with the step,
    so halving the step halves it; a slope discontinuity breaks that. Two
    step pairs are compared because each alone has one blind distance.
    Only forward evaluations are used.
    """
    vals = {}
    for step in (h, h / 2, h / 4):
        vals[step] = _central(f, flat, i, step)
    d = {step: (fp - 2.0 * f0 + fm) / step for step, (fp, fm) in vals.items()}
    slope = abs(vals[h][0] - vals[h][1]) / (2 * h)
    thresh = 0.1 * tol * max(slope, REL_FLOOR)
    return abs(d[h / 2] - d[h] / 2) > thresh or abs(d[h / 4] - d[h / 2] / 2) > thresh


def check_gradients(objective: Callable[[], Tensor], params: Mapping[str, Tensor],
                    h: float = DEFAULT_H, tol: float = DEFAULT_TOL,
                    max_elements: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None) -> list[GroupResult]:
    """Compare ``backward()`` against central differences for every tensor in ``params``.

    ``objective`` is re-evaluated from scratch on each call and must read the
    current ``.data`` of the tensors in ``params``. At most ``max_elements``
    randomly chosen entries per group are differenced.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.requires_grad = True
        p.grad = None
    root = objective()
    root.backward()
    f0 = _value(root)
    results = []
    for name, p in params.items():
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.copy()
        n = p.data.size
        if max_elements is None or max_elements >= n:
            idx = np.arange(n)
        else:
            idx = np.sort(rng.choice(n, size=max_elements, replace=False))
        fn = lambda _x: objective()  # noqa: E731
        numeric = finite_difference_grad(fn, p, h, indices=idx).reshape(-1)
        a_sel = analytic.reshape(-1)[idx]
        err = relative_error(a_sel, numeric[idx])
        refined = 0
        flat = p.data.reshape(-1)
        for j in np.nonzero(err >= tol)[0]:
            i = int(idx[j])
            if not _near_kink(fn, flat, i, h, f0, tol):
                continue
            # non-differentiable point inside the step: shrink it until it
            # resolves the side the analytic gradient belongs to
            refined += 1
            for small in (h / 10, h / 100, h / 1000):
                fp, fm = _central(fn, flat, i, small)
                e = relative_error(a_sel[j], (fp - fm) / (2 * small))
                err[j] = min(err[j], float(e))
        results.append(GroupResult(name, float(err.max()) if err.size else 0.0,
                                   int(idx.size), refined, tol))
    return results
