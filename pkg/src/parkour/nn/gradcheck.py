"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def grad_check(f, params: dict[str, Tensor], eps: float = 1e-6,
               n_coords: int = 200, rng: np.random.Generator | None = None) -> float:
    """Max relative error between backward and central differences.

    ``f`` must be a deterministic scalar-valued closure over ``params``
    (freeze any sampling noise before calling). A sampled coordinate is
    discarded and re-drawn when its two perturbed evaluations disagree on
    some relu's activation sign, i.e. a pre-activation the coordinate
    influences sits within ~10*eps of its kink and the two-sided difference
    would straddle it.

    The relative denominator is floored at 1e-3 of the largest analytic
    gradient magnitude, so near-zero-gradient coordinates are held to a
    proportional absolute tolerance instead of amplifying float noise.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.zero_grad()
    loss = f()
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}
    gmax = max((float(np.max(np.abs(g))) for g in analytic.values() if g.size),
               default=0.0)
    floor = max(1e-8, 1e-3 * gmax)

    keys = sorted(params)
    sizes = np.array([params[k].size for k in keys])
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    total = int(sizes.sum())
    n_checks = min(n_coords, total)

    worst = 0.0
    checked = 0
    attempts = 0
    while checked < n_checks and attempts < 50 * n_checks:
        attempts += 1
        flat = int(rng.integers(total))
        which = int(np.searchsorted(starts, flat, side="right")) - 1
        key = keys[which]
        p = params[key]
        idx = np.unravel_index(flat - int(starts[which]), p.data.shape)

        orig = p.data[idx]
        values = []
        signatures = []
        for delta in (eps, -eps):
            p.data[idx] = orig + delta
            with T.track_kinks() as tracker:
                out = float(f().data)
            signatures.append(list(tracker.signature))
            values.append(out)
        p.data[idx] = orig
        crossed = len(signatures[0]) != len(signatures[1]) or any(
            not np.array_equal(a, b) for a, b in zip(*signatures))
        if crossed:
            continue

        numeric = (values[0] - values[1]) / (2 * eps)
        exact = analytic[key][idx]
        denom = max(abs(numeric), abs(exact), floor)
        worst = max(worst, abs(numeric - exact) / denom)
        checked += 1

    if checked == 0:
        raise RuntimeError("gradient check could not find kink-free coordinates")
    return worst
