"""Shared test utilities: scalar oracles and a finite-difference harness.

Oracles are straight-line scalar implementations, independent of the package
code paths they check.
"""

from __future__ import annotations

import math

import numpy as np

from blackvid import autodiff as ad
from blackvid.autodiff import Tape
from blackvid.backbone import ModelDims, TargetModel
from blackvid.rng import RngState


# ---------------------------------------------------------------------------
# scalar oracles (pure python loops, float64)

EPS = 1e-8


def oracle_entropy(p) -> float:
    total = 0.0
    for x in p:
        total -= x * math.log(max(x, EPS))
    return total


def oracle_kl(p, q) -> float:
    total = 0.0
    for a, b in zip(p, q):
        total += a * (math.log(max(a, EPS)) - math.log(max(b, EPS)))
    return total


def oracle_cross_entropy(target, pred) -> float:
    total = 0.0
    for t, p in zip(target, pred):
        total -= t * math.log(max(p, EPS))
    return total


def oracle_mixup(a, b, lam):
    return [lam * x + (1.0 - lam) * y for x, y in zip(a, b)]


def oracle_softmax(z):
    m = max(z)
    exps = [math.exp(x - m) for x in z]
    s = sum(exps)
    return [e / s for e in exps]


def oracle_adals(p, c):
    order = sorted(range(len(p)), key=lambda i: (-p[i], i))
    top = set(order[:c])
    kept = sum(p[i] for i in top)
    fill = (1.0 - kept) / (len(p) - c)
    return [p[i] if i in top else fill for i in range(len(p))]


def oracle_ema(old, student, gamma):
    mixed = [gamma * o + (1.0 - gamma) * s for o, s in zip(old, student)]
    total = sum(mixed)
    return [m / total for m in mixed]


def oracle_mi(rows) -> float:
    n = len(rows)
    c = len(rows[0])
    marginal = [sum(r[j] for r in rows) / n for j in range(c)]
    mean_ent = sum(oracle_entropy(r) for r in rows) / n
    return oracle_entropy(marginal) - mean_ent


def oracle_mlp(x, layers):
    """layers: list of (w, b) with w as (in, out) nested lists."""
    h = list(x)
    for li, (w, b) in enumerate(layers):
        out = []
        for j in range(len(b)):
            acc = b[j]
            for i in range(len(h)):
                acc += h[i] * w[i][j]
            out.append(acc)
        if li < len(layers) - 1:
            out = [v if v > 0 else 0.0 for v in out]
        h = out
    return h


def random_simplex(rng: np.random.Generator, c: int, batch: int | None = None) -> np.ndarray:
    shape = (c,) if batch is None else (batch, c)
    raw = rng.gamma(1.0, 1.0, shape) + 1e-6
    return raw / raw.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# finite-difference harness


def small_model(seed: int, frames=5, frame_dim=8, clip_dim=16, hidden=16,
                num_classes=4, dtype=np.float64) -> TargetModel:
    dims = ModelDims(frames=frames, frame_dim=frame_dim, num_classes=num_classes,
                     clip_dim=clip_dim, hidden=hidden)
    return TargetModel.build(dims, RngState(seed), dtype=dtype)


def fd_max_rel_err(make_loss, params, rng: np.random.Generator,
                   n_coords: int = 40, h: float = 1e-4, floor: float = 1e-6) -> float:
    """Compare tape gradients to central finite differences on sampled coords."""
    ad.zero_grads(params)
    with Tape() as tape:
        loss = make_loss()
        tape.backward(loss)
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    def value() -> float:
        with ad.no_grad():
            return make_loss().item()

    sizes = np.array([p.data.size for p in params])
    offsets = np.cumsum(sizes)
    total = int(offsets[-1])
    coords = rng.choice(total, size=min(n_coords, total), replace=False)
    worst = 0.0
    for flat in coords:
        pi = int(np.searchsorted(offsets, flat, side="right"))
        local = int(flat - (offsets[pi - 1] if pi > 0 else 0))
        p = params[pi]
        idx = np.unravel_index(local, p.data.shape)
        old = p.data[idx]
        p.data[idx] = old + h
        lp = value()
        p.data[idx] = old - h
        lm = value()
        p.data[idx] = old
        fd = (lp - lm) / (2.0 * h)
        rel = abs(grads[pi][idx] - fd) / max(abs(fd), floor)
        worst = max(worst, rel)
    return worst
