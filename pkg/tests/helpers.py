"""Shared builders for tests."""

import numpy as np

from cascadet.cascade import CascadeBatch
from cascadet.matcher import MatchResult


def random_batch(rng, n=30, p_pos=0.2, p_ign=0.2):
    """A cascade batch with random outputs, masks and labels."""

    def labels():
        u = rng.uniform(size=n)
        return np.where(u < p_pos, 1, np.where(u < p_pos + p_ign, -1, 0)).astype(np.int8)

    def result(lab):
        targets = np.where((lab == 1)[:, None], rng.normal(0, 1.5, (n, 4)), np.nan)
        return MatchResult(lab, np.where(lab == 1, 0, -1), rng.uniform(size=n), targets)

    omega = rng.uniform(size=n) < 0.6
    psi = ~omega
    phi = ~omega | (rng.uniform(size=n) < 0.5)
    anchors = np.tile([0.0, 0.0, 10.0, 10.0], (n, 1))
    return CascadeBatch(
        anchors=anchors,
        refined=anchors,
        p_logit=rng.normal(0, 3, n),
        q_logit=rng.normal(0, 3, n),
        x=rng.normal(0, 1.5, (n, 4)),
        t=rng.normal(0, 1.5, (n, 4)),
        omega=omega,
        psi=psi,
        phi=phi,
        match1=result(labels()),
        match2=result(labels()),
    )


def central_difference(f, x, h):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        up = f(x)
        x[i] = old - h
        down = f(x)
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))
