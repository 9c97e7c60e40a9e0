"""Shared test helpers for gradient checks."""

import numpy as np

from talkfield.core import finite_difference_check
from talkfield.field import HeadModel


def rough_model(seed=0, d_a=4):
    """Small model with random tables and biases so no relu sits on its kink."""
    rng = np.random.default_rng(seed)
    m = HeadModel.init(rng, d_a, (4, 8), 2, 6, trunk_hidden=(8, 8), gate_hidden=4)
    m.grid.params[:] = rng.normal(size=m.grid.params.shape)
    for net in m.networks().values():
        for b in net.biases:
            b[:] = rng.normal(scale=0.5, size=b.shape)
    return m


def check_model_grads(m, grads, objective, rng, max_entries=12, per_component=False):
    """Central differences on every network of ``m`` (a random subset of each
    array) and on touched tri-plane rows. Returns the worst relative error and
    the checked names, or a per-component dict of worst errors."""
    names = [n for n, _ in m.parameters() if n.startswith(("gates.", "field."))]
    params = dict(m.parameters())
    rep = finite_difference_check([(n, params[n]) for n in names], [grads[n] for n in names], objective,
                                  step=1e-6, max_entries=max_entries, rng=rng)
    touched = np.argwhere(grads["triplane"] != 0)
    pick = touched[rng.choice(len(touched), min(20, len(touched)), replace=False)]
    worst = 0.0
    table = m.grid.params
    for r, c in pick:
        orig = table[r, c]
        table[r, c] = orig + 1e-6
        fp = objective()
        table[r, c] = orig - 1e-6
        fm = objective()
        table[r, c] = orig
        num = (fp - fm) / 2e-6
        worst = max(worst, abs(num - grads["triplane"][r, c]) / max(abs(num), abs(grads["triplane"][r, c]), 1e-6))
    if per_component:
        out = {"triplane": worst}
        for prefix, net in m.networks().items():
            sub = [n for n in names if n.startswith(prefix)]
            r = finite_difference_check([(n, params[n]) for n in sub], [grads[n] for n in sub], objective,
                                        step=1e-6, max_entries=max_entries, rng=rng)
            out[prefix.rstrip(".")] = r.max_rel_error
        return out
    return max(rep.max_rel_error, worst), set(names)
