"""Shared oracles for the test suite."""

from __future__ import annotations

import numpy as np

from perdpm import numeric as nm


def numeric_grad(f, arrays, i, step=1e-5):
    """Central differences of scalar ``f(*arrays)`` with respect to ``arrays[i]``."""
    x = arrays[i]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + step
        hi = f(*arrays)
        x[idx] = old - step
        lo = f(*arrays)
        x[idx] = old
        g[idx] = (hi - lo) / (2 * step)
    return g


def max_rel_error(a, b, floor=1e-8):
    """Largest ``|a - b| / max(|a|, |b|)`` over entries whose absolute gap exceeds ``floor``.

    Entries within the absolute floor count as matching, so finite-difference
    noise on near-zero gradients does not register as a relative error.
    """
    a, b = np.asarray(a), np.asarray(b)
    diff = np.abs(a - b)
    if not diff.size:
        return 0.0
    scale = np.maximum(np.abs(a), np.abs(b))
    rel = np.where(diff <= floor, 0.0, diff / np.where(scale > 0, scale, 1.0))
    return float(rel.max())


def max_abs_error(a, b):
    diff = np.abs(np.asarray(a) - np.asarray(b))
    return float(diff.max()) if diff.size else 0.0


def autodiff_grads(fn, arrays):
    params = [nm.parameter(a) for a in arrays]
    with nm.Tape() as tape:
        loss = fn(*params)
        return tape.backward(loss, params)


def model_gradient_errors(model, x, u, g, mask, step=1e-5, floor=1e-8):
    """Per-parameter max relative error of ELBO gradients vs central differences.

    The noise stream is re-seeded for every evaluation so the objective is a
    deterministic function of the parameters.
    """
    from perdpm.training import elbo_terms

    def objective():
        terms = elbo_terms(model, x, u, g, mask, nm.make_rng(7, 0))
        return terms.objective(1.0)

    params = model.parameters()
    with nm.Tape() as tape:
        loss = objective()
        grads = tape.backward(loss, params)
    errors, gaps = {}, {}
    for (name, p), ga in zip(model.params.items(), grads):
        def f(*_):
            return objective().item()
        gn = numeric_grad(f, [p.data], 0, step)
        errors[name] = max_rel_error(ga, gn, floor)
        gaps[name] = max_abs_error(ga, gn)
    model_gradient_errors.last_abs = gaps
    return errors
