"""Central finite-difference gradient oracle used across the test suite.

Independent of the tape: it re-runs the forward function with perturbed
leaf values and never consults the engine's backward pass.
"""

import numpy as np

from mopoe import tensor as T


def finite_difference(fn, leaves, h=1e-5):
    """Gradient of scalar fn(*leaves) w.r.t. each leaf, by central differences.

    fn must rebuild its graph from the leaves' current .data on every
    call; leaves are Tensors whose data is perturbed in place.
    """
    grads = []
    for leaf in leaves:
        g = np.zeros_like(leaf.data)
        flat = leaf.data.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def tape_gradients(fn, leaves):
    """Gradients of scalar fn(*leaves) via the engine's own backward pass."""
    with T.Tape() as tape:
        root = fn()
        grads = T.backward(tape, root)
    out = []
    for leaf in leaves:
        if leaf.node_id is not None and leaf.node_id in grads:
            out.append(grads[leaf.node_id])
        else:
            out.append(np.zeros_like(leaf.data))
    return out


def relative_error(a, b, floor=1e-8):
    """Max componentwise |a-b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def check_gradients(fn, leaves, h=1e-5, tol=1e-4):
    """Assert engine gradients match finite differences; returns max error."""
    analytic = tape_gradients(fn, leaves)
    numeric = finite_difference(fn, leaves, h=h)
    worst = 0.0
    for ga, gn in zip(analytic, numeric):
        worst = max(worst, relative_error(ga, gn))
    assert worst < tol, f"gradient mismatch: rel err {worst:.3e} >= {tol:.0e}"
    return worst
