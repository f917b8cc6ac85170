"""Shared helpers: finite differences and relative error."""

import numpy as np


def fd_grad(f, x, eps=1e-5):
    """Central-difference gradient of a scalar function at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return g


def minmax_calibrate(graph, calib):
    """Fit every attached slot with plain min-max ranges from one batch."""
    from quantkit.graph import forward_fp
    from quantkit.ranges import RangeMethod, fit_spec, range_minmax, spec_from_range

    for name, slot in graph.weight_slots.items():
        w = graph.layer(name).params["weight"]
        slot.spec = fit_spec(w, slot.scheme, slot.bitwidth, RangeMethod.MINMAX,
                             per_channel=slot.per_channel, axis=slot.axis or 0)
    _, env = forward_fp(graph, calib, capture=True)
    pooled = {}
    for edge, sid in graph.edge_slot.items():
        lo, hi = range_minmax(env[edge].reshape(-1))
        cur = pooled.get(sid)
        pooled[sid] = (lo, hi) if cur is None else (min(cur[0], lo), max(cur[1], hi))
    for sid, (lo, hi) in pooled.items():
        slot = graph.act_slots[sid]
        slot.spec = spec_from_range(lo, hi, slot.scheme, slot.bitwidth)
    return graph


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(float(np.max(np.abs(b))), 1e-12)
    return float(np.max(np.abs(a - b))) / denom
