"""Finite-difference gradient checking shared by the tensor/backbone tests.

check_gradients builds the loss twice per probed coordinate (central
differences, h = 1e-5) and compares against the analytic gradient from one
backward pass, on a random subset of coordinates so composites with many
parameters stay fast.
"""

import numpy as np

from flowscene import tensor as T


def check_gradients(build_loss, tensors, h=1e-5, rtol=1e-4, max_coords=24,
                    seed=0):
    """Assert analytic grads match central differences.

    build_loss() must construct the scalar loss Tensor from the current
    .data of the given tensors. Returns the worst relative error seen.
    """
    loss = build_loss()
    for t in tensors:
        t.grad = None
    T.backward(loss)
    analytic = [np.array(t.grad if t.grad is not None else np.zeros_like(t.data))
                for t in tensors]
    # central differences of a float64 loss carry ~eps * |loss| / h of
    # cancellation noise; differences below that floor are arithmetic dust,
    # not gradient bugs, which always show up at the scale of real terms
    noise_floor = 100.0 * np.finfo(float).eps * max(1.0, abs(loss.item())) / h
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, a in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        coords = rng.permutation(n)[:min(n, max_coords)]
        for c in coords:
            original = flat[c]
            flat[c] = original + h
            up = build_loss().item()
            flat[c] = original - h
            down = build_loss().item()
            flat[c] = original
            numeric = (up - down) / (2.0 * h)
            a_c = a.reshape(-1)[c]
            if abs(a_c - numeric) < noise_floor:
                continue
            denom = max(abs(a_c), abs(numeric), 1e-6)
            rel = abs(a_c - numeric) / denom
            worst = max(worst, rel)
            assert rel < rtol, (
                f"gradient mismatch at coord {c}: analytic {a_c:.10g} "
                f"vs numeric {numeric:.10g} (rel err {rel:.3g})")
    return worst
