"""Shared finite-difference oracles for gradient checks.

The oracle differentiates the forward computation numerically in 64-bit; it
never touches the backward rules it is checking.
"""

import numpy as np

from statecast import autodiff as ad

FD_EPS = 1e-3
REL_TOL = 1e-4
ABS_TOL = 1e-6
SMALL_GRAD = 1e-3


def assert_grad_close(analytic: float, numeric: float) -> None:
    if abs(analytic) < SMALL_GRAD and abs(numeric) < SMALL_GRAD:
        assert abs(analytic - numeric) <= ABS_TOL, (
            f"grad mismatch: analytic {analytic}, fd {numeric}"
        )
    else:
        denom = max(abs(analytic), abs(numeric))
        assert abs(analytic - numeric) / denom <= REL_TOL, (
            f"grad mismatch: analytic {analytic}, fd {numeric}"
        )


def gradcheck_leaves(build, arrays, rng, n_coords=6):
    """Check d(build(leaves))/d(leaf) against central finite differences.

    ``build`` maps a list of Nodes to a scalar Node and must be a pure
    function of the node values. Runs entirely in float64.
    """
    with ad.use_dtype(np.float64):
        leaves = [ad.leaf(np.asarray(a, dtype=np.float64)) for a in arrays]
        with ad.Tape() as tape:
            out = build(leaves)
            tape.backward(out)
        grads = [
            leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.value)
            for leaf in leaves
        ]

        def value_at(li, c, v):
            vals = [leaf.value.copy() for leaf in leaves]
            vals[li].reshape(-1)[c] = v
            return build([ad.constant(x) for x in vals]).item()

        for li, leaf in enumerate(leaves):
            size = leaf.value.size
            coords = rng.choice(size, size=min(n_coords, size), replace=False)
            for c in coords:
                orig = float(leaf.value.reshape(-1)[c])
                fd = (value_at(li, c, orig + FD_EPS)
                      - value_at(li, c, orig - FD_EPS)) / (2 * FD_EPS)
                assert_grad_close(float(grads[li].reshape(-1)[c]), fd)


def gradcheck_params(loss_fn, registry, param_names, rng, n_coords=4):
    """Check d(loss_fn())/d(param) for registry parameters in place.

    The caller is responsible for having built the model under a float64
    dtype context; loss_fn() must be repeatable (no internal randomness).
    """
    with ad.Tape() as tape:
        out = loss_fn()
        registry.zero_grads()
        tape.backward(out)
    for name in param_names:
        p = registry[name]
        analytic = p.grad.copy()
        flat = p.value.reshape(-1)
        coords = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
        for c in coords:
            orig = float(flat[c])
            flat[c] = orig + FD_EPS
            f_plus = loss_fn().item()
            flat[c] = orig - FD_EPS
            f_minus = loss_fn().item()
            flat[c] = orig
            fd = (f_plus - f_minus) / (2 * FD_EPS)
            assert_grad_close(float(analytic.reshape(-1)[c]), fd)
