"""Shared test utilities."""

import numpy as np

from tokengate.autodiff import Tape, Var, finite_difference_gradient


def rel_err(analytic, numeric) -> float:
    """Norm-based relative error between two gradient arrays."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    b = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def tape_vs_fd(build, x0, step=1e-6):
    """Compare the tape gradient of a scalar-valued graph against central
    finite differences.

    ``build(var)`` receives a tracked variable holding ``x0`` and must
    return a scalar Var.  Returns (analytic, numeric) flat gradients.
    """
    x0 = np.asarray(x0, dtype=np.float64)

    tape = Tape()
    var = tape.var(x0)
    out = build(var)
    analytic = tape.gradients(out, [var])[0].ravel()

    def f(flat):
        value = build(Var(flat.reshape(x0.shape))).value
        return float(value[0, 0])

    numeric = finite_difference_gradient(f, x0.ravel(), step)
    return analytic, numeric
