"""Central-difference verification of every hand-derived gradient path."""

from __future__ import annotations

import numpy as np


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    # Central differences resolve at best ~|f| * macheps / epsilon (~1e-11
    # absolute for unit-scale losses), so components below the floor are
    # compared absolutely rather than drowning the metric in roundoff.
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check(params: np.ndarray, value_fn, analytic_grad: np.ndarray,
               epsilon: float = 1e-5) -> float:
    """Max relative error of ``analytic_grad`` vs central differences.

    Perturbs ``params`` in place (restoring each entry), so ``value_fn``
    must read the live array.  Intended for miniature models; cost is
    two evaluations per parameter.
    """
    if params.size > 20000:
        raise ValueError("grad_check is for miniature models (<= ~10k params)")
    numeric = np.empty(params.size, dtype=np.float64)
    for i in range(params.size):
        orig = params[i]
        params[i] = orig + epsilon
        hi = value_fn()
        params[i] = orig - epsilon
        lo = value_fn()
        params[i] = orig
        numeric[i] = (hi - lo) / (2.0 * epsilon)
    return max_relative_error(np.asarray(analytic_grad, dtype=np.float64), numeric)


def grad_check_loss(model, x, spec, head=None, mask=None, epsilon: float = 1e-5) -> float:
    """grad_check for a classifier LossSpec (see losses.loss_and_grad)."""
    from .losses import loss_and_grad, loss_value

    _, grad = loss_and_grad(model, x, spec, head=head, mask=mask)
    return grad_check(
        model.params,
        lambda: loss_value(model, x, spec, head=head, mask=mask),
        grad,
        epsilon=epsilon,
    )


def grad_check_elbo(vae, x, eps_noise: np.ndarray, epsilon: float = 1e-5) -> float:
    """grad_check for the VAE ELBO with the reparameterization noise frozen."""
    _, grad = vae.elbo_loss_and_grad(x, eps_noise)
    return grad_check(
        vae.params,
        lambda: vae.elbo_loss(x, eps_noise),
        grad,
        epsilon=epsilon,
    )
