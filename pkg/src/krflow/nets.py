"""Dense network building blocks shared by the VAE, the flow and the surrogate.

All forward functions dispatch through :mod:`krflow.autodiff`, so they accept
either plain numpy arrays (fast, tape-free) or ``Tensor`` leaves (when a
training loop needs gradients).
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad

LOG_2PI = float(np.log(2.0 * np.pi))

ACTIVATIONS = {
    "relu": ad.relu,
    "tanh": ad.tanh,
    "softplus": ad.softplus,
}


def init_mlp(rng: np.random.Generator, sizes: Sequence[int], prefix: str = "",
             zero_last: bool = False) -> dict[str, np.ndarray]:
    """He-style uniform fan-in initialization for a dense stack.

    Weights are named ``{prefix}W{i}`` / ``{prefix}b{i}``.  ``zero_last``
    zeroes the final layer, which e.g. starts a coupling flow at the identity.
    """
    out: dict[str, np.ndarray] = {}
    n_layers = len(sizes) - 1
    for i in range(n_layers):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        if zero_last and i == n_layers - 1:
            w = np.zeros((fan_in, fan_out))
        else:
            limit = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        out[f"{prefix}W{i}"] = w
        out[f"{prefix}b{i}"] = np.zeros(fan_out)
    return out


def mlp_forward(params: Mapping[str, object], x, prefix: str = "",
                activation: str = "relu"):
    """Apply the dense stack named ``{prefix}W{i}``/``{prefix}b{i}``.

    Depth is discovered from the parameter names; the activation is applied
    to every layer except the last.
    """
    act = ACTIVATIONS[activation]
    n_layers = 0
    while f"{prefix}W{n_layers}" in params:
        n_layers += 1
    if n_layers == 0:
        raise KeyError(f"no parameters found under prefix '{prefix}'")
    h = x
    for i in range(n_layers):
        h = ad.add(ad.matmul(h, params[f"{prefix}W{i}"]), params[f"{prefix}b{i}"])
        if i < n_layers - 1:
            h = act(h)
    return h


def diag_gaussian_logpdf(x, mean, logvar):
    """Row-wise log N(x; mean, diag(exp(logvar))), summed over the last axis."""
    delta = ad.sub(x, mean)
    quad = ad.mul(ad.mul(delta, delta), ad.exp(ad.mul(logvar, -1.0)))
    terms = ad.mul(ad.add(ad.add(quad, logvar), LOG_2PI), -0.5)
    return ad.sum_(terms, axis=-1)


def std_normal_logpdf(x):
    """Row-wise log N(x; 0, I), summed over the last axis."""
    quad = ad.add(ad.mul(x, x), LOG_2PI)
    return ad.mul(ad.sum_(quad, axis=-1), -0.5)
