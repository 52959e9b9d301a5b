"""Invertible triangular transport map built from grouped affine couplings.

The latent dimension is split into K equal groups.  Stage t applies L affine
coupling layers to the currently active block (the first ``d - (t-1)*d/K``
coordinates) and then freezes that block's last group: frozen coordinates
pass through all later layers bitwise unchanged and are never read by later
coupling networks.  After K-1 stages only the first group remains and no
further layers act.

Within a stage the coupling layers alternate which half of the active block
is transformed (even positions conditioned on odd, then swapped).  Each
transformed coordinate gets ``x * exp(s) + t`` where ``(s_raw, t)`` come from
a small dense network fed by the kept half and ``s = bound * tanh(s_raw)``
keeps the scale numerically safe.  Coupling nets have zero-initialized final
layers, so a fresh flow is exactly the identity.

Log-determinants accumulate as plain sums of ``s`` (forward) or ``-s``
(inverse), making densities exact, and the whole map runs either on plain
numpy arrays or on the autodiff tape.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .nets import init_mlp, mlp_forward, std_normal_logpdf
from .params import ParamStore


@dataclass(frozen=True)
class FlowConfig:
    dim: int
    n_groups: int
    layers_per_stage: int = 8
    hidden_width: int = 48
    hidden_depth: int = 2
    scale_bound: float = 2.0

    def __post_init__(self):
        if self.n_groups < 2 or self.dim % self.n_groups != 0:
            raise ValueError(
                f"n_groups must be >= 2 and divide dim: dim={self.dim}, K={self.n_groups}")
        if self.layers_per_stage < 1:
            raise ValueError("layers_per_stage must be at least 1")
        if self.scale_bound <= 0:
            raise ValueError("scale_bound must be positive")

    @property
    def group_size(self) -> int:
        return self.dim // self.n_groups

    def active_dims(self) -> list[int]:
        """Active block width per stage t = 1..K-1."""
        return [self.dim - t * self.group_size for t in range(self.n_groups - 1)]


@dataclass
class FlowParams:
    store: ParamStore
    config: FlowConfig


@dataclass
class LogDensity:
    value: float


def _split(active_dim: int, layer: int) -> tuple[np.ndarray, np.ndarray]:
    """(kept, transformed) index sets: even/odd positions, swapped per layer."""
    even = np.arange(0, active_dim, 2)
    odd = np.arange(1, active_dim, 2)
    return (even, odd) if layer % 2 == 0 else (odd, even)


def _net_sizes(config: FlowConfig, n_kept: int, n_trans: int) -> list[int]:
    return [n_kept, *([config.hidden_width] * config.hidden_depth), 2 * n_trans]


def layer_names(config: FlowConfig):
    """(stage, layer, prefix, split) for every coupling layer in order."""
    out = []
    for t, m in enumerate(config.active_dims()):
        for l in range(config.layers_per_stage):
            out.append((t, l, f"s{t}.l{l}.", _split(m, l)))
    return out


def init_flow(config: FlowConfig, seed: int) -> FlowParams:
    rng = np.random.default_rng(seed)
    store = ParamStore(rng_seed=seed)
    for _t, _l, prefix, (kept, trans) in layer_names(config):
        sizes = _net_sizes(config, len(kept), len(trans))
        for name, arr in init_mlp(rng, sizes, prefix=prefix, zero_last=True).items():
            store[name] = arr
    return FlowParams(store, config)


def _coupling_scale_shift(params: Mapping[str, object], kept_vals, config: FlowConfig,
                          prefix: str, n_trans: int):
    raw = mlp_forward(params, kept_vals, prefix=prefix)
    s = ad.mul(ad.tanh(ad.take_cols(raw, np.arange(n_trans))), config.scale_bound)
    t = ad.take_cols(raw, np.arange(n_trans, 2 * n_trans))
    return s, t


def _reassemble(kept_vals, trans_vals, kept, trans, active_dim: int):
    """Scatter the two halves back to their original column positions."""
    perm = np.empty(active_dim, dtype=np.intp)
    perm[kept] = np.arange(len(kept))
    perm[trans] = len(kept) + np.arange(len(trans))
    return ad.take_cols(ad.concat([kept_vals, trans_vals], axis=-1), perm)


def coupling_forward(x_active, params: Mapping[str, object], config: FlowConfig,
                     prefix: str, split: tuple[np.ndarray, np.ndarray]):
    """One affine coupling layer on the active block; returns (out, logdet)."""
    kept, trans = split
    xk = ad.take_cols(x_active, kept)
    xt = ad.take_cols(x_active, trans)
    s, t = _coupling_scale_shift(params, xk, config, prefix, len(trans))
    yt = ad.add(ad.mul(xt, ad.exp(s)), t)
    out = _reassemble(xk, yt, kept, trans, x_active.shape[-1])
    return out, ad.sum_(s, axis=-1)


def coupling_inverse(z_active, params: Mapping[str, object], config: FlowConfig,
                     prefix: str, split: tuple[np.ndarray, np.ndarray]):
    """Exact algebraic inverse of coupling_forward; returns (out, logdet_inv)."""
    kept, trans = split
    zk = ad.take_cols(z_active, kept)
    zt = ad.take_cols(z_active, trans)
    s, t = _coupling_scale_shift(params, zk, config, prefix, len(trans))
    xt = ad.mul(ad.sub(zt, t), ad.exp(ad.mul(s, -1.0)))
    out = _reassemble(zk, xt, kept, trans, z_active.shape[-1])
    return out, ad.mul(ad.sum_(s, axis=-1), -1.0)


def _as_batch(x):
    arr = x.data if isinstance(x, ad.Tensor) else np.asarray(x, dtype=np.float64)
    return arr.ndim == 1


def krnet_forward(x, params: Mapping[str, object] | FlowParams, config: FlowConfig | None = None):
    """Map x -> z through all stages; returns (z, total logdet).

    Accepts a single d-vector or a (B, d) batch, as arrays or tape tensors.
    """
    params, config = _unpack(params, config)
    single = _as_batch(x)
    cur = ad.reshape(x, (1, -1)) if single else x
    _check_dim(cur, config)
    logdet = None
    frozen = []
    for t, m in enumerate(config.active_dims()):
        for l in range(config.layers_per_stage):
            prefix = f"s{t}.l{l}."
            cur, ld = coupling_forward(cur, params, config, prefix, _split(m, l))
            logdet = ld if logdet is None else ad.add(logdet, ld)
        # freeze the last group of the active block
        keep = m - config.group_size
        frozen.append(ad.take_cols(cur, np.arange(keep, m)))
        cur = ad.take_cols(cur, np.arange(keep))
    z = ad.concat([cur, *reversed(frozen)], axis=-1)
    if single:
        return ad.reshape(z, (-1,)), ad.reshape(logdet, ())
    return z, logdet


def krnet_inverse(z, params: Mapping[str, object] | FlowParams, config: FlowConfig | None = None,
                  with_logdet: bool = False):
    """Exact inverse of krnet_forward, applying stages and layers in reverse.

    With ``with_logdet=True`` also returns log|det d(x)/d(z)|, which equals
    minus the forward log-determinant at the same point.
    """
    params, config = _unpack(params, config)
    single = _as_batch(z)
    zb = ad.reshape(z, (1, -1)) if single else z
    _check_dim(zb, config)
    active_dims = config.active_dims()
    # thaw order is the reverse of the freeze order
    cur = ad.take_cols(zb, np.arange(active_dims[-1] - config.group_size))
    offset = active_dims[-1] - config.group_size
    logdet = None
    for t in reversed(range(len(active_dims))):
        m = active_dims[t]
        cur = ad.concat([cur, ad.take_cols(zb, np.arange(offset, offset + config.group_size))],
                        axis=-1)
        offset += config.group_size
        for l in reversed(range(config.layers_per_stage)):
            prefix = f"s{t}.l{l}."
            cur, ld = coupling_inverse(cur, params, config, prefix, _split(m, l))
            logdet = ld if logdet is None else ad.add(logdet, ld)
    x = cur
    if single:
        x = ad.reshape(x, (-1,))
        logdet = ad.reshape(logdet, ())
    return (x, logdet) if with_logdet else x


def log_density(x, params: Mapping[str, object] | FlowParams,
                config: FlowConfig | None = None):
    """log q(x) = log N(f(x); 0, I) + log|det df/dx|; scalar or (B,)."""
    params, config = _unpack(params, config)
    z, logdet = krnet_forward(x, params, config)
    return ad.add(std_normal_logpdf(z), logdet)


def log_density_value(x: np.ndarray, flow: FlowParams) -> LogDensity:
    return LogDensity(value=float(log_density(x, flow)))


def sample_latent(flow: FlowParams, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw x = f^{-1}(z) with z ~ N(0, I); returns (n, d)."""
    z = rng.standard_normal((n, flow.config.dim))
    return krnet_inverse(z, flow)


def dependency_mask(config: FlowConfig) -> np.ndarray:
    """Boolean (d, d) mask: may output coordinate i depend on input j?

    Propagates dependency sets through the exact layer schedule, so the mask
    encodes both the freeze bookkeeping and the per-layer conditioning
    direction.  The numerical Jacobian must be zero wherever this is False.
    """
    d = config.dim
    deps = [set([j]) for j in range(d)]
    for t, m in enumerate(config.active_dims()):
        for l in range(config.layers_per_stage):
            kept, trans = _split(m, l)
            kept_union: set[int] = set()
            for k in kept:
                kept_union |= deps[k]
            for j in trans:
                deps[j] = deps[j] | kept_union
    mask = np.zeros((d, d), dtype=bool)
    for i in range(d):
        for j in deps[i]:
            mask[i, j] = True
    return mask


def _unpack(params, config):
    if isinstance(params, FlowParams):
        return dict(params.store.items()), params.config
    if config is None:
        raise ValueError("config is required when passing a raw parameter mapping")
    return params, config


def _check_dim(x, config: FlowConfig) -> None:
    width = x.data.shape[-1] if isinstance(x, ad.Tensor) else np.asarray(x).shape[-1]
    if width != config.dim:
        raise ad.ShapeError(f"flow expects dimension {config.dim}, got {width}")


# -- checkpointing ------------------------------------------------------------------


def save_flow(path_prefix: str, flow: FlowParams, seed: int,
              extra: dict | None = None) -> None:
    flow.store.save(f"{path_prefix}.bin")
    cfg = flow.config
    meta = {"d": cfg.dim, "K": cfg.n_groups, "L": cfg.layers_per_stage,
            "hidden_width": cfg.hidden_width, "hidden_depth": cfg.hidden_depth,
            "scale_bound": cfg.scale_bound, "seed": seed}
    meta.update(extra or {})
    with open(f"{path_prefix}.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_flow(path_prefix: str) -> tuple[FlowParams, dict]:
    with open(f"{path_prefix}.json") as fh:
        meta = json.load(fh)
    config = FlowConfig(dim=meta["d"], n_groups=meta["K"], layers_per_stage=meta["L"],
                        hidden_width=meta["hidden_width"], hidden_depth=meta["hidden_depth"],
                        scale_bound=meta["scale_bound"])
    return FlowParams(ParamStore.load(f"{path_prefix}.bin"), config), meta
