"""Data-driven field prior: Gaussian encoder/decoder trained on the ELBO.

Both conditionals are diagonal Gaussians.  The encoder maps a flattened
H*W field to (mu_en, logvar_en) of the latent x; the decoder maps x back to
(mu_de, logvar_de) over pixels.  Training maximizes the single-draw
Monte Carlo ELBO estimate per sample,

    log p(y | x) - (log q(x | y) - log p(x)),    x = mu_en + sigma_en * eps,

by mini-batch Adam, and the probabilistic decoder of the final epoch is the
prior handed to the inference stage.  Log-variance heads are clamped to
[-10, 10] to keep likelihoods non-degenerate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .nets import diag_gaussian_logpdf, init_mlp, mlp_forward, std_normal_logpdf
from .params import AdamState, ParamStore, adam_step
from .report import write_loss_curve

LOGVAR_BOUND = 10.0


@dataclass
class VaeParams:
    encoder: ParamStore
    decoder: ParamStore
    latent_dim: int
    height: int
    width: int
    encoder_hidden: tuple[int, ...] = (256, 128)
    decoder_hidden: tuple[int, ...] = (128, 256)
    # affine field standardization; the Gaussian heads live in standardized
    # space and are mapped back, which keeps training well conditioned when
    # the data mean is far from zero
    offset: float = 0.0
    scale: float = 1.0

    @property
    def encoder_sizes(self) -> list[int]:
        return [self.height * self.width, *self.encoder_hidden, 2 * self.latent_dim]

    @property
    def decoder_sizes(self) -> list[int]:
        return [self.latent_dim, *self.decoder_hidden, 2 * self.height * self.width]


@dataclass
class ElboBreakdown:
    reconstruction_term: float   # E[log p(y|x)]
    prior_term: float            # E[log p(x)]
    entropy_term: float          # E[-log q(x|y)]
    total: float


@dataclass
class VaeTrainConfig:
    latent_dim: int
    epochs: int
    batch_size: int
    learning_rate: float
    seed: int
    encoder_hidden: tuple[int, ...] = (256, 128)
    decoder_hidden: tuple[int, ...] = (128, 256)
    standardize: bool = True
    curve_path: str | None = None


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the last finite parameters."""

    def __init__(self, message: str, last_params):
        super().__init__(message)
        self.last_params = last_params


def init_vae(height: int, width: int, latent_dim: int, seed: int,
             encoder_hidden: Sequence[int] = (256, 128),
             decoder_hidden: Sequence[int] = (128, 256),
             offset: float = 0.0, scale: float = 1.0) -> VaeParams:
    rng = np.random.default_rng(seed)
    n = height * width
    enc = ParamStore(init_mlp(rng, [n, *encoder_hidden, 2 * latent_dim]), rng_seed=seed)
    dec = ParamStore(init_mlp(rng, [latent_dim, *decoder_hidden, 2 * n]), rng_seed=seed)
    return VaeParams(enc, dec, latent_dim, height, width,
                     tuple(encoder_hidden), tuple(decoder_hidden), offset, scale)


def _split_heads(out, n: int):
    mu = ad.take_cols(out, np.arange(n))
    logvar = ad.clip(ad.take_cols(out, np.arange(n, 2 * n)), -LOGVAR_BOUND, LOGVAR_BOUND)
    return mu, logvar


def encode_batch(y_flat, params, vae: VaeParams):
    """(B, H*W) fields -> (mu_en, logvar_en), each (B, d).  Tape or numpy."""
    out = mlp_forward(params, ad.mul(ad.sub(y_flat, vae.offset), 1.0 / vae.scale))
    return _split_heads(out, vae.latent_dim)


def decode_batch(x, params, vae: VaeParams):
    """(B, d) latents -> (mu_de, logvar_de), each (B, H*W).  Tape or numpy.

    The network heads live in standardized field space; the mean is mapped
    back through the affine transform and the log-variance is shifted by
    2*log(scale) (then clamped), so the returned Gaussian is over raw fields.
    """
    out = mlp_forward(params, x)
    n = vae.height * vae.width
    mu_raw = ad.take_cols(out, np.arange(n))
    logvar_raw = ad.take_cols(out, np.arange(n, 2 * n))
    mu = ad.add(ad.mul(mu_raw, vae.scale), vae.offset)
    logvar = ad.clip(ad.add(logvar_raw, 2.0 * np.log(vae.scale)),
                     -LOGVAR_BOUND, LOGVAR_BOUND)
    return mu, logvar


def encode(y: np.ndarray, vae: VaeParams) -> tuple[np.ndarray, np.ndarray]:
    """Single H-by-W field -> (mu_en, logvar_en) vectors of length d."""
    mu, logvar = encode_batch(y.reshape(1, -1), dict(vae.encoder.items()), vae)
    return mu[0], logvar[0]


def decode(x: np.ndarray, vae: VaeParams) -> tuple[np.ndarray, np.ndarray]:
    """Latent vector -> (mu_de, logvar_de) as H-by-W images."""
    mu, logvar = decode_batch(np.atleast_2d(x), dict(vae.decoder.items()), vae)
    shape = (vae.height, vae.width)
    return mu[0].reshape(shape), logvar[0].reshape(shape)


def reparameterize(mu, logvar, eps):
    """x = mu + exp(logvar / 2) * eps; works on the tape and on numpy arrays."""
    return ad.add(mu, ad.mul(ad.exp(ad.mul(logvar, 0.5)), eps))


def _merged_store(vae: VaeParams) -> ParamStore:
    store = ParamStore(rng_seed=vae.encoder.rng_seed)
    for k, v in vae.encoder.items():
        store[f"enc.{k}"] = v
    for k, v in vae.decoder.items():
        store[f"dec.{k}"] = v
    return store


def _split_store(store, vae: VaeParams) -> VaeParams:
    enc = ParamStore(rng_seed=vae.encoder.rng_seed)
    dec = ParamStore(rng_seed=vae.decoder.rng_seed)
    for k, v in store.items():
        if k.startswith("enc."):
            enc[k[4:]] = v
        else:
            dec[k[4:]] = v
    return VaeParams(enc, dec, vae.latent_dim, vae.height, vae.width,
                     vae.encoder_hidden, vae.decoder_hidden, vae.offset, vae.scale)


def _prefixed(params, prefix: str):
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def _elbo_terms(params, y_flat: np.ndarray, eps: np.ndarray, vae: VaeParams):
    """Batch-mean reconstruction / prior / entropy terms (tape-compatible)."""
    mu_en, logvar_en = encode_batch(y_flat, _prefixed(params, "enc."), vae)
    x = reparameterize(mu_en, logvar_en, eps)
    mu_de, logvar_de = decode_batch(x, _prefixed(params, "dec."), vae)
    recon = ad.mean_(diag_gaussian_logpdf(y_flat, mu_de, logvar_de))
    log_q = ad.mean_(diag_gaussian_logpdf(x, mu_en, logvar_en))
    log_p = ad.mean_(std_normal_logpdf(x))
    return recon, log_p, log_q


def elbo_batch(batch: np.ndarray, vae: VaeParams,
               rng: np.random.Generator) -> tuple[float, ElboBreakdown]:
    """Negative mean ELBO of a (B, H, W) batch with a fresh noise draw."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 3 or batch.shape[0] == 0:
        raise ValueError("batch must be a nonempty (B, H, W) array")
    y_flat = batch.reshape(batch.shape[0], -1)
    eps = rng.standard_normal((batch.shape[0], vae.latent_dim))
    merged = {k: v for k, v in _merged_store(vae).items()}
    try:
        recon, log_p, log_q = _elbo_terms(merged, y_flat, eps, vae)
    except ad.NonFiniteError as exc:
        raise ad.NonFiniteError(f"ELBO evaluation failed: {exc}") from exc
    breakdown = ElboBreakdown(
        reconstruction_term=float(recon),
        prior_term=float(log_p),
        entropy_term=-float(log_q),
        total=float(recon) + float(log_p) - float(log_q),
    )
    return -breakdown.total, breakdown


def train_vae(dataset: np.ndarray, config: VaeTrainConfig) -> VaeParams:
    """Mini-batch Adam maximization of the ELBO; returns last-epoch parameters.

    The dataset is shuffled once (seeded) and split into fixed mini-batches;
    every batch draws a fresh reparameterization noise set each epoch.  A
    per-epoch loss curve is written to ``config.curve_path`` when given.
    """
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 3 or len(data) == 0:
        raise ValueError("dataset must be a nonempty (N, H, W) array")
    n, height, width = data.shape
    if config.standardize:
        offset, scale = float(data.mean()), float(data.std())
        scale = scale if scale > 0 else 1.0
    else:
        offset, scale = 0.0, 1.0
    vae = init_vae(height, width, config.latent_dim, config.seed,
                   config.encoder_hidden, config.decoder_hidden, offset, scale)
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(n)
    flat = data.reshape(n, -1)[order]
    batches = [flat[lo:lo + config.batch_size] for lo in range(0, n, config.batch_size)]

    store = _merged_store(vae)
    state = AdamState.fresh(store, config.learning_rate)
    curve: list[tuple[int, float]] = []
    d = config.latent_dim

    for epoch in range(config.epochs):
        epoch_losses = []
        for y_batch in batches:
            eps = rng.standard_normal((len(y_batch), d))

            def program(leaves, _inputs):
                recon, log_p, log_q = _elbo_terms(leaves, y_batch, eps, vae)
                return ad.mul(ad.add(ad.sub(recon, log_q), log_p), -1.0)

            try:
                loss, grads = ad.evaluate_with_gradients(program, store)
            except ad.NonFiniteError as exc:
                raise TrainingDiverged(
                    f"VAE training diverged at epoch {epoch}: {exc}",
                    _split_store(store, vae)) from exc
            store, state = adam_step(store, grads, state)
            epoch_losses.append(loss)
        curve.append((epoch, float(np.mean(epoch_losses))))

    if config.curve_path is not None:
        write_loss_curve(config.curve_path, curve)
    return _split_store(store, vae)


def sample_prior(vae: VaeParams, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n decoder-mean fields from x ~ N(0, I); returns (n, H, W)."""
    if n == 0:
        return np.zeros((0, vae.height, vae.width))
    x = rng.standard_normal((n, vae.latent_dim))
    mu, _ = decode_batch(x, dict(vae.decoder.items()), vae)
    return mu.reshape(n, vae.height, vae.width)


# -- checkpointing: parameter container + JSON sidecar ----------------------------


def save_vae(path_prefix: str, vae: VaeParams, seed: int, epochs: int,
             final_loss: float, extra: dict | None = None) -> None:
    _merged_store(vae).save(f"{path_prefix}.bin")
    meta = {
        "d": vae.latent_dim, "H": vae.height, "W": vae.width,
        "encoder_hidden": list(vae.encoder_hidden),
        "decoder_hidden": list(vae.decoder_hidden),
        "offset": vae.offset, "scale": vae.scale,
        "epochs": epochs, "seed": seed, "final_loss": final_loss,
    }
    meta.update(extra or {})
    with open(f"{path_prefix}.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_vae(path_prefix: str) -> tuple[VaeParams, dict]:
    with open(f"{path_prefix}.json") as fh:
        meta = json.load(fh)
    store = ParamStore.load(f"{path_prefix}.bin")
    template = VaeParams(ParamStore(), ParamStore(), meta["d"], meta["H"], meta["W"],
                         tuple(meta["encoder_hidden"]), tuple(meta["decoder_hidden"]),
                         meta["offset"], meta["scale"])
    return _split_store(store, template), meta
