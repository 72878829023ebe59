"""Sequence encoder-decoder variants with an optional stochastic latent space.

Two encoders compress a (leads x frames) measurement into a latent vector:

* ``svs``   - every hidden state of the encoder LSTM is concatenated and
  squeezed through two fully connected ReLU layers before the latent heads.
* ``svs-l`` - only the final encoder hidden state feeds the latent heads.

The matching decoders expand a latent vector back to a (nodes x frames)
output.  ``svs`` expands the latent through two fully connected ReLU layers
into a T-step input sequence for the decoder LSTM; ``svs-l`` maps the latent
to the decoder LSTM initial state and unrolls over a zero input sequence.
Per-frame linear heads (shared across time) emit the output mean column and,
for stochastic models, a log-variance column.

Stochastic models carry latent mean and log-variance heads and train on the
reparameterized bottleneck objective

    mean_eps[ sum_i (x_i - g_i(t + sigma.eps))^2 / sx2_i + log sx2_i ] + beta * KL

with the KL taken against a standard normal.  Deterministic models drop the
variance heads and train on the plain squared Frobenius error.

Internally all forward passes are batched.  Latent tensors have shape
(batch, d); decoder outputs use a time-major stacked layout of shape
(T*batch, nodes) where block t holds the batch rows of frame t.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as tn
from .tensor import LstmParams, ParamStore, Tensor

ARCH_SVS = "svs"
ARCH_SVS_L = "svs-l"

LOGVAR_CLAMP = 10.0
# Output-variance floor sits well above the generic clamp.  A free per-entry
# variance lets the fit term explain residuals away instead of fixing them
# (an inflated sigma_x hides exactly the short-duration scar signature), and
# a collapsed one drowns the upstroke residuals that carry the activation
# pattern under e^10 inverse-variance weights.
OUTPUT_LOGVAR_MIN = -2.0


@dataclass(frozen=True)
class ModelConfig:
    arch: str
    stochastic: bool
    n_leads: int
    n_nodes: int
    n_frames: int
    latent_dim: int = 16
    enc_hidden: int = 64
    dec_hidden: int = 64
    fc_hidden: int = 128
    dec_input_dim: int = 16
    beta: float = 1.0
    n_mc: int = 1

    def validate(self):
        if self.arch not in (ARCH_SVS, ARCH_SVS_L):
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.latent_dim < 1 or self.n_mc < 1:
            raise ValueError("latent_dim and n_mc must be >= 1")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")

    @property
    def variant_name(self) -> str:
        return f"{self.arch}-{'stoch' if self.stochastic else 'det'}"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LatentGaussian:
    """Latent posterior for a batch: mean (B, d); sigma zero when deterministic."""
    mean: Tensor
    sigma: Tensor
    log_var: Tensor | None  # None for deterministic models

    @property
    def batch(self) -> int:
        return self.mean.data.shape[0]


@dataclass
class OutputGaussian:
    """Decoder output in time-major stacked layout (T*B, U)."""
    mean: Tensor
    log_var: Tensor | None  # None => unit variance everywhere
    batch: int
    n_frames: int

    def mean_matrix(self, b: int = 0) -> np.ndarray:
        """The (U, T) mean for batch element b."""
        T, B = self.n_frames, self.batch
        return np.ascontiguousarray(
            self.mean.data.reshape(T, B, -1)[:, b, :].T)

    def variance_matrix(self, b: int = 0) -> np.ndarray:
        T, B = self.n_frames, self.batch
        if self.log_var is None:
            return np.ones_like(self.mean_matrix(b))
        return np.ascontiguousarray(
            np.exp(self.log_var.data.reshape(T, B, -1)[:, b, :].T))


def build_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> ParamStore:
    """Fresh parameters: Xavier-uniform weights, zero biases, forget-gate bias +1."""
    cfg.validate()
    store = ParamStore()

    def dense(name, n_in, n_out):
        store.add(f"{name}.W", tn.xavier_uniform(rng, (n_in, n_out), dtype))
        store.add(f"{name}.b", np.zeros(n_out, dtype))

    def lstm(name, n_in, hidden):
        store.add(f"{name}.W", tn.xavier_uniform(rng, (n_in + hidden, 4 * hidden), dtype))
        bias = np.zeros(4 * hidden, dtype)
        bias[hidden:2 * hidden] = 1.0
        store.add(f"{name}.b", bias)

    lstm("enc.lstm", cfg.n_leads, cfg.enc_hidden)
    if cfg.arch == ARCH_SVS:
        dense("enc.fc1", cfg.n_frames * cfg.enc_hidden, cfg.fc_hidden)
        dense("enc.fc2", cfg.fc_hidden, cfg.fc_hidden)
        head_in = cfg.fc_hidden
    else:
        head_in = cfg.enc_hidden
    dense("enc.mean", head_in, cfg.latent_dim)
    if cfg.stochastic:
        dense("enc.logvar", head_in, cfg.latent_dim)

    if cfg.arch == ARCH_SVS:
        dense("dec.fc1", cfg.latent_dim, cfg.fc_hidden)
        dense("dec.fc2", cfg.fc_hidden, cfg.n_frames * cfg.dec_input_dim)
    else:
        dense("dec.h0", cfg.latent_dim, cfg.dec_hidden)
        dense("dec.c0", cfg.latent_dim, cfg.dec_hidden)
    lstm("dec.lstm", cfg.dec_input_dim, cfg.dec_hidden)
    dense("dec.mean", cfg.dec_hidden, cfg.n_nodes)
    if cfg.stochastic:
        dense("dec.logvar", cfg.dec_hidden, cfg.n_nodes)
    return store


def _dense(params: ParamStore, name: str, x: Tensor) -> Tensor:
    return tn.add(tn.matmul(x, params[f"{name}.W"]), params[f"{name}.b"])


def _unroll_lstm(params: ParamStore, name: str, inputs: list, h0: Tensor, c0: Tensor) -> list:
    cell = LstmParams(params[f"{name}.W"], params[f"{name}.b"])
    h, c = h0, c0
    states = []
    for x_t in inputs:
        h, c = tn.lstm_step(x_t, h, c, cell)
        states.append(h)
    return states


def _zeros(shape, like: Tensor) -> Tensor:
    return Tensor(np.zeros(shape, dtype=like.data.dtype))


def encode_batch(y_batch: np.ndarray, params: ParamStore, cfg: ModelConfig) -> LatentGaussian:
    """Encode a (B, M, T) batch of measurements into the latent posterior."""
    if y_batch.ndim != 3 or y_batch.shape[1] != cfg.n_leads or y_batch.shape[2] != cfg.n_frames:
        raise ValueError(f"expected (B, {cfg.n_leads}, {cfg.n_frames}) input, got {y_batch.shape}")
    B = y_batch.shape[0]
    w_dtype = params["enc.lstm.W"].data.dtype
    steps = [Tensor(np.ascontiguousarray(y_batch[:, :, t], dtype=w_dtype))
             for t in range(cfg.n_frames)]
    h0 = _zeros((B, cfg.enc_hidden), params["enc.lstm.W"])
    states = _unroll_lstm(params, "enc.lstm", steps, h0, h0)
    if cfg.arch == ARCH_SVS:
        feats = tn.concat(states, axis=1)
        feats = tn.relu(_dense(params, "enc.fc1", feats))
        feats = tn.relu(_dense(params, "enc.fc2", feats))
    else:
        feats = states[-1]
    mean = _dense(params, "enc.mean", feats)
    if cfg.stochastic:
        log_var = tn.clip(_dense(params, "enc.logvar", feats), -LOGVAR_CLAMP, LOGVAR_CLAMP)
        sigma = tn.exp(tn.mul(log_var, Tensor(np.asarray(0.5, dtype=w_dtype))))
        return LatentGaussian(mean=mean, sigma=sigma, log_var=log_var)
    sigma = _zeros((B, cfg.latent_dim), mean)
    return LatentGaussian(mean=mean, sigma=sigma, log_var=None)


def encode(y: np.ndarray, params: ParamStore, cfg: ModelConfig) -> LatentGaussian:
    """Encode a single (M, T) measurement (batch of one)."""
    return encode_batch(np.asarray(y)[None, :, :], params, cfg)


def sample_latent(lat: LatentGaussian, eps: np.ndarray) -> Tensor:
    """Reparameterized draw mean + sigma*eps; gradients flow to mean and sigma only."""
    eps = np.asarray(eps, dtype=lat.mean.data.dtype)
    if eps.ndim == 1:
        eps = eps[None, :]
    if eps.shape != lat.mean.data.shape:
        raise ValueError(f"eps shape {eps.shape} does not match latent {lat.mean.data.shape}")
    return tn.add(lat.mean, tn.mul(lat.sigma, Tensor(eps)))


def decode_batch(w: Tensor, params: ParamStore, cfg: ModelConfig) -> OutputGaussian:
    """Decode (B, d) latent vectors into the stacked (T*B, U) output Gaussian."""
    B = w.data.shape[0]
    T = cfg.n_frames
    if cfg.arch == ARCH_SVS:
        z = tn.relu(_dense(params, "dec.fc1", w))
        z = tn.relu(_dense(params, "dec.fc2", z))
        inputs = [tn.slice_axis(z, 1, t * cfg.dec_input_dim, (t + 1) * cfg.dec_input_dim)
                  for t in range(T)]
        h0 = _zeros((B, cfg.dec_hidden), w)
        c0 = h0
    else:
        h0 = _dense(params, "dec.h0", w)
        c0 = _dense(params, "dec.c0", w)
        zero_in = _zeros((B, cfg.dec_input_dim), w)
        inputs = [zero_in] * T
    states = _unroll_lstm(params, "dec.lstm", inputs, h0, c0)
    stacked = tn.concat(states, axis=0)
    mean = _dense(params, "dec.mean", stacked)
    log_var = None
    if cfg.stochastic:
        log_var = tn.clip(_dense(params, "dec.logvar", stacked),
                          OUTPUT_LOGVAR_MIN, LOGVAR_CLAMP)
    return OutputGaussian(mean=mean, log_var=log_var, batch=B, n_frames=T)


def decode(w, params: ParamStore, cfg: ModelConfig) -> OutputGaussian:
    """Decode a single latent vector (accepts a 1-D array or a (1, d) Tensor)."""
    if not isinstance(w, Tensor):
        w = Tensor(np.asarray(w, dtype=params["dec.mean.W"].data.dtype)[None, :])
    return decode_batch(w, params, cfg)


def stack_targets(x_list: list) -> np.ndarray:
    """Arrange per-case (U, T) targets into the decoder's (T*B, U) layout."""
    arr = np.stack([np.asarray(x) for x in x_list])     # (B, U, T)
    return np.ascontiguousarray(arr.transpose(2, 0, 1).reshape(-1, arr.shape[1]))


def kl_to_standard_normal(lat: LatentGaussian) -> Tensor:
    """Closed-form KL(N(mean, sigma^2) || N(0, I)), summed over batch and dims."""
    if lat.log_var is None:
        raise ValueError("KL undefined for a deterministic latent (sigma = 0)")
    var = tn.exp(lat.log_var)
    t2 = tn.mul(lat.mean, lat.mean)
    inner = tn.sub(tn.sub(tn.add(var, t2), Tensor(np.asarray(1.0, lat.mean.data.dtype))),
                   lat.log_var)
    return tn.mul(tn.sum(inner), Tensor(np.asarray(0.5, lat.mean.data.dtype)))


def nll_term(x_stacked: np.ndarray, out: OutputGaussian) -> Tensor:
    """Summed Gaussian fit term: (x-g)^2 / sx2 + log sx2 over every entry."""
    x_stacked = np.asarray(x_stacked, dtype=out.mean.data.dtype)
    if x_stacked.shape != out.mean.data.shape:
        raise ValueError(f"target shape {x_stacked.shape} vs output {out.mean.data.shape}")
    diff = tn.sub(Tensor(x_stacked), out.mean)
    sq = tn.mul(diff, diff)
    if out.log_var is None:
        return tn.sum(sq)
    inv_var = tn.exp(tn.mul(out.log_var, Tensor(np.asarray(-1.0, out.mean.data.dtype))))
    return tn.sum(tn.add(tn.mul(sq, inv_var), out.log_var))


def frobenius_term(x_stacked: np.ndarray, out: OutputGaussian) -> Tensor:
    """Plain squared Frobenius error, ignoring any variance head."""
    x_stacked = np.asarray(x_stacked, dtype=out.mean.data.dtype)
    diff = tn.sub(Tensor(x_stacked), out.mean)
    return tn.sum(tn.mul(diff, diff))


def ib_objective(x_stacked: np.ndarray, lat: LatentGaussian, decode_fn, beta: float,
                 eps_draws: list) -> Tensor:
    """Monte-Carlo bottleneck objective from explicit noise draws.

    `decode_fn` maps a latent Tensor to an OutputGaussian, so toy decoders can
    stand in for the full network in tests and diagnostics.
    """
    acc = None
    for eps in eps_draws:
        out = decode_fn(sample_latent(lat, eps))
        term = nll_term(x_stacked, out)
        acc = term if acc is None else tn.add(acc, term)
    dtype = lat.mean.data.dtype
    loss = tn.mul(acc, Tensor(np.asarray(1.0 / len(eps_draws), dtype)))
    if beta != 0.0:
        kl = kl_to_standard_normal(lat)
        loss = tn.add(loss, tn.mul(kl, Tensor(np.asarray(beta, dtype))))
    return loss


def loss_ib(x, y, params: ParamStore, cfg: ModelConfig, rng: np.random.Generator) -> Tensor:
    """Reparameterized training objective for one case (or a prepared batch).

    Accepts single-case (U, T) / (M, T) arrays or batched ((B,U,T), (B,M,T)).
    One encoder pass; `cfg.n_mc` decoder passes on independent draws.
    """
    if not cfg.stochastic:
        raise ValueError("loss_ib requires a stochastic model configuration")
    x = np.asarray(x)
    y = np.asarray(y)
    if x.ndim == 2:
        x, y = x[None], y[None]
    lat = encode_batch(y, params, cfg)
    draws = [rng.standard_normal(lat.mean.data.shape) for _ in range(cfg.n_mc)]
    x_stacked = stack_targets(list(x))
    return ib_objective(x_stacked, lat, lambda w: decode_batch(w, params, cfg),
                        cfg.beta, draws)


def loss_deterministic(x, y, params: ParamStore, cfg: ModelConfig) -> Tensor:
    """Squared Frobenius reconstruction error through the mean latent."""
    if cfg.stochastic:
        raise ValueError("loss_deterministic requires a deterministic model configuration")
    x = np.asarray(x)
    y = np.asarray(y)
    if x.ndim == 2:
        x, y = x[None], y[None]
    lat = encode_batch(y, params, cfg)
    out = decode_batch(lat.mean, params, cfg)
    return frobenius_term(stack_targets(list(x)), out)


def reconstruct_batch(y_batch: np.ndarray, params: ParamStore, cfg: ModelConfig) -> np.ndarray:
    """Mean-latent, mean-output reconstructions: (B, U, T), no sampling."""
    lat = encode_batch(y_batch, params, cfg)
    out = decode_batch(lat.mean, params, cfg)
    B, T = out.batch, out.n_frames
    return np.ascontiguousarray(out.mean.data.reshape(T, B, -1).transpose(1, 2, 0))


def reconstruct(y: np.ndarray, params: ParamStore, cfg: ModelConfig) -> np.ndarray:
    """Reconstruct one (M, T) measurement into a (U, T) output."""
    return reconstruct_batch(np.asarray(y)[None], params, cfg)[0]
