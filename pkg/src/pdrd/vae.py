"""Beta-weighted variational autoencoder over pixel spectra.

Architecture: encoder of ReLU layers (3 x 400), two linear heads giving the
latent mean and log-variance (k each), a decoder of ReLU layers (6 x 20) and
a final linear layer back to B bands. The training objective minimised is

    mean_i [ 0.5 * ||x_i - xhat_i||^2 + beta * KL(N(mu_i, sigma_i^2) || N(0, I)) ]

i.e. the negated beta-weighted evidence lower bound with a unit-variance
Gaussian reconstruction likelihood and one reparameterised sample per pixel.
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .hsi_io import HsiCube, flatten
from .nn import (
    AdamState,
    DenseLayer,
    ParameterBuffer,
    adam_step,
    dense_backward,
    dense_forward,
    grad_check,
    make_rng,
    read_checkpoint,
    write_checkpoint,
)

__all__ = [
    "LOGVAR_MIN",
    "LOGVAR_MAX",
    "TrainConfig",
    "VaeModel",
    "LatentField",
    "TrainReport",
    "TrainingError",
    "encode",
    "reparameterize",
    "decode",
    "kl_to_standard_normal",
    "loss",
    "forward_loss",
    "loss_and_grads",
    "check_gradients",
    "train",
    "latent_field",
    "save_model",
    "load_model",
]

LOGVAR_MIN = -20.0
LOGVAR_MAX = 20.0


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    k: int = 20
    beta: float = 10.0
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 100
    patience: int = 20
    seed: int = 0
    encoder_width: int = 400
    encoder_depth: int = 3
    decoder_width: int = 20
    decoder_depth: int = 6

    def validate(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.beta < 1:
            raise ValueError("beta must be >= 1")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("learning_rate, batch_size and epochs must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if min(self.encoder_width, self.encoder_depth, self.decoder_width, self.decoder_depth) < 1:
            raise ValueError("layer widths and depths must be >= 1")


class VaeModel:
    """Encoder/decoder parameters plus the hyperparameters they were trained with.

    ``layers`` is ordered encoder hidden, mean head, log-variance head,
    decoder hidden, decoder output. Parameters live in one flat buffer
    (``model.params.flat``).
    """

    def __init__(self, layers: List[DenseLayer], beta: float, config: Optional[TrainConfig] = None):
        n_enc = next(i for i, layer in enumerate(layers) if layer.activation == "identity")
        self.n_encoder = n_enc
        self.layers = list(layers)
        self.bands = layers[0].in_dim
        self.k = layers[n_enc].out_dim
        self.beta = float(beta)
        self.config = config or TrainConfig(k=self.k, beta=self.beta)
        self._check_topology()
        names = (
            [f"encoder{i}" for i in range(n_enc)]
            + ["mu_head", "logvar_head"]
            + [f"decoder{i}" for i in range(len(layers) - n_enc - 3)]
            + ["decoder_out"]
        )
        self.params = ParameterBuffer(self.layers, names)

    def _check_topology(self) -> None:
        n = self.n_encoder
        L = self.layers
        if len(L) < n + 4:
            raise ValueError("model needs encoder, two heads, at least one decoder layer and an output layer")
        if L[n].activation != "identity" or L[n + 1].activation != "identity":
            raise ValueError("latent heads must be identity layers")
        if L[n].in_dim != L[n - 1].out_dim or L[n + 1].in_dim != L[n - 1].out_dim:
            raise ValueError("latent head input width must equal encoder width")
        if L[n + 1].out_dim != self.k or L[n + 2].in_dim != self.k:
            raise ValueError("log-variance head and decoder input must have width k")
        if L[-1].activation != "identity" or L[-1].out_dim != self.bands:
            raise ValueError("decoder output must be an identity layer of width B")
        for a, b in zip(L[:n], L[1:n]):
            if a.out_dim != b.in_dim:
                raise ValueError("encoder layer widths are inconsistent")
        for a, b in zip(L[n + 2 : -1], L[n + 3 :]):
            if a.out_dim != b.in_dim:
                raise ValueError("decoder layer widths are inconsistent")
        if self.beta < 1:
            raise ValueError("beta must be >= 1")

    @classmethod
    def initialized(cls, bands: int, config: TrainConfig, rng: Optional[np.random.Generator] = None) -> "VaeModel":
        config.validate()
        rng = rng if rng is not None else make_rng(config.seed)
        layers = []
        width = bands
        for _ in range(config.encoder_depth):
            layers.append(DenseLayer.initialized(width, config.encoder_width, "relu", rng))
            width = config.encoder_width
        layers.append(DenseLayer.initialized(width, config.k, "identity", rng))
        layers.append(DenseLayer.initialized(width, config.k, "identity", rng))
        width = config.k
        for _ in range(config.decoder_depth):
            layers.append(DenseLayer.initialized(width, config.decoder_width, "relu", rng))
            width = config.decoder_width
        layers.append(DenseLayer.initialized(width, bands, "identity", rng))
        return cls(layers, config.beta, config)

    @property
    def encoder_hidden(self) -> List[DenseLayer]:
        return self.layers[: self.n_encoder]

    @property
    def mu_head(self) -> DenseLayer:
        return self.layers[self.n_encoder]

    @property
    def logvar_head(self) -> DenseLayer:
        return self.layers[self.n_encoder + 1]

    @property
    def decoder_hidden(self) -> List[DenseLayer]:
        return self.layers[self.n_encoder + 2 : -1]

    @property
    def decoder_out(self) -> DenseLayer:
        return self.layers[-1]

    def with_beta(self, beta: float) -> "VaeModel":
        """Copy of the model sharing no storage, with a different loss weight."""
        layers = [DenseLayer(l.weights.copy(), l.biases.copy(), l.activation) for l in self.layers]
        return VaeModel(layers, beta, self.config)


@dataclass(frozen=True)
class LatentField:
    """Per-pixel latent Gaussians laid out on the image grid, arrays (H, W, k)."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape or self.mu.ndim != 3:
            raise ValueError("mu and sigma must both be (height, width, k)")
        if not (np.all(np.isfinite(self.sigma)) and np.all(self.sigma > 0)):
            raise ValueError("sigma must be finite and strictly positive")
        if not np.all(np.isfinite(self.mu)):
            raise ValueError("mu must be finite")

    @property
    def height(self) -> int:
        return self.mu.shape[0]

    @property
    def width(self) -> int:
        return self.mu.shape[1]

    @property
    def k(self) -> int:
        return self.mu.shape[2]


@dataclass
class TrainReport:
    total: List[float] = field(default_factory=list)
    recon: List[float] = field(default_factory=list)
    kl: List[float] = field(default_factory=list)
    seconds: List[float] = field(default_factory=list)
    stopped_early: bool = False

    @property
    def epochs(self) -> int:
        return len(self.total)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "total", "recon", "kl", "seconds"])
            for i in range(self.epochs):
                writer.writerow([i + 1, repr(self.total[i]), repr(self.recon[i]), repr(self.kl[i]),
                                 f"{self.seconds[i]:.6f}"])


# --------------------------------------------------------------------------
# Forward pieces
# --------------------------------------------------------------------------


def _checked(out: np.ndarray, name: str) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite activations in layer {name}")
    return out


def encode(model: VaeModel, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Latent mean and (clamped) log-variance for a (batch, B) spectrum array."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.bands:
        raise ValueError(f"expected (batch, {model.bands}) input, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("input spectra contain non-finite values")
    h = x
    for i, layer in enumerate(model.encoder_hidden):
        h, _ = dense_forward(layer, h)
        _checked(h, f"encoder{i}")
    mu, _ = dense_forward(model.mu_head, h)
    logvar, _ = dense_forward(model.logvar_head, h)
    _checked(mu, "mu_head")
    _checked(logvar, "logvar_head")
    return mu, np.clip(logvar, LOGVAR_MIN, LOGVAR_MAX)


def reparameterize(mu: np.ndarray, logvar: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw ``z = mu + exp(logvar / 2) * eps`` with ``eps ~ N(0, I)`` from ``rng``."""
    if mu.shape != logvar.shape:
        raise ValueError("mu and logvar shapes differ")
    eps = rng.standard_normal(mu.shape)
    return mu + np.exp(0.5 * np.maximum(logvar, LOGVAR_MIN)) * eps


def decode(model: VaeModel, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != model.k:
        raise ValueError(f"expected (batch, {model.k}) latent input, got {z.shape}")
    h = z
    for i, layer in enumerate(model.decoder_hidden):
        h, _ = dense_forward(layer, h)
        _checked(h, f"decoder{i}")
    out, _ = dense_forward(model.decoder_out, h)
    return _checked(out, "decoder_out")


def kl_to_standard_normal(mu: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    """KL(N(mu, diag(exp(logvar))) || N(0, I)) for each row."""
    mu = np.atleast_2d(mu)
    logvar = np.atleast_2d(logvar)
    if mu.shape != logvar.shape:
        raise ValueError("mu and logvar shapes differ")
    # expm1(lv) - lv >= 0 holds in floating point too, unlike exp(lv) - 1 - lv
    return 0.5 * np.sum(np.maximum(np.expm1(logvar) - logvar, 0.0) + mu * mu, axis=1)


def loss(model: VaeModel, x, xhat, mu, logvar) -> Tuple[float, float, float]:
    """Return ``(total, recon_term, kl_term)`` averaged over the batch."""
    x, xhat = np.atleast_2d(x), np.atleast_2d(xhat)
    if x.shape != xhat.shape:
        raise ValueError("x and xhat shapes differ")
    diff = x - xhat
    recon = float(np.mean(0.5 * np.sum(diff * diff, axis=1)))
    kl = float(np.mean(kl_to_standard_normal(mu, logvar)))
    return recon + model.beta * kl, recon, kl


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


def _forward(model: VaeModel, x: np.ndarray, eps: np.ndarray):
    n = x.shape[0]
    layers = model.layers
    ne = model.n_encoder
    caches = [None] * len(layers)
    h = x
    for i in range(ne):
        h, caches[i] = dense_forward(layers[i], h)
    mu, caches[ne] = dense_forward(layers[ne], h)
    raw_logvar, caches[ne + 1] = dense_forward(layers[ne + 1], h)
    logvar = np.clip(raw_logvar, LOGVAR_MIN, LOGVAR_MAX)
    std = np.exp(0.5 * logvar)
    g = mu + std * eps
    for i in range(ne + 2, len(layers)):
        g, caches[i] = dense_forward(layers[i], g)
    diff = g - x
    recon = 0.5 * float(np.sum(diff * diff)) / n
    kl = 0.5 * float(np.sum(np.maximum(np.expm1(logvar) - logvar, 0.0) + mu * mu)) / n
    return caches, mu, raw_logvar, std, diff, recon, kl


def _preacts(model: VaeModel, caches) -> List[np.ndarray]:
    return [c.preact for layer, c in zip(model.layers, caches) if layer.activation == "relu"]


def forward_loss(model: VaeModel, x: np.ndarray, eps: np.ndarray, *, want_preacts: bool = False):
    """Loss terms for batch ``x`` with fixed noise ``eps``, without gradients."""
    caches, _, _, _, _, recon, kl = _forward(model, x, eps)
    out = (recon + model.beta * kl, recon, kl)
    return out + (_preacts(model, caches),) if want_preacts else out


def loss_and_grads(model: VaeModel, x: np.ndarray, eps: np.ndarray, *, want_preacts: bool = False):
    """Loss terms for batch ``x`` with fixed noise ``eps``; gradients land in ``model.params.grad``.

    With ``want_preacts`` the ReLU pre-activations of every hidden layer are
    returned as a fourth element (used to keep gradient probes off kinks).
    """
    n = x.shape[0]
    layers = model.layers
    ne = model.n_encoder
    grads = model.params.grad_views
    caches, mu, raw_logvar, std, diff, recon, kl = _forward(model, x, eps)
    total = recon + model.beta * kl

    upstream = diff / n
    for i in range(len(layers) - 1, ne + 1, -1):
        upstream, _, _ = dense_backward(layers[i], caches[i], upstream,
                                        out_weights=grads[i][0], out_biases=grads[i][1])
    dz = upstream
    d_mu = dz + (model.beta / n) * mu
    d_logvar = 0.5 * dz * eps * std + (0.5 * model.beta / n) * (std * std - 1.0)
    d_logvar *= (raw_logvar >= LOGVAR_MIN) & (raw_logvar <= LOGVAR_MAX)
    dh, _, _ = dense_backward(layers[ne], caches[ne], d_mu, out_weights=grads[ne][0], out_biases=grads[ne][1])
    dh2, _, _ = dense_backward(layers[ne + 1], caches[ne + 1], d_logvar,
                               out_weights=grads[ne + 1][0], out_biases=grads[ne + 1][1])
    dh += dh2
    for i in range(ne - 1, -1, -1):
        dh, _, _ = dense_backward(layers[i], caches[i], dh, need_input_grad=i > 0,
                                  out_weights=grads[i][0], out_biases=grads[i][1])
    if want_preacts:
        return total, recon, kl, _preacts(model, caches)
    return total, recon, kl


def check_gradients(
    model: VaeModel,
    x: np.ndarray,
    eps: np.ndarray,
    probes: int = 60,
    h: float = 1e-5,
    seed: int = 0,
    kink: float = 1e-6,
) -> float:
    """Max relative error of :func:`loss_and_grads` against central differences.

    Probes are spread over every parameter block. A probe is redrawn when
    the +/-h perturbation flips any ReLU mask or leaves a pre-activation
    within ``kink`` of zero, since the loss is not differentiable there.
    """
    flat = model.params.flat
    saved = flat.copy()

    def loss_fn(params):
        flat[:] = params
        return forward_loss(model, x, eps)[0]

    def grad_fn(params):
        flat[:] = params
        loss_and_grads(model, x, eps)
        return model.params.grad.copy()

    ref = [p > 0 for p in forward_loss(model, x, eps, want_preacts=True)[3]]

    def reject(params, idx):
        orig = flat[idx]
        try:
            for step in (h, -h):
                flat[idx] = orig + step
                pre = forward_loss(model, x, eps, want_preacts=True)[3]
                for p, mask in zip(pre, ref):
                    if np.any(np.abs(p) < kink) or np.any((p > 0) != mask):
                        return True
            return False
        finally:
            flat[idx] = orig

    try:
        return grad_check(loss_fn, grad_fn, saved.copy(), probes, h, rng=make_rng(seed),
                          strata=list(model.params.blocks.values()), reject=reject)
    finally:
        flat[:] = saved


def train(samples: np.ndarray, config: TrainConfig, log=None) -> Tuple[VaeModel, TrainReport]:
    """Fit a model to every row of the N x B ``samples`` matrix.

    Mini-batches are reshuffled each epoch; training stops after
    ``config.epochs`` or when the epoch loss has not improved for
    ``config.patience`` epochs. ``log``, if given, is called with a one-line
    progress string after each epoch.
    """
    config.validate()
    samples = np.ascontiguousarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise ValueError("samples must be an N x B matrix")
    n, bands = samples.shape
    if n < config.batch_size:
        raise ValueError(f"need at least batch_size={config.batch_size} samples, got {n}")
    init_seq, shuffle_seq, noise_seq = np.random.SeedSequence(config.seed).spawn(3)
    model = VaeModel.initialized(bands, config, make_rng(init_seq))
    shuffle_rng = make_rng(shuffle_seq)
    noise_rng = make_rng(noise_seq)
    adam = AdamState.zeros(model.params.size, learning_rate=config.learning_rate)
    report = TrainReport()
    best = np.inf
    stale = 0
    bs = config.batch_size
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n)
        sums = np.zeros(3)
        for b, start in enumerate(range(0, n, bs)):
            x = samples[order[start : start + bs]]
            eps = noise_rng.standard_normal((x.shape[0], config.k))
            total, recon, kl = loss_and_grads(model, x, eps)
            if not np.isfinite(total):
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}, batch {b + 1}")
            adam_step(model.params.flat, model.params.grad, adam, model.params.blocks)
            sums += np.array([total, recon, kl]) * x.shape[0]
        sums /= n
        report.total.append(float(sums[0]))
        report.recon.append(float(sums[1]))
        report.kl.append(float(sums[2]))
        report.seconds.append(time.perf_counter() - t0)
        if log is not None:
            log(f"epoch {epoch + 1:4d}  loss {sums[0]:.6f}  recon {sums[1]:.6f}  kl {sums[2]:.6f}")
        if sums[0] < best:
            best = sums[0]
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                report.stopped_early = True
                break
    if not np.all(np.isfinite(model.params.flat)):
        raise TrainingError("training produced non-finite parameters")
    model.adam = adam
    return model, report


def latent_field(model: VaeModel, cube: HsiCube, chunk: int = 8192) -> LatentField:
    """Encode every pixel of ``cube`` into (mu, sigma) grids."""
    if cube.bands != model.bands:
        raise ValueError(f"cube has {cube.bands} bands, model expects {model.bands}")
    samples, _ = flatten(cube)
    mus, sigmas = [], []
    for start in range(0, samples.shape[0], chunk):
        mu, logvar = encode(model, samples[start : start + chunk])
        mus.append(mu)
        sigmas.append(np.exp(0.5 * logvar))
    shape = (cube.height, cube.width, model.k)
    return LatentField(np.concatenate(mus).reshape(shape), np.concatenate(sigmas).reshape(shape))


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------


def save_model(model: VaeModel, path, include_optimizer: bool = True) -> None:
    adam = getattr(model, "adam", None) if include_optimizer else None
    with open(path, "wb") as fh:
        write_checkpoint(fh, model.layers, adam)


def load_model(path, beta: float = 1.0, config: Optional[TrainConfig] = None) -> VaeModel:
    with open(Path(path), "rb") as fh:
        layers, adam = read_checkpoint(fh)
    model = VaeModel(layers, config.beta if config else beta, config)
    if adam is not None:
        model.adam = adam
    return model


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
