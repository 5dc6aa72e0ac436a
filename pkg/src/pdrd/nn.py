"""Dense layers, hand-written backprop, Adam and gradient checking.

Everything runs in float64. Random streams come from numpy's PCG64 bit
generator (``numpy.random.Generator(PCG64(seed))``), whose output is fixed
across platforms for a given seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "ACTIVATIONS",
    "DenseLayer",
    "DenseCache",
    "AdamState",
    "make_rng",
    "dense_forward",
    "dense_backward",
    "adam_step",
    "grad_check",
    "ParameterBuffer",
    "write_checkpoint",
    "read_checkpoint",
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
]

ACTIVATIONS = ("identity", "relu")
_ACT_TAG = {"identity": 0, "relu": 1}
_TAG_ACT = {v: k for k, v in _ACT_TAG.items()}

CHECKPOINT_MAGIC = b"PDRD"
CHECKPOINT_VERSION = 1


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; the only RNG constructor used by the package."""
    return np.random.Generator(np.random.PCG64(seed))


@dataclass
class DenseLayer:
    """Fully connected layer ``act(W @ x + b)`` with W of shape (out, in)."""

    weights: np.ndarray
    biases: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.weights.ndim != 2 or self.biases.shape != (self.weights.shape[0],):
            raise ValueError(
                f"inconsistent layer shapes: weights {self.weights.shape}, biases {self.biases.shape}"
            )

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def n_params(self) -> int:
        return self.weights.size + self.biases.size

    @classmethod
    def initialized(cls, in_dim: int, out_dim: int, activation: str, rng: np.random.Generator) -> "DenseLayer":
        """He-normal weights for ReLU layers, Xavier-normal for identity layers; zero biases."""
        if activation == "relu":
            std = np.sqrt(2.0 / in_dim)
        else:
            std = np.sqrt(2.0 / (in_dim + out_dim))
        weights = rng.standard_normal((out_dim, in_dim)) * std
        return cls(weights, np.zeros(out_dim), activation)


@dataclass
class DenseCache:
    inputs: np.ndarray
    preact: np.ndarray


def dense_forward(layer: DenseLayer, x: np.ndarray) -> Tuple[np.ndarray, DenseCache]:
    """Forward pass over a (batch, in) array; returns activations and the backward cache."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layer.in_dim:
        raise ValueError(f"input shape {x.shape} does not match layer in-dim {layer.in_dim}")
    pre = x @ layer.weights.T
    pre += layer.biases
    if layer.activation == "relu":
        out = np.maximum(pre, 0.0)
    else:
        out = pre
    return out, DenseCache(x, pre)


def dense_backward(
    layer: DenseLayer,
    cache: DenseCache,
    upstream: np.ndarray,
    *,
    need_input_grad: bool = True,
    out_weights: Optional[np.ndarray] = None,
    out_biases: Optional[np.ndarray] = None,
) -> Tuple[Optional[np.ndarray], np.ndarray, np.ndarray]:
    """Chain rule through one layer.

    Returns ``(d_input, d_weights, d_biases)``. ReLU uses subgradient 0 at 0.
    ``out_weights``/``out_biases`` let the caller receive parameter gradients
    in preallocated storage.
    """
    if upstream.shape != cache.preact.shape:
        raise ValueError(f"upstream gradient shape {upstream.shape} != output shape {cache.preact.shape}")
    if layer.activation == "relu":
        delta = upstream * (cache.preact > 0.0)
    else:
        delta = upstream
    d_w = np.matmul(delta.T, cache.inputs, out=out_weights)
    d_b = np.sum(delta, axis=0, out=out_biases)
    d_x = delta @ layer.weights if need_input_grad else None
    return d_x, d_w, d_b


class ParameterBuffer:
    """All layer parameters packed into one flat float64 vector.

    Each layer's ``weights``/``biases`` become views into ``flat``, and a
    matching ``grad`` vector exposes per-layer gradient views, so optimizer
    updates are single vectorized operations.
    """

    def __init__(self, layers: Sequence[DenseLayer], names: Sequence[str]):
        if len(layers) != len(names):
            raise ValueError("one name per layer required")
        total = sum(layer.n_params for layer in layers)
        self.flat = np.empty(total)
        self.grad = np.zeros(total)
        self.blocks: Dict[str, slice] = {}
        self.grad_views: List[Tuple[np.ndarray, np.ndarray]] = []
        offset = 0
        for layer, name in zip(layers, names):
            w_size, b_size = layer.weights.size, layer.biases.size
            w_sl = slice(offset, offset + w_size)
            b_sl = slice(offset + w_size, offset + w_size + b_size)
            self.flat[w_sl] = layer.weights.ravel()
            self.flat[b_sl] = layer.biases
            layer.weights = self.flat[w_sl].reshape(layer.weights.shape)
            layer.biases = self.flat[b_sl]
            self.grad_views.append((self.grad[w_sl].reshape(layer.weights.shape), self.grad[b_sl]))
            self.blocks[f"{name}.weights"] = w_sl
            self.blocks[f"{name}.biases"] = b_sl
            offset += w_size + b_size

    @property
    def size(self) -> int:
        return self.flat.size


@dataclass
class AdamState:
    """Adam moment accumulators for a flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    _scratch: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    @classmethod
    def zeros(cls, n: int, learning_rate: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, learning_rate, beta1, beta2, eps)


def adam_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamState,
    blocks: Optional[Mapping[str, slice]] = None,
) -> Tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update, applied to ``params`` in place.

    Raises ``FloatingPointError`` naming the first offending block (from
    ``blocks``) if any gradient entry is non-finite; nothing is updated then.
    """
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}, moments {state.m.shape}")
    # a sum is finite iff every term is (barring overflow, which is also worth rejecting)
    if not np.isfinite(np.sum(grads)):
        nonfinite = np.flatnonzero(~np.isfinite(grads))
        bad = int(nonfinite[0]) if nonfinite.size else int(np.argmax(np.abs(grads)))
        name = "parameters"
        for block, sl in (blocks or {}).items():
            if sl.start <= bad < sl.stop:
                name = block
                break
        raise FloatingPointError(f"non-finite gradient in {name} (flat index {bad})")

    if state._scratch is None or state._scratch.shape != params.shape:
        state._scratch = np.empty_like(params)
    tmp = state._scratch
    b1, b2 = state.beta1, state.beta2
    state.step += 1
    t = state.step

    state.m *= b1
    np.multiply(grads, 1.0 - b1, out=tmp)
    state.m += tmp
    state.v *= b2
    np.multiply(grads, grads, out=tmp)
    tmp *= 1.0 - b2
    state.v += tmp

    # lr * m_hat / (sqrt(v_hat) + eps) with the bias corrections folded into scalars
    root_c2 = np.sqrt(1.0 - b2**t)
    step_size = state.learning_rate * root_c2 / (1.0 - b1**t)
    np.sqrt(state.v, out=tmp)
    tmp += state.eps * root_c2
    np.divide(state.m, tmp, out=tmp)
    tmp *= step_size
    params -= tmp
    return params, state


def grad_check(
    loss_fn: Callable[[np.ndarray], float],
    grad_fn: Callable[[np.ndarray], np.ndarray],
    params: np.ndarray,
    probes: int = 50,
    h: float = 1e-5,
    *,
    rng: Optional[np.random.Generator] = None,
    strata: Optional[Sequence[slice]] = None,
    reject: Optional[Callable[[np.ndarray, int], bool]] = None,
    floor: float = 1e-6,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``. Probed coordinates
    are drawn at random (spread evenly over ``strata`` when given); a probe for
    which ``reject(params, index)`` is true is skipped and redrawn, up to a
    bounded number of attempts.
    """
    params = np.array(params, dtype=np.float64, copy=True)
    if params.size == 0 or probes <= 0:
        return 0.0
    rng = rng if rng is not None else make_rng(0)
    analytic = np.asarray(grad_fn(params.copy()), dtype=np.float64)
    if analytic.shape != params.shape:
        raise ValueError("grad_fn must return an array shaped like params")

    strata = list(strata) if strata else [slice(0, params.size)]
    per = max(1, int(np.ceil(probes / len(strata))))
    worst = 0.0
    for sl in strata:
        lo, hi = sl.start or 0, sl.stop if sl.stop is not None else params.size
        n = hi - lo
        if n <= 0:
            continue
        candidates = rng.permutation(n) + lo if n <= 4 * per else rng.integers(lo, hi, size=8 * per)
        used = 0
        for idx in candidates:
            if used >= per:
                break
            idx = int(idx)
            if reject is not None and reject(params, idx):
                continue
            orig = params[idx]
            params[idx] = orig + h
            f_plus = loss_fn(params)
            params[idx] = orig - h
            f_minus = loss_fn(params)
            params[idx] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError(f"non-finite loss while probing coordinate {idx}")
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = analytic[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
            used += 1
    return worst


# --------------------------------------------------------------------------
# Checkpoint file
# --------------------------------------------------------------------------
#
# magic "PDRD" | u32 version | u32 layer count
# per layer: u32 out | u32 in | u8 activation tag
# parameters: per layer, weights (row-major) then biases, little-endian f64
# u8 has_adam; if 1: u64 step, f64 lr, beta1, beta2, eps, then m, v (f64)


def write_checkpoint(fh: BinaryIO, layers: Sequence[DenseLayer], adam: Optional[AdamState] = None) -> None:
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(layers)))
    for layer in layers:
        fh.write(struct.pack("<IIB", layer.out_dim, layer.in_dim, _ACT_TAG[layer.activation]))
    for layer in layers:
        fh.write(np.ascontiguousarray(layer.weights, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(layer.biases, dtype="<f8").tobytes())
    if adam is None:
        fh.write(b"\x00")
        return
    fh.write(b"\x01")
    fh.write(struct.pack("<Qdddd", adam.step, adam.learning_rate, adam.beta1, adam.beta2, adam.eps))
    fh.write(np.ascontiguousarray(adam.m, dtype="<f8").tobytes())
    fh.write(np.ascontiguousarray(adam.v, dtype="<f8").tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError("truncated checkpoint")
    return buf


def read_checkpoint(fh: BinaryIO) -> Tuple[List[DenseLayer], Optional[AdamState]]:
    if _read_exact(fh, 4) != CHECKPOINT_MAGIC:
        raise ValueError("not a PDRD checkpoint (bad magic)")
    version, n_layers = struct.unpack("<II", _read_exact(fh, 8))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    dims = [struct.unpack("<IIB", _read_exact(fh, 9)) for _ in range(n_layers)]
    layers = []
    for out_dim, in_dim, tag in dims:
        if tag not in _TAG_ACT:
            raise ValueError(f"unknown activation tag {tag}")
        w = np.frombuffer(_read_exact(fh, 8 * out_dim * in_dim), dtype="<f8").reshape(out_dim, in_dim)
        b = np.frombuffer(_read_exact(fh, 8 * out_dim), dtype="<f8")
        layers.append(DenseLayer(w.astype(np.float64), b.astype(np.float64), _TAG_ACT[tag]))
    adam = None
    flag = fh.read(1)
    if flag == b"\x01":
        step, lr, b1, b2, eps = struct.unpack("<Qdddd", _read_exact(fh, 40))
        n = sum(layer.n_params for layer in layers)
        m = np.frombuffer(_read_exact(fh, 8 * n), dtype="<f8").astype(np.float64)
        v = np.frombuffer(_read_exact(fh, 8 * n), dtype="<f8").astype(np.float64)
        adam = AdamState(m, v, step, lr, b1, b2, eps)
    return layers, adam
