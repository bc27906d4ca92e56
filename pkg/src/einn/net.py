"""Small tanh feed-forward network with hand-written derivatives and Adam.

Parameters live in one flat float64 vector; per-layer weight matrices
(rows = outputs, cols = inputs) and bias vectors are views into it, so an
optimizer step is a few whole-vector operations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

FORMAT_NAME = "einn-mlp"
FORMAT_VERSION = 1
DEFAULT_MAX_EPOCHS = 1_000_000


class NetError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    """Raised by adam_step when a gradient entry is NaN or infinite."""


def _layer_slices(layer_sizes):
    out = []
    offset = 0
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        w = slice(offset, offset + n_out * n_in)
        offset += n_out * n_in
        b = slice(offset, offset + n_out)
        offset += n_out
        out.append((w, b, n_out, n_in))
    return out, offset


def _check_sizes(layer_sizes):
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2 or any(s <= 0 for s in sizes):
        raise NetError(f"layer_sizes needs at least two positive entries, got {list(layer_sizes)}")
    return sizes


@dataclass(frozen=True, eq=False)
class MlpParams:
    layer_sizes: tuple
    flat: np.ndarray

    def __post_init__(self):
        sizes = _check_sizes(self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        _, total = _layer_slices(sizes)
        flat = np.asarray(self.flat, dtype=float)
        if flat.shape != (total,):
            raise NetError(f"expected {total} parameters for {list(sizes)}, got shape {flat.shape}")
        object.__setattr__(self, "flat", flat)

    @classmethod
    def from_arrays(cls, weights, biases):
        if len(weights) != len(biases) or not weights:
            raise NetError("need one bias vector per weight matrix")
        sizes = [np.shape(weights[0])[1]]
        for w, b in zip(weights, biases):
            w = np.asarray(w, dtype=float)
            if w.ndim != 2 or w.shape[1] != sizes[-1] or np.shape(b) != (w.shape[0],):
                raise NetError("inconsistent weight/bias shapes")
            sizes.append(w.shape[0])
        flat = np.concatenate([np.concatenate([np.ravel(w), np.ravel(b)]) for w, b in zip(weights, biases)])
        return cls(tuple(sizes), flat)

    @cached_property
    def slices(self):
        return _layer_slices(self.layer_sizes)[0]

    @cached_property
    def layers(self):
        """List of (weight, bias) views into ``flat``."""
        return [(self.flat[w].reshape(n_out, n_in), self.flat[b]) for w, b, n_out, n_in in self.slices]

    @property
    def weights(self):
        return [w for w, _ in self.layers]

    @property
    def biases(self):
        return [b for _, b in self.layers]

    @property
    def n_in(self):
        return self.layer_sizes[0]

    @property
    def n_out(self):
        return self.layer_sizes[-1]

    def copy(self):
        return MlpParams(self.layer_sizes, self.flat.copy())

    def is_finite(self):
        return bool(np.all(np.isfinite(self.flat)))


def init(layer_sizes, rng_seed: int) -> MlpParams:
    """Glorot-uniform weights, zero biases, reproducible from `rng_seed`."""
    sizes = _check_sizes(layer_sizes)
    slices, total = _layer_slices(sizes)
    rng = np.random.default_rng(rng_seed)
    flat = np.zeros(total)
    for w, _, n_out, n_in in slices:
        limit = np.sqrt(6.0 / (n_in + n_out))
        flat[w] = rng.uniform(-limit, limit, n_out * n_in)
    return MlpParams(sizes, flat)


def _as_batch(params, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.ndim != 2 or batch.shape[1] != params.n_in:
        raise NetError(f"input has shape {x.shape}, network expects {params.n_in} features")
    return batch, single


def forward_cached(params: MlpParams, batch: np.ndarray) -> list:
    """All layer activations for a (N, n_in) batch; the last entry is the output."""
    acts = [batch]
    a = batch
    last = len(params.layers) - 1
    for k, (w, b) in enumerate(params.layers):
        a = a @ w.T
        a += b
        if k < last:
            np.tanh(a, out=a)
        acts.append(a)
    return acts


def forward(params: MlpParams, x) -> np.ndarray:
    batch, single = _as_batch(params, x)
    out = forward_cached(params, batch)[-1]
    return out[0] if single else out


def forward_with_input_derivative(params: MlpParams, x, seed_index: int):
    """Output and its derivative with respect to input `seed_index`, by tangent propagation."""
    batch, single = _as_batch(params, x)
    if not 0 <= seed_index < params.n_in:
        raise NetError(f"seed_index {seed_index} out of range for {params.n_in} inputs")
    a = batch
    da = np.zeros_like(batch)
    da[:, seed_index] = 1.0
    last = len(params.layers) - 1
    for k, (w, b) in enumerate(params.layers):
        z = a @ w.T + b
        dz = da @ w.T
        if k < last:
            a = np.tanh(z)
            da = (1.0 - a * a) * dz
        else:
            a, da = z, dz
    if single:
        return a[0], da[0]
    return a, da


def backward_cached(params: MlpParams, acts: list, cotangent: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    """Flat gradient of sum(cotangent * output) given activations from forward_cached."""
    grad = np.empty_like(params.flat) if out is None else out
    slices = params.slices
    layers = params.layers
    delta = cotangent
    for k in range(len(layers) - 1, -1, -1):
        w_sl, b_sl, n_out, n_in = slices[k]
        np.matmul(delta.T, acts[k], out=grad[w_sl].reshape(n_out, n_in))
        delta.sum(axis=0, out=grad[b_sl])
        if k > 0:
            a = acts[k]
            back = delta @ layers[k][0]
            a2 = a * a
            np.subtract(back, a2 * back, out=back)
            delta = back
    return grad


def backward(params: MlpParams, x, output_cotangent) -> MlpParams:
    """Exact gradient of output_cotangent . output with respect to every weight and bias.

    A batch of inputs with one cotangent row per input gives the summed gradient.
    """
    batch, single = _as_batch(params, x)
    cot = np.asarray(output_cotangent, dtype=float)
    cot = cot[None, :] if single and cot.ndim == 1 else cot
    if cot.shape != (batch.shape[0], params.n_out):
        raise NetError(f"cotangent has shape {np.shape(output_cotangent)}, expected {params.n_out} outputs per input")
    acts = forward_cached(params, batch)
    return MlpParams(params.layer_sizes, backward_cached(params, acts, cot))


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    mse_stop: float = 2e-10
    max_epochs: int = DEFAULT_MAX_EPOCHS
    rng_seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise NetError("learning_rate must be positive")
        if not self.mse_stop > 0:
            raise NetError("mse_stop must be positive")
        if int(self.max_epochs) <= 0:
            raise NetError("max_epochs must be positive")


@dataclass
class AdamState:
    step_count: int
    first_moment: np.ndarray
    second_moment: np.ndarray
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: MlpParams, **constants):
        return cls(0, np.zeros_like(params.flat), np.zeros_like(params.flat), **constants)

    def copy(self):
        return AdamState(self.step_count, self.first_moment.copy(), self.second_moment.copy(),
                         self.beta1, self.beta2, self.eps)


def adam_update_(flat, grad, state: AdamState, learning_rate: float):
    """In-place Adam step on a flat parameter vector; mutates `flat` and `state`."""
    b1, b2 = state.beta1, state.beta2
    state.step_count += 1
    t = state.step_count
    m, v = state.first_moment, state.second_moment
    m *= b1
    m += (1.0 - b1) * grad
    v *= b2
    v += (1.0 - b2) * (grad * grad)
    denom = np.sqrt(v / (1.0 - b2 ** t))
    denom += state.eps
    flat -= (learning_rate / (1.0 - b1 ** t)) * m / denom


def adam_step(params: MlpParams, grads: MlpParams, state: AdamState, config: TrainConfig):
    """One bias-corrected Adam update; returns new (params, state) and leaves inputs untouched."""
    g = grads.flat if isinstance(grads, MlpParams) else np.asarray(grads, dtype=float)
    if g.shape != params.flat.shape or state.first_moment.shape != params.flat.shape:
        raise NetError("gradient/state shapes do not match the parameters")
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradientError("non-finite gradient entry; training diverged")
    new_params = params.copy()
    new_state = state.copy()
    adam_update_(new_params.flat, g, new_state, config.learning_rate)
    return new_params, new_state


# --- serialization --------------------------------------------------------------

def params_to_dict(params: MlpParams, metadata: dict | None = None) -> dict:
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "layer_sizes": list(params.layer_sizes),
        "weights": [w.tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
        "metadata": dict(metadata or {}),
    }


def params_from_dict(doc: dict) -> MlpParams:
    if doc.get("format") != FORMAT_NAME:
        raise NetError(f"not an {FORMAT_NAME} document")
    if doc.get("version") != FORMAT_VERSION:
        raise NetError(f"unsupported {FORMAT_NAME} version {doc.get('version')!r}")
    params = MlpParams.from_arrays([np.array(w, dtype=float) for w in doc["weights"]],
                                   [np.array(b, dtype=float) for b in doc["biases"]])
    if list(params.layer_sizes) != list(doc["layer_sizes"]):
        raise NetError("layer_sizes disagree with the stored arrays")
    if not params.is_finite():
        raise NetError("non-finite parameter in document")
    return params


def dumps(params: MlpParams, metadata: dict | None = None) -> str:
    return json.dumps(params_to_dict(params, metadata), indent=1)


def loads(text: str) -> MlpParams:
    return params_from_dict(json.loads(text))
