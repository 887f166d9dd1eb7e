"""Minimal dense-network engine with hand-written backward passes.

Everything runs on float64 numpy arrays. A :class:`NetModel` is an encoder
(stack of dense layers) followed by a single linear classifier over a local
label space. Gradients are returned as lists aligned with
``model.parameters()`` and applied through :class:`GradientTape` and
:class:`SGD`.
"""
from __future__ import annotations

import io
import struct
import weakref
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidInputError, NumericError

ACTIVATIONS = ("relu", "identity")
BYTES_PER_PARAM = 4


@dataclass(frozen=True)
class LayerSpec:
    input_dim: int
    output_dim: int
    activation: str = "relu"

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise InvalidInputError(f"layer dims must be >= 1, got {self.input_dim}x{self.output_dim}")
        if self.activation not in ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {self.activation!r}")

    @property
    def param_count(self) -> int:
        return self.input_dim * self.output_dim + self.output_dim

    @property
    def macs(self) -> int:
        return self.input_dim * self.output_dim


def check_chain(specs: Sequence[LayerSpec]) -> None:
    for a, b in zip(specs, specs[1:]):
        if a.output_dim != b.input_dim:
            raise InvalidInputError(f"layer dims do not chain: {a.output_dim} -> {b.input_dim}")


def make_skeleton(input_dim: int, hidden: Sequence[int], activation: str = "relu") -> tuple[LayerSpec, ...]:
    """Encoder layer stack ``input_dim -> hidden[0] -> ... -> hidden[-1]``."""
    dims = [input_dim, *hidden]
    return tuple(LayerSpec(a, b, activation) for a, b in zip(dims, dims[1:]))


def init_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Dense:
    """Affine map ``x @ W.T + b`` followed by an optional relu."""

    def __init__(self, spec: LayerSpec, W=None, b=None, rng=None):
        self.spec = spec
        if W is None:
            if rng is None:
                raise InvalidInputError("Dense needs either explicit weights or an rng")
            W = init_uniform(rng, spec.input_dim, (spec.output_dim, spec.input_dim))
            b = init_uniform(rng, spec.input_dim, (spec.output_dim,))
        self.W = np.array(W, dtype=np.float64)
        self.b = np.array(b if b is not None else np.zeros(spec.output_dim), dtype=np.float64)
        if self.W.shape != (spec.output_dim, spec.input_dim) or self.b.shape != (spec.output_dim,):
            raise InvalidInputError("weight shapes do not match layer spec")

    def forward(self, X):
        """Return ``(activation, pre_activation)`` for a batch ``X`` of shape (n, in)."""
        if X.shape[-1] != self.spec.input_dim:
            raise InvalidInputError(f"expected input dim {self.spec.input_dim}, got {X.shape[-1]}")
        Z = X @ self.W.T + self.b
        if self.spec.activation == "relu":
            return np.maximum(Z, 0.0), Z
        return Z, Z

    def backward(self, X, Z, dA):
        """Gradients ``(dX, dW, db)`` given the upstream gradient ``dA``."""
        dZ = dA * (Z > 0) if self.spec.activation == "relu" else dA
        return dZ @ self.W, dZ.T @ X, dZ.sum(axis=0)

    def parameters(self):
        return [self.W, self.b]

    def copy(self) -> "Dense":
        return Dense(self.spec, self.W.copy(), self.b.copy())


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim != 2:
        raise InvalidInputError(f"expected a vector or a (n, d) batch, got shape {x.shape}")
    return x, False


class NetModel:
    """Encoder ``f`` plus linear classifier ``g`` over ``label_space`` (global class ids)."""

    def __init__(self, encoder: Sequence[Dense], classifier: Dense, label_space: Sequence[int]):
        self.encoder = list(encoder)
        self.classifier = classifier
        self.label_space = tuple(int(c) for c in label_space)
        if not self.encoder:
            raise InvalidInputError("encoder needs at least one layer")
        check_chain([layer.spec for layer in self.encoder])
        if classifier.spec.activation != "identity":
            raise InvalidInputError("classifier must be linear (identity activation)")
        if classifier.spec.input_dim != self.feature_dim:
            raise InvalidInputError("classifier input dim must equal encoder output dim")
        if not self.label_space or len(set(self.label_space)) != len(self.label_space):
            raise InvalidInputError("label space must be non-empty without duplicates")
        if min(self.label_space) < 0:
            raise InvalidInputError("class ids must be non-negative")
        if classifier.spec.output_dim != len(self.label_space):
            raise InvalidInputError("classifier output dim must equal label-space size")
        self._frozen = False

    @classmethod
    def build(cls, skeleton: Sequence[LayerSpec], label_space: Sequence[int], rng: np.random.Generator) -> "NetModel":
        encoder = [Dense(spec, rng=rng) for spec in skeleton]
        head = LayerSpec(skeleton[-1].output_dim, len(label_space), "identity")
        return cls(encoder, Dense(head, rng=rng), label_space)

    @property
    def input_dim(self) -> int:
        return self.encoder[0].spec.input_dim

    @property
    def feature_dim(self) -> int:
        return self.encoder[-1].spec.output_dim

    @property
    def skeleton(self) -> tuple[LayerSpec, ...]:
        return tuple(layer.spec for layer in self.encoder)

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    @property
    def byte_size(self) -> int:
        return BYTES_PER_PARAM * self.param_count

    @property
    def flops(self) -> int:
        return sum(layer.spec.macs for layer in self.encoder) + self.classifier.spec.macs

    def parameters(self):
        return self.encoder_parameters() + self.classifier.parameters()

    def encoder_parameters(self):
        return [p for layer in self.encoder for p in layer.parameters()]

    # -- forward ---------------------------------------------------------

    def encode(self, x):
        """Encoder output for a vector or a batch."""
        X, single = _as_batch(x)
        for layer in self.encoder:
            X, _ = layer.forward(X)
        return X[0] if single else X

    def classify(self, h):
        """Logits over the local label space for features ``h``."""
        H, single = _as_batch(h)
        out, _ = self.classifier.forward(H)
        return out[0] if single else out

    def logits(self, x):
        return self.classify(self.encode(x))

    def predict(self, x):
        """Predicted global class ids."""
        idx = np.argmax(self.logits(x), axis=-1)
        return np.asarray(self.label_space)[idx]

    def forward(self, X):
        """Batch forward pass returning ``(logits, cache)`` for :meth:`backward`."""
        X, _ = _as_batch(X)
        cache = []
        for layer in self.encoder:
            A, Z = layer.forward(X)
            cache.append((X, Z))
            X = A
        logits, _ = self.classifier.forward(X)
        cache.append((X, None))
        return logits, cache

    def backward(self, cache, dlogits):
        """Parameter gradients (aligned with :meth:`parameters`) from ``dL/dlogits``."""
        H, _ = cache[-1]
        dH = dlogits @ self.classifier.W
        grads = [dlogits.T @ H, dlogits.sum(axis=0)]
        enc_grads = []
        for layer, (X, Z) in zip(reversed(self.encoder), reversed(cache[:-1])):
            dH, dW, db = layer.backward(X, Z, dH)
            enc_grads = [dW, db] + enc_grads
        return enc_grads + grads

    # -- state -------------------------------------------------------------

    def freeze(self) -> "NetModel":
        """Mark all parameters read-only; later in-place writes raise."""
        for p in self.parameters():
            p.flags.writeable = False
        self._frozen = True
        return self

    @property
    def frozen(self) -> bool:
        return self._frozen

    def copy(self) -> "NetModel":
        """Deep, unfrozen copy."""
        return NetModel([l.copy() for l in self.encoder], self.classifier.copy(), self.label_space)

    def to_bytes(self) -> bytes:
        return dump_model(self)


forward_encode = NetModel.encode
classify = NetModel.classify


# -- probability primitives ----------------------------------------------


def _check_finite(z):
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite value in input")


def softmax(z, axis=-1):
    """Max-stabilised softmax along ``axis``."""
    z = np.asarray(z, dtype=np.float64)
    if z.size == 0:
        raise InvalidInputError("softmax of an empty vector")
    _check_finite(z)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(p, dp, axis=-1):
    """Vector-Jacobian product of softmax: gradient w.r.t. logits given ``p`` and ``dL/dp``."""
    p = np.asarray(p, dtype=np.float64)
    dp = np.asarray(dp, dtype=np.float64)
    return p * (dp - np.sum(dp * p, axis=axis, keepdims=True))


def log_softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    _check_finite(z)
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def entropy(p, axis=-1, tol=1e-6):
    """Shannon entropy in nats with ``0 ln 0 = 0``; works row-wise on batches."""
    p = np.asarray(p, dtype=np.float64)
    if p.size == 0 or np.any(p < -tol) or np.any(p > 1 + tol):
        raise InvalidInputError("entries of a distribution must lie in [0, 1]")
    if np.any(np.abs(p.sum(axis=axis) - 1.0) > tol):
        raise InvalidInputError("distribution does not sum to 1")
    safe = np.where(p > 0, p, 1.0)
    return -np.sum(np.where(p > 0, p * np.log(safe), 0.0), axis=axis)


def ce_loss_hard(logits, labels):
    """Mean cross-entropy against integer labels and its gradient w.r.t. logits.

    A single logit vector with a scalar label returns a scalar loss and a
    vector gradient.
    """
    Z, single = _as_batch(logits)
    y = np.atleast_1d(np.asarray(labels))
    if y.shape != (Z.shape[0],):
        raise InvalidInputError("one label per logit row is required")
    if y.size and (y.min() < 0 or y.max() >= Z.shape[1]):
        raise InvalidInputError("label index out of range")
    n = Z.shape[0]
    ls = log_softmax(Z)
    rows = np.arange(n)
    loss = -ls[rows, y].mean()
    grad = np.exp(ls)
    grad[rows, y] -= 1.0
    grad /= n
    return loss, (grad[0] if single else grad)


def ce_loss_soft(logits, targets):
    """Mean soft-target cross-entropy ``-sum t log softmax(z)`` and its gradient."""
    Z, single = _as_batch(logits)
    T, _ = _as_batch(targets)
    if T.shape != Z.shape:
        raise InvalidInputError(f"target shape {T.shape} does not match logits {Z.shape}")
    n = Z.shape[0]
    ls = log_softmax(Z)
    loss = -(T * ls).sum(axis=1).mean()
    grad = (np.exp(ls) - T) / n
    return loss, (grad[0] if single else grad)


def onehot(y, num_classes):
    y = np.atleast_1d(np.asarray(y))
    out = np.zeros((y.size, num_classes))
    out[np.arange(y.size), y] = 1.0
    return out


# -- optimisation ----------------------------------------------------------


class GradientTape:
    """Gradient buffers aligned with a list of parameter arrays."""

    def __init__(self, params):
        self.params = list(params)
        self.grads = [np.zeros_like(p) for p in self.params]
        self.populated = False

    def record(self, grads):
        if len(grads) != len(self.grads):
            raise InvalidInputError(f"expected {len(self.grads)} gradients, got {len(grads)}")
        for buf, g in zip(self.grads, grads):
            if buf.shape != np.shape(g):
                raise InvalidInputError(f"gradient shape {np.shape(g)} != parameter shape {buf.shape}")
            buf += g
        self.populated = True

    def zero(self):
        for buf in self.grads:
            buf.fill(0.0)
        self.populated = False


# id(param) -> weakref(optimizer); a live entry means the array is claimed.
_CLAIMS: dict[int, weakref.ref] = {}


class SGD:
    """Plain gradient descent ``p <- p - lr * grad`` over an exclusive parameter set."""

    kind = "sgd"

    def __init__(self, params, learning_rate: float):
        if not learning_rate >= 0:
            raise InvalidInputError("learning rate must be non-negative")
        self.params = list(params)
        self.learning_rate = float(learning_rate)
        for p in self.params:
            ref = _CLAIMS.get(id(p))
            owner = ref() if ref is not None else None
            if owner is not None and owner is not self and any(q is p for q in owner.params):
                raise InvalidInputError("parameter already owned by another optimizer")
            if not p.flags.writeable:
                raise InvalidInputError("cannot optimise a frozen parameter")
        for p in self.params:
            _CLAIMS[id(p)] = weakref.ref(self)

    def tape(self) -> GradientTape:
        return GradientTape(self.params)

    def step(self, tape: GradientTape):
        if not tape.populated:
            raise InvalidInputError("gradient tape is empty")
        if len(tape.params) != len(self.params) or any(a is not b for a, b in zip(tape.params, self.params)):
            raise InvalidInputError("tape is not aligned with this optimizer's parameters")
        for p, g in zip(self.params, tape.grads):
            p -= self.learning_rate * g
        tape.zero()

    def release(self):
        for p in self.params:
            ref = _CLAIMS.get(id(p))
            if ref is not None and ref() is self:
                del _CLAIMS[id(p)]


# -- serialisation ---------------------------------------------------------

_MAGIC = b"HATNET01"
_ACT_CODES = {"relu": 0, "identity": 1}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


def dump_model(model: NetModel) -> bytes:
    """Header (layer specs, label space) followed by little-endian float32 parameters.

    Only the parameter block is counted by ``byte_size``; the header is excluded
    from traffic accounting.
    """
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", len(model.encoder)))
    for spec in model.skeleton + (model.classifier.spec,):
        buf.write(struct.pack("<IIB", spec.input_dim, spec.output_dim, _ACT_CODES[spec.activation]))
    buf.write(struct.pack("<I", len(model.label_space)))
    buf.write(struct.pack(f"<{len(model.label_space)}i", *model.label_space))
    for p in model.parameters():
        buf.write(np.ascontiguousarray(p, dtype="<f4").tobytes())
    return buf.getvalue()


def load_model(data: bytes) -> NetModel:
    view = memoryview(data)
    if bytes(view[:8]) != _MAGIC:
        raise InvalidInputError("not a serialized NetModel")
    off = 8
    (n_enc,) = struct.unpack_from("<I", view, off)
    off += 4
    specs = []
    for _ in range(n_enc + 1):
        i, o, a = struct.unpack_from("<IIB", view, off)
        off += 9
        specs.append(LayerSpec(i, o, _ACT_NAMES[a]))
    (n_lab,) = struct.unpack_from("<I", view, off)
    off += 4
    labels = struct.unpack_from(f"<{n_lab}i", view, off)
    off += 4 * n_lab
    layers = []
    for spec in specs:
        nw, nb = spec.input_dim * spec.output_dim, spec.output_dim
        W = np.frombuffer(data, dtype="<f4", count=nw, offset=off).reshape(spec.output_dim, spec.input_dim)
        off += 4 * nw
        b = np.frombuffer(data, dtype="<f4", count=nb, offset=off)
        off += 4 * nb
        layers.append(Dense(spec, W.astype(np.float64), b.astype(np.float64)))
    if off != len(data):
        raise InvalidInputError("trailing bytes after parameter block")
    return NetModel(layers[:-1], layers[-1], labels)


def save_model(model: NetModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_model(model))


def read_model(path) -> NetModel:
    with open(path, "rb") as fh:
        return load_model(fh.read())


def train_supervised(model: NetModel, X, y_local, epochs: int, lr: float) -> list[float]:
    """Full-batch SGD on hard cross-entropy; ``y_local`` indexes the model's label space."""
    opt = SGD(model.parameters(), lr)
    tape = opt.tape()
    losses = []
    try:
        for _ in range(epochs):
            logits, cache = model.forward(X)
            loss, dz = ce_loss_hard(logits, y_local)
            if not np.isfinite(loss):
                raise NumericError("non-finite loss during supervised training")
            tape.record(model.backward(cache, dz))
            opt.step(tape)
            losses.append(float(loss))
    finally:
        opt.release()
    return losses
