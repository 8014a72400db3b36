"""Minimal dense-tensor neural network stack.

Everything is float64 and hand-differentiated: each layer caches what its
backward pass needs and the test suite verifies every analytic gradient
against central finite differences. Conv/pool inner loops are delegated
to the selected kernel backend (see msfuse.kernels).

Layout convention: activations are NHWC; Dense layers take flat (N, D).
"""

import struct

import numpy as np

from . import kernels


def check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {name}")
    return arr


class Param:
    """A learnable tensor with a same-shaped gradient accumulator."""

    def __init__(self, name, value):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)


class Layer:
    def params(self):
        return []

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError


class Conv2D(Layer):
    """2-D convolution (cross-correlation), stride 1 and same-padding by
    default; backward accumulates into the parameter gradients."""

    def __init__(self, name, kh, kw, cin, cout, rng, stride=1, pad="same"):
        if pad == "same":
            if stride != 1:
                raise ValueError("same-padding requires stride 1")
            pad = (kh - 1) // 2
        self.stride = stride
        self.pad = pad
        scale = np.sqrt(2.0 / (kh * kw * cin))
        self.w = Param(f"{name}.w", rng.normal(0.0, scale, size=(kh, kw, cin, cout)))
        self.b = Param(f"{name}.b", np.zeros(cout))
        self._x = None

    def params(self):
        return [self.w, self.b]

    def forward(self, x, train=False, rng=None):
        self._x = x
        return kernels.conv2d_forward(x, self.w.value, self.b.value, self.stride, self.pad)

    def backward(self, dy):
        dx, dw, db = kernels.conv2d_backward(self._x, self.w.value, dy, self.stride, self.pad)
        self.w.grad += dw
        self.b.grad += db
        return dx


class MaxPool2x2(Layer):
    def __init__(self):
        self._shape = None
        self._argmax = None

    def forward(self, x, train=False, rng=None):
        self._shape = x.shape
        y, self._argmax = kernels.maxpool2x2_forward(x)
        return y

    def backward(self, dy):
        return kernels.maxpool2x2_backward(self._shape, self._argmax, dy)


class ReLU(Layer):
    def __init__(self):
        self._mask = None

    def forward(self, x, train=False, rng=None):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dy):
        return np.where(self._mask, dy, 0.0)


class Dropout(Layer):
    """Inverted dropout: kept units scaled by 1/(1-rate) during training,
    identity at inference."""

    def __init__(self, rate):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self._mask = None

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError("training-mode dropout needs an explicit rng")
        self._mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * self._mask

    def backward(self, dy):
        if self._mask is None:
            return dy
        return dy * self._mask


class Flatten(Layer):
    def __init__(self):
        self._shape = None

    def forward(self, x, train=False, rng=None):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._shape)


class Dense(Layer):
    def __init__(self, name, nin, nout, rng):
        scale = np.sqrt(2.0 / nin)
        self.w = Param(f"{name}.w", rng.normal(0.0, scale, size=(nin, nout)))
        self.b = Param(f"{name}.b", np.zeros(nout))
        self._x = None

    def params(self):
        return [self.w, self.b]

    def forward(self, x, train=False, rng=None):
        if x.shape[-1] != self.w.value.shape[0]:
            raise ValueError(
                f"dense {self.w.name}: expected input dim {self.w.value.shape[0]}, got {x.shape[-1]}"
            )
        self._x = x
        return x @ self.w.value + self.b.value

    def backward(self, dy):
        self.w.grad += self._x.T @ dy
        self.b.grad += dy.sum(axis=0)
        return dy @ self.w.value.T


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def forward(self, x, train=False, rng=None):
        for layer in self.layers:
            x = layer.forward(x, train=train, rng=rng)
        return check_finite("sequential output", x)

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


# Losses -----------------------------------------------------------------

LOG_FLOOR = 1e-12


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_ce(logits, labels):
    """Mean cross-entropy over a batch of logits.

    Accepts (K,) logits with a scalar label or (N, K) with (N,) labels.
    Returns (loss, dlogits) with dlogits matching the logits shape.
    """
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    if single:
        logits = logits[None, :]
        labels = np.array([labels])
    else:
        labels = np.asarray(labels)
    if logits.shape[-1] < 2:
        raise ValueError("softmax_ce needs at least 2 classes")
    p = softmax(logits)
    n = logits.shape[0]
    loss = float(-np.log(np.maximum(p[np.arange(n), labels], LOG_FLOOR)).mean())
    grad = p.copy()
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, (grad[0] if single else grad)


def smooth_l1(pred, target):
    """Elementwise Huber-style loss, summed: 0.5 x^2 for |x| < 1, else
    |x| - 0.5. Returns (loss, dpred)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    d = pred - target
    small = np.abs(d) < 1.0
    loss = float(np.where(small, 0.5 * d * d, np.abs(d) - 0.5).sum())
    grad = np.where(small, d, np.sign(d))
    return loss, grad


def binary_ce(p, g):
    """Per-element binary cross-entropy of probabilities p against {0,1}
    targets g, with the log arguments floored. Returns (mean loss, dp)."""
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    n = p.size
    loss = float(
        -(g * np.log(np.maximum(p, LOG_FLOOR)) + (1 - g) * np.log(np.maximum(1 - p, LOG_FLOOR))).sum()
        / n
    )
    dp = (-(g / np.maximum(p, LOG_FLOOR)) + (1 - g) / np.maximum(1 - p, LOG_FLOOR)) / n
    return loss, dp


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# Optimizers -------------------------------------------------------------


class SGD:
    def __init__(self, lr, momentum=0.0):
        self.lr = lr
        self.momentum = momentum
        self._velocity = {}

    def step(self, params):
        for p in params:
            check_finite(f"grad of {p.name}", p.grad)
            if self.momentum:
                v = self._velocity.get(p.name)
                if v is None:
                    v = np.zeros_like(p.value)
                v = self.momentum * v - self.lr * p.grad
                self._velocity[p.name] = v
                p.value += v
            else:
                p.value -= self.lr * p.grad


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {}
        self._v = {}

    def step(self, params):
        self.t += 1
        for p in params:
            check_finite(f"grad of {p.name}", p.grad)
            m = self._m.get(p.name, np.zeros_like(p.value))
            v = self._v.get(p.name, np.zeros_like(p.value))
            m = self.beta1 * m + (1 - self.beta1) * p.grad
            v = self.beta2 * v + (1 - self.beta2) * p.grad**2
            self._m[p.name] = m
            self._v[p.name] = v
            mhat = m / (1 - self.beta1**self.t)
            vhat = v / (1 - self.beta2**self.t)
            p.value -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def zero_grads(params):
    for p in params:
        p.grad[...] = 0.0


# Gradient verification --------------------------------------------------


def grad_check(loss_fn, params, h=1e-6, max_entries_per_param=None, rng=None):
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` must recompute the scalar loss from the current parameter
    values; each param's ``grad`` must already hold the analytic gradient
    of that same loss. Returns (max relative error, name, flat index) of
    the worst entry. Relative error uses max(|analytic|, |numeric|, 1e-4)
    as denominator so near-zero gradients do not blow up the ratio.
    """
    worst = (0.0, None, None)
    for p in params:
        flat = p.value.reshape(-1)
        gflat = p.grad.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries_per_param is not None and flat.size > max_entries_per_param:
            if rng is None:
                raise ValueError("sampling entries requires an rng")
            idx = rng.choice(flat.size, size=max_entries_per_param, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn()
            flat[i] = orig - h
            lm = loss_fn()
            flat[i] = orig
            numeric = (lp - lm) / (2 * h)
            analytic = gflat[i]
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-4)
            if err > worst[0]:
                worst = (err, p.name, int(i))
    return worst


# Checkpoint format ------------------------------------------------------
#
# Versioned binary: magic string, a uint32-length UTF-8 header with
# free-form "meta key=value" lines plus a "param <name> <d0>x<d1>..."
# manifest, then the raw little-endian float64 payloads in manifest order.

CHECKPOINT_MAGIC = b"MSFUSECKPT1\n"


def save_checkpoint(path, named_params, meta=None):
    """Write an ordered {name: array} mapping plus string metadata."""
    lines = []
    for key, value in (meta or {}).items():
        if "=" in str(key) or "\n" in str(key) or "\n" in str(value):
            raise ValueError(f"invalid checkpoint meta entry {key!r}")
        lines.append(f"meta {key}={value}")
    arrays = []
    for name, arr in named_params.items():
        arr = np.asarray(arr, dtype="<f8")
        dims = "x".join(str(d) for d in arr.shape) if arr.ndim else "scalar"
        lines.append(f"param {name} {dims}")
        arrays.append(np.ascontiguousarray(arr))
    header = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for arr in arrays:
            f.write(arr.tobytes())


def load_checkpoint(path):
    """Read back (named_params, meta); inverse of save_checkpoint."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a msfuse checkpoint")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = f.read(hlen).decode("utf-8")
        meta = {}
        manifest = []
        for line in header.splitlines():
            if line.startswith("meta "):
                key, _, value = line[5:].partition("=")
                meta[key] = value
            elif line.startswith("param "):
                _, name, dims = line.split(" ")
                shape = () if dims == "scalar" else tuple(int(d) for d in dims.split("x"))
                manifest.append((name, shape))
            elif line:
                raise ValueError(f"{path}: bad checkpoint header line {line!r}")
        named = {}
        for name, shape in manifest:
            count = int(np.prod(shape)) if shape else 1
            data = f.read(count * 8)
            if len(data) != count * 8:
                raise ValueError(f"{path}: truncated payload for {name}")
            named[name] = np.frombuffer(data, dtype="<f8").reshape(shape).copy()
        return named, meta
