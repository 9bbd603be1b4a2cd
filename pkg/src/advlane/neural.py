"""Minimal fully-connected network engine.

Forward evaluation, exact reverse-mode gradients (parameters and inputs),
Adam, and a versioned JSON serialization format. Everything is float64
numpy so desk-scale training stays cheap and gradient checks stay strict.
"""

import base64
import json

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity")
FORMAT_VERSION = 1


class BadShape(ValueError):
    pass


class DimMismatch(ValueError):
    pass


class StaleCache(RuntimeError):
    """backward() was called without a matching forward() pass."""


class CorruptFile(ValueError):
    pass


class VersionMismatch(ValueError):
    pass


def _activate(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(name, z, h):
    # derivative of the activation at pre-activation z (h = activation(z))
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "tanh":
        return 1.0 - h * h
    return np.ones_like(z)


class Mlp:
    """Feedforward network: ordered (weight, bias, activation) layers.

    Weights have shape (fan_in, fan_out); inputs are row vectors, so a
    single sample may be passed as shape (d,) or a batch as (B, d).
    """

    def __init__(self, weights, biases, activations):
        if not (len(weights) == len(biases) == len(activations)):
            raise BadShape("layer list lengths disagree")
        if not weights:
            raise BadShape("network needs at least one layer")
        for act in activations:
            if act not in ACTIVATIONS:
                raise BadShape(f"unknown activation {act!r}")
        for i in range(1, len(weights)):
            if weights[i - 1].shape[1] != weights[i].shape[0]:
                raise BadShape("consecutive layer dimensions disagree")
        for w, b in zip(weights, biases):
            if b.shape != (w.shape[1],):
                raise BadShape("bias shape does not match weight fan-out")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.activations = list(activations)
        self._cache = None

    # -- construction ------------------------------------------------------

    @classmethod
    def init(cls, sizes, activations, rng):
        """Fresh network, weights ~ U(-1/sqrt(fan_in), +1/sqrt(fan_in)), zero biases."""
        if len(sizes) < 2 or len(activations) != len(sizes) - 1:
            raise BadShape("sizes/activations mismatch")
        if any(int(s) <= 0 for s in sizes):
            raise BadShape("layer sizes must be positive")
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, activations)

    @property
    def sizes(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def copy(self):
        return Mlp(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            list(self.activations),
        )

    def parameters(self):
        """Flat list of parameter arrays, interleaved [W0, b0, W1, b1, ...]."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    # -- evaluation --------------------------------------------------------

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x2 = x[None, :] if single else x
        if x2.ndim != 2 or x2.shape[1] != self.weights[0].shape[0]:
            raise DimMismatch(
                f"input width {x2.shape[-1]} != first layer {self.weights[0].shape[0]}"
            )
        hs = [x2]
        zs = []
        h = x2
        for w, b, act in zip(self.weights, self.biases, self.activations):
            z = h @ w + b
            h = _activate(act, z)
            zs.append(z)
            hs.append(h)
        self._cache = (x2, zs, hs)
        return h[0] if single else h

    def backward(self, x, upstream):
        """Gradients of sum(forward(x) * upstream) w.r.t. parameters and input.

        Returns ([(dW, db), ...], dx). Requires that the most recent
        forward() call was made with this exact input.
        """
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x2 = x[None, :] if single else x
        if self._cache is None or not np.array_equal(self._cache[0], x2):
            raise StaleCache("no cached forward pass for this input")
        _, zs, hs = self._cache
        upstream = np.asarray(upstream, dtype=np.float64)
        delta = upstream[None, :] if upstream.ndim == 1 else upstream
        if delta.shape != hs[-1].shape:
            raise DimMismatch("upstream gradient shape does not match output")

        grads = [None] * len(self.weights)
        for l in range(len(self.weights) - 1, -1, -1):
            act = self.activations[l]
            if act == "relu":
                delta = delta * (zs[l] > 0.0)
            elif act == "tanh":
                h = hs[l + 1]
                delta = delta * (1.0 - h * h)
            dw = hs[l].T @ delta
            db = delta.sum(axis=0)
            grads[l] = (dw, db)
            delta = delta @ self.weights[l].T
        dx = delta[0] if single else delta
        return grads, dx

    # -- serialization -----------------------------------------------------

    def save_bytes(self):
        blob = b"".join(
            np.ascontiguousarray(p, dtype="<f8").tobytes() for p in self.parameters()
        )
        doc = {
            "format": "mlp",
            "version": FORMAT_VERSION,
            "sizes": self.sizes,
            "activations": self.activations,
            "params": base64.b64encode(blob).decode("ascii"),
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("ascii")

    @classmethod
    def load_bytes(cls, data):
        try:
            doc = json.loads(data.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CorruptFile(f"not a valid network file: {e}") from e
        if not isinstance(doc, dict) or doc.get("format") != "mlp":
            raise CorruptFile("missing mlp header")
        if doc.get("version") != FORMAT_VERSION:
            raise VersionMismatch(f"unsupported version {doc.get('version')!r}")
        try:
            sizes = [int(s) for s in doc["sizes"]]
            activations = list(doc["activations"])
            blob = base64.b64decode(doc["params"].encode("ascii"), validate=True)
        except (KeyError, TypeError, ValueError) as e:
            raise CorruptFile(f"malformed network file: {e}") from e
        n_params = sum(
            i * o + o for i, o in zip(sizes[:-1], sizes[1:])
        )
        if len(blob) != 8 * n_params:
            raise CorruptFile(
                f"parameter blob has {len(blob)} bytes, expected {8 * n_params}"
            )
        flat = np.frombuffer(blob, dtype="<f8")
        weights, biases = [], []
        ofs = 0
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            weights.append(flat[ofs : ofs + fan_in * fan_out].reshape(fan_in, fan_out).copy())
            ofs += fan_in * fan_out
            biases.append(flat[ofs : ofs + fan_out].copy())
            ofs += fan_out
        return cls(weights, biases, activations)

    def save(self, path):
        data = self.save_bytes()
        with open(path, "wb") as f:
            f.write(data)
        return data

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            return cls.load_bytes(f.read())


class AdamState:
    """Bias-corrected Adam accumulators for a fixed parameter list."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]


def adam_step(params, grads, state):
    """One in-place Adam update; returns params for convenience."""
    if len(params) != len(state.m) or len(params) != len(grads):
        raise DimMismatch("parameter/gradient/state lengths disagree")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    inv_bc1 = 1.0 / (1.0 - b1 ** state.t)
    inv_bc2 = 1.0 / (1.0 - b2 ** state.t)
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise DimMismatch("gradient shape does not match parameter")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v * inv_bc2)
        denom += state.eps
        p -= (state.lr * inv_bc1) * m / denom
    return params


def flatten_grads(layer_grads):
    """[(dW, db), ...] -> [dW0, db0, dW1, db1, ...] matching Mlp.parameters()."""
    out = []
    for dw, db in layer_grads:
        out.append(dw)
        out.append(db)
    return out
