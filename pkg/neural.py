"""
Recurrent classifier written directly in numpy: SRNN / GRU / LSTM cells,
uni- and bidirectional stacked layers, a linear dense head with softmax,
weighted categorical cross-entropy and backpropagation through time.
All arithmetic is float64.
"""

import json
import struct
from dataclasses import asdict, dataclass
from typing import Dict, Optional

import numpy as np

from errors import ArtifactVersionError

CELLS = ("SRNN", "GRU", "LSTM")
GATES = {"SRNN": 1, "GRU": 3, "LSTM": 4}
DIRECTIONS = ("forward", "backward", "bidirectional")

PROB_FLOOR = 1e-12

WEIGHTS_MAGIC = b"VRNW"
WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    cell: str = "SRNN"
    bidirectional: bool = False
    rnn_layers: int = 1
    dense_layers: Optional[int] = None
    units: int = 64
    input_dim: int = 100
    seq_len: int = 1000
    num_classes: int = 2

    def __post_init__(self):
        if self.dense_layers is None:
            object.__setattr__(self, "dense_layers", self.rnn_layers)
        if self.cell not in CELLS:
            raise ValueError(f"cell must be one of {CELLS}, got '{self.cell}'")
        if self.rnn_layers < 1:
            raise ValueError(f"rnn_layers must be >= 1, got {self.rnn_layers}")
        if self.dense_layers != self.rnn_layers:
            raise ValueError("RNN and dense layers scale together: "
                             f"rnn_layers={self.rnn_layers}, dense_layers={self.dense_layers}")
        if self.units < 1 or self.input_dim < 1 or self.seq_len < 1:
            raise ValueError(f"units, input_dim and seq_len must be positive: {self}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")

    @property
    def directions(self):
        return ("fwd", "bwd") if self.bidirectional else ("fwd",)

    @property
    def rnn_output_dim(self):
        return self.units * len(self.directions)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass
class CellParams:
    Wx: np.ndarray
    Wh: np.ndarray
    b: np.ndarray

    @classmethod
    def zeros_like(cls, other):
        return cls(np.zeros_like(other.Wx), np.zeros_like(other.Wh), np.zeros_like(other.b))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# Single steps. x: (B, D), states: tuples of (B, U) arrays.

def _srnn_step(x, state, p):
    (h,) = state
    h_new = np.tanh(x @ p.Wx + h @ p.Wh + p.b)
    return (h_new,), (x, h, h_new)


def _srnn_step_backward(dstate, cache, p, g):
    (dh,) = dstate
    x, h, h_new = cache
    da = dh * (1.0 - h_new ** 2)
    g.Wx += x.T @ da
    g.Wh += h.T @ da
    g.b += da.sum(axis=0)
    return da @ p.Wx.T, (da @ p.Wh.T,)


def _gru_step(x, state, p):
    (h,) = state
    u = h.shape[1]
    xw = x @ p.Wx + p.b
    hw = h @ p.Wh[:, :2 * u]
    z = _sigmoid(xw[:, :u] + hw[:, :u])
    r = _sigmoid(xw[:, u:2 * u] + hw[:, u:])
    rh = r * h
    n = np.tanh(xw[:, 2 * u:] + rh @ p.Wh[:, 2 * u:])
    h_new = z * h + (1.0 - z) * n
    return (h_new,), (x, h, z, r, n, rh)


def _gru_step_backward(dstate, cache, p, g):
    (dh,) = dstate
    x, h, z, r, n, rh = cache
    u = h.shape[1]
    dz = dh * (h - n)
    dn = dh * (1.0 - z)
    dh_prev = dh * z

    dan = dn * (1.0 - n ** 2)
    g.Wh[:, 2 * u:] += rh.T @ dan
    drh = dan @ p.Wh[:, 2 * u:].T
    dr = drh * h
    dh_prev = dh_prev + drh * r

    dazr = np.concatenate((dz * z * (1.0 - z), dr * r * (1.0 - r)), axis=1)
    da = np.concatenate((dazr, dan), axis=1)
    g.Wx += x.T @ da
    g.b += da.sum(axis=0)
    g.Wh[:, :2 * u] += h.T @ dazr
    dh_prev = dh_prev + dazr @ p.Wh[:, :2 * u].T
    return da @ p.Wx.T, (dh_prev,)


def _lstm_step(x, state, p):
    h, c = state
    u = h.shape[1]
    a = x @ p.Wx + h @ p.Wh + p.b
    i = _sigmoid(a[:, :u])
    f = _sigmoid(a[:, u:2 * u])
    gg = np.tanh(a[:, 2 * u:3 * u])
    o = _sigmoid(a[:, 3 * u:])
    c_new = f * c + i * gg
    tc = np.tanh(c_new)
    h_new = o * tc
    return (h_new, c_new), (x, h, c, i, f, gg, o, tc)


def _lstm_step_backward(dstate, cache, p, g):
    dh, dc = dstate
    x, h, c, i, f, gg, o, tc = cache
    do = dh * tc
    dc_total = dc + dh * o * (1.0 - tc ** 2)
    da = np.concatenate((
        dc_total * gg * i * (1.0 - i),
        dc_total * c * f * (1.0 - f),
        dc_total * i * (1.0 - gg ** 2),
        do * o * (1.0 - o),
    ), axis=1)
    g.Wx += x.T @ da
    g.Wh += h.T @ da
    g.b += da.sum(axis=0)
    return da @ p.Wx.T, (da @ p.Wh.T, dc_total * f)


_STEPS = {
    "SRNN": (_srnn_step, _srnn_step_backward),
    "GRU": (_gru_step, _gru_step_backward),
    "LSTM": (_lstm_step, _lstm_step_backward),
}


def _check_cell_shapes(x, h, p, gates):
    units = p.Wh.shape[0]
    if p.Wh.shape != (units, gates * units) or p.b.shape != (gates * units,):
        raise ValueError(f"Recurrent kernel {p.Wh.shape} / bias {p.b.shape} do not fit "
                         f"{gates} gate(s) of {units} units")
    if p.Wx.shape != (x.shape[-1], gates * units):
        raise ValueError(f"Input kernel {p.Wx.shape} does not fit input width {x.shape[-1]}")
    if h.shape[-1] != units:
        raise ValueError(f"State width {h.shape[-1]} does not match {units} units")


def _as_batch(v):
    v = np.asarray(v, dtype=np.float64)
    return v[None, :] if v.ndim == 1 else v


def srnn_cell(x, h, params):
    """h' = tanh(x Wx + h Wh + b)"""
    _check_cell_shapes(np.asarray(x), np.asarray(h), params, 1)
    (h_new,), _ = _srnn_step(_as_batch(x), (_as_batch(h),), params)
    return h_new[0] if np.ndim(x) == 1 else h_new


def gru_cell(x, h, params):
    """Update/reset-gate recurrence, gate order [z, r, candidate]; h' = z*h + (1-z)*candidate"""
    _check_cell_shapes(np.asarray(x), np.asarray(h), params, 3)
    (h_new,), _ = _gru_step(_as_batch(x), (_as_batch(h),), params)
    return h_new[0] if np.ndim(x) == 1 else h_new


def lstm_cell(x, state, params):
    """Gate order [input, forget, candidate, output]; returns (h', c')"""
    h, c = state
    _check_cell_shapes(np.asarray(x), np.asarray(h), params, 4)
    (h_new, c_new), _ = _lstm_step(_as_batch(x), (_as_batch(h), _as_batch(c)), params)
    if np.ndim(x) == 1:
        return h_new[0], c_new[0]
    return h_new, c_new


def _zero_state(cell, batch, units):
    zeros = np.zeros((batch, units))
    return (zeros, zeros.copy()) if cell == "LSTM" else (zeros,)


def _run_direction(X, cell, p, reverse):
    """Run one direction over (B, L, D); outputs stay aligned with input positions"""
    step = _STEPS[cell][0]
    batch, length, _ = X.shape
    units = p.Wh.shape[0]
    state = _zero_state(cell, batch, units)
    outputs = np.empty((batch, length, units))
    caches = [None] * length
    for t in (range(length - 1, -1, -1) if reverse else range(length)):
        state, caches[t] = step(X[:, t], state, p)
        outputs[:, t] = state[0]
    return outputs, caches


def _backprop_direction(d_outputs, caches, cell, p, grads, reverse):
    step_backward = _STEPS[cell][1]
    batch, length, _ = d_outputs.shape
    units = p.Wh.shape[0]
    dstate = _zero_state(cell, batch, units)
    dX = np.empty((batch, length, p.Wx.shape[0]))
    for t in (range(length) if reverse else range(length - 1, -1, -1)):
        dstate = (dstate[0] + d_outputs[:, t],) + dstate[1:]
        dX[:, t], dstate = step_backward(dstate, caches[t], p, grads)
    return dX


def run_layer(seq, direction, cell, params):
    """
    Run a recurrent layer over (L, D) or (B, L, D) from a zero state.
    `params` is a CellParams, or a (forward, backward) pair for 'bidirectional';
    bidirectional output concatenates forward and time-aligned backward states.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    if cell not in CELLS:
        raise ValueError(f"cell must be one of {CELLS}")
    X = np.asarray(seq, dtype=np.float64)
    single = X.ndim == 2
    if single:
        X = X[None]
    if X.shape[1] < 1:
        raise ValueError("Sequence must have at least one step")

    pairs = params if direction == "bidirectional" else (params,)
    reverse = (False, True) if direction == "bidirectional" else (direction == "backward",)
    outputs = []
    for p, rev in zip(pairs, reverse):
        _check_cell_shapes(X[:, 0], np.zeros(p.Wh.shape[0]), p, GATES[cell])
        outputs.append(_run_direction(X, cell, p, rev)[0])
    out = np.concatenate(outputs, axis=2)
    return out[0] if single else out


def _glorot_uniform(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _orthogonal(rng, rows, cols):
    a = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return q[:rows, :cols]


def param_shapes(config):
    """Parameter name -> shape, in initialisation order"""
    gates = GATES[config.cell]
    units = config.units
    shapes = {}
    width = config.input_dim
    for layer in range(config.rnn_layers):
        for d in config.directions:
            prefix = f"rnn{layer}.{d}"
            shapes[f"{prefix}.Wx"] = (width, gates * units)
            shapes[f"{prefix}.Wh"] = (units, gates * units)
            shapes[f"{prefix}.b"] = (gates * units,)
        width = config.rnn_output_dim
    for k in range(config.dense_layers):
        out = config.num_classes if k == config.dense_layers - 1 else units
        shapes[f"dense{k}.W"] = (width, out)
        shapes[f"dense{k}.b"] = (out,)
        width = out
    return shapes


def init_params(config, seed=0):
    """Glorot-uniform input/dense kernels, orthogonal recurrent kernels, zero biases
    (LSTM forget-gate bias 1)"""
    rng = np.random.default_rng(seed)
    units = config.units
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".Wh"):
            params[name] = _orthogonal(rng, *shape)
        elif len(shape) == 2:
            params[name] = _glorot_uniform(rng, *shape)
        else:
            params[name] = np.zeros(shape)
            if config.cell == "LSTM" and name.startswith("rnn"):
                params[name][units:2 * units] = 1.0
    return params


def softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def weighted_cross_entropy(probs, label, weights=None):
    """-w[label] * ln(probs[label]), probabilities floored at 1e-12"""
    w = 1.0 if weights is None else float(np.asarray(weights)[label])
    return -w * float(np.log(max(float(probs[label]), PROB_FLOOR)))


class RnnClassifier:
    """Stacked recurrent layers, last-step reduction, linear dense stack, softmax"""

    def __init__(self, config, params=None, seed=0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)
        for name, shape in param_shapes(config).items():
            if name not in self.params or self.params[name].shape != shape:
                raise ValueError(f"Parameter '{name}' missing or mis-shaped for {config}")

    def parameter_count(self):
        return int(sum(v.size for v in self.params.values()))

    def cell_params(self, layer, direction, params=None):
        params = self.params if params is None else params
        prefix = f"rnn{layer}.{direction}"
        return CellParams(params[f"{prefix}.Wx"], params[f"{prefix}.Wh"], params[f"{prefix}.b"])

    def _check_input(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            X = X[None]
        if X.ndim != 3 or X.shape[2] != self.config.input_dim or X.shape[1] < 1:
            raise ValueError(f"Input shape {X.shape} does not match (B, L, {self.config.input_dim})")
        return X

    def _forward(self, X):
        cfg = self.config
        H = X
        rnn_caches = []
        for layer in range(cfg.rnn_layers):
            outputs, caches = [], []
            for d in cfg.directions:
                out, cache = _run_direction(H, cfg.cell, self.cell_params(layer, d), d == "bwd")
                outputs.append(out)
                caches.append(cache)
            rnn_caches.append((H.shape, caches))
            H = np.concatenate(outputs, axis=2)

        u = cfg.units
        features = H[:, -1, :u]
        if cfg.bidirectional:
            # The backward direction's final state sits at position 0
            features = np.concatenate((features, H[:, 0, u:]), axis=1)

        dense_inputs = []
        z = features
        for k in range(cfg.dense_layers):
            dense_inputs.append(z)
            z = z @ self.params[f"dense{k}.W"] + self.params[f"dense{k}.b"]
        probs = softmax(z)
        return probs, (H.shape, rnn_caches, dense_inputs)

    def forward(self, X):
        """Class probabilities for one sample (L, D) or a batch (B, L, D)"""
        single = np.ndim(X) == 2
        probs, _ = self._forward(self._check_input(X))
        return probs[0] if single else probs

    def loss(self, X, y, class_weights=None):
        """Mean weighted categorical cross-entropy over the batch"""
        probs, _ = self._forward(self._check_input(X))
        return _batch_loss(probs, np.asarray(y), class_weights)

    def backward(self, X, y, class_weights=None):
        """Loss and gradients of the mean weighted cross-entropy for every parameter"""
        loss, grads, _ = self.loss_and_gradients(X, y, class_weights)
        return loss, grads

    def loss_and_gradients(self, X, y, class_weights=None):
        """backward() plus the batch probabilities of the forward pass"""
        cfg = self.config
        X = self._check_input(X)
        y = np.asarray(y, dtype=np.int64)
        probs, (h_shape, rnn_caches, dense_inputs) = self._forward(X)
        loss = _batch_loss(probs, y, class_weights)

        batch = X.shape[0]
        w = np.ones(batch) if class_weights is None else np.asarray(class_weights)[y]
        picked = probs[np.arange(batch), y]
        scale = np.where(picked > PROB_FLOOR, w / batch, 0.0)
        dz = probs.copy()
        dz[np.arange(batch), y] -= 1.0
        dz *= scale[:, None]

        grads = {}
        for k in reversed(range(cfg.dense_layers)):
            grads[f"dense{k}.W"] = dense_inputs[k].T @ dz
            grads[f"dense{k}.b"] = dz.sum(axis=0)
            dz = dz @ self.params[f"dense{k}.W"].T

        u = cfg.units
        dH = np.zeros(h_shape)
        dH[:, -1, :u] = dz[:, :u]
        if cfg.bidirectional:
            dH[:, 0, u:] = dz[:, u:]

        for layer in reversed(range(cfg.rnn_layers)):
            in_shape, caches = rnn_caches[layer]
            d_input = np.zeros(in_shape)
            for i, d in enumerate(cfg.directions):
                p = self.cell_params(layer, d)
                g = CellParams.zeros_like(p)
                d_input += _backprop_direction(dH[:, :, i * u:(i + 1) * u], caches[i],
                                               cfg.cell, p, g, d == "bwd")
                prefix = f"rnn{layer}.{d}"
                grads[f"{prefix}.Wx"], grads[f"{prefix}.Wh"], grads[f"{prefix}.b"] = g.Wx, g.Wh, g.b
            dH = d_input

        return loss, {name: grads[name] for name in self.params}, probs


def _batch_loss(probs, y, class_weights):
    picked = np.maximum(probs[np.arange(len(y)), y], PROB_FLOOR)
    w = np.ones(len(y)) if class_weights is None else np.asarray(class_weights)[y]
    return float(np.mean(-w * np.log(picked)))


def gradient_check(model, X, y, class_weights=None, h=1e-6):
    """Relative error ||analytic - numeric|| / (||analytic|| + ||numeric||) per tensor,
    numeric gradients by central differences"""
    _, analytic = model.backward(X, y, class_weights)
    errors = {}
    for name, value in model.params.items():
        numeric = np.zeros_like(value)
        flat = value.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            plus = model.loss(X, y, class_weights)
            flat[i] = original - h
            minus = model.loss(X, y, class_weights)
            flat[i] = original
            numeric.reshape(-1)[i] = (plus - minus) / (2 * h)
        denom = np.linalg.norm(analytic[name]) + np.linalg.norm(numeric)
        errors[name] = 0.0 if denom == 0 else float(np.linalg.norm(analytic[name] - numeric) / denom)
    return errors


def save_weights(path, model, config_hash=""):
    """Magic, version, JSON header, then named little-endian float64 tensors"""
    header = json.dumps({"config": model.config.to_dict(), "config_hash": config_hash},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as out:
        out.write(WEIGHTS_MAGIC)
        out.write(struct.pack("<H", WEIGHTS_VERSION))
        out.write(struct.pack("<I", len(header)))
        out.write(header)
        out.write(struct.pack("<I", len(model.params)))
        for name, value in model.params.items():
            encoded = name.encode("utf-8")
            out.write(struct.pack("<H", len(encoded)))
            out.write(encoded)
            out.write(struct.pack("<B", value.ndim))
            out.write(struct.pack(f"<{value.ndim}I", *value.shape))
            out.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def load_weights(path):
    """Returns (RnnClassifier, header dict)"""
    with open(path, "rb") as stream:
        if stream.read(4) != WEIGHTS_MAGIC:
            raise ArtifactVersionError(f"{path} is not a weights file")
        (version,) = struct.unpack("<H", stream.read(2))
        if version != WEIGHTS_VERSION:
            raise ArtifactVersionError(f"{path} has weights format version {version}, "
                                       f"expected {WEIGHTS_VERSION}")
        (header_len,) = struct.unpack("<I", stream.read(4))
        header = json.loads(stream.read(header_len).decode("utf-8"))
        (count,) = struct.unpack("<I", stream.read(4))
        params: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", stream.read(2))
            name = stream.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", stream.read(1))
            shape = struct.unpack(f"<{ndim}I", stream.read(4 * ndim))
            size = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(stream.read(8 * size), dtype="<f8")
            params[name] = data.astype(np.float64).reshape(shape)
    config = ModelConfig.from_dict(header["config"])
    return RnnClassifier(config, params), header
