"""Stacked recurrent regression network with peephole LSTM and simple RNN layers.

LSTM step, with ``*`` elementwise and peepholes stored as vectors::

    i = sigmoid(W_xi x + W_hi h' + p_ci * c' + b_i)
    f = sigmoid(W_xf x + W_hf h' + p_cf * c' + b_f)
    c = f * c' + i * tanh(W_xc x + W_hc h' + b_c)
    o = sigmoid(W_xo x + W_ho h' + p_co * c + b_o)
    h = o * tanh(c)            (h = i * tanh(c) with eq7_literal)

RNN step: ``h = sigmoid(W_xh x + W_hh h' + b_h)``. The output layer is linear,
``y = W_hy h + b_y``.
"""
from __future__ import annotations

import copy
import io
import json
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

LSTM = "lstm"
RNN = "rnn"
KINDS = (LSTM, RNN)
DEFAULT_DIMS = (39, 200, 160, 200, 39)
INIT_RANGE = 0.08
FORGET_BIAS = 1.0


class NumericError(ArithmeticError):
    pass


def sigmoid(x):
    """Logistic function; overflow-free for any finite input."""
    return expit(x)


# ---------------------------------------------------------------- parameters

class _Tensors:
    """Mixin giving ordered access to the array fields of a parameter dataclass."""

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def map(self, fn):
        return type(self)(**{name: fn(t) for name, t in self.tensors()})


@dataclass
class LstmLayerParams(_Tensors):
    W_xi: np.ndarray
    W_xf: np.ndarray
    W_xc: np.ndarray
    W_xo: np.ndarray
    W_hi: np.ndarray
    W_hf: np.ndarray
    W_hc: np.ndarray
    W_ho: np.ndarray
    p_ci: np.ndarray
    p_cf: np.ndarray
    p_co: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_c: np.ndarray
    b_o: np.ndarray

    kind = LSTM

    @property
    def input_size(self) -> int:
        return self.W_xi.shape[1]

    @property
    def hidden_size(self) -> int:
        return self.W_xi.shape[0]

    @classmethod
    def zeros(cls, n_in: int, n_hidden: int) -> "LstmLayerParams":
        shapes = _lstm_shapes(n_in, n_hidden)
        return cls(**{name: np.zeros(shape) for name, shape in shapes.items()})

    def stacked(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        wx = np.vstack([self.W_xi, self.W_xf, self.W_xc, self.W_xo])
        wh = np.vstack([self.W_hi, self.W_hf, self.W_hc, self.W_ho])
        b = np.concatenate([self.b_i, self.b_f, self.b_c, self.b_o])
        return wx, wh, b


def _lstm_shapes(n_in, n_hidden):
    shapes = {}
    for g in "ifco":
        shapes[f"W_x{g}"] = (n_hidden, n_in)
    for g in "ifco":
        shapes[f"W_h{g}"] = (n_hidden, n_hidden)
    for g in ("ci", "cf", "co"):
        shapes[f"p_{g}"] = (n_hidden,)
    for g in "ifco":
        shapes[f"b_{g}"] = (n_hidden,)
    return shapes


@dataclass
class RnnLayerParams(_Tensors):
    W_xh: np.ndarray
    W_hh: np.ndarray
    b_h: np.ndarray

    kind = RNN

    @property
    def input_size(self) -> int:
        return self.W_xh.shape[1]

    @property
    def hidden_size(self) -> int:
        return self.W_xh.shape[0]

    @classmethod
    def zeros(cls, n_in: int, n_hidden: int) -> "RnnLayerParams":
        return cls(np.zeros((n_hidden, n_in)), np.zeros((n_hidden, n_hidden)), np.zeros(n_hidden))


@dataclass
class OutputLayerParams(_Tensors):
    W_hy: np.ndarray
    b_y: np.ndarray

    @classmethod
    def zeros(cls, n_hidden: int, n_out: int) -> "OutputLayerParams":
        return cls(np.zeros((n_out, n_hidden)), np.zeros(n_out))


@dataclass
class Normalizer:
    """Per-coefficient z-scoring of network inputs and outputs."""

    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray

    @classmethod
    def fit(cls, inputs: np.ndarray, targets: np.ndarray) -> "Normalizer":
        def stats(a):
            std = a.std(axis=0)
            return a.mean(axis=0), np.where(std > 1e-8, std, 1.0)
        return cls(*stats(inputs), *stats(targets))

    def encode_input(self, x):
        return (x - self.in_mean) / self.in_std

    def encode_target(self, t):
        return (t - self.out_mean) / self.out_std

    def decode_output(self, y):
        return y * self.out_std + self.out_mean


_LAYER_TYPES = {LSTM: LstmLayerParams, RNN: RnnLayerParams}


@dataclass
class NetworkParams:
    layers: list
    output: OutputLayerParams
    eq7_literal: bool = False
    norm: Normalizer | None = None

    def __post_init__(self):
        n_prev = self.layers[0].input_size if self.layers else self.output.W_hy.shape[1]
        for k, layer in enumerate(self.layers):
            if layer.input_size != n_prev:
                raise ValueError(f"layer {k} expects {layer.input_size} inputs, gets {n_prev}")
            n_prev = layer.hidden_size
        if self.output.W_hy.shape[1] != n_prev:
            raise ValueError("output layer does not match last hidden size")

    @property
    def kinds(self) -> tuple[str, ...]:
        return tuple(layer.kind for layer in self.layers)

    @property
    def dims(self) -> tuple[int, ...]:
        first = self.layers[0].input_size if self.layers else self.output.W_hy.shape[1]
        return (first, *(l.hidden_size for l in self.layers), self.output.W_hy.shape[0])

    @property
    def input_size(self) -> int:
        return self.dims[0]

    @property
    def output_size(self) -> int:
        return self.dims[-1]

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for k, layer in enumerate(self.layers):
            out += [(f"layer{k}.{name}", t) for name, t in layer.tensors()]
        out += [(f"output.{name}", t) for name, t in self.output.tensors()]
        return out

    def map(self, fn, keep_norm: bool = True) -> "NetworkParams":
        return NetworkParams(
            [layer.map(fn) for layer in self.layers],
            self.output.map(fn),
            self.eq7_literal,
            copy.deepcopy(self.norm) if keep_norm else None,
        )

    def copy(self) -> "NetworkParams":
        return self.map(np.array)

    def zeros_like(self) -> "NetworkParams":
        return self.map(np.zeros_like, keep_norm=False)

    def num_parameters(self) -> int:
        return sum(t.size for _, t in self.tensors())


def zero_params(dims: Sequence[int], kinds: str | Sequence[str] = LSTM,
                eq7_literal: bool = False) -> NetworkParams:
    kinds = _expand_kinds(dims, kinds)
    layers = [_LAYER_TYPES[k].zeros(a, b) for k, a, b in zip(kinds, dims[:-2], dims[1:-1])]
    return NetworkParams(layers, OutputLayerParams.zeros(dims[-2], dims[-1]), eq7_literal)


def _expand_kinds(dims, kinds):
    if len(dims) < 3:
        raise ValueError(f"dims need input, at least one hidden size and output: {dims}")
    if any(int(d) <= 0 for d in dims):
        raise ValueError(f"dims must be positive: {dims}")
    if isinstance(kinds, str):
        kinds = [kinds] * (len(dims) - 2)
    kinds = list(kinds)
    if len(kinds) != len(dims) - 2 or any(k not in KINDS for k in kinds):
        raise ValueError(f"bad layer kinds {kinds} for dims {dims}")
    return kinds


def init_params(dims: Sequence[int], seed: int, kinds: str | Sequence[str] = LSTM,
                eq7_literal: bool = False) -> NetworkParams:
    """Weights uniform in [-0.08, 0.08]; forget bias 1, other biases and peepholes 0."""
    rng = np.random.default_rng(seed)
    params = zero_params(dims, kinds, eq7_literal)
    for name, t in params.tensors():
        leaf = name.rsplit(".", 1)[1]
        if leaf.startswith("W_"):
            t[...] = rng.uniform(-INIT_RANGE, INIT_RANGE, size=t.shape)
        elif leaf == "b_f":
            t[...] = FORGET_BIAS
    return params


def parse_dims(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(v) for v in text.split(":"))
    except ValueError:
        raise ValueError(f"dims must look like 39:200:160:200:39, got {text!r}") from None
    _expand_kinds(dims, LSTM)
    return dims


# ---------------------------------------------------------------- forward

@dataclass
class LayerState:
    h: np.ndarray
    c: np.ndarray | None = None


@dataclass
class StepCache:
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    c: np.ndarray
    tanh_c: np.ndarray


def _check_gates(**gates):
    for name, value in gates.items():
        if not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite value in {name}")


def _lstm_cell(p: LstmLayerParams, z, h_prev, c_prev, wh, literal):
    H = len(h_prev)
    z = z + wh @ h_prev
    i = sigmoid(z[:H] + p.p_ci * c_prev)
    f = sigmoid(z[H:2 * H] + p.p_cf * c_prev)
    g = np.tanh(z[2 * H:3 * H])
    c = f * c_prev + i * g
    o = sigmoid(z[3 * H:] + p.p_co * c)
    tc = np.tanh(c)
    h = (i if literal else o) * tc
    return i, f, g, o, c, tc, h


def lstm_step(params: LstmLayerParams, x, prev: LayerState,
              eq7_literal: bool = False) -> tuple[LayerState, StepCache]:
    x = np.asarray(x, dtype=np.float64)
    H = params.hidden_size
    if x.shape != (params.input_size,) or prev.h.shape != (H,) or prev.c is None \
            or prev.c.shape != (H,):
        raise ValueError("lstm_step: shape mismatch")
    wx, wh, b = params.stacked()
    i, f, g, o, c, tc, h = _lstm_cell(params, wx @ x + b, prev.h, prev.c, wh, eq7_literal)
    _check_gates(input_gate=i, forget_gate=f, cell_input=g, output_gate=o, cell=c)
    return LayerState(h, c), StepCache(x, prev.h, prev.c, i, f, g, o, c, tc)


def rnn_step(params: RnnLayerParams, x, prev_h) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    prev_h = np.asarray(prev_h, dtype=np.float64)
    if x.shape != (params.input_size,) or prev_h.shape != (params.hidden_size,):
        raise ValueError("rnn_step: shape mismatch")
    return sigmoid(params.W_xh @ x + params.W_hh @ prev_h + params.b_h)


@dataclass
class LstmCache:
    xs: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    c: np.ndarray
    tanh_c: np.ndarray
    h: np.ndarray


@dataclass
class RnnCache:
    xs: np.ndarray
    h: np.ndarray


@dataclass
class ForwardCache:
    layers: list
    top: np.ndarray  # last hidden sequence, input of the output layer
    kinds: tuple = field(default=())


def lstm_layer_forward(p: LstmLayerParams, xs: np.ndarray, eq7_literal=False) -> LstmCache:
    T, H = len(xs), p.hidden_size
    wx, wh, b = p.stacked()
    zx = xs @ wx.T + b
    out = {k: np.empty((T, H)) for k in ("i", "f", "g", "o", "c", "tanh_c", "h")}
    h, c = np.zeros(H), np.zeros(H)
    I, F, G, O, C, TC, HS = (out[k] for k in ("i", "f", "g", "o", "c", "tanh_c", "h"))
    for t in range(T):
        I[t], F[t], G[t], O[t], C[t], TC[t], HS[t] = _lstm_cell(p, zx[t], h, c, wh, eq7_literal)
        h, c = HS[t], C[t]
    _check_gates(input_gate=I, forget_gate=F, cell_input=G, output_gate=O, cell=C)
    return LstmCache(xs, **out)


def rnn_layer_forward(p: RnnLayerParams, xs: np.ndarray) -> RnnCache:
    T, H = len(xs), p.hidden_size
    zx = xs @ p.W_xh.T + p.b_h
    hs = np.empty((T, H))
    h = np.zeros(H)
    for t in range(T):
        h = hs[t] = sigmoid(zx[t] + p.W_hh @ h)
    _check_gates(hidden=hs)
    return RnnCache(xs, hs)


def forward(params: NetworkParams, xs) -> tuple[np.ndarray, ForwardCache]:
    """Run a whole sequence from zero initial state; returns (ys, cache)."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or len(xs) == 0 or xs.shape[1] != params.input_size:
        raise ValueError(f"forward: expected (T, {params.input_size}) inputs, got {xs.shape}")
    caches = []
    seq = xs
    for layer in params.layers:
        if layer.kind == LSTM:
            cache = lstm_layer_forward(layer, seq, params.eq7_literal)
        else:
            cache = rnn_layer_forward(layer, seq)
        caches.append(cache)
        seq = cache.h
    ys = seq @ params.output.W_hy.T + params.output.b_y
    return ys, ForwardCache(caches, seq, params.kinds)


# ---------------------------------------------------------------- backward

def lstm_layer_backward(p: LstmLayerParams, cache: LstmCache, dh_out: np.ndarray,
                        grad: LstmLayerParams, eq7_literal=False) -> np.ndarray:
    """Accumulate into ``grad``; return the gradient w.r.t. the layer inputs."""
    T, H = dh_out.shape
    _, wh, _ = p.stacked()
    I, F, G, O, C, TC, HS = cache.i, cache.f, cache.g, cache.o, cache.c, cache.tanh_c, cache.h
    da = np.empty((T, 4 * H))
    dh_next = np.zeros(H)
    dc_next = np.zeros(H)
    zero = np.zeros(H)
    for t in range(T - 1, -1, -1):
        c_prev = C[t - 1] if t > 0 else zero
        dh = dh_out[t] + dh_next
        i, f, g, o, tc = I[t], F[t], G[t], O[t], TC[t]
        if eq7_literal:
            da_o = zero
            dc = dh * i * (1.0 - tc * tc) + dc_next
            di = dh * tc + dc * g
        else:
            da_o = dh * tc * o * (1.0 - o)
            dc = dh * o * (1.0 - tc * tc) + dc_next + da_o * p.p_co
            di = dc * g
        da_i = di * i * (1.0 - i)
        da_f = dc * c_prev * f * (1.0 - f)
        da_c = dc * i * (1.0 - g * g)
        da[t, :H] = da_i
        da[t, H:2 * H] = da_f
        da[t, 2 * H:3 * H] = da_c
        da[t, 3 * H:] = da_o
        dc_next = dc * f + da_i * p.p_ci + da_f * p.p_cf
        dh_next = da[t] @ wh

    h_prev = np.vstack([np.zeros((1, H)), HS[:-1]])
    c_prev = np.vstack([np.zeros((1, H)), C[:-1]])
    dwx = da.T @ cache.xs
    dwh = da.T @ h_prev
    db = da.sum(axis=0)
    for k, gname in enumerate("ifco"):
        sl = slice(k * H, (k + 1) * H)
        getattr(grad, f"W_x{gname}")[...] += dwx[sl]
        getattr(grad, f"W_h{gname}")[...] += dwh[sl]
        getattr(grad, f"b_{gname}")[...] += db[sl]
    grad.p_ci += (da[:, :H] * c_prev).sum(axis=0)
    grad.p_cf += (da[:, H:2 * H] * c_prev).sum(axis=0)
    grad.p_co += (da[:, 3 * H:] * C).sum(axis=0)
    wx, _, _ = p.stacked()
    return da @ wx


def rnn_layer_backward(p: RnnLayerParams, cache: RnnCache, dh_out: np.ndarray,
                       grad: RnnLayerParams) -> np.ndarray:
    T, H = dh_out.shape
    HS = cache.h
    da = np.empty((T, H))
    dh_next = np.zeros(H)
    for t in range(T - 1, -1, -1):
        h = HS[t]
        da[t] = (dh_out[t] + dh_next) * h * (1.0 - h)
        dh_next = da[t] @ p.W_hh
    h_prev = np.vstack([np.zeros((1, H)), HS[:-1]])
    grad.W_xh += da.T @ cache.xs
    grad.W_hh += da.T @ h_prev
    grad.b_h += da.sum(axis=0)
    return da @ p.W_xh


def backward(params: NetworkParams, cache: ForwardCache, dys,
             grads: NetworkParams | None = None) -> NetworkParams:
    """Exact BPTT gradients of the loss given dLoss/dys.

    Gradients are accumulated into ``grads`` when given, so per-sequence calls
    can be summed in place.
    """
    dys = np.asarray(dys, dtype=np.float64)
    if cache.kinds != params.kinds or dys.shape != (len(cache.top), params.output_size):
        raise ValueError("backward: cache or gradient shape does not match the network")
    if grads is None:
        grads = params.zeros_like()
    grads.output.W_hy += dys.T @ cache.top
    grads.output.b_y += dys.sum(axis=0)
    dh = dys @ params.output.W_hy
    for layer, lcache, lgrad in zip(params.layers[::-1], cache.layers[::-1], grads.layers[::-1]):
        if layer.kind == LSTM:
            dh = lstm_layer_backward(layer, lcache, dh, lgrad, params.eq7_literal)
        else:
            dh = rnn_layer_backward(layer, lcache, dh, lgrad)
    return grads


def sequence_loss(ys, ts) -> tuple[float, np.ndarray]:
    """Half the summed squared error, and its gradient ``ys - ts``."""
    ys = np.asarray(ys, dtype=np.float64)
    ts = np.asarray(ts, dtype=np.float64)
    if ys.shape != ts.shape:
        raise ValueError(f"sequence_loss: shapes differ {ys.shape} vs {ts.shape}")
    r = ys - ts
    return 0.5 * float(np.sum(r * r)), r


# ---------------------------------------------------------------- gradient check

def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def random_params(dims, seed, kinds=LSTM, scale=0.5, eq7_literal=False) -> NetworkParams:
    """Every tensor, peepholes and biases included, uniform in [-scale, scale]."""
    rng = np.random.default_rng(seed)
    params = zero_params(dims, kinds, eq7_literal)
    for _, t in params.tensors():
        t[...] = rng.uniform(-scale, scale, size=t.shape)
    return params


def gradient_check(params: NetworkParams, xs, ts, epsilon: float = 1e-5) -> dict[str, float]:
    """Max relative error between BPTT and central differences, per tensor."""
    def loss():
        return sequence_loss(forward(params, xs)[0], ts)[0]

    ys, cache = forward(params, xs)
    _, dys = sequence_loss(ys, ts)
    grads = backward(params, cache, dys)
    report = {}
    for (name, t), (_, g) in zip(params.tensors(), grads.tensors()):
        numeric = np.empty_like(t)
        for idx in np.ndindex(t.shape):
            keep = t[idx]
            t[idx] = keep + epsilon
            up = loss()
            t[idx] = keep - epsilon
            down = loss()
            t[idx] = keep
            numeric[idx] = (up - down) / (2 * epsilon)
        report[name] = float(relative_error(g, numeric).max())
    return report


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"CKP1"
CKPT_VERSION = 1
_KIND_CODES = {LSTM: 0, RNN: 1}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: NetworkParams
    seed: int = 0
    config_text: str = "{}"

    @property
    def config(self) -> dict:
        return json.loads(self.config_text)


def config_echo(config: dict) -> str:
    return json.dumps(config, sort_keys=True, separators=(",", ":"))


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    p = ckpt.params
    buf = io.BytesIO()
    dims = p.dims
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(dims)))
    buf.write(struct.pack(f"<{len(dims)}I", *dims))
    buf.write(bytes(_KIND_CODES[k] for k in p.kinds))
    buf.write(struct.pack("<BB", int(p.eq7_literal), int(p.norm is not None)))
    for _, t in p.tensors():
        buf.write(np.ascontiguousarray(t, dtype="<f8").tobytes())
    if p.norm is not None:
        for a in (p.norm.in_mean, p.norm.in_std, p.norm.out_mean, p.norm.out_std):
            buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    text = ckpt.config_text.encode("utf-8")
    buf.write(struct.pack("<qI", ckpt.seed, len(text)))
    buf.write(text)
    return buf.getvalue()


def decode_checkpoint(data: bytes) -> Checkpoint:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version, n_dims = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if not 3 <= n_dims <= 64:
        raise CheckpointError(f"bad dims count {n_dims}")
    dims = struct.unpack(f"<{n_dims}I", take(4 * n_dims))
    codes = bytes(take(n_dims - 2))
    by_code = {v: k for k, v in _KIND_CODES.items()}
    if any(c not in by_code for c in codes):
        raise CheckpointError("bad layer kind code")
    literal, has_norm = struct.unpack("<BB", take(2))
    try:
        params = zero_params(dims, [by_code[c] for c in codes], bool(literal))
    except ValueError as exc:
        raise CheckpointError(str(exc)) from None

    def read_array(shape):
        n = int(np.prod(shape))
        return np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)

    for _, t in params.tensors():
        t[...] = read_array(t.shape)
    if has_norm:
        params.norm = Normalizer(*(read_array((d,)) for d in (dims[0], dims[0], dims[-1], dims[-1])))
    seed, n_text = struct.unpack("<qI", take(12))
    text = bytes(take(n_text)).decode("utf-8")
    if pos != len(view):
        raise CheckpointError("trailing bytes after checkpoint")
    return Checkpoint(params, seed, text)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
