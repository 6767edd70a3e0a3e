"""Channel-prediction backbones and their flat parameter view.

A predictor maps a history window ``X [B, 2, T, n_tx, n_rx]`` to the next
snapshot ``[B, 2, n_tx, n_rx]``. Each frame is flattened to a real vector of
length ``2 * n_tx * n_rx`` (real plane first).

Backbones:

* ``linear``: one affine map of the concatenated window.
* ``gru`` / ``lstm``: a single recurrent cell unrolled over ``T`` frames and
  an affine head on the last hidden state.

Parameters live in named tensors. ``layout`` fixes the order in which they
are concatenated into the flat vector used by the regularizers; it depends
only on the backbone and the dimensions.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tc
from .channel import read_blob, write_blob

BACKBONES = ("linear", "gru", "lstm")


@dataclass(frozen=True)
class Dims:
    input_size: int
    hidden_size: int = 32
    output_size: int = 0  # 0 means "same as input_size"
    window: int = 8  # only the linear backbone's layout depends on it

    def __post_init__(self):
        if self.output_size == 0:
            object.__setattr__(self, "output_size", self.input_size)
        if self.input_size < 1 or self.hidden_size < 1 or self.window < 1:
            raise ValueError(f"invalid dims {self}")


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    offset: int
    length: int
    shape: tuple


def _param_specs(backbone, dims):
    """``(name, shape, fan_in)``; ``fan_in`` is None for biases."""
    I, H, O = dims.input_size, dims.hidden_size, dims.output_size
    if backbone == "linear":
        return [("W", (dims.window * I, O), dims.window * I), ("b", (O,), None)]
    gates = {"gru": 3, "lstm": 4}.get(backbone)
    if gates is None:
        raise ValueError(f"unknown backbone {backbone!r} (expected one of {BACKBONES})")
    return [
        ("W", (I, gates * H), I),
        ("U", (H, gates * H), H),
        ("b", (gates * H,), None),
        ("W_out", (H, O), H),
        ("b_out", (O,), None),
    ]


def make_layout(backbone, dims):
    layout, offset = [], 0
    for name, shape, _ in _param_specs(backbone, dims):
        n = int(np.prod(shape))
        layout.append(LayoutEntry(name, offset, n, shape))
        offset += n
    return layout


class Predictor:
    def __init__(self, backbone, dims, params):
        self.backbone = backbone
        self.dims = dims
        self.layout = make_layout(backbone, dims)
        missing = {e.name for e in self.layout} - set(params)
        if missing:
            raise ValueError(f"missing parameters {sorted(missing)}")
        self.params = {e.name: params[e.name] for e in self.layout}

    @property
    def n_params(self):
        return sum(e.length for e in self.layout)

    def __repr__(self):
        return f"Predictor({self.backbone}, {self.dims}, M={self.n_params})"

    def copy(self):
        return Predictor(
            self.backbone,
            self.dims,
            {k: tc.Tensor(v.data, requires_grad=True, name=k) for k, v in self.params.items()},
        )

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def forward_flat(self, frames, params=None):
        """``frames [B, T, I]`` (array) -> Tensor ``[B, O]``."""
        p = self.params if params is None else params
        B, T, I = frames.shape
        tc._check_finite(frames, "predictor input")
        if I != self.dims.input_size:
            raise tc.ShapeError(f"frame size {I} != predictor input size {self.dims.input_size}")
        if self.backbone == "linear":
            if T != self.dims.window:
                raise tc.ShapeError(f"window {T} != linear predictor window {self.dims.window}")
            return tc.matmul(tc.Tensor._wrap(frames.reshape(B, T * I)), p["W"]) + p["b"]
        Hs = self.dims.hidden_size
        if self.backbone == "gru":
            h = tc.Tensor._wrap(np.zeros((B, Hs)))
            for t in range(T):
                h = tc.gru_cell(tc.Tensor._wrap(frames[:, t]), h, p["W"], p["U"], p["b"])
        else:
            hc = tc.Tensor._wrap(np.zeros((B, 2 * Hs)))
            for t in range(T):
                hc = tc.lstm_cell(tc.Tensor._wrap(frames[:, t]), hc, p["W"], p["U"], p["b"])
            h = hc[:, :Hs]
        return tc.matmul(h, p["W_out"]) + p["b_out"]

    def params_from_flat(self, flat):
        """Named views of a flat (possibly taped) parameter tensor."""
        return {e.name: flat[e.offset : e.offset + e.length].reshape(e.shape) for e in self.layout}


def frames_of(X):
    """``[B, 2, T, n_tx, n_rx]`` -> ``[B, T, 2 * n_tx * n_rx]``."""
    X = np.asarray(X, dtype=np.float64)
    B, two, T = X.shape[:3]
    return np.ascontiguousarray(X.transpose(0, 2, 1, 3, 4).reshape(B, T, -1))


def init_predictor(backbone, dims, seed=0):
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero; deterministic in ``seed``."""
    specs = _param_specs(backbone, dims)
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, fan_in in specs:
        if fan_in is None:
            data = np.zeros(shape)
        else:
            s = 1.0 / math.sqrt(fan_in)
            data = rng.uniform(-s, s, size=shape)
        params[name] = tc.Tensor(data, requires_grad=True, name=name)
    return Predictor(backbone, dims, params)


def predictor_for(scenario, backbone="gru", hidden_size=32, window=8, seed=0):
    dims = Dims(input_size=scenario.frame_size, hidden_size=hidden_size, window=window)
    return init_predictor(backbone, dims, seed)


def predict(p, X, params=None):
    """Predicted next snapshot, shaped like one frame of ``X``.

    ``X`` may be a single window ``[2, T, n_tx, n_rx]`` or a batch.
    """
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 4
    if single:
        X = X[None]
    if X.ndim != 5 or X.shape[1] != 2:
        raise tc.ShapeError(f"expected X [B, 2, T, n_tx, n_rx], got {X.shape}")
    out = p.forward_flat(frames_of(X), params)
    frame = X.shape[1:2] + X.shape[3:]
    out = out.reshape((X.shape[0],) + frame)
    return out[0] if single else out


# loss ------------------------------------------------------------------------


def nmse_loss(H, H_hat, batch=True):
    """Mean over samples of ``||H - H_hat||_F^2 / ||H||_F^2``.

    ``H`` is an array; ``H_hat`` an array or Tensor of the same shape. With
    ``batch=True`` axis 0 indexes samples, otherwise the whole input is one
    sample. A Tensor prediction yields a taped scalar Tensor.
    """
    H = np.asarray(H, dtype=np.float64)
    if batch:
        Hf = H.reshape(H.shape[0], -1)
    else:
        Hf = H.reshape(1, -1)
    if tuple(H_hat.shape) != H.shape:
        raise tc.ShapeError(f"nmse_loss: target {H.shape} vs prediction {tuple(H_hat.shape)}")
    norm = np.sum(Hf * Hf, axis=1)
    if np.any(norm <= 0):
        raise ValueError("nmse_loss: target with zero Frobenius norm")
    if isinstance(H_hat, tc.Tensor):
        diff = H_hat.reshape(Hf.shape) - Hf
        return tc.mean(tc.tsum(tc.square(diff), axis=1) * (1.0 / norm))
    d = np.asarray(H_hat, dtype=np.float64).reshape(Hf.shape) - Hf
    return float(np.mean(np.sum(d * d, axis=1) / norm))


def nmse_db(value):
    return 10.0 * math.log10(value)


def dataset_nmse(p, ds, chunk=1024):
    """Sample-averaged NMSE of ``p`` over a whole dataset, without recording."""
    total = 0.0
    with tc.no_grad():
        for start in range(0, len(ds), chunk):
            X, H = ds.X[start : start + chunk], ds.H[start : start + chunk]
            total += nmse_loss(H, predict(p, X).data) * X.shape[0]
    return total / len(ds)


# flat view -------------------------------------------------------------------


def flatten_params(p):
    return np.concatenate([p.params[e.name].data.reshape(-1) for e in p.layout])


def flatten_grads(p):
    parts = []
    for e in p.layout:
        g = p.params[e.name].grad
        parts.append(np.zeros(e.length) if g is None else g.reshape(-1))
    return np.concatenate(parts)


def unflatten_params(p, v):
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (p.n_params,):
        raise ValueError(f"flat vector has shape {v.shape}, predictor needs ({p.n_params},)")
    for e in p.layout:
        p.params[e.name].data[...] = v[e.offset : e.offset + e.length].reshape(e.shape)


# checkpoints -----------------------------------------------------------------
#
#   line 1: b"CLCHAN-CHECKPOINT 1\n"
#   line 2: JSON header {backbone, dims, layout: [[name, offset, length, shape]], n_params}
#   payload: n_params little-endian float64 in layout order

CHECKPOINT_MAGIC = "CLCHAN-CHECKPOINT 1"


def save_checkpoint(p, path, extra=None):
    header = {
        "backbone": p.backbone,
        "dims": asdict(p.dims),
        "layout": [[e.name, e.offset, e.length, list(e.shape)] for e in p.layout],
        "n_params": p.n_params,
    }
    if extra:
        header["extra"] = extra
    write_blob(path, CHECKPOINT_MAGIC, header, [flatten_params(p)])


def load_checkpoint(path):
    header, payload = read_blob(path, CHECKPOINT_MAGIC)
    p = init_predictor(header["backbone"], Dims(**header["dims"]), seed=0)
    stored = [[e.name, e.offset, e.length, list(e.shape)] for e in p.layout]
    if header["layout"] != stored or header["n_params"] != p.n_params:
        raise ValueError(f"{path}: layout does not match {p.backbone} with dims {p.dims}")
    if payload.size != p.n_params:
        raise ValueError(f"{path}: {payload.size} values stored, M = {p.n_params}")
    unflatten_params(p, payload)
    return p
