"""Layers, log-densities, the Adam optimizer and tensor serialization."""
from __future__ import annotations

import json
import math
import struct
from typing import BinaryIO, Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LEAKY_SLOPE = 0.01
LOG_2PI = math.log(2.0 * math.pi)

ACTIVATIONS = {
    "leaky_relu": lambda x: ad.leaky_relu(x, LEAKY_SLOPE),
    "tanh": ad.tanh,
    "identity": ad.identity,
}


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, name: str) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def zeros_param(shape: tuple[int, ...], name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


class Module:
    """Anything holding named parameter tensors."""

    def named_parameters(self) -> dict[str, Tensor]:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, activation: str = "identity",
                 rng: np.random.Generator | None = None, name: str = "dense"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.activation = activation
        self.W = uniform_init(rng, (n_out, n_in), n_in, f"{name}.W")
        self.b = zeros_param((n_out,), f"{name}.b")

    def named_parameters(self) -> dict[str, Tensor]:
        return {self.W.name: self.W, self.b.name: self.b}

    def __call__(self, x) -> Tensor:
        return dense_forward(self.W, self.b, self.activation, x)


def dense_forward(W, b, activation: str, x) -> Tensor:
    return ACTIVATIONS[activation](ad.linear(x, W, b))


class GRUCell(Module):
    """Gated recurrent unit with an optional forgetting factor on the carried state.

    Gates are stacked ``[update z, reset r, candidate]`` in the weight rows::

        h  = forget * h_prev
        z  = sigmoid(Wz x + Uz h + bz)
        r  = sigmoid(Wr x + Ur h + br)
        c  = tanh(Wc x + Uc (r * h) + bc)
        h' = (1 - z) * h + z * c
    """

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator | None = None,
                 name: str = "gru"):
        rng = rng if rng is not None else np.random.default_rng(0)
        H = hidden_size
        self.input_size = input_size
        self.hidden_size = H
        self.W = uniform_init(rng, (3 * H, input_size), input_size, f"{name}.W")
        self.U_zr = uniform_init(rng, (2 * H, H), H, f"{name}.U_zr")
        self.U_c = uniform_init(rng, (H, H), H, f"{name}.U_c")
        self.b = zeros_param((3 * H,), f"{name}.b")

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in (self.W, self.U_zr, self.U_c, self.b)}

    def __call__(self, x, h_prev, forget: float = 1.0) -> Tensor:
        return gru_step(self, x, h_prev, forget)


def gru_step(cell: GRUCell, x, h_prev, forget: float = 1.0) -> Tensor:
    x, h_prev = ad.as_tensor(x), ad.as_tensor(h_prev)
    H = cell.hidden_size
    if x.shape[-1] != cell.input_size or h_prev.shape[-1] != H:
        raise ad.ShapeError(f"GRU expects inputs of width {cell.input_size} and state {H}, "
                            f"got {x.shape} and {h_prev.shape}")
    if not 0.0 < forget <= 1.0:
        raise ValueError("forgetting factor must lie in (0, 1]")
    h = h_prev * forget if forget != 1.0 else h_prev
    gx = ad.linear(x, cell.W, cell.b)
    gzr = ad.linear(h, cell.U_zr)
    z = ad.sigmoid(gx[:, :H] + gzr[:, :H])
    r = ad.sigmoid(gx[:, H:2 * H] + gzr[:, H:])
    c = ad.tanh(gx[:, 2 * H:] + ad.linear(r * h, cell.U_c))
    return h + z * (c - h)


def gaussian_logprob(mean, log_std, x) -> Tensor:
    """Diagonal-Gaussian log-density summed over the last axis."""
    mean, log_std, x = ad.as_tensor(mean), ad.as_tensor(log_std), ad.as_tensor(x)
    z = (x - mean) / ad.exp(log_std)
    per_dim = ad.square(z) * -0.5 - log_std - 0.5 * LOG_2PI
    return ad.tsum(per_dim, axis=-1)


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float = 3e-4, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        ad.zero_grad(self.params)

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam.t": np.array([float(self.t)])}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"adam.m.{i}"] = m
            out[f"adam.v.{i}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["adam.t"][0])
        for i in range(len(self.params)):
            self.m[i] = arrays[f"adam.m.{i}"].copy()
            self.v[i] = arrays[f"adam.v.{i}"].copy()


# -- serialization --------------------------------------------------------------
#
# File layout (all integers little-endian):
#   b"MPTN"                  magic
#   u32 version              FORMAT_VERSION
#   u32 n, n bytes           UTF-8 JSON metadata
#   u32 count                number of tensors
#   per tensor:
#     u16 n, n bytes         UTF-8 name
#     u8 ndim, ndim x u32    shape
#     prod(shape) x f64      C-order payload

MAGIC = b"MPTN"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def write_tensors(fh: BinaryIO, tensors: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    meta = json.dumps(metadata or {}, sort_keys=True).encode()
    fh.write(MAGIC)
    fh.write(struct.pack("<II", FORMAT_VERSION, len(meta)))
    fh.write(meta)
    fh.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        raw = name.encode()
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_tensors(fh: BinaryIO) -> tuple[dict[str, np.ndarray], dict]:
    if fh.read(4) != MAGIC:
        raise FormatError("not a tensor file")
    version, n_meta = struct.unpack("<II", fh.read(8))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported tensor file version {version} (expected {FORMAT_VERSION})")
    meta = json.loads(fh.read(n_meta).decode())
    (count,) = struct.unpack("<I", fh.read(4))
    out = {}
    for _ in range(count):
        (n_name,) = struct.unpack("<H", fh.read(2))
        name = fh.read(n_name).decode()
        (ndim,) = struct.unpack("<B", fh.read(1))
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(fh.read(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    return out, meta


def save_tensors(path, tensors: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    with open(path, "wb") as fh:
        write_tensors(fh, tensors, metadata)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        return read_tensors(fh)
