"""Tensor helpers, parameter registry, Adam, dropout and a finite-difference oracle.

Reverse-mode gradients come from torch autograd. Everything that the model
relies on for correctness (masking, optimizer, checkpoint layout) lives here
so it can be tested in isolation.
"""
from __future__ import annotations

import io
import json
import math
import zipfile
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
import torch

Tensor = torch.Tensor

CHECKPOINT_FORMAT_VERSION = 1


class NonFiniteError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    """Raised when a checkpoint archive is unreadable or does not match the model."""

    def __init__(self, message: str, names: Iterable[str] = ()):
        super().__init__(message)
        self.names = list(names)


def check_finite(x: Tensor, what: str = "tensor") -> None:
    if not bool(torch.isfinite(x).all()):
        raise NonFiniteError(f"non-finite values in {what}")


_LEAD_LETTERS = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"


def beinsum(equation: str, *operands: Tensor) -> Tensor:
    """``torch.einsum`` with ``...`` broadcasting that never expands size-1 dims.

    Broadcast dimensions are given explicit labels and dropped from operands in
    which they have size 1, so torch contracts them as outer-product axes
    instead of copying the inputs up to the full broadcast shape.
    """
    lhs, out = equation.replace(" ", "").split("->")
    terms = lhs.split(",")
    explicit = [t.replace("...", "") for t in terms]
    leads = [op.dim() - len(e) for op, e in zip(operands, explicit)]
    n = max(leads)
    if n > len(_LEAD_LETTERS):
        raise ValueError("too many broadcast dimensions")
    shapes = [(1,) * (n - k) + tuple(op.shape[:k]) for op, k in zip(operands, leads)]
    sizes = [max(s[i] for s in shapes) for i in range(n)]
    letters = _LEAD_LETTERS[:n]
    new_terms, new_ops = [], []
    for j, (op, e, k, shp) in enumerate(zip(operands, explicit, leads, shapes)):
        keep = []
        for i in range(n):
            if shp[i] == sizes[i] and (sizes[i] > 1 or j == 0):
                keep.append(i)
        op = op.reshape(tuple(shp[i] for i in keep) + tuple(op.shape[k:]))
        new_terms.append("".join(letters[i] for i in keep) + e)
        new_ops.append(op)
    eq = ",".join(new_terms) + "->" + letters + out.replace("...", "")
    return torch.einsum(eq, *new_ops)


def masked_softmax(scores: Tensor, mask: Tensor | None, dim: int = -1) -> Tensor:
    """Softmax along ``dim`` that gives exactly zero weight to masked entries.

    A slice whose entries are all masked returns zeros instead of a uniform
    distribution.
    """
    check_finite(scores, "softmax input")
    if mask is None:
        return torch.softmax(scores, dim=dim)
    mask = mask.expand_as(scores) if mask.shape != scores.shape else mask
    neg = torch.finfo(scores.dtype).min
    shift = scores.masked_fill(~mask, neg).amax(dim=dim, keepdim=True)
    shift = torch.where(shift == neg, torch.zeros_like(shift), shift).detach()
    e = torch.exp((scores - shift).masked_fill(~mask, 0.0)) * mask
    denom = e.sum(dim=dim, keepdim=True)
    return e / torch.where(denom > 0, denom, torch.ones_like(denom))


def masked_softmax_columns(scores: Tensor, mask: Tensor | None = None) -> Tensor:
    """Normalize each column of ``scores`` ([..., R, C]) over its rows."""
    return masked_softmax(scores, mask, dim=-2)


def dropout_apply(x: Tensor, p: float, training: bool, seed: int | torch.Generator | None = None) -> Tensor:
    """Inverted dropout. ``seed`` may be an int or an existing generator."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if isinstance(seed, torch.Generator):
        gen = seed
    else:
        gen = torch.Generator().manual_seed(0 if seed is None else int(seed))
    keep = torch.rand(x.shape, generator=gen, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


def glorot_uniform(
    shape: tuple[int, ...],
    gen: torch.Generator,
    dtype=torch.float32,
    fan_in: int | None = None,
    fan_out: int | None = None,
) -> Tensor:
    """Glorot-uniform init.

    Matrices are ``[out, in]``; vectors count as ``[d, 1]``. Other shapes must
    pass explicit fans.
    """
    if fan_in is None or fan_out is None:
        if len(shape) == 1:
            fan_in, fan_out = shape[0], 1
        elif len(shape) == 2:
            fan_out, fan_in = shape
        else:
            raise ValueError("explicit fan_in/fan_out required for tensors of rank > 2")
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return (torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1).mul_(limit).to(dtype)


class ParamRegistry:
    """Named collection of model arrays with a frozen flag per entry."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._frozen: set[str] = set()

    def add(self, name: str, value: Tensor, frozen: bool = False) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = value.detach().clone()
        value.requires_grad_(not frozen)
        self._params[name] = value
        if frozen:
            self._frozen.add(name)
        return value

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    def trainable(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict((k, v) for k, v in self._params.items() if k not in self._frozen)

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self._params.values())).dtype

    def manifest(self) -> list[dict]:
        return [
            {
                "name": k,
                "shape": list(v.shape),
                "dtype": _dtype_name(v.dtype),
                "frozen": k in self._frozen,
            }
            for k, v in self._params.items()
        ]

    def to(self, dtype: torch.dtype) -> "ParamRegistry":
        out = ParamRegistry()
        for k, v in self._params.items():
            out.add(k, v.detach().to(dtype), frozen=k in self._frozen)
        return out

    def copy(self) -> "ParamRegistry":
        return self.to(self.dtype)

    def grads(self) -> dict[str, Tensor]:
        """Gradients accumulated by autograd; zeros for untouched trainables."""
        return {
            k: (v.grad.detach().clone() if v.grad is not None else torch.zeros_like(v))
            for k, v in self.trainable().items()
        }

    def zero_grad(self) -> None:
        for v in self._params.values():
            v.grad = None

    def load_state(self, arrays: dict[str, Tensor]) -> None:
        with torch.no_grad():
            for k, v in arrays.items():
                self._params[k].copy_(v)


@dataclass
class AdamState:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParamRegistry, grads: dict[str, Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    for name in grads:
        if name not in params:
            raise KeyError(f"gradient supplied for unknown parameter {name!r}")
        if params.is_frozen(name):
            raise ValueError(f"gradient supplied for frozen parameter {name!r}")
    trainable = params.trainable()
    for name, p in trainable.items():
        if name not in grads:
            raise KeyError(f"missing gradient for trainable parameter {name!r}")
        if grads[name].shape != p.shape:
            raise ValueError(f"gradient shape {tuple(grads[name].shape)} != {tuple(p.shape)} for {name!r}")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    with torch.no_grad():
        for name, p in trainable.items():
            g = grads[name].to(p.dtype)
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            v = state.v[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v / c2).sqrt_().add_(state.eps)
            p.addcdiv_(m, denom, value=-state.lr / c1)


def finite_difference_gradient(
    loss_fn: Callable[[ParamRegistry], Tensor | float],
    params: ParamRegistry,
    h: float = 1e-4,
    subset: dict[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Central differences of ``loss_fn`` at the flat coordinates in ``subset``.

    ``subset`` maps parameter name to flat indices; names not present are
    skipped, and ``None`` means every coordinate of every trainable entry.
    Returns name -> array of derivative estimates aligned with the indices.
    """
    if params.dtype != torch.float64:
        raise ValueError("finite differences require a float64 registry")
    if subset is None:
        subset = {k: np.arange(v.numel()) for k, v in params.trainable().items()}
    out = {}
    with torch.no_grad():
        for name, idx in subset.items():
            flat = params[name].view(-1)
            vals = np.empty(len(idx))
            for j, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + h
                up = float(loss_fn(params))
                flat[i] = orig - h
                down = float(loss_fn(params))
                flat[i] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise NonFiniteError(f"loss not finite when perturbing {name}[{i}]")
                vals[j] = (up - down) / (2 * h)
            out[name] = vals
    return out


# --- checkpoint container -------------------------------------------------
#
# A zip archive holding ``manifest.json`` and one ``<name>.bin`` per array of
# raw little-endian values. The manifest records format version, and per entry
# name, shape, dtype and frozen flag, plus a free-form ``meta`` dict.

_DTYPES = {"float32": (torch.float32, "<f4"), "float64": (torch.float64, "<f8"), "int64": (torch.int64, "<i8"), "bool": (torch.bool, "|b1")}


def _dtype_name(dtype: torch.dtype) -> str:
    for k, (td, _) in _DTYPES.items():
        if td == dtype:
            return k
    raise ValueError(f"unsupported dtype {dtype}")


def save_arrays(path, entries: list[tuple[str, Tensor, bool]], meta: dict | None = None) -> None:
    manifest = {"format_version": CHECKPOINT_FORMAT_VERSION, "meta": meta or {}, "entries": []}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, value, frozen in entries:
            dname = _dtype_name(value.dtype)
            arr = value.detach().cpu().numpy().astype(_DTYPES[dname][1], copy=False)
            manifest["entries"].append({"name": name, "shape": list(value.shape), "dtype": dname, "frozen": bool(frozen)})
            zi = zipfile.ZipInfo(f"{name}.bin", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(zi, arr.tobytes())
        zi = zipfile.ZipInfo("manifest.json", date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(zi, json.dumps(manifest, indent=1, sort_keys=True))


def load_arrays(path) -> tuple[dict, "OrderedDict[str, Tensor]"]:
    """Read a container; returns (manifest, name -> tensor)."""
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
                raise CheckpointError(f"unsupported format version {manifest.get('format_version')}")
            arrays = OrderedDict()
            bad = []
            for e in manifest["entries"]:
                torch_dtype, np_dtype = _DTYPES[e["dtype"]]
                raw = zf.read(f"{e['name']}.bin")
                n = int(np.prod(e["shape"])) if e["shape"] else 1
                if len(raw) != n * np.dtype(np_dtype).itemsize:
                    bad.append(e["name"])
                    continue
                arr = np.frombuffer(raw, dtype=np_dtype).reshape(e["shape"])
                arrays[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True)).to(torch_dtype)
            if bad:
                raise CheckpointError("payload size does not match manifest", bad)
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, OSError, EOFError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    return manifest, arrays


def save_checkpoint(path, params: ParamRegistry, meta: dict | None = None) -> None:
    entries = [(k, v, params.is_frozen(k)) for k, v in params.items()]
    save_arrays(path, entries, meta)


def load_checkpoint(path, params: ParamRegistry) -> dict:
    """Load values into ``params`` after validating every name and shape."""
    manifest, arrays = load_arrays(path)
    bad = []
    for name, value in params.items():
        got = arrays.get(name)
        if got is None or tuple(got.shape) != tuple(value.shape):
            bad.append(name)
    bad += [k for k in arrays if k not in params]
    if bad:
        raise CheckpointError("checkpoint does not match model parameters", bad)
    params.load_state({k: arrays[k].to(params[k].dtype) for k in params.names()})
    return manifest.get("meta", {})


def state_bytes(params: ParamRegistry) -> bytes:
    """Deterministic byte dump of every parameter, used for equality checks."""
    buf = io.BytesIO()
    for k, v in params.items():
        buf.write(k.encode())
        buf.write(v.detach().cpu().numpy().tobytes())
    return buf.getvalue()
