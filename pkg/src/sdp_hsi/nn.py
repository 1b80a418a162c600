"""Differentiable building blocks, parameter stores and gradient checking.

Every primitive takes plain tensors and accepts either a single sample
(C, H, W) or a batch (N, C, H, W). Parameters live in a :class:`ParamStore`,
a name -> tensor map whose shapes are fixed at creation.
"""

from __future__ import annotations

import json
import math
import struct
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn.functional as F

STORE_MAGIC = b"PST1"
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    init: str = "he"  # "he" or "zeros"
    gain: float = 1.0  # multiplies the He std

    def fan_in(self) -> int:
        return int(np.prod(self.shape[1:])) if len(self.shape) > 1 else 1


class ParamStore(Mapping):
    """Ordered name -> tensor map with a single floating dtype."""

    def __init__(self, tensors: Mapping[str, torch.Tensor]):
        self._tensors: dict[str, torch.Tensor] = {}
        dtypes = set()
        for name, value in tensors.items():
            t = torch.as_tensor(value)
            if not t.is_floating_point():
                raise TypeError(f"parameter {name!r} is not floating point")
            dtypes.add(t.dtype)
            self._tensors[name] = t
        if len(dtypes) > 1:
            raise TypeError(f"mixed parameter dtypes: {sorted(map(str, dtypes))}")

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._tensors[name]

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}: {tuple(v.shape)}" for k, v in self._tensors.items())
        return f"ParamStore({shapes})"

    @property
    def dtype(self) -> torch.dtype | None:
        return next(iter(self._tensors.values())).dtype if self._tensors else None

    def parameters(self) -> list[torch.Tensor]:
        return list(self._tensors.values())

    def to(self, dtype: torch.dtype) -> "ParamStore":
        return ParamStore({k: v.detach().to(dtype).clone() for k, v in self._tensors.items()})

    def clone(self) -> "ParamStore":
        return ParamStore({k: v.detach().clone() for k, v in self._tensors.items()})

    def requires_grad_(self, flag: bool = True) -> "ParamStore":
        for t in self._tensors.values():
            t.requires_grad_(flag)
        return self

    def subset(self, prefix: str) -> "ParamStore":
        """Parameters whose names start with ``prefix``, prefix stripped."""
        n = len(prefix)
        return ParamStore({k[n:]: v for k, v in self._tensors.items() if k.startswith(prefix)})

    def prefixed(self, prefix: str) -> "ParamStore":
        return ParamStore({prefix + k: v for k, v in self._tensors.items()})

    def merged(self, other: Mapping[str, torch.Tensor]) -> "ParamStore":
        clash = set(self) & set(other)
        if clash:
            raise KeyError(f"duplicate parameter names: {sorted(clash)}")
        return ParamStore({**self._tensors, **dict(other)})

    def equal(self, other: "ParamStore") -> bool:
        """Bitwise equality of names, shapes, dtypes and values."""
        if list(self) != list(other):
            return False
        return all(
            a.dtype == b.dtype and a.shape == b.shape and torch.equal(a, b)
            for a, b in zip(self.values(), other.values())
        )

    def to_bytes(self) -> bytes:
        header, chunks = [], []
        for name, t in self._tensors.items():
            arr = t.detach().cpu().numpy()
            dtype = str(arr.dtype)
            header.append({"name": name, "shape": list(arr.shape), "dtype": dtype})
            chunks.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
        head = json.dumps(header, separators=(",", ":")).encode()
        return STORE_MAGIC + struct.pack("<I", len(head)) + head + b"".join(chunks)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ParamStore":
        if raw[:4] != STORE_MAGIC:
            raise ValueError(f"bad parameter-store magic {raw[:4]!r}")
        (n,) = struct.unpack("<I", raw[4:8])
        header = json.loads(raw[8 : 8 + n])
        offset = 8 + n
        tensors = {}
        for item in header:
            if item["dtype"] not in _DTYPES:
                raise ValueError(f"unsupported dtype {item['dtype']}")
            dt = np.dtype(item["dtype"]).newbyteorder("<")
            count = int(np.prod(item["shape"]))
            end = offset + count * dt.itemsize
            if end > len(raw):
                raise ValueError(f"parameter store truncated inside {item['name']!r}")
            arr = np.frombuffer(raw[offset:end], dtype=dt).reshape(item["shape"])
            tensors[item["name"]] = torch.from_numpy(arr.astype(item["dtype"]))
            offset = end
        if offset != len(raw):
            raise ValueError("trailing bytes after parameter payload")
        return cls(tensors)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ParamStore":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def init_params(seed: int, specs: Iterable[ParamSpec], dtype: torch.dtype = torch.float32) -> ParamStore:
    """He-normal weights (std = gain * sqrt(2 / fan_in)); ``zeros`` specs stay zero."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for spec in specs:
        if spec.name in tensors:
            raise KeyError(f"duplicate parameter name {spec.name!r}")
        if spec.init == "zeros":
            arr = np.zeros(spec.shape)
        elif spec.init == "he":
            arr = rng.standard_normal(spec.shape) * (spec.gain * math.sqrt(2.0 / spec.fan_in()))
        else:
            raise ValueError(f"unknown init {spec.init!r}")
        tensors[spec.name] = torch.from_numpy(arr).to(dtype)
    return ParamStore(tensors)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def _batched(x: torch.Tensor, name: str):
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise ValueError(f"{name} expects (C, H, W) or (N, C, H, W), got shape {tuple(x.shape)}")


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> torch.Tensor:
    """Cross-correlation with a (C_out, C_in, k, k) kernel."""
    xb, single = _batched(x, "conv2d")
    if weight.dim() != 4:
        raise ValueError(f"conv weight must be 4-D, got {tuple(weight.shape)}")
    if weight.shape[1] != xb.shape[1]:
        raise ValueError(f"conv expects {weight.shape[1]} input channels, got {xb.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"conv bias shape {tuple(bias.shape)} != ({weight.shape[0]},)")
    kh, kw = weight.shape[2:]
    if xb.shape[2] + 2 * padding < kh or xb.shape[3] + 2 * padding < kw:
        raise ValueError(f"{kh}x{kw} kernel does not fit input {tuple(xb.shape[2:])} with padding {padding}")
    out = F.conv2d(xb, weight, bias, stride=stride, padding=padding)
    return out[0] if single else out


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.clamp_min(x, 0.0)


def linear(x, weight, bias=None) -> torch.Tensor:
    """Affine map on the last axis; ``weight`` is (out, in)."""
    if weight.dim() != 2 or x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear weight {tuple(weight.shape)} incompatible with input {tuple(x.shape)}")
    out = x @ weight.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"linear bias shape {tuple(bias.shape)} != ({weight.shape[0]},)")
        out = out + bias
    return out


def avg_pool2(x: torch.Tensor) -> torch.Tensor:
    """2x2 mean pooling, stride 2 (odd trailing rows/cols dropped)."""
    xb, single = _batched(x, "avg_pool2")
    if xb.shape[2] < 2 or xb.shape[3] < 2:
        raise ValueError(f"avg_pool2 needs spatial size >= 2, got {tuple(xb.shape[2:])}")
    out = F.avg_pool2d(xb, 2)
    return out[0] if single else out


def global_avg_pool(x: torch.Tensor) -> torch.Tensor:
    """Per-channel spatial mean: (..., C, H, W) -> (..., C)."""
    if x.dim() < 3:
        raise ValueError(f"global_avg_pool expects (..., C, H, W), got {tuple(x.shape)}")
    return x.mean(dim=(-2, -1))


def resblock_specs(prefix: str, channels: int, zero_init: bool = False, zero_last: bool = False) -> list[ParamSpec]:
    """``zero_init`` zeroes both convolutions (exact identity block, no
    gradient flow); ``zero_last`` zeroes only the second, so the block starts
    as the identity but still trains."""
    init = "zeros" if zero_init else "he"
    return [
        ParamSpec(f"{prefix}conv1.w", (channels, channels, 3, 3), init),
        ParamSpec(f"{prefix}conv1.b", (channels,), "zeros"),
        ParamSpec(f"{prefix}conv2.w", (channels, channels, 3, 3), "zeros" if zero_last else init),
        ParamSpec(f"{prefix}conv2.b", (channels,), "zeros"),
    ]


def resblock(x: torch.Tensor, params: Mapping[str, torch.Tensor], prefix: str = "") -> torch.Tensor:
    """x + conv(relu(conv(x))) with 3x3 same-padding convolutions."""
    h = conv2d(x, params[f"{prefix}conv1.w"], params[f"{prefix}conv1.b"], padding=1)
    h = conv2d(relu(h), params[f"{prefix}conv2.w"], params[f"{prefix}conv2.b"], padding=1)
    return x + h


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


@dataclass
class GradientReport:
    """Per-parameter max |analytic - numeric| / max |numeric|."""

    errors: dict[str, float]
    epsilon: float
    failures: list[str] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def passed(self, tol: float = 1e-4) -> bool:
        return not self.failures and self.max_error < tol


def grad_check(
    fn: Callable[..., torch.Tensor],
    params: ParamStore,
    *inputs,
    epsilon: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradientReport:
    """Compare autograd gradients of scalar ``fn(params, *inputs)`` with
    central differences (f(p + eps) - f(p - eps)) / (2 eps).

    With ``max_coords``, each parameter is probed at a seeded random subset
    of coordinates instead of all of them.
    """
    if params.dtype != torch.float64:
        raise ValueError("grad_check requires a float64 parameter store")
    work = params.clone().requires_grad_(True)
    names = list(work)
    value = fn(work, *inputs)
    if value.numel() != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    grads = torch.autograd.grad(value, [work[n] for n in names], allow_unused=True)

    rng = np.random.default_rng(seed)
    errors, failures = {}, []
    with torch.no_grad():
        for name, g in zip(names, grads):
            p = work[name]
            analytic = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            coords = np.arange(flat.numel())
            if max_coords is not None and flat.numel() > max_coords:
                coords = np.sort(rng.choice(flat.numel(), max_coords, replace=False))
            numeric = np.empty(len(coords))
            for j, i in enumerate(coords):
                orig = flat[i].item()
                flat[i] = orig + epsilon
                f_plus = fn(work, *inputs).item()
                flat[i] = orig - epsilon
                f_minus = fn(work, *inputs).item()
                flat[i] = orig
                numeric[j] = (f_plus - f_minus) / (2 * epsilon)
            ana = analytic.reshape(-1).numpy()[coords]
            if not (np.all(np.isfinite(numeric)) and np.all(np.isfinite(ana))):
                failures.append(name)
                errors[name] = math.inf
                continue
            scale = np.max(np.abs(numeric))
            diff = np.max(np.abs(ana - numeric))
            errors[name] = float(diff / scale) if scale > 0 else float(diff)
    return GradientReport(errors, epsilon, failures)
