"""Differentiable building blocks shared by every network in the package.

Torch supplies the tensor storage and the reverse-mode graph; this module pins
down the small op set the models are allowed to use, the parameter/optimizer
bookkeeping, a float64 finite-difference oracle and the checkpoint format.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float32
MANIFEST_VERSION = 1


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def tensor(data, shape: Optional[Sequence[int]] = None, checked: bool = True) -> torch.Tensor:
    """Build a float32 tensor, optionally reshaped, rejecting NaN/Inf when checked."""
    t = torch.as_tensor(np.asarray(data, dtype=np.float32)).clone()
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ShapeError(f"shape entries must be positive, got {shape}")
        if math.prod(shape) != t.numel():
            raise ShapeError(f"{t.numel()} values cannot fill shape {shape}")
        t = t.reshape(shape)
    if checked and not torch.isfinite(t).all():
        raise ValueError("tensor contains non-finite values")
    return t


# ---------------------------------------------------------------------------
# ops


def dense(x: torch.Tensor, W: torch.Tensor, b: Optional[torch.Tensor] = None) -> torch.Tensor:
    """y = x W^T + b for x of shape [B, in] and W of shape [out, in]."""
    if x.dim() != 2 or W.dim() != 2 or x.shape[1] != W.shape[1]:
        raise ShapeError(f"dense: x {tuple(x.shape)} incompatible with W {tuple(W.shape)}")
    if b is not None and tuple(b.shape) != (W.shape[0],):
        raise ShapeError(f"dense: bias {tuple(b.shape)} does not match {W.shape[0]} outputs")
    return F.linear(x, W, b)


def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0):
    """Cross-correlation over [B, C, H, W] with kernel [out, C, kh, kw]."""
    if x.dim() != 4 or kernel.dim() != 4 or x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d: x {tuple(x.shape)} incompatible with kernel {tuple(kernel.shape)}")
    oh = _out_size(x.shape[2], kernel.shape[2], stride, padding)
    ow = _out_size(x.shape[3], kernel.shape[3], stride, padding)
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: non-positive output size {oh}x{ow}")
    return F.conv2d(x, kernel, bias, stride=stride, padding=padding)


def conv_transpose2d(x, kernel, bias=None, stride: int = 1, padding: int = 0):
    """Transposed convolution; kernel is [in, out, kh, kw] as in torch."""
    if x.dim() != 4 or kernel.dim() != 4 or x.shape[1] != kernel.shape[0]:
        raise ShapeError(
            f"conv_transpose2d: x {tuple(x.shape)} incompatible with kernel {tuple(kernel.shape)}"
        )
    return F.conv_transpose2d(x, kernel, bias, stride=stride, padding=padding)


def conv1d(x, kernel, bias=None, stride: int = 1, padding: int = 0):
    """Cross-correlation over [B, C, L] with kernel [out, C, k]."""
    if x.dim() != 3 or kernel.dim() != 3 or x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv1d: x {tuple(x.shape)} incompatible with kernel {tuple(kernel.shape)}")
    if _out_size(x.shape[2], kernel.shape[2], stride, padding) <= 0:
        raise ShapeError("conv1d: non-positive output length")
    return F.conv1d(x, kernel, bias, stride=stride, padding=padding)


def gelu(x):
    # tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    return F.gelu(x, approximate="tanh")


def softmax(x, axis: int = -1):
    if not -x.dim() <= axis < max(x.dim(), 1):
        raise ShapeError(f"softmax: axis {axis} invalid for {x.dim()}-d input")
    return torch.softmax(x, dim=axis)


def l1_distance(a, b):
    """Elementwise |a - b|; a scalar on either side broadcasts."""
    a = torch.as_tensor(a, dtype=b.dtype if torch.is_tensor(b) else DTYPE)
    b = torch.as_tensor(b, dtype=a.dtype)
    if a.dim() and b.dim() and a.shape != b.shape:
        a, b = torch.broadcast_tensors(a, b)
    return (a - b).abs()


def stop_gradient(x):
    return x.detach()


def reshape(x, shape):
    return x.reshape(shape)


# ---------------------------------------------------------------------------
# parameters and gradients


class ParamStore:
    """Named parameters plus their Adam state.

    Each optimizer group of the agent (encoder, decoder, codebooks, ...)
    owns one store so learning rates and weight decay stay per group.
    """

    def __init__(self, params: Optional[Mapping[str, torch.Tensor]] = None):
        self.params: Dict[str, torch.Tensor] = {}
        self.m: Dict[str, torch.Tensor] = {}
        self.v: Dict[str, torch.Tensor] = {}
        self.step = 0
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> torch.Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        p = torch.as_tensor(value, dtype=DTYPE).detach().clone().requires_grad_(True)
        self.params[name] = p
        self.m[name] = torch.zeros_like(p, requires_grad=False)
        self.v[name] = torch.zeros_like(p, requires_grad=False)
        return p

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def names(self):
        return list(self.params)

    def num_elements(self) -> int:
        return sum(p.numel() for p in self.params.values())

    def sq_norm(self) -> torch.Tensor:
        return sum((p * p).sum() for p in self.params.values())

    def copy_from(self, other: "ParamStore") -> None:
        with torch.no_grad():
            for name, p in self.params.items():
                p.copy_(other.params[name])

    def snapshot(self) -> Dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.params.items()}

    def state_tensors(self, prefix: str) -> Dict[str, torch.Tensor]:
        out = {}
        for name, p in self.params.items():
            out[f"{prefix}/{name}"] = p.detach()
            out[f"{prefix}.adam_m/{name}"] = self.m[name]
            out[f"{prefix}.adam_v/{name}"] = self.v[name]
        out[f"{prefix}.adam_step"] = torch.tensor([float(self.step)])
        return out

    def load_state_tensors(self, prefix: str, tensors: Mapping[str, torch.Tensor], params_only=False):
        with torch.no_grad():
            for name, p in self.params.items():
                p.copy_(tensors[f"{prefix}/{name}"])
                if not params_only:
                    self.m[name].copy_(tensors[f"{prefix}.adam_m/{name}"])
                    self.v[name].copy_(tensors[f"{prefix}.adam_v/{name}"])
            if not params_only:
                self.step = int(tensors[f"{prefix}.adam_step"].item())


def backward(loss: torch.Tensor, params: Mapping[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    """Gradients of a scalar loss w.r.t. every named parameter.

    Parameters the loss does not reach (including anything behind
    ``stop_gradient``) get an exact zero tensor.
    """
    if loss.numel() != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    names = list(params)
    tensors = [params[n] for n in names]
    grads = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True, retain_graph=True)
    return {
        n: (torch.zeros_like(t) if g is None else g.detach())
        for n, t, g in zip(names, tensors, grads)
    }


def backward_groups(
    loss: torch.Tensor, groups: Mapping[str, Mapping[str, torch.Tensor]]
) -> Dict[str, Dict[str, torch.Tensor]]:
    """:func:`backward` over several parameter groups with a single graph traversal."""
    flat = {(g, n): t for g, params in groups.items() for n, t in params.items()}
    grads = backward(loss, flat)
    out: Dict[str, Dict[str, torch.Tensor]] = {g: {} for g in groups}
    for (g, n), t in grads.items():
        out[g][n] = t
    return out


def finite_difference_gradient(
    f: Callable[[Dict[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-3,
) -> Dict[str, np.ndarray]:
    """Central-difference gradient of ``f`` at ``params`` in float64."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    point = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    grads = {}
    for name, value in point.items():
        g = np.zeros_like(value)
        flat, gflat = value.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(point))
            flat[i] = orig - eps
            lo = float(f(point))
            flat[i] = orig
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise FloatingPointError(f"f is not finite near {name}[{i}]")
            gflat[i] = (hi - lo) / (2 * eps)
        grads[name] = g
    return grads


def relative_error(a, b, floor: float = 1e-8) -> float:
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||, floor)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def adam_step(
    store: ParamStore,
    grads: Mapping[str, torch.Tensor],
    lr: float,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> ParamStore:
    """One Adam update in place.

    Weight decay enters as the gradient of ``weight_decay * ||p||^2``, i.e.
    ``2 * weight_decay * p`` is added to the gradient before the moments.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    b1, b2 = betas
    store.step += 1
    bc1 = 1 - b1 ** store.step
    bc2 = 1 - b2 ** store.step
    with torch.no_grad():
        for name, p in store.params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {name} has shape {tuple(g.shape)}, expected {tuple(p.shape)}")
            if weight_decay:
                g = g + 2.0 * weight_decay * p
            m, v = store.m[name], store.v[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.addcdiv_(m / bc1, (v / bc2).sqrt_().add_(eps), value=-lr)
    return store


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest + one raw little-endian float32 blob


def save_tensors(path: Path, tensors: Mapping[str, torch.Tensor], meta: Optional[dict] = None) -> Path:
    """Write ``<path>.json`` and ``<path>.bin``; returns the manifest path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    blob_path = path.with_suffix(".bin")
    with open(blob_path, "wb") as fh:
        for name, t in tensors.items():
            arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
            fh.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
            offset += arr.nbytes
    manifest = {
        "format_version": MANIFEST_VERSION,
        "dtype": "float32",
        "byte_order": "little",
        "data_file": blob_path.name,
        "total_bytes": offset,
        "tensors": entries,
        "meta": meta or {},
    }
    manifest_path = path.with_suffix(".json")
    manifest_path.write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return manifest_path


def load_tensors(
    manifest_path: Path, expected_shapes: Optional[Mapping[str, Iterable[int]]] = None
) -> Tuple[Dict[str, torch.Tensor], dict]:
    """Read a manifest/blob pair, checking shapes against ``expected_shapes``."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read manifest {manifest_path}: {exc}") from exc
    blob = (manifest_path.parent / manifest["data_file"]).read_bytes()
    if len(blob) != manifest["total_bytes"]:
        raise CheckpointError(f"{manifest['data_file']}: expected {manifest['total_bytes']} bytes, found {len(blob)}")
    out = {}
    for e in manifest["tensors"]:
        shape = tuple(e["shape"])
        if math.prod(shape) != e["count"]:
            raise CheckpointError(f"parameter {e['name']}: shape {shape} inconsistent with count {e['count']}")
        if expected_shapes is not None and e["name"] in expected_shapes:
            want = tuple(expected_shapes[e["name"]])
            if want != shape:
                raise CheckpointError(f"parameter {e['name']}: checkpoint shape {shape} != model shape {want}")
        arr = np.frombuffer(blob, dtype="<f4", count=e["count"], offset=e["offset"]).reshape(shape)
        out[e["name"]] = torch.from_numpy(arr.astype(np.float32))
    if expected_shapes is not None:
        missing = [n for n in expected_shapes if n not in out]
        if missing:
            raise CheckpointError(f"parameter {missing[0]} missing from checkpoint")
    return out, manifest.get("meta", {})
