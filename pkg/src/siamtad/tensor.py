"""Dense tensor type, gradient tape, and tensor file I/O.

Everything downstream (network, losses, training) runs on these two classes.
Values are numpy arrays in row-major order, float64 by default with float32
available for throughput. Any non-finite value produced by a forward or
backward computation raises NumericsError immediately.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

DEFAULT_DTYPE = np.float64

_DTYPE_NAMES = {"float64": np.float64, "float32": np.float32}


class ShapeError(ValueError):
    """Operand shapes or dimensions do not satisfy an operation's contract."""


class NumericsError(ArithmeticError):
    """A computation produced NaN or Inf, or autodiff was used out of order."""


def resolve_dtype(dtype) -> np.dtype:
    """Accept 'float64'/'float32' strings or numpy dtypes; reject the rest."""
    if isinstance(dtype, str):
        if dtype not in _DTYPE_NAMES:
            raise ValueError(f"unsupported dtype {dtype!r}; use 'float64' or 'float32'")
        return np.dtype(_DTYPE_NAMES[dtype])
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dt}; use float64 or float32")
    return dt


class Tensor:
    """Dense N-dimensional array with shape metadata.

    `data` is a contiguous numpy array owned by the tensor. Values are
    treated as immutable while a GradientTape referencing this tensor is
    alive; the SGD optimizer mutates parameter data only between tapes.
    """

    __slots__ = ("data", "name")

    def __init__(self, data, dtype=None, name: str | None = None, validate: bool = True):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (
                np.dtype(np.float64), np.dtype(np.float32)) else DEFAULT_DTYPE
        # asarray with order="C", not ascontiguousarray: the latter silently
        # promotes 0-d arrays to shape (1,), which would corrupt scalar losses
        self.data = np.asarray(data, dtype=resolve_dtype(dtype), order="C")
        self.name = name
        if validate:
            check_finite(self.data, name or "tensor")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def astype(self, dtype) -> "Tensor":
        dt = resolve_dtype(dtype)
        if dt == self.data.dtype:
            return self
        return Tensor(self.data.astype(dt), name=self.name, validate=False)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), name=self.name, validate=False)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(())[()])

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.data.dtype})"


def check_finite(arr: np.ndarray, context: str) -> None:
    """Raise NumericsError if arr holds any NaN or Inf."""
    if not np.isfinite(arr).all():
        bad = int(np.count_nonzero(~np.isfinite(arr)))
        raise NumericsError(f"{context}: {bad} non-finite element(s) in shape {arr.shape}")


class GradientTape:
    """Reverse-mode differentiation over an eagerly executed op sequence.

    Operations register themselves in execution order via `record`; since
    execution order is a topological order of the graph, `backward` simply
    walks the records in reverse, accumulating gradients per tensor.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self._grads: dict[int, np.ndarray] = {}
        # strong refs keep id() keys valid for the tape's lifetime
        self._tensors: dict[int, Tensor] = {}

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
        """Register an op. backward_fn(grad_out) must return one gradient
        array (or None) per input, each matching that input's shape."""
        self._records.append((output, inputs, backward_fn))
        self._tensors[id(output)] = output
        for t in inputs:
            self._tensors[id(t)] = t

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(tensor) for every tensor on the tape."""
        if not self._records:
            raise NumericsError("backward() before any recorded forward op")
        if id(loss) not in self._tensors or all(out is not loss for out, _, _ in self._records):
            raise NumericsError("backward() root was not produced on this tape")
        if loss.data.shape != ():
            raise ShapeError(f"backward() root must be scalar, got shape {loss.data.shape}")
        self._grads = {id(loss): np.ones((), dtype=loss.data.dtype)}
        for output, inputs, backward_fn in reversed(self._records):
            g_out = self._grads.get(id(output))
            if g_out is None:
                continue  # op not on the path from root
            in_grads = backward_fn(g_out)
            for t, g in zip(inputs, in_grads):
                if g is None:
                    continue
                acc = self._grads.get(id(t))
                if acc is None:
                    self._grads[id(t)] = g
                else:
                    acc += g
        for tid, g in self._grads.items():
            check_finite(g, f"gradient of {self._tensors[tid]!r}")

    def grad(self, tensor: Tensor) -> np.ndarray:
        """Gradient accumulated for `tensor`; zeros if it did not participate."""
        if not self._grads:
            raise NumericsError("grad() before backward()")
        g = self._grads.get(id(tensor))
        if g is None:
            return np.zeros_like(tensor.data)
        return g


# --- tensor file format: JSON sidecar + flat little-endian binary ---

_FORMAT_TAG = "tensor-v1"
_LE = {np.dtype(np.float64): "<f8", np.dtype(np.float32): "<f4"}


def save_tensor(tensor: Tensor | np.ndarray, path_base: str | Path) -> None:
    """Write <base>.json (shape + element type) and <base>.bin (row-major
    little-endian elements). `path_base` may contain dots; the suffixes are
    appended, not substituted."""
    arr = tensor.data if isinstance(tensor, Tensor) else _arr_check(tensor)
    base = str(path_base)
    desc = {
        "format": _FORMAT_TAG,
        "shape": list(arr.shape),
        "dtype": arr.dtype.name,
    }
    Path(base + ".json").write_text(json.dumps(desc, sort_keys=True) + "\n")
    Path(base + ".bin").write_bytes(np.ascontiguousarray(arr, dtype=_LE[arr.dtype]).tobytes())


def _arr_check(arr) -> np.ndarray:
    out = np.asarray(arr)
    if out.dtype not in _LE:
        raise ValueError(f"unsupported dtype {out.dtype} for tensor file")
    return out


def load_tensor(path_base: str | Path) -> Tensor:
    """Read a tensor written by save_tensor."""
    base = str(path_base)
    desc = json.loads(Path(base + ".json").read_text())
    if desc.get("format") != _FORMAT_TAG:
        raise ValueError(f"{base}: unknown tensor format {desc.get('format')!r}")
    dtype = resolve_dtype(desc["dtype"])
    shape = tuple(int(s) for s in desc["shape"])
    raw = Path(base + ".bin").read_bytes()
    arr = np.frombuffer(raw, dtype=_LE[np.dtype(dtype)]).astype(dtype)
    expected = int(np.prod(shape)) if shape else 1
    if arr.size != expected:
        raise ValueError(f"{base}: element count {arr.size} does not match shape {shape}")
    return Tensor(arr.reshape(shape))
