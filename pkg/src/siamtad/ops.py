"""Forward operators with reverse-mode backward rules.

The op set is exactly what the siamese network needs: 3D convolution,
3D max-pooling, fully-connected, ReLU, softmax, elementwise absolute
difference, flatten, and scalar add/scale for combining losses. Each op
takes an optional GradientTape; with tape=None it is a plain forward
computation.

Convolution is computed as a sum of kernel-offset matmuls (one BLAS GEMM
per kernel tap), which keeps peak memory at one channel-volume temporary
and stays bitwise deterministic run to run.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import GradientTape, NumericsError, ShapeError, Tensor, check_finite


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 3D convolution: kernel/stride/padding per (t, h, w) axis."""

    out_channels: int
    kernel: tuple[int, int, int] = (3, 3, 3)
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (1, 1, 1)

    def __post_init__(self):
        if self.out_channels < 1:
            raise ValueError("out_channels must be >= 1")
        if any(k < 1 for k in self.kernel) or any(s < 1 for s in self.stride):
            raise ValueError("kernel and stride extents must be >= 1")
        if any(p < 0 for p in self.padding):
            raise ValueError("padding must be >= 0")
        if any(p >= k for p, k in zip(self.padding, self.kernel)):
            raise ValueError("padding must be smaller than the kernel in each axis")


@dataclass(frozen=True)
class PoolSpec:
    """Geometry of a 3D max pool; the spatial axes share one kernel/stride."""

    temporal_kernel: int
    temporal_stride: int
    spatial_kernel: int = 2
    spatial_stride: int = 2
    spatial_padding: int = 0

    def __post_init__(self):
        if min(self.temporal_kernel, self.temporal_stride,
               self.spatial_kernel, self.spatial_stride) < 1:
            raise ValueError("pool kernels and strides must be >= 1")
        if self.spatial_padding < 0 or self.spatial_padding >= self.spatial_kernel:
            raise ValueError("spatial_padding must be in [0, spatial_kernel)")

    @property
    def kernel(self) -> tuple[int, int, int]:
        return (self.temporal_kernel, self.spatial_kernel, self.spatial_kernel)

    @property
    def stride(self) -> tuple[int, int, int]:
        return (self.temporal_stride, self.spatial_stride, self.spatial_stride)

    @property
    def padding(self) -> tuple[int, int, int]:
        return (0, self.spatial_padding, self.spatial_padding)


def _out_extent(extent: int, kernel: int, stride: int, pad: int) -> int:
    return (extent + 2 * pad - kernel) // stride + 1


def _out_shape(in_shape, kernel, stride, padding, what: str) -> tuple[int, int, int]:
    out = tuple(_out_extent(e, k, s, p)
                for e, k, s, p in zip(in_shape, kernel, stride, padding))
    if any(o < 1 for o in out):
        raise ShapeError(f"{what}: non-positive output extent {out} "
                         f"for input {tuple(in_shape)} kernel {kernel} "
                         f"stride {stride} padding {padding}")
    return out


def conv3d(x: Tensor, weights: Tensor, bias: Tensor, spec: ConvSpec,
           tape: GradientTape | None = None) -> Tensor:
    """3D convolution of x[C,T,H,W] with weights[F,C,kt,kh,kw] and bias[F]."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv3d input must be 4-D (C,T,H,W), got {x.shape}")
    if weights.data.ndim != 5:
        raise ShapeError(f"conv3d weights must be 5-D (F,C,kt,kh,kw), got {weights.shape}")
    F, Cw = weights.shape[:2]
    if Cw != x.shape[0]:
        raise ShapeError(f"conv3d channel mismatch: input has {x.shape[0]}, weights expect {Cw}")
    if weights.shape[2:] != spec.kernel:
        raise ShapeError(f"conv3d weights kernel {weights.shape[2:]} != spec kernel {spec.kernel}")
    if F != spec.out_channels or bias.shape != (F,):
        raise ShapeError("conv3d filter count disagrees between weights, bias, and spec")
    if x.dtype != weights.dtype or x.dtype != bias.dtype:
        raise ShapeError("conv3d operands must share one dtype")

    kt, kh, kw = spec.kernel
    st, sh, sw = spec.stride
    pt, ph, pw = spec.padding
    To, Ho, Wo = _out_shape(x.shape[1:], spec.kernel, spec.stride, spec.padding, "conv3d")

    xp = np.pad(x.data, ((0, 0), (pt, pt), (ph, ph), (pw, pw)))
    C = x.shape[0]
    n_out = To * Ho * Wo
    acc = np.zeros((F, n_out), dtype=x.dtype)
    w = weights.data
    for dt in range(kt):
        for dh in range(kh):
            for dw in range(kw):
                patch = xp[:, dt:dt + st * To:st, dh:dh + sh * Ho:sh, dw:dw + sw * Wo:sw]
                acc += w[:, :, dt, dh, dw] @ patch.reshape(C, n_out)
    out_data = (acc + bias.data[:, None]).reshape(F, To, Ho, Wo)
    check_finite(out_data, "conv3d output")
    out = Tensor(out_data, validate=False)

    if tape is not None:
        def backward(g_out: np.ndarray):
            g = g_out.reshape(F, n_out)
            g_b = g_out.sum(axis=(1, 2, 3))
            g_w = np.empty_like(w)
            g_xp = np.zeros_like(xp)
            for dt in range(kt):
                for dh in range(kh):
                    for dw in range(kw):
                        patch = xp[:, dt:dt + st * To:st, dh:dh + sh * Ho:sh,
                                   dw:dw + sw * Wo:sw].reshape(C, n_out)
                        g_w[:, :, dt, dh, dw] = g @ patch.T
                        g_xp[:, dt:dt + st * To:st, dh:dh + sh * Ho:sh,
                             dw:dw + sw * Wo:sw] += (w[:, :, dt, dh, dw].T @ g).reshape(
                                 C, To, Ho, Wo)
            T, H, W = x.shape[1:]
            g_x = g_xp[:, pt:pt + T, ph:ph + H, pw:pw + W]
            return np.ascontiguousarray(g_x), g_w, g_b

        tape.record(out, (x, weights, bias), backward)
    return out


def maxpool3d(x: Tensor, spec: PoolSpec, tape: GradientTape | None = None) -> Tensor:
    """3D max pool of x[C,T,H,W]; padded positions count as -inf. Gradient is
    routed to the first maximal element of each window in scan order."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool3d input must be 4-D (C,T,H,W), got {x.shape}")
    kt, kh, kw = spec.kernel
    st, sh, sw = spec.stride
    pt, ph, pw = spec.padding
    To, Ho, Wo = _out_shape(x.shape[1:], spec.kernel, spec.stride, spec.padding, "maxpool3d")

    if (pt, ph, pw) == (0, 0, 0):
        xp = x.data
    else:
        xp = np.pad(x.data, ((0, 0), (pt, pt), (ph, ph), (pw, pw)),
                    constant_values=-np.inf)
    C = x.shape[0]
    sc, stt, shh, sww = xp.strides
    win = as_strided(xp, shape=(C, To, Ho, Wo, kt, kh, kw),
                     strides=(sc, stt * st, shh * sh, sww * sw, stt, shh, sww))
    out_data = win.max(axis=(4, 5, 6))
    check_finite(out_data, "maxpool3d output")
    out = Tensor(out_data, validate=False)

    if tape is not None:
        # argmax over the flattened window gives the first max in scan order
        arg = win.reshape(C, To, Ho, Wo, kt * kh * kw).argmax(axis=4)
        dt, rem = np.divmod(arg, kh * kw)
        dh, dw = np.divmod(rem, kw)
        ci, ti, hi, wi = np.indices((C, To, Ho, Wo), sparse=False)
        src_t = ti * st + dt
        src_h = hi * sh + dh
        src_w = wi * sw + dw

        def backward(g_out: np.ndarray):
            g_xp = np.zeros_like(xp)
            np.add.at(g_xp, (ci, src_t, src_h, src_w), g_out)
            if (pt, ph, pw) == (0, 0, 0):
                g_x = g_xp
            else:
                T, H, W = x.shape[1:]
                g_x = np.ascontiguousarray(g_xp[:, pt:pt + T, ph:ph + H, pw:pw + W])
            return (g_x,)

        tape.record(out, (x,), backward)
    return out


def fc(x: Tensor, weights: Tensor, bias: Tensor,
       tape: GradientTape | None = None) -> Tensor:
    """Affine map weights[m,n] @ x[n] + bias[m]."""
    if x.data.ndim != 1 or weights.data.ndim != 2 or bias.data.ndim != 1:
        raise ShapeError(f"fc expects x[n], weights[m,n], bias[m]; got "
                         f"{x.shape}, {weights.shape}, {bias.shape}")
    m, n = weights.shape
    if x.shape != (n,) or bias.shape != (m,):
        raise ShapeError(f"fc dimension mismatch: weights {weights.shape}, "
                         f"x {x.shape}, bias {bias.shape}")
    if x.dtype != weights.dtype or x.dtype != bias.dtype:
        raise ShapeError("fc operands must share one dtype")
    out_data = weights.data @ x.data + bias.data
    check_finite(out_data, "fc output")
    out = Tensor(out_data, validate=False)

    if tape is not None:
        def backward(g: np.ndarray):
            return weights.data.T @ g, np.outer(g, x.data), g.copy()

        tape.record(out, (x, weights, bias), backward)
    return out


def relu(x: Tensor, tape: GradientTape | None = None) -> Tensor:
    """Elementwise max(x, 0); subgradient at 0 is 0."""
    out = Tensor(np.maximum(x.data, 0), validate=False)
    if tape is not None:
        mask = x.data > 0

        def backward(g: np.ndarray):
            return (g * mask,)

        tape.record(out, (x,), backward)
    return out


def softmax(logits: Tensor, tape: GradientTape | None = None) -> Tensor:
    """Stable softmax over a 1-D logit vector."""
    if logits.data.ndim != 1 or logits.size < 1:
        raise ShapeError(f"softmax expects a non-empty 1-D tensor, got {logits.shape}")
    z = logits.data - logits.data.max()
    e = np.exp(z)
    p = e / e.sum()
    check_finite(p, "softmax output")
    out = Tensor(p, validate=False)

    if tape is not None:
        def backward(g: np.ndarray):
            return (p * (g - np.dot(g, p)),)

        tape.record(out, (logits,), backward)
    return out


def abs_diff(f1: Tensor, f2: Tensor, tape: GradientTape | None = None) -> Tensor:
    """Elementwise |f1 - f2|; the distance layer feeding the verification head."""
    if f1.shape != f2.shape:
        raise ShapeError(f"abs_diff shape mismatch: {f1.shape} vs {f2.shape}")
    diff = f1.data - f2.data
    check_finite(diff, "abs_diff output")
    out = Tensor(np.abs(diff), validate=False)

    if tape is not None:
        sign = np.sign(diff)  # 0 where equal: subgradient choice

        def backward(g: np.ndarray):
            gs = g * sign
            return gs, -gs

        tape.record(out, (f1, f2), backward)
    return out


def flatten(x: Tensor, tape: GradientTape | None = None) -> Tensor:
    """Reshape to 1-D, row-major."""
    out = Tensor(x.data.reshape(-1), validate=False)
    if tape is not None:
        def backward(g: np.ndarray):
            return (g.reshape(x.shape),)

        tape.record(out, (x,), backward)
    return out


def add(a: Tensor, b: Tensor, tape: GradientTape | None = None) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out_data = a.data + b.data
    check_finite(out_data, "add output")
    out = Tensor(out_data, validate=False)
    if tape is not None:
        def backward(g: np.ndarray):
            return g, g

        tape.record(out, (a, b), backward)
    return out


def scale(a: Tensor, factor: float, tape: GradientTape | None = None) -> Tensor:
    """Multiply by a constant."""
    factor = float(factor)
    if not np.isfinite(factor):
        raise NumericsError(f"scale factor must be finite, got {factor}")
    out_data = a.data * factor
    check_finite(out_data, "scale output")
    out = Tensor(out_data, validate=False)
    if tape is not None:
        def backward(g: np.ndarray):
            return (g * factor,)

        tape.record(out, (a,), backward)
    return out
