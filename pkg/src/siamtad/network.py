"""Backbone and siamese graph construction.

A model is a parametric stack of conv+pool stages feeding two fully
connected layers; both branches of the pair read the same parameter
tensors, so weight sharing is structural. Two linear heads sit on the
features: a class head (n_classes-way softmax over one clip) and a
verification head (2-way softmax over the elementwise absolute feature
difference of a clip pair).
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ops import ConvSpec, PoolSpec, abs_diff, conv3d, fc, flatten, maxpool3d, relu, softmax
from .tensor import (GradientTape, ShapeError, Tensor, load_tensor, resolve_dtype,
                     save_tensor)

CHECKPOINT_FORMAT = "siamtad-checkpoint-v1"


@dataclass(frozen=True)
class NetworkConfig:
    """Parametric description of the backbone and heads.

    conv_stages groups the conv filter counts by stage; each stage is
    followed by the pool at the same index. All convolutions share the
    kernel/stride/padding triple below (shape-preserving 3x3x3 by default).
    n_classes includes the background class at index 0.
    """

    input_shape: tuple[int, int, int, int]
    conv_stages: tuple[tuple[int, ...], ...]
    pools: tuple[PoolSpec, ...]
    fc_dims: tuple[int, int]
    n_classes: int
    seed: int = 0
    dtype: str = "float64"
    conv_kernel: tuple[int, int, int] = (3, 3, 3)
    conv_stride: tuple[int, int, int] = (1, 1, 1)
    conv_padding: tuple[int, int, int] = (1, 1, 1)

    def __post_init__(self):
        if len(self.input_shape) != 4 or any(e < 1 for e in self.input_shape):
            raise ValueError(f"input_shape must be 4 positive extents, got {self.input_shape}")
        if len(self.conv_stages) != len(self.pools):
            raise ValueError("need exactly one pool per conv stage")
        if not self.conv_stages or any(not s for s in self.conv_stages):
            raise ValueError("conv_stages must be non-empty tuples of filter counts")
        if len(self.fc_dims) != 2 or any(d < 1 for d in self.fc_dims):
            raise ValueError(f"fc_dims must be two positive widths, got {self.fc_dims}")
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2 (background + actions)")
        resolve_dtype(self.dtype)
        self.shape_schedule()  # fail fast on a schedule that collapses an extent

    @property
    def conv_channels(self) -> tuple[int, ...]:
        return tuple(c for stage in self.conv_stages for c in stage)

    @property
    def feature_dim(self) -> int:
        return self.fc_dims[1]

    def conv_spec(self, out_channels: int) -> ConvSpec:
        return ConvSpec(out_channels, self.conv_kernel, self.conv_stride, self.conv_padding)

    def shape_schedule(self) -> list[tuple[int, int, int, int]]:
        """(C,T,H,W) after each stage's pool; raises if an extent collapses."""
        c, t, h, w = self.input_shape
        schedule = []
        for stage, pool in zip(self.conv_stages, self.pools):
            for filters in stage:
                spec = self.conv_spec(filters)
                t = (t + 2 * spec.padding[0] - spec.kernel[0]) // spec.stride[0] + 1
                h = (h + 2 * spec.padding[1] - spec.kernel[1]) // spec.stride[1] + 1
                w = (w + 2 * spec.padding[2] - spec.kernel[2]) // spec.stride[2] + 1
                c = filters
            t = (t - pool.temporal_kernel) // pool.temporal_stride + 1
            h = (h + 2 * pool.spatial_padding - pool.spatial_kernel) // pool.spatial_stride + 1
            w = (w + 2 * pool.spatial_padding - pool.spatial_kernel) // pool.spatial_stride + 1
            if min(t, h, w) < 1:
                raise ShapeError(f"pooling schedule collapses an extent to {(c, t, h, w)}")
            schedule.append((c, t, h, w))
        return schedule

    @property
    def flat_dim(self) -> int:
        c, t, h, w = self.shape_schedule()[-1]
        return c * t * h * w

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "conv_stages": [list(s) for s in self.conv_stages],
            "pools": [{"temporal_kernel": p.temporal_kernel,
                       "temporal_stride": p.temporal_stride,
                       "spatial_kernel": p.spatial_kernel,
                       "spatial_stride": p.spatial_stride,
                       "spatial_padding": p.spatial_padding} for p in self.pools],
            "fc_dims": list(self.fc_dims),
            "n_classes": self.n_classes,
            "seed": self.seed,
            "dtype": self.dtype,
            "conv_kernel": list(self.conv_kernel),
            "conv_stride": list(self.conv_stride),
            "conv_padding": list(self.conv_padding),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(
            input_shape=tuple(d["input_shape"]),
            conv_stages=tuple(tuple(s) for s in d["conv_stages"]),
            pools=tuple(PoolSpec(**p) for p in d["pools"]),
            fc_dims=tuple(d["fc_dims"]),
            n_classes=int(d["n_classes"]),
            seed=int(d.get("seed", 0)),
            dtype=d.get("dtype", "float64"),
            conv_kernel=tuple(d.get("conv_kernel", (3, 3, 3))),
            conv_stride=tuple(d.get("conv_stride", (1, 1, 1))),
            conv_padding=tuple(d.get("conv_padding", (1, 1, 1))),
        )


def full_config(n_classes: int = 21, seed: int = 0, dtype: str = "float64") -> NetworkConfig:
    """The full-size backbone: 8 conv layers over 5 stages, 112x112 input,
    4096-dim features, 21-way class head by default."""
    return NetworkConfig(
        input_shape=(3, 16, 112, 112),
        conv_stages=((64,), (128,), (256, 256), (512, 512), (512, 512)),
        pools=(
            PoolSpec(1, 1),
            PoolSpec(2, 2),
            PoolSpec(2, 2),
            PoolSpec(2, 2),
            PoolSpec(2, 2, spatial_padding=1),
        ),
        fc_dims=(4096, 4096),
        n_classes=n_classes,
        seed=seed,
        dtype=dtype,
    )


def tiny_config(n_classes: int = 5, seed: int = 0, dtype: str = "float64") -> NetworkConfig:
    """Desk-scale backbone for gradient checks and training tests; a forward
    pass takes milliseconds."""
    return NetworkConfig(
        input_shape=(1, 8, 16, 16),
        conv_stages=((4,), (8,), (8,), (8,)),
        pools=(
            PoolSpec(1, 1),
            PoolSpec(2, 2),
            PoolSpec(2, 2),
            PoolSpec(2, 2, spatial_kernel=1, spatial_stride=1),
        ),
        fc_dims=(32, 32),
        n_classes=n_classes,
        seed=seed,
    )


PRESETS = {"full": full_config, "tiny": tiny_config}


@dataclass
class SiameseModel:
    """Shared backbone parameters plus the two head parameter pairs.

    `params` maps layer names (conv1a, conv2a, ..., fc6, fc7, cls_head,
    ver_head; each with .weight and .bias) to tensors. Both siamese branches
    read these same tensors, so sharing holds by identity.
    """

    config: NetworkConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def conv_layer_names(self) -> list[str]:
        names = []
        for i, stage in enumerate(self.config.conv_stages, start=1):
            for j in range(len(stage)):
                names.append(f"conv{i}{string.ascii_lowercase[j]}")
        return names


def build_model(config: NetworkConfig) -> SiameseModel:
    """Initialize all parameters: fan-in-scaled Gaussians for weights, zero
    biases, drawn in fixed layer order from the config seed."""
    rng = np.random.default_rng(config.seed)
    dtype = resolve_dtype(config.dtype)
    model = SiameseModel(config=config)

    def gaussian(shape, fan_in):
        std = np.sqrt(2.0 / fan_in)
        return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), validate=False)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), validate=False)

    in_channels = config.input_shape[0]
    kt, kh, kw = config.conv_kernel
    names = iter(model.conv_layer_names())
    for stage in config.conv_stages:
        for filters in stage:
            name = next(names)
            fan_in = in_channels * kt * kh * kw
            model.params[f"{name}.weight"] = gaussian((filters, in_channels, kt, kh, kw), fan_in)
            model.params[f"{name}.bias"] = zeros((filters,))
            in_channels = filters

    widths = [config.flat_dim, *config.fc_dims]
    for name, (n_in, n_out) in zip(("fc6", "fc7"), zip(widths, widths[1:])):
        model.params[f"{name}.weight"] = gaussian((n_out, n_in), n_in)
        model.params[f"{name}.bias"] = zeros((n_out,))

    feat = config.feature_dim
    model.params["cls_head.weight"] = gaussian((config.n_classes, feat), feat)
    model.params["cls_head.bias"] = zeros((config.n_classes,))
    model.params["ver_head.weight"] = gaussian((2, feat), feat)
    model.params["ver_head.bias"] = zeros((2,))
    return model


def parameter_count(model: SiameseModel) -> int:
    return sum(t.size for t in model.params.values())


def _as_input(model: SiameseModel, clip) -> Tensor:
    x = getattr(clip, "tensor", clip)
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.shape != model.config.input_shape:
        raise ShapeError(f"clip shape {x.shape} != network input {model.config.input_shape}")
    return x.astype(model.config.dtype)


def forward_features(model: SiameseModel, clip, tape: GradientTape | None = None) -> Tensor:
    """Run one clip through the backbone and both FC layers; returns the
    feature vector both heads consume."""
    x = _as_input(model, clip)
    cfg = model.config
    names = iter(model.conv_layer_names())
    for stage, pool in zip(cfg.conv_stages, cfg.pools):
        for filters in stage:
            name = next(names)
            x = conv3d(x, model.params[f"{name}.weight"], model.params[f"{name}.bias"],
                       cfg.conv_spec(filters), tape)
            x = relu(x, tape)
        x = maxpool3d(x, pool, tape)
    x = flatten(x, tape)
    for name in ("fc6", "fc7"):
        x = fc(x, model.params[f"{name}.weight"], model.params[f"{name}.bias"], tape)
        x = relu(x, tape)
    return x


def class_distribution(model: SiameseModel, features: Tensor,
                       tape: GradientTape | None = None) -> Tensor:
    """Class head on precomputed features: n_classes-way distribution."""
    logits = fc(features, model.params["cls_head.weight"], model.params["cls_head.bias"], tape)
    return softmax(logits, tape)


def verification_distribution(model: SiameseModel, f1: Tensor, f2: Tensor,
                              tape: GradientTape | None = None) -> Tensor:
    """Verification head on a feature pair: 2-way (different, same)."""
    fe = abs_diff(f1, f2, tape)
    logits = fc(fe, model.params["ver_head.weight"], model.params["ver_head.bias"], tape)
    return softmax(logits, tape)


def classify(model: SiameseModel, clip, tape: GradientTape | None = None) -> Tensor:
    """Single-branch class distribution for one clip."""
    return class_distribution(model, forward_features(model, clip, tape), tape)


def siamese_forward(model: SiameseModel, clip1, clip2,
                    tape: GradientTape | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """Both branches plus the verification head.

    Returns (p1, p2, p_pair): per-clip class distributions and the 2-way
    same/different distribution.
    """
    f1 = forward_features(model, clip1, tape)
    f2 = forward_features(model, clip2, tape)
    p1 = class_distribution(model, f1, tape)
    p2 = class_distribution(model, f2, tape)
    p_pair = verification_distribution(model, f1, f2, tape)
    return p1, p2, p_pair


def save_checkpoint(model: SiameseModel, directory: str | Path) -> None:
    """Write model.json (format tag + config + parameter names) and one
    tensor file pair per parameter."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    desc = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "parameters": list(model.params.keys()),
    }
    (directory / "model.json").write_text(json.dumps(desc, indent=2, sort_keys=True) + "\n")
    for name, tensor in model.params.items():
        save_tensor(tensor, directory / name)


def load_checkpoint(directory: str | Path) -> SiameseModel:
    directory = Path(directory)
    desc = json.loads((directory / "model.json").read_text())
    if desc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{directory}: unknown checkpoint format {desc.get('format')!r}")
    config = NetworkConfig.from_dict(desc["config"])
    model = SiameseModel(config=config)
    for name in desc["parameters"]:
        model.params[name] = load_tensor(directory / name)
        model.params[name].name = name
    return model
