"""Finite-difference verification of tape gradients.

`grad_check` is the independent oracle for every backward rule in the
package: it compares tape gradients against central differences computed
from nothing but repeated forward evaluations.
"""

from __future__ import annotations

import numpy as np

from .tensor import GradientTape, ShapeError, Tensor


def grad_check(fn, inputs, eps: float = 1e-5, max_coords_per_input: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    fn(*inputs, tape=...) must return a scalar Tensor and be a pure function
    of the input tensors. Every coordinate of every input is perturbed by
    +-eps unless max_coords_per_input caps the count, in which case a seeded
    subset is checked (used only for whole-model checks where an exhaustive
    sweep is too slow). Relative error per coordinate is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-6); the floor keeps
    central-difference cancellation noise (~1e-11 for an O(1) loss) from
    registering as error on coordinates whose true gradient is zero.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    tape = GradientTape()
    out = fn(*inputs, tape=tape)
    if out.data.shape != ():
        raise ShapeError(f"grad_check needs a scalar-valued fn, got shape {out.data.shape}")
    tape.backward(out)
    analytic = [tape.grad(t).reshape(-1).copy() for t in inputs]

    worst = 0.0
    for t, ana in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        if max_coords_per_input is not None and n > max_coords_per_input:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=max_coords_per_input, replace=False)
        else:
            coords = range(n)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = fn(*inputs, tape=None).item()
            flat[i] = orig - eps
            f_minus = fn(*inputs, tape=None).item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(float(ana[i]) - numeric) / max(abs(float(ana[i])), abs(numeric), 1e-6)
            worst = max(worst, err)
    return worst


def numeric_gradient(fn, inputs, index: int, eps: float = 1e-5) -> np.ndarray:
    """Full central-difference gradient of fn wrt inputs[index]."""
    t = inputs[index]
    flat = t.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = fn(*inputs, tape=None).item()
        flat[i] = orig - eps
        f_minus = fn(*inputs, tape=None).item()
        flat[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad.reshape(t.shape)


# --- the standard verification suite shared by the CLI and the test gate ---

LAYER_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3


def _scalarize(vec: Tensor, tape: GradientTape | None) -> Tensor:
    """Collapse a length-1 tensor into the scalar root grad_check needs."""
    root = Tensor(vec.data.reshape(()), validate=False)
    if tape is not None:
        tape.record(root, (vec,), lambda g: (g.reshape(1),))
    return root


def _mix_to_scalar(x: Tensor, weights: Tensor, tape: GradientTape | None) -> Tensor:
    from . import ops
    flat = ops.flatten(x, tape)
    out = ops.fc(flat, weights, Tensor(np.zeros(1)), tape)
    return _scalarize(out, tape)


def standard_suite(seeds: int = 5, model_coords: int = 8) -> list[tuple[str, float, float]]:
    """(name, max relative error, tolerance) per checked item.

    Covers every layer, every loss, and the full tiny-model joint loss.
    The tiny-model check samples model_coords coordinates per parameter
    tensor; everything else sweeps exhaustively.
    """
    from . import losses, network, ops
    from .ops import ConvSpec, PoolSpec

    items: list[tuple[str, float, float]] = []

    def run(name, tolerance, builder):
        worst = 0.0
        for seed in range(seeds):
            worst = max(worst, builder(np.random.default_rng(1000 * seed + 17)))
        items.append((name, worst, tolerance))

    def conv_case(rng):
        x = Tensor(rng.normal(size=(2, 3, 5, 5)))
        w = Tensor(rng.normal(size=(2, 2, 3, 3, 3)))
        b = Tensor(rng.normal(size=2))
        mix = Tensor(rng.normal(size=(1, 2 * 3 * 5 * 5)))

        def fn(x_, w_, b_, tape=None):
            return _mix_to_scalar(ops.conv3d(x_, w_, b_, ConvSpec(2), tape), mix, tape)

        return grad_check(fn, [x, w, b])

    def pool_case(rng):
        x = Tensor(rng.normal(size=(2, 4, 6, 6)))
        mix = Tensor(rng.normal(size=(1, 2 * 2 * 3 * 3)))

        def fn(x_, tape=None):
            return _mix_to_scalar(ops.maxpool3d(x_, PoolSpec(2, 2), tape), mix, tape)

        return grad_check(fn, [x])

    def fc_case(rng):
        x = Tensor(rng.normal(size=6))
        w = Tensor(rng.normal(size=(4, 6)))
        b = Tensor(rng.normal(size=4))
        mix = Tensor(rng.normal(size=(1, 4)))

        def fn(x_, w_, b_, tape=None):
            return _mix_to_scalar(ops.fc(x_, w_, b_, tape), mix, tape)

        return grad_check(fn, [x, w, b])

    def relu_case(rng):
        # keep values away from the kink, where finite differences lie
        x = Tensor(np.where(np.abs(v := rng.normal(size=12)) < 0.1, v + 0.5, v))
        mix = Tensor(rng.normal(size=(1, 12)))

        def fn(x_, tape=None):
            return _mix_to_scalar(ops.relu(x_, tape), mix, tape)

        return grad_check(fn, [x])

    def softmax_case(rng):
        z = Tensor(rng.normal(size=7))
        mix = Tensor(rng.normal(size=(1, 7)))

        def fn(z_, tape=None):
            return _mix_to_scalar(ops.softmax(z_, tape), mix, tape)

        return grad_check(fn, [z])

    def abs_diff_case(rng):
        a = Tensor(rng.normal(size=9))
        b = Tensor(rng.normal(size=9))
        mix = Tensor(rng.normal(size=(1, 9)))

        def fn(a_, b_, tape=None):
            return _mix_to_scalar(ops.abs_diff(a_, b_, tape), mix, tape)

        return grad_check(fn, [a, b])

    def identification_case(rng):
        z = Tensor(rng.normal(size=6))
        label = int(rng.integers(0, 6))

        def fn(z_, tape=None):
            return losses.identification_loss(ops.softmax(z_, tape), label, tape)

        return grad_check(fn, [z])

    def verification_case(rng):
        z = Tensor(rng.normal(size=2))
        signal = losses.VerificationSignal(int(rng.integers(0, 2)))

        def fn(z_, tape=None):
            return losses.verification_loss(ops.softmax(z_, tape), signal, tape)

        return grad_check(fn, [z])

    def contrastive_case(rng):
        worst = 0.0
        for same, scale in ((True, 1.0), (False, 0.05)):
            f1 = Tensor(rng.normal(size=6) * scale)
            f2 = Tensor(rng.normal(size=6) * scale)

            def fn(a, b, tape=None):
                return losses.contrastive_loss(a, b, same=same, tape=tape)

            worst = max(worst, grad_check(fn, [f1, f2]))
        return worst

    def joint_model_case(rng):
        config = network.tiny_config(n_classes=5, seed=int(rng.integers(1 << 16)))
        model = network.build_model(config)
        clip1 = Tensor(rng.normal(size=config.input_shape))
        clip2 = Tensor(rng.normal(size=config.input_shape))
        label1, label2 = 1, 3
        tensors = [model.params[name] for name in sorted(model.params)]

        def fn(*params, tape=None):
            p1, p2, p_pair = network.siamese_forward(model, clip1, clip2, tape)
            l1 = losses.identification_loss(p1, label1, tape)
            l2 = losses.identification_loss(p2, label2, tape)
            lv = losses.verification_loss(
                p_pair, losses.VerificationSignal.DIFFERENT, tape)
            return losses.overall_loss(l1, l2, lv, losses.LossWeights(1.0), tape)

        return grad_check(fn, tensors, max_coords_per_input=model_coords, rng=rng)

    run("conv3d", LAYER_TOLERANCE, conv_case)
    run("maxpool3d", LAYER_TOLERANCE, pool_case)
    run("fc", LAYER_TOLERANCE, fc_case)
    run("relu", LAYER_TOLERANCE, relu_case)
    run("softmax", LAYER_TOLERANCE, softmax_case)
    run("abs_diff", LAYER_TOLERANCE, abs_diff_case)
    run("identification_loss", LAYER_TOLERANCE, identification_case)
    run("verification_loss", LAYER_TOLERANCE, verification_case)
    run("contrastive_loss", LAYER_TOLERANCE, contrastive_case)
    run("joint_tiny_model", MODEL_TOLERANCE, joint_model_case)
    return items
