"""Central finite-difference verification of every differentiable primitive.

Each check builds a tiny scalar-valued function of one or more tensors, runs
the tape backward once, then compares every analytic gradient entry against a
two-sided difference quotient.  Relative error uses a floored denominator so
near-zero entries are compared absolutely.

Default tolerances depend on the active dtype: the 32-bit mode uses a coarse
step and accepts 1e-2, the 64-bit check mode tightens both by two orders of
magnitude.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import ops
from . import tensor as tc
from .tensor import Tensor, backward, default_dtype, no_grad, using_dtype


@dataclass
class Tolerances:
    step: float
    floor: float
    bound: float


@dataclass
class CheckResult:
    name: str
    seed: int
    max_rel_err: float
    bound: float
    elapsed: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.bound


def tolerances() -> Tolerances:
    if default_dtype() == np.float64:
        return Tolerances(step=1e-5, floor=1e-4, bound=1e-4)
    return Tolerances(step=1e-2, floor=5e-2, bound=1e-2)


def fd_element(fn, wrt: Tensor, i: int, step: float) -> float:
    """Two-sided difference quotient of scalar fn() w.r.t. flat entry i of wrt.

    The perturbation is applied in place and uses the actually representable
    offsets, so the quotient divides by the true step.
    """
    flat = wrt.data.reshape(-1)
    with no_grad():
        orig = float(flat[i])
        h = step * max(1.0, abs(orig))
        flat[i] = orig + h
        h_plus = float(flat[i]) - orig
        f_plus = float(fn().data)
        flat[i] = orig - h
        h_minus = orig - float(flat[i])
        f_minus = float(fn().data)
        flat[i] = orig
    return (f_plus - f_minus) / (h_plus + h_minus)


def fd_gradient(fn, wrt: Tensor, step: float) -> np.ndarray:
    out = np.empty(wrt.data.size, dtype=np.float64)
    for i in range(out.size):
        out[i] = fd_element(fn, wrt, i, step)
    return out.reshape(wrt.data.shape)


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    b = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.abs(a - b) / denom


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> float:
    errs = relative_errors(analytic, numeric, floor)
    return float(errs.max()) if errs.size else 0.0


def check_gradients(fn, wrt, step: float, floor: float,
                    suspect_above: float | None = None, refine_steps=()) -> float:
    """Max relative error between backward() and finite differences over wrt.

    A difference quotient is untrustworthy when the step straddles a relu or
    maxpool kink: the measured slope is then off by O(slope change) no matter
    how correct the gradient is.  Entries whose error at `step` exceeds
    `suspect_above` are therefore re-measured at each of `refine_steps`,
    keeping the best agreement; a kink crossing disappears once the step drops
    below the kink distance, while a wrong gradient keeps failing.
    """
    for t in wrt:
        t.zero_grad()
    backward(fn())
    worst = 0.0
    for t in wrt:
        if t.grad is None:
            raise AssertionError("no gradient reached a checked tensor")
        analytic = t.grad.copy()
        errs = relative_errors(analytic, fd_gradient(fn, t, step), floor)
        if suspect_above is not None:
            flat_a = analytic.reshape(-1)
            for i in np.nonzero(errs > suspect_above)[0]:
                for h in refine_steps:
                    q = fd_element(fn, t, int(i), h)
                    a = float(flat_a[i])
                    errs[i] = min(errs[i], abs(a - q) / max(abs(a), abs(q), floor))
                    if errs[i] <= suspect_above:
                        break
        if errs.size:
            worst = max(worst, float(errs.max()))
    return worst


def _weighted_sum(out: Tensor, weight: Tensor) -> Tensor:
    return tc.tsum(tc.mul(out, weight))


def _const(rng, shape) -> Tensor:
    return Tensor(rng.uniform(-1.0, 1.0, size=shape), requires_grad=False)


def _away_from_zero(rng, shape, low=0.1, high=1.5) -> np.ndarray:
    # keeps |x| >= low so relu kinks sit outside the FD stencil
    return rng.uniform(low, high, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _build_add(rng):
    a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    c = _const(rng, (2, 3, 4))
    return lambda: _weighted_sum(tc.add(a, b), c), [a, b], 1.0


def _build_sub(rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    c = _const(rng, (3, 4))
    return lambda: _weighted_sum(tc.sub(a, b), c), [a, b], 1.0


def _build_neg(rng):
    a = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
    c = _const(rng, (2, 5))
    return lambda: _weighted_sum(tc.neg(a), c), [a], 1.0


def _build_mul(rng):
    a = Tensor(rng.normal(size=(2, 3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(2, 3, 3)), requires_grad=True)
    c = _const(rng, (2, 3, 3))
    return lambda: _weighted_sum(tc.mul(a, b), c), [a, b], 1.0


def _build_mul_scalar(rng):
    a = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    c = _const(rng, (4, 3))
    return lambda: _weighted_sum(tc.mul(a, 2.5), c), [a], 1.0


def _build_tsum(rng):
    a = Tensor(rng.normal(size=(3, 4, 2)), requires_grad=True)
    return lambda: tc.tsum(a), [a], 1.0


def _build_tmean(rng):
    a = Tensor(rng.normal(size=(2, 3, 4, 2)), requires_grad=True)
    c = _const(rng, (3, 2))
    return lambda: _weighted_sum(tc.tmean(a, axes=(0, 2)), c), [a], 1.0


def _build_concat(rng):
    parts = [Tensor(rng.normal(size=(1, k, 2, 3, 2)), requires_grad=True) for k in (1, 2, 3)]
    c = _const(rng, (1, 6, 2, 3, 2))
    return lambda: _weighted_sum(tc.concat(parts, axis=1), c), parts, 1.0


def _he_weight(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _build_conv3d_same(rng):
    x = Tensor(rng.normal(size=(1, 2, 4, 5, 3)), requires_grad=True)
    w = Tensor(_he_weight(rng, (3, 2, 3, 3, 3)), requires_grad=True)
    b = Tensor(rng.normal(0.0, 0.1, size=3), requires_grad=True)
    c = _const(rng, (1, 3, 4, 5, 3))
    return lambda: _weighted_sum(ops.conv3d(x, w, b, padding="same"), c), [x, w, b], 1.0


def _build_conv3d_valid(rng):
    x = Tensor(rng.normal(size=(1, 2, 5, 6, 4)), requires_grad=True)
    w = Tensor(_he_weight(rng, (2, 2, 3, 3, 3)), requires_grad=True)
    b = Tensor(rng.normal(0.0, 0.1, size=2), requires_grad=True)
    c = _const(rng, (1, 2, 3, 4, 2))
    return lambda: _weighted_sum(ops.conv3d(x, w, b, padding="valid"), c), [x, w, b], 1.0


def _build_conv3d_strided(rng):
    x = Tensor(rng.normal(size=(1, 1, 6, 5, 6)), requires_grad=True)
    w = Tensor(_he_weight(rng, (2, 1, 3, 3, 3)), requires_grad=True)
    b = Tensor(rng.normal(0.0, 0.1, size=2), requires_grad=True)
    c = _const(rng, (1, 2, 3, 3, 3))
    return lambda: _weighted_sum(ops.conv3d(x, w, b, padding="same", stride=2), c), [x, w, b], 1.0


def _build_conv_transpose3d(rng):
    x = Tensor(rng.normal(size=(1, 2, 2, 3, 2)), requires_grad=True)
    w = Tensor(rng.normal(0.0, 0.3, size=(2, 3, 2, 2, 2)), requires_grad=True)
    c = _const(rng, (1, 3, 4, 6, 4))
    return lambda: _weighted_sum(ops.conv_transpose3d(x, w), c), [x, w], 1.0


def _build_maxpool3d(rng):
    # well-separated values keep FD stencils away from argmax flips
    vals = np.linspace(-1.6, 1.6, 64)
    x = Tensor(rng.permutation(vals).reshape(1, 1, 4, 4, 4), requires_grad=True)
    c = _const(rng, (1, 1, 2, 2, 2))
    return lambda: _weighted_sum(ops.maxpool3d(x), c), [x], 0.1


def _build_batchnorm3d_train(rng):
    x = Tensor(rng.normal(0.0, 1.0, size=(2, 3, 4, 4, 3)), requires_grad=True)
    gamma = Tensor(rng.uniform(0.5, 1.5, size=3), requires_grad=True)
    beta = Tensor(rng.normal(0.0, 0.5, size=3), requires_grad=True)
    state = ops.BatchNormState(3, dtype=default_dtype())
    c = _const(rng, (2, 3, 4, 4, 3))
    return lambda: _weighted_sum(ops.batchnorm3d(x, gamma, beta, state), c), [x, gamma, beta], 1.0


def _build_batchnorm3d_eval(rng):
    x = Tensor(rng.normal(0.0, 1.0, size=(2, 3, 4, 4, 3)), requires_grad=True)
    gamma = Tensor(rng.uniform(0.5, 1.5, size=3), requires_grad=True)
    beta = Tensor(rng.normal(0.0, 0.5, size=3), requires_grad=True)
    state = ops.BatchNormState(3, dtype=default_dtype())
    state.running_mean = rng.normal(0.0, 0.5, size=3).astype(default_dtype())
    state.running_var = rng.uniform(0.5, 2.0, size=3).astype(default_dtype())
    state.mode = "eval"
    c = _const(rng, (2, 3, 4, 4, 3))
    return lambda: _weighted_sum(ops.batchnorm3d(x, gamma, beta, state), c), [x, gamma, beta], 1.0


def _build_relu(rng):
    x = Tensor(_away_from_zero(rng, (2, 3, 4, 4)), requires_grad=True)
    c = _const(rng, (2, 3, 4, 4))
    return lambda: _weighted_sum(ops.relu(x), c), [x], 1.0


def _build_leaky_relu(rng):
    x = Tensor(_away_from_zero(rng, (2, 3, 4, 4)), requires_grad=True)
    c = _const(rng, (2, 3, 4, 4))
    return lambda: _weighted_sum(ops.leaky_relu(x), c), [x], 1.0


def _build_sigmoid(rng):
    x = Tensor(rng.normal(0.0, 2.0, size=(2, 3, 4, 5)), requires_grad=True)
    c = _const(rng, (2, 3, 4, 5))
    return lambda: _weighted_sum(ops.sigmoid(x), c), [x], 1.0


def _build_bce_loss(rng):
    q = Tensor(rng.uniform(0.05, 0.95, size=(1, 1, 4, 5, 6)), requires_grad=True)
    p = Tensor(rng.uniform(0.0, 1.0, size=(1, 1, 4, 5, 6)), requires_grad=False)
    # the loss curvature blows up as 1/q^3 near the ends, so take smaller steps
    return lambda: ops.bce_loss(q, p), [q], 0.1


def _build_pad_reflect3d(rng):
    x = Tensor(rng.normal(size=(1, 1, 3, 4, 5)), requires_grad=True)
    c = _const(rng, (1, 1, 6, 7, 8))
    return lambda: _weighted_sum(ops.pad_reflect3d(x, ((1, 2), (0, 3), (2, 1))), c), [x], 1.0


def _build_crop3d(rng):
    x = Tensor(rng.normal(size=(1, 2, 4, 5, 6)), requires_grad=True)
    c = _const(rng, (1, 2, 2, 4, 3))
    return lambda: _weighted_sum(ops.crop3d(x, (1, 3), (0, 4), (2, 5)), c), [x], 1.0


CHECKS = [
    ("add", _build_add),
    ("sub", _build_sub),
    ("neg", _build_neg),
    ("mul", _build_mul),
    ("mul_scalar", _build_mul_scalar),
    ("tsum", _build_tsum),
    ("tmean", _build_tmean),
    ("concat", _build_concat),
    ("conv3d_same", _build_conv3d_same),
    ("conv3d_valid", _build_conv3d_valid),
    ("conv3d_strided", _build_conv3d_strided),
    ("conv_transpose3d", _build_conv_transpose3d),
    ("maxpool3d", _build_maxpool3d),
    ("batchnorm3d_train", _build_batchnorm3d_train),
    ("batchnorm3d_eval", _build_batchnorm3d_eval),
    ("relu", _build_relu),
    ("leaky_relu", _build_leaky_relu),
    ("sigmoid", _build_sigmoid),
    ("bce_loss", _build_bce_loss),
    ("pad_reflect3d", _build_pad_reflect3d),
    ("crop3d", _build_crop3d),
]

MODEL_CHECK_DIMS = (16, 16, 9)


def model_gradient_check(seed: int = 0, base_channels: int = 1) -> CheckResult:
    """Check every parameter gradient of a small residual network driven end
    to end through the loss.

    In float64 the gradients are finite-difference checked with a step small
    enough to keep relu/maxpool kink crossings rare, and any crossings that do
    happen are resolved by re-measuring at smaller steps.  A float32 FD of a
    deep composition drowns in forward rounding noise, so in float32 the
    gradient is instead compared against the float64 gradient at bit-identical
    weight values; that reference is itself FD-verified by the float64 pass.
    """
    from .models import ModelConfig, build_model, forward

    tol = tolerances()
    cfg = ModelConfig(depth=3, base_channels=base_channels, channel_growth=2,
                      residual_blocks_per_level=2, padding="same",
                      input_shape=MODEL_CHECK_DIMS, variant_tag="M3")
    rng = np.random.default_rng(seed + 1000)
    w, h, z = MODEL_CHECK_DIMS
    x_init = rng.uniform(0.05, 0.95, size=(1, 1, z, h, w))
    p_init = rng.uniform(0.0, 1.0, size=(1, 1, z, h, w))
    start = time.perf_counter()

    def run_backward(dtype, weights=None):
        with using_dtype(dtype):
            model = build_model(cfg, seed=seed)
            if weights is not None:
                for name, t in model.parameters.items():
                    t.data = weights[name].astype(dtype)
            loss = ops.bce_loss(forward(model, Tensor(x_init), mode="train"), Tensor(p_init))
            tc.backward(loss)
            return model

    if default_dtype() == np.float64:
        model = build_model(cfg, seed=seed)
        x = Tensor(x_init, requires_grad=False)
        p = Tensor(p_init, requires_grad=False)

        def fn():
            return ops.bce_loss(forward(model, x, mode="train"), p)

        err = check_gradients(fn, list(model.parameters.values()), 1e-6, tol.floor,
                              suspect_above=tol.bound, refine_steps=(1e-7, 2e-8))
    else:
        model32 = run_backward(np.float32)
        weights = {name: t.data.copy() for name, t in model32.parameters.items()}
        model64 = run_backward(np.float64, weights)
        err = max(max_relative_error(model32.parameters[n].grad,
                                     model64.parameters[n].grad, tol.floor)
                  for n in weights)
    return CheckResult("model_m3", seed, err, tol.bound, time.perf_counter() - start)


def run_gradient_suite(float64: bool = False, seeds=None, include_model: bool = True,
                       model_seeds=(0,)) -> list[CheckResult]:
    """Run all primitive checks on every seed, plus the whole-model check."""
    if seeds is None:
        seeds = range(20)
    results = []
    with using_dtype(np.float64 if float64 else np.float32):
        tol = tolerances()
        for name, build in CHECKS:
            for seed in seeds:
                rng = np.random.default_rng(seed)
                fn, wrt, step_scale = build(rng)
                start = time.perf_counter()
                err = check_gradients(fn, wrt, tol.step * step_scale, tol.floor)
                results.append(CheckResult(name, seed, err, tol.bound, time.perf_counter() - start))
        if include_model:
            for seed in model_seeds:
                results.append(model_gradient_check(seed))
    return results


def format_results(results) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status} {r.name:<18} seed={r.seed:<3d} rel_err={r.max_rel_err:.3e} "
                     f"bound={r.bound:.0e} ({r.elapsed:.2f}s)")
    failed = sum(not r.passed for r in results)
    total_time = sum(r.elapsed for r in results)
    lines.append(f"{len(results) - failed}/{len(results)} checks passed in {total_time:.1f}s")
    return "\n".join(lines)
