"""Central finite-difference checks of every differentiable op.

Each op check draws a random instance, back-propagates a random linear
projection of the op output and compares against central differences of
the same projection. Backward runs in float32; the difference quotients
evaluate the same code in float64, because a float32 difference quotient
with a 1e-3 step carries rounding noise of order 1e-3 on its own.

The micro-network checks differentiate the full training objective with
respect to every parameter of a tiny FFL model. Components whose
finite-difference step flips any relu are excluded, as they straddle a
kink.
"""

import time

import numpy as np

from . import losses as L
from . import tensor as T
from .model import build_ffl
from .nn import CASE1, CASE2, EnsembleTopology, NetworkSpec
from .tensor import Tensor, finite_difference_grad, record_relu_masks

STEP = 1e-3
TOLERANCE = 1e-3


def relative_error(analytic, numeric):
    """max |a - n| normalised by the largest gradient magnitude."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def _leaf(rng, shape, away_from_zero=0.0):
    data = rng.standard_normal(shape)
    if away_from_zero:
        data = np.where(np.abs(data) < away_from_zero, np.sign(data + 1e-12) * away_from_zero * 4, data)
    return Tensor(data, requires_grad=True)


def _onehot(labels, m):
    out = np.zeros((len(labels), m), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1
    return out


def projection_error(fn, inputs, rng, step=STEP):
    """Worst relative error over all differentiable ``inputs`` of ``fn``."""
    for x in inputs:
        x.grad = None
    out = fn(*inputs)
    weights = rng.standard_normal(out.shape).astype(np.float32)
    T.sum(T.mul(out, Tensor(weights))).backward()
    w64 = weights.astype(np.float64).ravel()

    def objective(_):
        with T.precision(np.float64):
            wide = [Tensor(x.data) for x in inputs]
            return float(fn(*wide).data.ravel() @ w64)

    worst = 0.0
    for x in inputs:
        if x.requires_grad:
            numeric = finite_difference_grad(objective, x, step)
            worst = max(worst, relative_error(x.grad, numeric.data))
    return worst


# --- op instances -----------------------------------------------------------
# Each returns (fn, inputs) for one random instance.


def _elementwise(op):
    def make(rng):
        a = _leaf(rng, (3, 4))
        b = _leaf(rng, (3, 4) if rng.random() < 0.5 else (1, 4))
        return op, [a, b]
    return make


def _scale(rng):
    c = float(rng.uniform(-2, 2))
    return (lambda a: T.scale(a, c)), [_leaf(rng, (3, 4))]


def _matmul(rng):
    return T.matmul, [_leaf(rng, (3, 4)), _leaf(rng, (4, 2))]


def _conv2d(rng):
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    return (lambda x, k: T.conv2d(x, k, stride, padding)), [_leaf(rng, (2, 3, 5, 5)), _leaf(rng, (4, 3, 3, 3))]


def _depthwise(rng):
    return T.depthwise_conv2d, [_leaf(rng, (2, 4, 5, 5)), _leaf(rng, (4, 1, 3, 3))]


def _relu(rng):
    return T.relu, [_leaf(rng, (3, 5), away_from_zero=10 * STEP)]


def _gap(rng):
    return T.global_avg_pool, [_leaf(rng, (2, 3, 4, 4))]


def _batchnorm(training):
    def make(rng):
        c = 3
        mean = rng.standard_normal(c).astype(np.float32)
        var = rng.uniform(0.5, 2.0, c).astype(np.float32)

        def fn(x, g, b):
            # fresh buffers per call keep every evaluation identical
            return T.batchnorm2d(x, g, b, mean.copy(), var.copy(), training)

        gamma = Tensor(rng.uniform(0.5, 1.5, c), requires_grad=True)
        return fn, [_leaf(rng, (4, c, 3, 3)), gamma, _leaf(rng, (c,))]
    return make


def _concat(rng):
    shapes = [(2, c, 3, 3) for c in rng.integers(1, 4, size=3)]
    return (lambda *xs: T.concat_channels(list(xs))), [_leaf(rng, s) for s in shapes]


def _log_softmax(rng):
    t = float(rng.uniform(0.5, 4.0))
    return (lambda z: T.log_softmax(z, t)), [_leaf(rng, (4, 5))]


def _softened_softmax(rng):
    t = float(rng.uniform(0.5, 4.0))
    return (lambda z: L.softened_softmax(z, t)), [_leaf(rng, (4, 5))]


def _exp(rng):
    return T.exp, [_leaf(rng, (3, 4))]


def _cross_entropy(rng):
    y = _onehot(rng.integers(0, 5, size=4), 5)
    return (lambda z: L.cross_entropy(z, y)), [_leaf(rng, (4, 5))]


def _kl(rng):
    t = float(rng.uniform(1.0, 4.0))
    return (lambda p, q: L.kl_divergence(p, q, t, detach_teacher=False)), [_leaf(rng, (4, 5)), _leaf(rng, (4, 5))]


def _adapter(rng):
    # strided 3x3 conv used by the resolution adapter: 8x8 -> 4x4
    return (lambda x, k: T.conv2d(x, k, 2, 1)), [_leaf(rng, (2, 3, 8, 8)), _leaf(rng, (3, 3, 3, 3))]


OP_CHECKS = {
    "add": _elementwise(T.add),
    "sub": _elementwise(T.sub),
    "mul": _elementwise(T.mul),
    "scale": _scale,
    "matmul": _matmul,
    "conv2d": _conv2d,
    "depthwise_conv2d": _depthwise,
    "adapter_conv": _adapter,
    "relu": _relu,
    "global_avg_pool": _gap,
    "batchnorm2d_train": _batchnorm(True),
    "batchnorm2d_eval": _batchnorm(False),
    "concat_channels": _concat,
    "exp": _exp,
    "log_softmax": _log_softmax,
    "softened_softmax": _softened_softmax,
    "cross_entropy": _cross_entropy,
    "kl_divergence": _kl,
}


# --- full objective on a micro network ----------------------------------------


def micro_model(rng, mode=CASE1):
    """Tiny two-branch FFL model, batch and labels for the full-loss check."""
    if mode == CASE1:
        specs = [NetworkSpec(stages=(2, 3), num_classes=2, in_channels=2)]
    else:
        # different widths and final resolutions, joined by the adapter
        specs = [
            NetworkSpec(stages=(2, 3), num_classes=2, in_channels=2),
            NetworkSpec(stages=(3,), num_classes=2, in_channels=2),
        ]
    model = build_ffl(EnsembleTopology(mode, 2), specs, image_size=4, rng=rng)
    x = Tensor(rng.standard_normal((4, 2, 4, 4)))
    y = _onehot(np.array([0, 1, 0, 1]), 2)
    return model, x, y


def micro_loss_error(rng, mode=CASE1, step=STEP, temperature=3.0):
    """Relative error of backward vs central differences for the full loss.

    The teacher is not detached so that backward is the true gradient of
    the objective.
    """
    model, x, y = micro_model(rng, mode)
    cfg = L.DistillConfig(temperature, detach_teacher=False)
    model.train()

    def evaluate():
        with T.no_grad(), T.precision(np.float64), record_relu_masks() as masks:
            value = float(L.total_loss(model(Tensor(x.data)), y, cfg).loss.data)
        return value, masks

    model.zero_grad()
    L.total_loss(model(x), y, cfg).loss.backward()
    _, base = evaluate()

    def same_pattern(masks):
        return all(np.array_equal(a, b) for a, b in zip(masks, base))

    analytic, numeric = [], []
    for p in model.parameters():
        flat = p.data.reshape(-1)
        grad = p.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            hi, lo = orig + np.float32(step), orig - np.float32(step)
            flat[i] = hi
            f_plus, m_plus = evaluate()
            flat[i] = lo
            f_minus, m_minus = evaluate()
            flat[i] = orig
            if not (same_pattern(m_plus) and same_pattern(m_minus)):
                continue
            analytic.append(grad[i])
            numeric.append((f_plus - f_minus) / (float(hi) - float(lo)))
    return relative_error(analytic, numeric)


MICRO_CHECKS = {
    "ffl_loss_case1": lambda rng: micro_loss_error(rng, CASE1),
    "ffl_loss_case2": lambda rng: micro_loss_error(rng, CASE2),
}

ALL_CHECKS = list(OP_CHECKS) + list(MICRO_CHECKS)


def run_gradcheck(ops=None, seed=0, instances=20, micro_instances=3, tolerance=TOLERANCE, log=None):
    """Run the selected checks; returns {name: (max relative error, seconds)}.

    Op checks draw ``instances`` random instances each; the micro-network
    checks, which difference every parameter of a whole model, draw
    ``micro_instances``.
    """
    names = ALL_CHECKS if not ops else list(ops)
    unknown = [n for n in names if n not in ALL_CHECKS]
    if unknown:
        raise KeyError(f"unknown gradcheck op(s): {', '.join(unknown)}")
    report = {}
    for name in names:
        rng = np.random.default_rng([seed, ALL_CHECKS.index(name)])
        start = time.perf_counter()
        if name in OP_CHECKS:
            worst = max(projection_error(*OP_CHECKS[name](rng), rng) for _ in range(instances))
        else:
            worst = max(MICRO_CHECKS[name](rng) for _ in range(micro_instances))
        report[name] = (worst, time.perf_counter() - start)
        if log is not None:
            status = "ok" if worst < tolerance else "FAIL"
            log(f"{name:<20s} max rel err {worst:.3e}  {status}")
    return report
