"""Central finite-difference checks of every differentiable op and of a
complete multi-task micro network (float64)."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import loss as L
from . import model as M
from . import tensor as T
from .tensor import ConvSpec, Tensor

STEP = 1e-5
TOLERANCE = 1e-6


def numerical_grad(f: Callable[[], float], arr: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / max(||a||, ||b||), 0 when both vanish."""
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if den == 0 else float(np.linalg.norm(a - b) / den)


def check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = STEP) -> float:
    """Max relative error over inputs of d(sum(fn(*inputs) * R))/d(input)
    for a fixed random projection R (or the scalar output itself)."""
    leaves = [Tensor(a, requires_grad=True) for a in inputs]
    out = fn(*leaves)
    proj = None
    if out.data.size != 1:
        proj = np.random.Generator(np.random.PCG64(12345)).standard_normal(out.shape)

    def scalar() -> float:
        o = fn(*[Tensor(l.data) for l in leaves])
        return float(o.data.sum()) if proj is None else float((o.data * proj).sum())

    T.backward(out if proj is None else T.sum(T.mul(out, proj)))
    worst = 0.0
    for leaf in leaves:
        num = numerical_grad(scalar, leaf.data, h)
        ana = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        worst = max(worst, rel_error(ana, num))
    return worst


# --------------------------------------------------------------------------
# per-op cases; each returns (fn, inputs) for a seed


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def _away_from_zero(r, shape, margin=0.05):
    u = r.standard_normal(shape)
    return np.sign(u) * (margin + np.abs(u))


def _distinct(r, shape):
    n = int(np.prod(shape))
    return (r.permutation(n) * 0.01 + r.uniform(-0.001, 0.001)).reshape(shape) - n * 0.005


def case_conv2d(seed):
    r = _rng(seed)
    n, c, o = r.integers(1, 3), r.integers(1, 4), r.integers(1, 4)
    k, s = int(r.choice([1, 3])), int(r.integers(1, 3))
    p = int(r.integers(0, 2)) if k == 3 else 0
    h, w = int(r.integers(k + 1, 7)), int(r.integers(k + 1, 7))
    spec = ConvSpec(int(c), int(o), (k, k), (s, s), (p, p), True)
    return (lambda x, wt, b: T.conv2d(x, wt, b, spec)), [r.standard_normal((n, c, h, w)),
                                                         r.standard_normal((o, c, k, k)), r.standard_normal(o)]


def case_deconv2d(seed):
    r = _rng(seed)
    s = int(r.choice([1, 2, 4]))
    k = s if r.random() < 0.4 or s == 1 else 2 * s
    n, c, o = r.integers(1, 3), r.integers(1, 4), r.integers(1, 4)
    h, w = r.integers(1, 4), r.integers(1, 4)
    return (lambda x, wt: T.deconv2d(x, wt, s)), [r.standard_normal((n, c, h, w)), r.standard_normal((c, o, k, k))]


def case_maxpool2d(seed):
    r = _rng(seed)
    k, s, p = [(2, 2, 0), (3, 2, 1), (3, 1, 1)][seed % 3]
    shape = (int(r.integers(1, 3)), int(r.integers(1, 3)), int(r.integers(4, 8)), int(r.integers(4, 8)))
    return (lambda x: T.maxpool2d(x, k, s, p)), [_distinct(r, shape)]


def case_batchnorm_train(seed):
    r = _rng(seed)
    shape = (int(r.integers(2, 4)), int(r.integers(1, 4)), int(r.integers(2, 4)), int(r.integers(2, 4)))
    c = shape[1]
    st = T.BatchNormState(np.zeros(c), np.ones(c))
    return (lambda x, g, b: T.batchnorm2d(x, g, b, st, "train")[0]), [
        r.standard_normal(shape) * 2 + 1, r.standard_normal(c), r.standard_normal(c)]


def case_batchnorm_eval(seed):
    r = _rng(seed)
    shape = (2, 3, 3, 3)
    st = T.BatchNormState(r.standard_normal(3), r.uniform(0.5, 2, 3))
    return (lambda x, g, b: T.batchnorm2d(x, g, b, st, "eval")[0]), [
        r.standard_normal(shape), r.standard_normal(3), r.standard_normal(3)]


def _elementwise(name):
    def case(seed):
        r = _rng(seed)
        shape = (int(r.integers(1, 4)), int(r.integers(1, 5)))
        if name == "relu":
            return T.relu, [_away_from_zero(r, shape)]
        if name == "log":
            return T.log, [r.uniform(0.5, 2.0, shape)]
        fn = {"sigmoid": T.sigmoid, "exp": T.exp, "square": T.square,
              "softmax": lambda x: T.softmax(x, axis=-1), "log_softmax": lambda x: T.log_softmax(x, axis=-1),
              "sum": lambda x: T.sum(x, axis=0), "reshape": lambda x: T.reshape(x, (-1,)),
              "transpose": lambda x: T.transpose(x, (1, 0)), "getitem": lambda x: x[:, :1]}[name]
        return fn, [r.standard_normal(shape)]
    return case


def _binary(name):
    def case(seed):
        r = _rng(seed)
        shape = (2, int(r.integers(1, 4)), 2, 2)
        if name == "concat_channels":
            return T.concat_channels, [r.standard_normal(shape), r.standard_normal((2, 2, 2, 2))]
        return {"add": T.add, "sub": T.sub, "mul": T.mul}[name], [r.standard_normal(shape), r.standard_normal(shape)]
    return case


def case_seg_loss(seed):
    r = _rng(seed)
    n, c, h, w = 2, 3, 3, 4
    labels = r.integers(0, c, (n, h, w))
    labels[0, 0, 0] = L.IGNORE_LABEL
    mask = r.random((n, h, w)) > 0.2
    mask[0, 1, 1] = True
    labels[0, 1, 1] = 1
    return (lambda x: L.seg_loss(x, labels, mask)), [r.standard_normal((n, c, h, w))]


def case_det_loss(seed):
    r = _rng(seed)
    anchors = [(1.0, 1.0), (2.0, 1.5)]
    grid, ncls = (2, 3), 3
    gts = [L.DetTargets([(int(r.integers(0, ncls)), r.uniform(0.05, 0.95), r.uniform(0.05, 0.95),
                          r.uniform(0.1, 0.6), r.uniform(0.1, 0.6))]) for _ in range(2)]
    tg = L.assign_targets(gts, grid, anchors, ncls, dtype=np.float64)
    return (lambda raw: L.det_loss(raw, tg, ncls)), [r.standard_normal((2, len(anchors) * (5 + ncls)) + grid)]


OP_CASES = {
    "conv2d": case_conv2d, "deconv2d": case_deconv2d, "maxpool2d": case_maxpool2d,
    "batchnorm2d_train": case_batchnorm_train, "batchnorm2d_eval": case_batchnorm_eval,
    **{n: _elementwise(n) for n in ("relu", "sigmoid", "exp", "log", "square", "softmax", "log_softmax",
                                    "sum", "reshape", "transpose", "getitem")},
    **{n: _binary(n) for n in ("add", "sub", "mul", "concat_channels")},
    "seg_loss": case_seg_loss, "det_loss": case_det_loss,
}


# --------------------------------------------------------------------------
# micro network


# full topology (both heads, both skips) with every layer at 4 channels, two
# seg classes, one anchor and one detection class; 3244 parameters
MICRO_SPEC = M.ModelSpec(input_size=(32, 64), width_mult=1 / 128, seg_classes=("background", "road"),
                         det_classes=("car",), anchors=((1.0, 1.0),), channel_floor=4)


def micro_batch(spec: M.ModelSpec, seed: int):
    r = _rng(seed)
    h, w = spec.input_size
    x = r.random((2, 3, h, w))
    labels = r.integers(0, len(spec.seg_classes), (2, h, w))
    c = len(spec.det_classes)
    boxes = [[(0, 0.3, 0.5, 0.4, 0.6)], [(1 % c, 0.7, 0.4, 0.2, 0.5), (0, 0.2, 0.6, 0.3, 0.3)]]
    targets = L.assign_targets([L.DetTargets(b) for b in boxes], spec.grid, spec.anchors, c, dtype=np.float64)
    return x, labels, targets


def micro_loss(params: M.ModelParams, spec: M.ModelSpec, x, labels, targets: L.AssignedTargets,
               weights: L.LossWeights, mode: str = "train") -> Tensor:
    out = M.forward(params, spec, Tensor(x), mode, {})
    l_seg = L.seg_loss(out.seg, labels) if out.seg is not None else None
    l_det = L.det_loss(out.det, targets, len(spec.det_classes)) if out.det is not None else None
    return L.mtl_loss(l_seg, l_det, weights)


def check_micro_net(seed: int = 0, weights: L.LossWeights = L.LossWeights(1.0, 1.0),
                    spec: M.ModelSpec = MICRO_SPEC) -> tuple:
    """(max per-tensor relative error, parameter count) of the full network."""
    params = M.build(spec, seed, dtype="f64")
    x, labels, targets = micro_batch(spec, seed)
    T.backward(micro_loss(params, spec, x, labels, targets, weights))
    frozen = params.copy()

    def f() -> float:
        return float(micro_loss(frozen, spec, x, labels, targets, weights).data)

    worst = 0.0
    for name in params.trainable():
        num = numerical_grad(f, frozen[name].data)
        worst = max(worst, rel_error(params[name].grad, num))
    return worst, params.num_trainable()


@dataclass
class CheckResult:
    name: str
    seed: int
    error: float

    @property
    def ok(self) -> bool:
        return self.error < TOLERANCE


def run_suite(seeds: int = 20, micro_seeds: int = 1, log=print) -> list:
    """Every op for ``seeds`` seeds plus the micro network; returns all results."""
    results = []
    t0 = time.perf_counter()
    was_checking = T.check_finite_enabled()
    T.set_check_finite(False)  # the scan would dominate thousands of tiny evaluations
    try:
        _run(results, seeds, micro_seeds, log)
    finally:
        T.set_check_finite(was_checking)
    if log:
        log(f"gradcheck finished in {time.perf_counter() - t0:.1f}s")
    return results


def _run(results, seeds, micro_seeds, log):
    for name, case in OP_CASES.items():
        worst = CheckResult(name, -1, 0.0)
        for seed in range(seeds):
            fn, inputs = case(seed)
            err = check(fn, inputs)
            results.append(CheckResult(name, seed, err))
            if err >= worst.error:
                worst = CheckResult(name, seed, err)
        if log:
            log(f"{'PASS' if worst.error < TOLERANCE else 'FAIL'} {name:<20} max rel err {worst.error:.2e} "
                f"over {seeds} seeds")
    for seed in range(micro_seeds):
        err, n = check_micro_net(seed)
        results.append(CheckResult("mtl_micro_net", seed, err))
        if log:
            log(f"{'PASS' if err < TOLERANCE else 'FAIL'} {'mtl_micro_net':<20} rel err {err:.2e} "
                f"({n} params, seed {seed})")
