"""Oracle checks: parameter counts, gradients, schedules, pruning, accounting, equivalence."""
from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import engine as E
from . import models as M
from .optim import resnet_schedule, wrn_schedule
from .prune import compression_from_sparsity, iterative_sparsity, prune_structured, \
    prune_unstructured, structure_scores

REFERENCE_COUNTS = {
    "resnet20": (272282, 270896),
    "resnet56": (855578, 851504),
    "resnet110": (1730522, 1722416),
    "wrn16-8": (10961370, 10954160),
}
GRAD_TOL = 1e-4
GRAD_STEP = 1e-3
KINK = 1e-2  # ReLU inputs closer than this to 0 make finite differences meaningless


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    measured: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.measured} ({self.seconds:.1f}s)"


def _timed(name: str, fn: Callable[[], tuple[bool, str]]) -> CheckResult:
    t0 = time.perf_counter()
    ok, measured = fn()
    return CheckResult(name, bool(ok), measured, time.perf_counter() - t0)


def check_param_counts() -> list[CheckResult]:
    out = []
    for name, expected in REFERENCE_COUNTS.items():
        def one(name=name, expected=expected):
            r = M.count_params(M.model_spec(name))
            got = (r.trainable_count, r.kernel_count)
            return got == expected, f"trainable/kernel {got}, expected {expected}"
        out.append(_timed(f"param counts {name}", one))
    return out


# ------------------------------------------------------------------ gradients

def _relu_safe(rng, shape, scale=1.0):
    x = rng.standard_normal(shape) * scale
    return np.where(np.abs(x) < KINK, np.sign(x + 1e-300) * (KINK + np.abs(x)), x)


def _labels(rng, n, k):
    return rng.integers(0, k, size=n)


def _conv_case(stride, padding):
    def make(rng):
        x = rng.standard_normal((2, 5, 5, 2))
        w = rng.standard_normal((3, 3, 3, 2)) * 0.5
        r = rng.standard_normal((2, *E.conv_geometry(5, 5, 3, 3, stride, padding)[:2], 3))
        return {"x": x, "w": w}, lambda t: E.sum_(E.mul(E.conv2d(t["x"], t["w"], stride, padding), r))
    return make


def _bn_case(training):
    def make(rng):
        x = rng.standard_normal((6, 2, 2, 3)) * 2 + 1
        r = rng.standard_normal((6, 2, 2, 3))
        mm, mv = rng.standard_normal(3), rng.uniform(0.5, 2, 3)
        def f(t):
            return E.sum_(E.mul(E.batchnorm(t["x"], t["g"], t["b"], mm.copy(), mv.copy(), 0.9, training), r))
        return {"x": x, "g": rng.uniform(0.5, 1.5, 3), "b": rng.standard_normal(3)}, f
    return make


def _xent_case(one_hot):
    def make(rng):
        logits = rng.standard_normal((5, 4)) * 2
        y = _labels(rng, 5, 4)
        labels = np.eye(4)[y] if one_hot else y
        return {"z": logits}, lambda t: E.softmax_cross_entropy(t["z"], labels)
    return make


def _weighted(op, *shapes, pos=False):
    def make(rng):
        ins = {f"a{i}": (rng.uniform(0.5, 2, s) if pos else rng.standard_normal(s)) for i, s in enumerate(shapes)}
        ref = op(*[E.Tensor(v) for v in ins.values()]).data
        r = rng.standard_normal(ref.shape)
        return ins, lambda t: E.sum_(E.mul(op(*[t[k] for k in ins]), r))
    return make


def _relu_case(rng):
    x = _relu_safe(rng, (4, 6))
    r = rng.standard_normal((4, 6))
    return {"x": x}, lambda t: E.sum_(E.mul(E.relu(t["x"]), r))


def _dense_case(rng):
    x, w, b = rng.standard_normal((3, 5)), rng.standard_normal((4, 5)), rng.standard_normal(4)
    r = rng.standard_normal((3, 4))
    return {"x": x, "w": w, "b": b}, lambda t: E.sum_(E.mul(E.dense(t["x"], t["w"], t["b"]), r))


def _gap_case(rng):
    r = rng.standard_normal((2, 3))
    return {"x": rng.standard_normal((2, 3, 4, 3))}, lambda t: E.sum_(E.mul(E.global_avg_pool(t["x"]), r))


def _sos_case(rng):
    return ({"a": rng.standard_normal((3, 2)), "b": rng.standard_normal(4)},
            lambda t: E.sum_of_squares([t["a"], t["b"]]))


def _small_cnn(x_shape=(3, 4, 4, 2), classes=3):
    """conv-BN-ReLU, strided conv-BN-ReLU, GAP, dense, softmax cross-entropy."""
    def build(rng):
        ins = {
            "x": rng.standard_normal(x_shape),
            "c1": rng.standard_normal((3, 3, 3, x_shape[3])) * 0.4,
            "g1": rng.uniform(0.5, 1.5, 3), "b1": rng.standard_normal(3) * 0.3,
            "c2": rng.standard_normal((4, 3, 3, 3)) * 0.4,
            "g2": rng.uniform(0.5, 1.5, 4), "b2": rng.standard_normal(4) * 0.3,
            "w": rng.standard_normal((classes, 4)), "bias": rng.standard_normal(classes) * 0.1,
        }
        y = _labels(rng, x_shape[0], classes)
        pre: list[np.ndarray] = []

        def f(t):
            n = x_shape[0]
            pre.clear()
            h = E.batchnorm(E.conv2d(t["x"], t["c1"]), t["g1"], t["b1"], np.zeros(3), np.ones(3), 0.9, True)
            pre.append(h.data)
            h = E.relu(h)
            h = E.batchnorm(E.conv2d(h, t["c2"], 2), t["g2"], t["b2"], np.zeros(4), np.ones(4), 0.9, True)
            pre.append(h.data)
            h = E.relu(h)
            assert h.shape[0] == n
            return E.softmax_cross_entropy(E.dense(E.global_avg_pool(h), t["w"], t["bias"]), y)
        return ins, f, pre
    return build


GRAD_CASES: dict[str, Callable] = {
    "add (broadcast)": _weighted(E.add, (3, 4), (4,)),
    "mul (broadcast)": _weighted(E.mul, (2, 3, 4), (3, 1)),
    "neg": _weighted(E.neg, (3, 3)),
    "matmul": _weighted(E.matmul, (3, 4), (4, 2)),
    "sum axis": _weighted(lambda a: E.sum_(a, axis=1), (3, 4, 2)),
    "mean": _weighted(lambda a: E.mean(a, axis=(0, 2)), (3, 4, 2)),
    "reshape": _weighted(lambda a: E.reshape(a, (4, 6)), (2, 3, 4)),
    "flatten": _weighted(E.flatten, (2, 3, 2, 2)),
    "relu": _relu_case,
    "sum_of_squares": _sos_case,
    "dense": _dense_case,
    "conv2d same s1": _conv_case(1, "same"),
    "conv2d same s2": _conv_case(2, "same"),
    "conv2d valid s1": _conv_case(1, "valid"),
    "batchnorm train": _bn_case(True),
    "batchnorm inference": _bn_case(False),
    "global_avg_pool": _gap_case,
    "softmax_xent index": _xent_case(False),
    "softmax_xent one-hot": _xent_case(True),
}


def _composed_instance(rng, builder):
    """Draw instances until no ReLU input sits within KINK of zero."""
    for _ in range(200):
        ins, f, pre = builder(rng)
        with E.no_grad():
            f({k: E.Tensor(v) for k, v in ins.items()})
        if min(float(np.abs(p).min()) for p in pre) >= KINK:
            return ins, f
    raise RuntimeError("could not draw a kink-free instance")


def check_gradients(cases: int = 20, seed: int = 0, names: Iterable[str] | None = None,
                    composed: bool = True) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for name in (names if names is not None else GRAD_CASES):
        make = GRAD_CASES[name]

        def one(make=make):
            worst = 0.0
            for _ in range(cases):
                ins, f = make(rng)
                worst = max(worst, E.gradient_check(f, ins, GRAD_STEP))
            return worst < GRAD_TOL, f"max rel err {worst:.2e} over {cases} cases"
        out.append(_timed(f"gradient {name}", one))
    if composed:
        def cnn():
            worst = 0.0
            build = _small_cnn()
            for _ in range(cases):
                ins, f = _composed_instance(rng, build)
                worst = max(worst, E.gradient_check(f, ins, GRAD_STEP))
            return worst < GRAD_TOL, f"max rel err {worst:.2e} over {cases} cases"
        out.append(_timed("gradient composed small CNN", cnn))
    return out


def check_conv_reference(cases: int = 20, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)

    def run():
        worst = 0.0
        for _ in range(cases):
            h, w = rng.integers(3, 9, 2)
            cin, cout, k = rng.integers(1, 4), rng.integers(1, 5), int(rng.choice([1, 3]))
            stride, pad = int(rng.integers(1, 3)), str(rng.choice(["same", "valid"]))
            if pad == "valid" and (h < k or w < k):
                continue
            x = rng.standard_normal((2, h, w, cin))
            kern = rng.standard_normal((cout, k, k, cin))
            fast = E.conv2d(E.Tensor(x), E.Tensor(kern), stride, pad).data
            ref = E.conv2d_reference(x, kern, stride, pad)
            worst = max(worst, E.relative_error(fast, ref))
        return worst < 1e-5, f"max rel err vs loop reference {worst:.2e}"
    return _timed("conv2d vs reference", run)


# ------------------------------------------------------------------ schedules

def check_schedules() -> CheckResult:
    def run():
        r, w = resnet_schedule(), wrn_schedule()
        expect = [(r, 0, 0.1), (r, 35999, 0.1), (r, 36000, 0.01), (r, 53999, 0.01),
                  (r, 54000, 0.001), (r, 71999, 0.001),
                  (w, 0, 0.1), (w, 31999, 0.1), (w, 32000, 0.02), (w, 47999, 0.02),
                  (w, 48000, 0.004), (w, 63999, 0.004), (w, 64000, 0.0008), (w, 79999, 0.0008)]
        bad = [(s.total_iterations, t, s.lr_at(t), v) for s, t, v in expect if s.lr_at(t) != v]
        return not bad, "exact at all boundaries and endpoints" if not bad else f"mismatches {bad}"
    return _timed("lr schedules", run)


# -------------------------------------------------------------------- pruning

def oracle_unstructured(weights: dict[str, np.ndarray], s: float) -> dict[str, np.ndarray]:
    """Full sort of (|w|, global position); lowest floor(s*K) are masked."""
    names = list(weights)
    entries = []
    pos = 0
    for n in names:
        for v in np.abs(weights[n]).ravel().tolist():
            entries.append((v, pos))
            pos += 1
    k = int(math.floor(s * pos + 1e-9))
    drop = {p for _, p in sorted(entries)[:k]}
    out, pos = {}, 0
    for n in names:
        size = weights[n].size
        out[n] = np.array([pos + i not in drop for i in range(size)]).reshape(weights[n].shape)
        pos += size
    return out


def oracle_structured(weights: dict[str, np.ndarray], s: float) -> dict[str, np.ndarray]:
    """Rank every leading-axis slice by mean |w| and drop until s*K entries are masked."""
    slices = []
    for order, (n, w) in enumerate(weights.items()):
        for i, score in enumerate(structure_scores(w).tolist()):
            slices.append((score, order, i, n, w[i].size))
    total = sum(w.size for w in weights.values())
    out = {n: np.ones(w.shape, bool) for n, w in weights.items()}
    masked = 0
    for score, _, i, n, size in sorted(slices):
        if masked >= s * total - 1e-9:
            break
        out[n][i] = False
        masked += size
    return out


def random_network(rng, max_params: int = 10_000) -> dict[str, np.ndarray]:
    while True:
        layers = {}
        for i in range(int(rng.integers(1, 5))):
            if rng.random() < 0.5:
                shape = (int(rng.integers(1, 9)), 3, 3, int(rng.integers(1, 9)))
            else:
                shape = (int(rng.integers(1, 40)), int(rng.integers(1, 60)))
            w = rng.standard_normal(shape).astype(np.float32)
            if rng.random() < 0.3:  # force ties
                w = np.round(w, 1)
            layers[f"layer{i}"] = w
        if sum(w.size for w in layers.values()) <= max_params:
            return layers


def check_pruning_oracle(cases: int = 50, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    nets = [(random_network(rng), float(rng.uniform(0, 0.99))) for _ in range(cases)]
    # small random layers are often emptied entirely; that warning is expected here
    quiet = warnings.catch_warnings

    def unstructured():
        bad = 0
        for w, s in nets:
            with quiet():
                warnings.simplefilter("ignore", RuntimeWarning)
                got = prune_unstructured(w, s).masks
            want = oracle_unstructured(w, s)
            bad += any(not np.array_equal(got[k], want[k]) for k in w)
        return bad == 0, f"{cases - bad}/{cases} global masks equal the full-sort oracle"

    def structured():
        bad = 0
        for w, s in nets:
            with quiet():
                warnings.simplefilter("ignore", RuntimeWarning)
                got = prune_structured(w, s).masks
            want = oracle_structured(w, s)
            bad += any(not np.array_equal(got[k], want[k]) for k in w)
        return bad == 0, f"{cases - bad}/{cases} structured masks equal the rank-by-mean oracle"
    return [_timed("pruning oracle unstructured", unstructured),
            _timed("pruning oracle structured", structured)]


# ----------------------------------------------------------------- accounting

CAPTION_PAIRS = (
    # (sparsity or None, survivors or None, compression, kernel count or None)
    (0.893, None, 9.35, None),
    (None, 29000, 9.35, 270896),
    (None, 37600, 22.73, 851504),
    (None, 109500, 100.0, 10954160),
)


def accounting_errors() -> list[tuple[str, float]]:
    """Relative error of each caption pair under s = 1 - 1/c."""
    out = []
    for s, survivors, c, k in CAPTION_PAIRS:
        if s is not None:
            out.append((f"s={s} -> c={c}", abs(compression_from_sparsity(s) - c) / c))
        else:
            out.append((f"{k}/{c} -> {survivors} survivors", abs(k / c - survivors) / survivors))
    for p in (0.2, 0.3):
        for k in range(1, 8):
            direct = 1.0
            for _ in range(k):
                direct *= 1 - p
            out.append((f"iterative p={p} k={k}", abs(iterative_sparsity(p, k) - (1 - direct))))
    return out


def check_accounting(tol: float = 0.005) -> CheckResult:
    def run():
        errs = accounting_errors()
        worst = max(e for _, e in errs)
        return worst <= tol, f"worst relative error {worst:.2e} over {len(errs)} identities"
    return _timed("compression accounting", run)


# ---------------------------------------------------------------- equivalence

def check_equivalence(total_iterations: int = 40, seed: int = 0) -> CheckResult:
    """lr_rewind == weight_rewind(K=N) with a forced full-schedule retrain, bit for bit."""
    from . import data as D
    from .optim import LrSchedule
    from .rewind import CheckpointStore, lr_rewind, weight_rewind
    from .train import TrainConfig, TrainData, train

    def run():
        n = total_iterations
        tr, va = D.synthetic_cifar(256, 64, seed=seed)
        data = TrainData.prepare(tr, va)
        cfg = TrainConfig(batch_size=32)
        sched = LrSchedule(0.1, (n // 2,), (0.1,), n)
        model = M.build("cnn-small", seed=seed)
        store = CheckpointStore("equiv")
        train(model, data, sched, n, seed=seed, config=cfg, store=store, snapshot_at=[n])
        mask = prune_unstructured({k: model.params[k] for k in model.spec.prunable_names}, 0.6)
        a = lr_rewind(model, mask, sched, data, seed=seed + 1, config=cfg)
        b = weight_rewind(store, n, mask, sched, model, data, seed=seed + 1, config=cfg,
                          reset_schedule=True)
        same = all(np.array_equal(a.state()[k], b.state()[k]) for k in a.state())
        return same, f"bit-identical over {n} iterations" if same else "weights differ"
    return _timed("lr_rewind == weight_rewind(K=N) + reset", run)


def run_all(grad_cases: int = 20) -> list[CheckResult]:
    results = check_param_counts()
    results += check_gradients(grad_cases)
    results.append(check_conv_reference())
    results.append(check_schedules())
    results += check_pruning_oracle()
    results.append(check_accounting())
    results.append(check_equivalence())
    return results


def format_report(results: Iterable[CheckResult]) -> str:
    results = list(results)
    lines = [r.line() for r in results]
    failed = sum(not r.passed for r in results)
    lines.append(f"{len(results) - failed}/{len(results)} checks passed")
    return "\n".join(lines)


__all__ = ["CheckResult", "REFERENCE_COUNTS", "check_param_counts", "check_gradients", "check_conv_reference",
           "check_schedules", "check_pruning_oracle", "oracle_unstructured", "oracle_structured",
           "check_accounting", "accounting_errors", "check_equivalence", "run_all", "format_report"]
