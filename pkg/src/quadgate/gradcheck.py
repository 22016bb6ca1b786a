"""Central finite-difference checks of the analytic gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor, backward, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Block relative error ``||a - n|| / max(||a||, ||n||)`` in the 2-norm.

    Taken over a whole block rather than per coordinate: a coordinate whose
    true gradient is many orders below the block's scale cannot be resolved by
    central differences in float64, and would report rounding noise.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(n))):
        return math.inf
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(n)))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n)) / denom


def elementwise_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """Max over coordinates of ``|a - n| / max(|a|, |n|, floor)``; a diagnostic."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def _scalar(out: Tensor) -> float:
    return float(np.asarray(out.data).reshape(-1)[0]) if out.data.size == 1 else math.nan


def numeric_gradient(f: Callable[[], Tensor], arr: np.ndarray, step: float) -> np.ndarray:
    """Central differences of ``f()`` w.r.t. ``arr``, perturbed in place and restored."""
    grad = np.empty_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = _scalar(f())
            flat[i] = orig - step
            down = _scalar(f())
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * step)
    return grad


def finite_diff_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> float:
    """Compare the tape gradient of scalar ``f`` at ``x`` against central differences.

    Returns the max relative error; ``inf`` when ``f`` is non-finite or not
    scalar at ``x``.
    """
    data = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(data, requires_grad=True)
    out = f(xt)
    if out.data.size != 1 or not np.all(np.isfinite(out.data)):
        return math.inf
    backward(out)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(data)
    probe = Tensor(data.copy())
    numeric = numeric_gradient(lambda: f(probe), probe.data, step)
    return relative_error(analytic, numeric)


def check_parameters(
    loss_fn: Callable[[], Tensor],
    named_params: Iterable[tuple[str, Tensor]],
    step: float = 1e-5,
) -> dict[str, float]:
    """Per-parameter-block max relative error of ``loss_fn``'s gradients.

    ``loss_fn`` must read the parameters' current ``.data`` on every call.
    """
    named_params = list(named_params)
    for _, p in named_params:
        p.grad = None
    loss = loss_fn()
    if not np.all(np.isfinite(loss.data)):
        return {name: math.inf for name, _ in named_params}
    backward(loss)
    report = {}
    for name, p in named_params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numeric_gradient(loss_fn, p.data, step)
        report[name] = relative_error(analytic, numeric)
    return report


def randomize_parameters(named_params: Iterable[tuple[str, Tensor]], std: float = 0.3, seed: int = 0) -> None:
    """Move parameters to a generic point before a check.

    At the default initialisation most pre-activations sit near zero and many
    true gradients fall below the rounding floor of central differences.
    Norm scales are drawn around one, everything else around zero.
    """
    rng = np.random.default_rng(seed)
    for name, p in named_params:
        base = 1.0 if "norm" in name and name.endswith("weight") else 0.0
        p.data = base + rng.normal(0.0, std, p.shape)


# ----------------------------------------------------------------------
# check suites
# ----------------------------------------------------------------------

TOLERANCE = 1e-4
OP_STEP = 1e-5
MODEL_STEP = 1e-4  # central-difference rounding floor dominates below this on the whole model


@dataclass
class GradcheckReport:
    """Max relative error per checked block, in the order checked."""

    entries: list[tuple[str, float]] = field(default_factory=list)
    tolerance: float = TOLERANCE

    def add(self, name: str, err: float) -> None:
        self.entries.append((name, err))

    @property
    def worst(self) -> float:
        return max((e for _, e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for _, e in self.entries)

    def failures(self) -> list[tuple[str, float]]:
        return [(n, e) for n, e in self.entries if not e < self.tolerance]


def op_cases(rng: np.random.Generator) -> list[tuple[str, Callable[[Tensor], Tensor], np.ndarray]]:
    """One scalar test function per differentiable op, inputs uniform in [-1, 1].

    Non-scalar results are contracted with a fixed random weight so that every
    output coordinate contributes. Ops are looked up on the module at call
    time, so a patched op is the one that gets checked.
    """
    from . import tensor as T

    def u(*shape):
        return rng.uniform(-1.0, 1.0, shape)

    def contract(op, out_shape):
        w = u(*out_shape)
        return lambda x: T.tsum(T.mul(op(x), w))

    other = u(3, 4)
    mat_b, mat_a = u(4, 2), u(3, 4)
    w_lin, b_lin = u(5, 4), u(5)
    gamma, beta = u(6) + 1.0, u(6)
    kern, kbias = u(4, 2, 3, 3), u(4)
    img = u(1, 2, 6, 6)
    ln_x = Tensor(u(4, 6))
    return [
        ("add", contract(lambda x: T.add(x, other), (3, 4)), u(3, 4)),
        ("add/broadcast", contract(lambda x: T.add(other, x), (3, 4)), u(4)),
        ("sub", contract(lambda x: T.sub(other, x), (3, 4)), u(3, 4)),
        ("mul", contract(lambda x: T.mul(x, other), (3, 4)), u(3, 4)),
        ("div/numerator", contract(lambda x: T.div(x, other + 3.0), (3, 4)), u(3, 4)),
        ("div/denominator", contract(lambda x: T.div(other, T.add(x, 3.0)), (3, 4)), u(3, 4)),
        ("matmul/left", contract(lambda x: T.matmul(x, mat_b), (3, 2)), u(3, 4)),
        ("matmul/right", contract(lambda x: T.matmul(mat_a, x), (3, 2)), u(4, 2)),
        ("matmul/batched", contract(lambda x: T.matmul(x, mat_b), (2, 3, 2)), u(2, 3, 4)),
        ("linear/input", contract(lambda x: T.linear(x, w_lin, b_lin), (3, 5)), u(3, 4)),
        ("linear/weight", contract(lambda w: T.linear(other, w, b_lin), (3, 5)), u(5, 4)),
        ("linear/bias", contract(lambda b: T.linear(other, w_lin, b), (3, 5)), u(5)),
        ("reshape", contract(lambda x: T.reshape(x, (4, 3)), (4, 3)), u(3, 4)),
        ("transpose", contract(lambda x: T.transpose(x, (2, 0, 1)), (4, 2, 3)), u(2, 3, 4)),
        ("broadcast_to", contract(lambda x: T.broadcast_to(x, (3, 4)), (3, 4)), u(1, 4)),
        ("getitem", contract(lambda x: T.getitem(x, (slice(None), slice(1, 3))), (3, 2)), u(3, 4)),
        ("concat", contract(lambda x: T.concat([x, Tensor(other)], axis=0), (5, 4)), u(2, 4)),
        ("sum/axis", contract(lambda x: T.tsum(x, axis=1), (3,)), u(3, 4)),
        ("mean/axis", contract(lambda x: T.mean(x, axis=(0, 2)), (3,)), u(2, 3, 4)),
        ("relu", contract(_op("relu"), (3, 4)), u(3, 4)),
        ("abs", contract(_op("abs_"), (3, 4)), u(3, 4)),
        ("sigmoid", contract(_op("sigmoid"), (3, 4)), u(3, 4)),
        ("gelu", contract(_op("gelu"), (3, 4)), u(3, 4)),
        ("softmax", contract(_op("softmax"), (3, 4)), u(3, 4)),
        ("layernorm/input", contract(lambda x: T.layernorm(x, gamma, beta), (4, 6)), u(4, 6)),
        ("layernorm/scale", contract(lambda g: T.layernorm(ln_x, g, beta), (4, 6)), u(6) + 1.0),
        ("layernorm/shift", contract(lambda b: T.layernorm(ln_x, gamma, b), (4, 6)), u(6)),
        ("conv2d/input", contract(lambda x: T.conv2d(x, kern, kbias, stride=1), (1, 4, 4, 4)), img),
        ("conv2d/weight", contract(lambda k: T.conv2d(img, k, kbias, stride=3), (1, 4, 2, 2)), kern.copy()),
        ("conv2d/bias", contract(lambda b: T.conv2d(img, kern, b, stride=3), (1, 4, 2, 2)), kbias.copy()),
    ]


def _op(name: str) -> Callable[[Tensor], Tensor]:
    from . import tensor as T

    return lambda x: getattr(T, name)(x)


def layer_cases(rng: np.random.Generator) -> list[tuple[str, Callable[[], Tensor], list[tuple[str, Tensor]]]]:
    """Small modules with scalar losses; each returns (name, loss_fn, named params)."""
    from . import nn
    from . import tensor as T
    from .model import CrossAttentionGate, RegressionHead, ViTAggregator

    def u(*shape):
        return rng.uniform(-1.0, 1.0, shape)

    def case(name, module, fwd, out_shape):
        w = u(*out_shape)
        randomize_parameters(module.named_parameters(), seed=int(rng.integers(2 ** 31)))
        return name, (lambda: T.tsum(T.mul(fwd(), w))), [(f"{name}.{n}", p) for n, p in module.named_parameters()]

    lin = nn.Linear(6, 5, rng)
    x_lin = u(3, 6)
    norm = nn.LayerNorm(6)
    conv = nn.Conv2d(3, 4, 2, rng, stride=2)
    x_img = u(2, 3, 4, 4)
    attn = nn.Attention(8, 2, rng, sr_ratio=2)
    x_tok = u(2, 16, 8)
    block = nn.TransformerBlock(8, 2, rng, sr_ratio=2, mlp_ratio=2)
    gate = CrossAttentionGate(4, 8, 3, rng)
    z, g1, g2 = u(2, 4, 2, 2), u(2, 4, 2, 2), u(2, 4, 2, 2)
    agg = ViTAggregator(4, 8, 1, 2, (2, 2), 2, rng)
    head = RegressionHead(8, 5, 3.0, rng)
    feat = u(3, 8)
    return [
        case("linear", lin, lambda: lin(Tensor(x_lin)), (3, 5)),
        case("layernorm", norm, lambda: norm(Tensor(x_lin)), (3, 6)),
        case("conv2d", conv, lambda: conv(Tensor(x_img)), (2, 4, 2, 2)),
        case("attention", attn, lambda: attn(Tensor(x_tok), (4, 4)), (2, 16, 8)),
        case("block", block, lambda: block(Tensor(x_tok), (4, 4)), (2, 16, 8)),
        case("gate", gate, lambda: gate(Tensor(z), [Tensor(g1), Tensor(g2)]), (2, 4, 2, 2)),
        case("aggregator", agg, lambda: agg(Tensor(z)), (2, 8)),
        case("head", head, lambda: head(Tensor(feat)), (3,)),
    ]


def model_case(size: int = 16, seed: int = 0):
    """End-to-end scalar loss of the tiny model at a randomised parameter point."""
    from . import tensor as T
    from .model import QCrossAttPVT, gradcheck_config

    cfg = gradcheck_config(size)
    model = QCrossAttPVT(cfg, seed)
    randomize_parameters(model.named_parameters(), seed=seed)
    rng = np.random.default_rng(seed + 1)
    x = rng.random((1, cfg.channels, *cfg.input_size))
    w = rng.uniform(0.5, 1.0)
    return model, (lambda: T.tsum(model(x) * w))


def run_gradcheck(size: int = 16, seed: int = 0, layers: bool = True, end_to_end: bool = True,
                  on_entry: Callable[[str, float], None] | None = None) -> GradcheckReport:
    """Per-op, per-layer and whole-model gradient checks."""
    report = GradcheckReport()

    def record(name, err):
        report.add(name, err)
        if on_entry is not None:
            on_entry(name, err)

    rng = np.random.default_rng(seed)
    if layers:
        for name, f, x in op_cases(rng):
            record(f"op/{name}", finite_diff_check(f, x, OP_STEP))
        for _, loss_fn, named in layer_cases(rng):
            for name, err in check_parameters(loss_fn, named, OP_STEP).items():
                record(f"layer/{name}", err)
    if end_to_end:
        model, loss_fn = model_case(size, seed)
        for name, err in check_parameters(loss_fn, list(model.named_parameters()), MODEL_STEP).items():
            record(f"model/{name}", err)
    return report
