"""Dense-network forward/reverse passes, Adam and finite-difference checks.

The operation set is deliberately closed: dense layers with relu/tanh/identity
activations, softmax and softmax cross-entropy.  Everything is plain numpy;
arrays are float32 for training and float64 for verification.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import NumericError, StructuralError, UsageError

ACTIVATIONS = ("relu", "tanh", "identity")


@contextlib.contextmanager
def strict_mode() -> Iterator[None]:
    """Pin BLAS to a single thread so results are bitwise reproducible."""
    with threadpool_limits(limits=1):
        yield


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class MlpParams:
    layers: list[Layer]

    def __post_init__(self):
        if not self.layers:
            raise StructuralError("an MLP needs at least one layer")
        for i, layer in enumerate(self.layers):
            if layer.activation not in ACTIVATIONS:
                raise StructuralError(f"layer {i}: unknown activation {layer.activation!r}")
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.weight.shape[0],):
                raise StructuralError(
                    f"layer {i}: weight {layer.weight.shape} / bias {layer.bias.shape} mismatch"
                )
            if i and self.layers[i - 1].out_dim != layer.in_dim:
                raise StructuralError(
                    f"layer {i} expects {layer.in_dim} inputs but layer {i - 1} "
                    f"produces {self.layers[i - 1].out_dim}"
                )

    @classmethod
    def init(cls, sizes: Sequence[int], activations: Sequence[str], rng: np.random.Generator,
             dtype=np.float32) -> "MlpParams":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weights and biases."""
        if len(activations) != len(sizes) - 1:
            raise StructuralError("need one activation per layer")
        layers = []
        for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype)
            b = rng.uniform(-bound, bound, size=fan_out).astype(dtype)
            layers.append(Layer(w, b, act))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def num_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def astype(self, dtype) -> "MlpParams":
        return MlpParams([Layer(l.weight.astype(dtype), l.bias.astype(dtype), l.activation)
                          for l in self.layers])

    def copy(self) -> "MlpParams":
        return self.astype(self.layers[0].weight.dtype)


@dataclass
class LayerGrad:
    weight: np.ndarray
    bias: np.ndarray


@dataclass
class MlpGrads:
    layers: list[LayerGrad]
    input: np.ndarray | None

    def arrays(self) -> list[np.ndarray]:
        out = []
        for g in self.layers:
            out.extend((g.weight, g.bias))
        return out


class GradientTape:
    """Records one forward pass; supports exactly one reverse pass."""

    def __init__(self):
        self._records: list[tuple[int, np.ndarray, np.ndarray, np.ndarray]] = []
        self._params: MlpParams | None = None
        self._squeeze = False
        self._consumed = False

    def _start(self, params: MlpParams, squeeze: bool):
        if self._consumed or self._params is not None:
            raise UsageError("tape already holds a forward pass")
        self._params = params
        self._squeeze = squeeze

    def _record(self, index, x, pre, out):
        self._records.append((index, x, pre, out))


def _activate(pre: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(pre, 0)
    if activation == "tanh":
        return np.tanh(pre)
    return pre


def _activation_backward(grad: np.ndarray, pre: np.ndarray, out: np.ndarray, activation: str):
    if activation == "relu":
        # subgradient at exactly 0 is 0
        return grad * (pre > 0)
    if activation == "tanh":
        return grad * (1 - out * out)
    return grad


def forward_mlp(params: MlpParams, x: np.ndarray, tape: GradientTape | None = None) -> np.ndarray:
    """Evaluate the network on one vector or a (batch, in) matrix."""
    x = np.asarray(x)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.ndim != 2 or h.shape[1] != params.in_dim:
        raise StructuralError(f"input shape {x.shape} does not match in-dimension {params.in_dim}")
    if tape is not None:
        tape._start(params, squeeze)
    for i, layer in enumerate(params.layers):
        with np.errstate(over="ignore", invalid="ignore"):  # reported below as NumericError
            pre = h @ layer.weight.T + layer.bias
            out = _activate(pre, layer.activation)
        if not np.all(np.isfinite(out)):
            raise NumericError(f"non-finite output in layer {i} ({layer.activation})")
        if tape is not None:
            tape._record(i, h, pre, out)
        h = out
    return h[0] if squeeze else h


def backward(tape: GradientTape, output_gradient: np.ndarray,
             input_gradient: bool = True) -> MlpGrads:
    """Reverse pass over a recorded forward; returns parameter and input gradients.

    With ``input_gradient=False`` the final product with the first weight
    matrix is skipped and ``MlpGrads.input`` is None.
    """
    if tape._consumed:
        raise UsageError("gradient tape has already been consumed")
    if tape._params is None:
        raise UsageError("gradient tape holds no forward pass")
    tape._consumed = True
    params = tape._params
    g = np.asarray(output_gradient)
    if tape._squeeze:
        g = g[None, :]
    last_out = tape._records[-1][3]
    if g.shape != last_out.shape:
        raise StructuralError(f"output gradient {g.shape} does not match output {last_out.shape}")
    grads: list[LayerGrad | None] = [None] * len(params.layers)
    for index, x, pre, out in reversed(tape._records):
        layer = params.layers[index]
        g = _activation_backward(g, pre, out, layer.activation)
        grads[index] = LayerGrad(weight=g.T @ x, bias=g.sum(axis=0))
        if index == 0 and not input_gradient:
            g = None
            break
        g = g @ layer.weight
    tape._records.clear()
    if g is None:
        return MlpGrads(layers=grads, input=None)
    return MlpGrads(layers=grads, input=g[0] if tape._squeeze else g)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def cross_entropy_from_logits(logits: np.ndarray, label: int) -> float:
    """-log softmax(logits)[label] in nats."""
    logits = np.asarray(logits)
    if not 0 <= label < logits.shape[-1]:
        raise StructuralError(f"label {label} out of range for {logits.shape[-1]} classes")
    return float(max(-log_softmax(logits)[label], 0.0))


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched cross-entropy.

    Returns per-row losses and d(loss_i)/d(logits_i), i.e. softmax - one_hot.
    """
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise StructuralError("labels do not match logits")
    logp = log_softmax(logits)
    rows = np.arange(n)
    losses = -logp[rows, labels]
    grad = np.exp(logp)
    grad[rows, labels] -= 1
    return losses, grad


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **hyper) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params],
                   **hyper)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState) -> tuple[Sequence[np.ndarray], AdamState]:
    """Bias-corrected Adam update, applied in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise StructuralError("parameter, gradient and state counts differ")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise StructuralError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
    state.step += 1
    c1 = 1 - state.beta1 ** state.step
    c2 = 1 - state.beta2 ** state.step
    step_size = state.lr / c1
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        buf = np.multiply(g, g, dtype=v.dtype)
        buf *= 1 - state.beta2
        v += buf
        # buf <- step_size * m / (sqrt(v / c2) + eps), reusing one scratch array
        np.divide(v, c2, out=buf)
        np.sqrt(buf, out=buf)
        buf += state.eps
        np.divide(m, buf, out=buf)
        buf *= step_size
        p -= buf.astype(p.dtype, copy=False)
    return params, state


def numerical_gradient(f: Callable[[], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar f() w.r.t. every entry of x (perturbed in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


@dataclass
class FdProblem:
    params: MlpParams
    inputs: np.ndarray
    targets: np.ndarray  # float targets -> squared error, int labels -> cross-entropy


@dataclass
class FdReport:
    max_rel_error: float
    per_param: dict[str, float]
    min_relu_margin: float
    passed: bool


def _fd_loss(params: MlpParams, problem: FdProblem, tape=None):
    out = forward_mlp(params, problem.inputs, tape)
    if np.issubdtype(problem.targets.dtype, np.integer):
        losses, dlogits = softmax_cross_entropy(out, problem.targets)
        return float(losses.sum()), dlogits
    diff = out - problem.targets
    return float(0.5 * np.sum(diff * diff)), diff


def finite_difference_check(net_builder: Callable[[np.random.Generator], FdProblem], seed: int,
                            tolerance: float = 1e-4, step: float = 1e-5) -> FdReport:
    """Compare reverse-pass gradients with central differences in float64."""
    problem = net_builder(np.random.default_rng(seed))
    params = problem.params.astype(np.float64)
    problem = FdProblem(params, np.asarray(problem.inputs, dtype=np.float64), problem.targets)
    if params.num_params() > 10_000:
        raise StructuralError("finite-difference check limited to 1e4 parameters")

    tape = GradientTape()
    _, dout = _fd_loss(params, problem, tape)
    relu_pre = [pre for i, _, pre, _ in tape._records if params.layers[i].activation == "relu"]
    margin = min((float(np.min(np.abs(p))) for p in relu_pre), default=float("inf"))
    grads = backward(tape, dout)

    per_param = {}
    for i, (layer, g) in enumerate(zip(params.layers, grads.layers)):
        for name, arr, ga in (("weight", layer.weight, g.weight), ("bias", layer.bias, g.bias)):
            num = numerical_gradient(lambda: _fd_loss(params, problem)[0], arr, step)
            per_param[f"layer{i}.{name}"] = float(np.max(relative_error(ga, num)))
    worst = max(per_param.values())
    return FdReport(worst, per_param, margin, worst <= tolerance)
