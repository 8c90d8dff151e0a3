"""Dense float64 tensors with reverse-mode automatic differentiation.

The design is a recording tape: every :class:`Tensor` is a node on a
:class:`Graph`, created either as a leaf (named parameter or unnamed
constant) or as the output of a primitive operation.  A backward pass
walks the tape in reverse creation order, which is always a valid
topological order, and accumulates gradients into fixed-order buffers so
repeated passes are bit-identical.

Only the operations a small patch-based segmentation network needs are
provided; there is no broadcasting, no GPU path and no higher-order
differentiation.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DimensionError, LabelError

Array = np.ndarray
# Maps parameter name -> gradient array, shape-matching the parameter.
GradientMap = dict[str, Array]


class Graph:
    """Recording tape of tensor nodes in creation order."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def _register(self, node: "Tensor") -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def parameters(self) -> list["Tensor"]:
        return [n for n in self.nodes if n.name is not None]


class Tensor:
    """One node of a computation: a float64 array plus its backward rule.

    Tensors are immutable once created; optimizers mutate the raw arrays
    held by a parameter store between passes, never a live graph.
    """

    __slots__ = ("values", "graph", "name", "parents", "vjp", "node_id")

    def __init__(
        self,
        values: Array,
        graph: Graph,
        *,
        name: str | None = None,
        parents: tuple["Tensor", ...] = (),
        vjp: Callable[[Array], tuple[Array, ...]] | None = None,
    ):
        self.values = np.asarray(values, dtype=np.float64)
        self.graph = graph
        self.name = name
        self.parents = parents
        self.vjp = vjp
        self.node_id = graph._register(self)

    @staticmethod
    def param(name: str, values: Array, graph: Graph) -> "Tensor":
        """Named leaf; its gradient appears in the backward result."""
        return Tensor(values, graph, name=name)

    @staticmethod
    def const(values: Array, graph: Graph) -> "Tensor":
        """Unnamed leaf treated as a constant (no gradient reported)."""
        return Tensor(values, graph)

    @staticmethod
    def op(
        values: Array,
        parents: Sequence["Tensor"],
        vjp: Callable[[Array], tuple[Array, ...]],
    ) -> "Tensor":
        """Result node of a primitive; ``vjp(grad_out)`` returns one
        gradient per parent, in parent order."""
        parents = tuple(parents)
        graph = parents[0].graph
        for p in parents[1:]:
            if p.graph is not graph:
                raise ContractError("operands belong to different graphs")
        return Tensor(values, graph, parents=parents, vjp=vjp)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def __repr__(self) -> str:
        tag = self.name or ("leaf" if not self.parents else "op")
        return f"Tensor({tag}, shape={self.shape})"


def backward(loss: Tensor) -> GradientMap:
    """Reverse-mode gradients of a scalar loss for every named parameter
    on the loss's graph.

    Parameters registered on the graph but not reachable from the loss get
    an all-zero gradient.  Accumulation follows reverse creation order, so
    two passes over identical inputs are bit-identical.
    """
    if loss.values.shape != ():
        raise ContractError(f"loss must be a scalar, got shape {loss.values.shape}")
    buffers: dict[int, Array] = {loss.node_id: np.ones((), dtype=np.float64)}
    for node in reversed(loss.graph.nodes):
        grad = buffers.get(node.node_id)
        if grad is None or not node.parents:
            continue
        for parent, pgrad in zip(node.parents, node.vjp(grad)):
            acc = buffers.get(parent.node_id)
            if acc is None:
                buffers[parent.node_id] = np.array(pgrad, dtype=np.float64)
            else:
                acc += pgrad
    out: GradientMap = {}
    for p in loss.graph.parameters():
        grad = buffers.get(p.node_id)
        out[p.name] = np.zeros_like(p.values) if grad is None else grad
    return out


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a [m,k] and b [k,n]."""
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    av, bv = a.values, b.values

    def vjp(g: Array) -> tuple[Array, Array]:
        return g @ bv.T, av.T @ g

    return Tensor.op(av @ bv, (a, b), vjp)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Valid 2-D convolution, stride 1, cross-correlation convention
    (kernels are not flipped).

    x: [C,H,W], kernels: [O,C,K,K] with odd square K, bias: [O];
    output [O, H-K+1, W-K+1].
    """
    if x.values.ndim != 3 or kernels.values.ndim != 4:
        raise DimensionError(
            f"conv2d expects [C,H,W] input and [O,C,K,K] kernels, got {x.shape} and {kernels.shape}"
        )
    c, h, w = x.shape
    o, kc, kh, kw = kernels.shape
    if kc != c:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernels {kernels.shape}")
    if kh != kw or kh % 2 != 1:
        raise DimensionError(f"conv2d kernels must be odd and square, got {kernels.shape}")
    if h < kh or w < kw:
        raise DimensionError(f"conv2d input {x.shape} smaller than kernel {kernels.shape}")
    if bias.shape != (o,):
        raise DimensionError(f"conv2d bias shape {bias.shape} != ({o},)")
    k = kh
    hp, wp = h - k + 1, w - k + 1

    xv = x.values
    wins = np.lib.stride_tricks.sliding_window_view(xv, (k, k), axis=(1, 2))
    cols = np.ascontiguousarray(wins.transpose(1, 2, 0, 3, 4)).reshape(hp * wp, c * k * k)
    kmat = kernels.values.reshape(o, c * k * k)
    out = (cols @ kmat.T).T.reshape(o, hp, wp) + bias.values[:, None, None]

    def vjp(g: Array) -> tuple[Array, Array, Array]:
        gmat = g.reshape(o, hp * wp)
        dk = (gmat @ cols).reshape(o, c, k, k)
        db = g.sum(axis=(1, 2))
        gp = np.pad(g, ((0, 0), (k - 1, k - 1), (k - 1, k - 1)))
        gwins = np.lib.stride_tricks.sliding_window_view(gp, (k, k), axis=(1, 2))
        gcols = np.ascontiguousarray(gwins.transpose(1, 2, 0, 3, 4)).reshape(h * w, o * k * k)
        kflip = kernels.values[:, :, ::-1, ::-1]
        kcols = np.ascontiguousarray(kflip.transpose(0, 2, 3, 1)).reshape(o * k * k, c)
        dx = (gcols @ kcols).T.reshape(c, h, w)
        return dx, dk, db

    return Tensor.op(out, (x, kernels, bias), vjp)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at exactly 0 is 0."""
    mask = x.values > 0.0

    def vjp(g: Array) -> tuple[Array]:
        return (g * mask,)

    return Tensor.op(np.where(mask, x.values, 0.0), (x,), vjp)


def log_softmax(logits: Tensor) -> Tensor:
    """Per-column log-probabilities of logits [K,N], stabilized by max
    subtraction so finite inputs always give finite outputs."""
    if logits.values.ndim != 2 or logits.shape[0] < 2:
        raise DimensionError(f"log_softmax expects [K>=2, N] logits, got {logits.shape}")
    z = logits.values - logits.values.max(axis=0, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=0, keepdims=True))
    soft = np.exp(out)

    def vjp(g: Array) -> tuple[Array]:
        return (g - soft * g.sum(axis=0, keepdims=True),)

    return Tensor.op(out, (logits,), vjp)


def nll_loss(log_probs: Tensor, labels: Array, weights: Array | None = None) -> Tensor:
    """Mean negative log-likelihood over pixels.

    log_probs: [K,N] per-column log-probabilities; labels: int array [N];
    weights: optional per-class factors [K].  The result is
    -(1/N) * sum_n w[y_n] * log_probs[y_n, n].
    """
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise LabelError(f"labels must be integers, got dtype {labels.dtype}")
    k, n = log_probs.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} != ({n},)")
    bad = np.nonzero((labels < 0) | (labels >= k))[0]
    if bad.size:
        i = int(bad[0])
        raise LabelError(f"label {int(labels[i])} at index {i} outside [0, {k})")
    w = np.ones(k) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (k,):
        raise DimensionError(f"weights shape {w.shape} != ({k},)")
    idx = np.arange(n)
    picked = log_probs.values[labels, idx]
    out = -(w[labels] * picked).sum() / n

    def vjp(g: Array) -> tuple[Array]:
        dlp = np.zeros((k, n))
        dlp[labels, idx] = -w[labels] / n * g
        return (dlp,)

    return Tensor.op(np.asarray(out), (log_probs,), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors (no broadcasting)."""
    if a.shape != b.shape:
        raise DimensionError(f"add shapes differ: {a.shape} vs {b.shape}")

    def vjp(g: Array) -> tuple[Array, Array]:
        return g, g

    return Tensor.op(a.values + b.values, (a, b), vjp)


def add_n(terms: Iterable[Tensor]) -> Tensor:
    """Sum of same-shape tensors, accumulated in list order."""
    terms = list(terms)
    if not terms:
        raise ContractError("add_n needs at least one term")
    shape = terms[0].shape
    for t in terms[1:]:
        if t.shape != shape:
            raise DimensionError(f"add_n shapes differ: {shape} vs {t.shape}")
    total = terms[0].values.copy()
    for t in terms[1:]:
        total += t.values

    def vjp(g: Array) -> tuple[Array, ...]:
        return tuple(g for _ in terms)

    return Tensor.op(total, terms, vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes differ: {a.shape} vs {b.shape}")
    av, bv = a.values, b.values

    def vjp(g: Array) -> tuple[Array, Array]:
        return g * bv, g * av

    return Tensor.op(av * bv, (a, b), vjp)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def vjp(g: Array) -> tuple[Array]:
        return (g * factor,)

    return Tensor.op(a.values * factor, (a,), vjp)


def sum_all(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""

    def vjp(g: Array) -> tuple[Array]:
        return (np.full(a.shape, g, dtype=np.float64),)

    return Tensor.op(np.asarray(a.values.sum()), (a,), vjp)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape, dtype=np.int64)) != a.values.size:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}")
    old = a.shape

    def vjp(g: Array) -> tuple[Array]:
        return (g.reshape(old),)

    return Tensor.op(a.values.reshape(shape), (a,), vjp)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def finite_diff_grad(
    f: Callable[[], float],
    params: Mapping[str, Array],
    h: float = 1e-5,
) -> GradientMap:
    """Central-difference gradient of ``f`` w.r.t. every coordinate of
    ``params``: (f(x+h) - f(x-h)) / 2h.

    ``params`` values are perturbed in place and restored; ``f`` takes no
    arguments and must read the current parameter values.  This is the
    test oracle for :func:`backward` and stays independent of it.
    """
    if h <= 0:
        raise ContractError("finite difference step must be positive")
    out: GradientMap = {}
    for name, arr in params.items():
        grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f())
            flat[i] = orig - h
            fm = float(f())
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        out[name] = grad
    return out
