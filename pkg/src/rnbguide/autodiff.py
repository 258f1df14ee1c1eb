"""A small reverse-mode tape over numpy arrays.

Only the node kinds the guidance energy needs are provided.  Nodes are
recorded in creation order, so walking the tape backwards is a valid
reverse topological order and gradient accumulation order is fixed.

Two features exist for verification:

* ``Tape.detach`` logs every value it cuts from the graph.  A tape built
  with ``frozen=`` replays those logged values instead of recomputing
  them, which turns the stop-gradient graph into an ordinary smooth
  function whose true derivative is what ``backward`` computes.
* ``Tape.decide`` logs hard decisions (threshold masks, bounding
  rectangles, argmax positions).  ``gradcheck`` compares them between the
  base point and perturbed points to find probes that cross a decision
  surface.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import field as F
from .errors import NonScalarLoss, ShapeMismatch

Array = np.ndarray


class Node:
    __slots__ = ("tape", "index", "value", "parents", "backward_fn", "op", "requires_grad", "grad", "name")

    def __init__(self, tape, index, value, parents, backward_fn, op, requires_grad, name=None):
        self.tape = tape
        self.index = index
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"Node({self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """Records nodes for one forward pass.

    ``frozen`` is the ``detached`` log of a previous tape built by the same
    code path; when given, ``detach`` returns those values in order.
    """

    def __init__(self, frozen: Sequence[Array] | None = None):
        self.nodes: list[Node] = []
        self.detached: list[Array] = []
        self.decisions: list[Array] = []
        self._frozen = None if frozen is None else list(frozen)

    @property
    def replaying(self) -> bool:
        return self._frozen is not None

    def _push(self, value, parents=(), backward_fn=None, op="op", name=None) -> Node:
        value = np.asarray(value, dtype=np.float64)
        requires = any(p.requires_grad for p in parents)
        node = Node(self, len(self.nodes), value, tuple(parents) if requires else (),
                    backward_fn if requires else None, op, requires, name)
        self.nodes.append(node)
        return node

    def leaf(self, value, name: str | None = None) -> Node:
        value = np.array(value, dtype=np.float64, copy=True)
        node = Node(self, len(self.nodes), value, (), None, "leaf", True, name)
        self.nodes.append(node)
        return node

    def const(self, value) -> Node:
        return self._push(np.array(value, dtype=np.float64, copy=True), op="const")

    def detach(self, x: Node) -> Node:
        k = len(self.detached)
        if self._frozen is not None:
            if k >= len(self._frozen):
                raise RuntimeError("replay tape ran past the frozen detach log")
            value = np.array(self._frozen[k], copy=True)
            if value.shape != x.value.shape:
                raise RuntimeError("replay diverged from the frozen graph structure")
        else:
            value = np.array(x.value, copy=True)
        self.detached.append(np.array(value, copy=True))
        return self._push(value, op="detach")

    def decide(self, decision) -> None:
        self.decisions.append(np.array(decision, copy=True))

    def backward(self, loss: Node) -> dict[int, Array]:
        """Reverse accumulation from a scalar ``loss``.

        Sets ``.grad`` on every node that lies on a path to a leaf and
        returns ``{leaf.index: grad}`` for every leaf on the tape (zeros for
        leaves the loss does not depend on).
        """
        if loss.tape is not self:
            raise ValueError("loss belongs to a different tape")
        if loss.value.shape != ():
            raise NonScalarLoss(f"loss must be a scalar, got shape {loss.value.shape}")
        for node in self.nodes:
            node.grad = None
        grads: list[Array | None] = [None] * len(self.nodes)
        grads[loss.index] = np.ones(())
        for node in reversed(self.nodes[: loss.index + 1]):
            g = grads[node.index]
            if g is None or not node.requires_grad:
                continue
            node.grad = g
            if node.backward_fn is None:
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if grads[parent.index] is None:
                    grads[parent.index] = np.array(pg, dtype=np.float64, copy=True)
                else:
                    grads[parent.index] = grads[parent.index] + pg
        out = {}
        for node in self.nodes:
            if node.op == "leaf":
                if node.grad is None:
                    node.grad = np.zeros_like(node.value)
                out[node.index] = node.grad
        return out


def _lift(x, tape: Tape) -> Node:
    if isinstance(x, Node):
        return x
    return tape.const(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise TypeError("at least one operand must be a Node")


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise arithmetic ------------------------------------------------

def add(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _lift(a, t), _lift(b, t)
    sa, sb = a.shape, b.shape
    return t._push(a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _lift(a, t), _lift(b, t)
    sa, sb = a.shape, b.shape
    return t._push(a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _lift(a, t), _lift(b, t)
    av, bv = a.value, b.value
    return t._push(av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul")


def div(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _lift(a, t), _lift(b, t)
    av, bv = a.value, b.value
    out = av / bv
    return t._push(out, (a, b),
                   lambda g: (_unbroadcast(g / bv, av.shape),
                              _unbroadcast(-g * out / bv, bv.shape)), "div")


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return a.tape._push(a.value * c, (a,), lambda g: (g * c,), "scale")


def square(a: Node) -> Node:
    av = a.value
    return a.tape._push(av * av, (a,), lambda g: (2.0 * g * av,), "square")


def sqrt(a: Node) -> Node:
    out = np.sqrt(a.value)
    return a.tape._push(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def log(a: Node) -> Node:
    av = a.value
    return a.tape._push(np.log(av), (a,), lambda g: (g / av,), "log")


def sigmoid(a: Node) -> Node:
    out = 1.0 / (1.0 + np.exp(-a.value))
    return a.tape._push(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def clip(a: Node, lo: float, hi: float) -> Node:
    av = a.value
    inside = ((av >= lo) & (av <= hi)).astype(np.float64)
    a.tape.decide(inside)
    return a.tape._push(np.clip(av, lo, hi), (a,), lambda g: (g * inside,), "clip")


# -- reductions -------------------------------------------------------------

def sum_(a: Node) -> Node:
    shape = a.shape
    return a.tape._push(a.value.sum(), (a,), lambda g: (np.broadcast_to(g, shape),), "sum")


def mean(a: Node) -> Node:
    return scale(sum_(a), 1.0 / a.value.size)


def masked_sum(a: Node, mask: Array) -> Node:
    """``sum(a * mask)`` for a constant mask."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != a.shape:
        raise ShapeMismatch(f"mask {mask.shape} vs node {a.shape}")
    return a.tape._push((a.value * mask).sum(), (a,), lambda g: (g * mask,), "masked_sum")


def _extreme(a: Node, which: str) -> Node:
    flat = a.value.reshape(-1)
    k = int(np.argmax(flat) if which == "max" else np.argmin(flat))
    shape = a.shape

    def bw(g):
        out = np.zeros(flat.size)
        out[k] = g
        return (out.reshape(shape),)

    a.tape.decide(np.array([k]))
    return a.tape._push(flat[k], (a,), bw, which)


def reduce_max(a: Node) -> Node:
    """Maximum entry; the gradient goes to the first argmax."""
    return _extreme(a, "max")


def reduce_min(a: Node) -> Node:
    return _extreme(a, "min")


# -- tensor plumbing --------------------------------------------------------

def reshape(a: Node, shape) -> Node:
    old = a.shape
    return a.tape._push(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def channel_sum(a: Node, indices: Sequence[int]) -> Node:
    """Sum of the selected channels along the last axis."""
    idx = np.asarray(sorted(indices), dtype=int)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        out[..., idx] = g[..., None]
        return (out,)

    return a.tape._push(a.value[..., idx].sum(axis=-1), (a,), bw, "channel_sum")


def matmul_const(a: Node, b: Array) -> Node:
    """``a @ b`` where ``b`` is a constant matrix."""
    b = np.asarray(b, dtype=np.float64)
    return a.tape._push(a.value @ b, (a,), lambda g: (g @ b.T,), "matmul")


def softmax(a: Node) -> Node:
    """Softmax over the last axis."""
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return a.tape._push(out, (a,), bw, "softmax")


# -- grid operators ---------------------------------------------------------

def upsample(a: Node, out_h: int, out_w: int) -> Node:
    h, w = a.shape
    return a.tape._push(F.bilinear_upsample(a.value, out_h, out_w), (a,),
                        lambda g: (F.bilinear_upsample_adjoint(g, h, w),), "upsample")


def avg_pool2(a: Node) -> Node:
    return a.tape._push(F.avg_pool2(a.value), (a,), lambda g: (F.avg_pool2_adjoint(g),), "avg_pool2")


def correlate3(a: Node, kernel: Array) -> Node:
    """3x3 correlation under replicate padding."""
    if a.value.ndim != 2 or min(a.shape) < 3:
        raise ValueError(f"correlate3 needs a 2D field of at least 3x3, got {a.shape}")
    return a.tape._push(F.correlate3_replicate(a.value, kernel), (a,),
                        lambda g: (F.correlate3_replicate_adjoint(g, kernel),), "correlate3")


def sobel_edges(a: Node) -> Node:
    gx = correlate3(a, F.SOBEL_X)
    gy = correlate3(a, F.SOBEL_Y)
    return sqrt(add(add(square(gx), square(gy)), F.SOBEL_EPS))


# -- stop-gradient constructs -----------------------------------------------

def detach(x: Node) -> Node:
    return x.tape.detach(x)


def ste_attach(hard: Array, soft: Node) -> Node:
    """Straight-through node: forward ``hard``, backward identity into ``soft``.

    Same gradient as ``detach(hard - soft) + soft``.  The value is computed
    as ``hard + (soft - detach(soft))``: the bracket is exactly 0.0 on a
    recording tape, so the forward value is bit-identical to ``hard``, and
    on a replay tape it becomes the frozen linearization.
    """
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != soft.shape:
        raise ShapeMismatch(f"hard mask {hard.shape} vs soft map {soft.shape}")
    anchor = soft.tape.detach(soft).value
    return soft.tape._push(hard + (soft.value - anchor), (soft,), lambda g: (g,), "ste")


# -- finite-difference verification ----------------------------------------

@dataclass
class GradCheckReport:
    max_abs_error: float
    max_rel_error: float
    num_compared: int
    num_skipped_nonsmooth: int

    @property
    def num_probed(self) -> int:
        return self.num_compared + self.num_skipped_nonsmooth


LossBuilder = Callable[[Tape, Mapping[str, Node]], Node]


def _run(builder: LossBuilder, inputs: Mapping[str, Array], frozen=None) -> tuple[Tape, dict[str, Node], Node]:
    tape = Tape(frozen=frozen)
    leaves = {name: tape.leaf(v, name=name) for name, v in inputs.items()}
    loss = builder(tape, leaves)
    return tape, leaves, loss


def _same_decisions(a: list[Array], b: list[Array]) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def gradcheck(
    loss_builder: LossBuilder,
    inputs: Mapping[str, Array],
    probe_count: int = 32,
    h: float = 1e-4,
    smooth_margin: float | None = None,
    seed: int = 0,
    rel_floor: float = 1e-8,
) -> GradCheckReport:
    """Compare ``backward`` against central differences at random coordinates.

    Differences are taken on a replay of the graph with every detached value
    frozen at the base point, which is the function stop-gradient semantics
    define.  A probe is skipped as non-smooth when any hard decision logged
    via ``Tape.decide`` changes, either on the live graph at
    ``x +/- max(h, smooth_margin)`` or on the frozen replay at ``x +/- h``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    margin = max(h, smooth_margin or 0.0)
    inputs = {k: np.array(v, dtype=np.float64, copy=True) for k, v in inputs.items()}

    base_tape, leaves, loss = _run(loss_builder, inputs)
    grads = base_tape.backward(loss)
    frozen = base_tape.detached

    coords = [(name, i) for name, v in inputs.items() for i in range(v.size)]
    rng = np.random.default_rng(seed)
    n = min(probe_count, len(coords))
    picks = sorted(rng.choice(len(coords), size=n, replace=False).tolist())

    max_abs = 0.0
    max_rel = 0.0
    compared = skipped = 0
    for p in picks:
        name, i = coords[p]
        analytic = float(grads[leaves[name].index].reshape(-1)[i])

        crossed = False
        for sgn in (1.0, -1.0):
            moved = dict(inputs)
            moved[name] = inputs[name].copy()
            moved[name].reshape(-1)[i] += sgn * margin
            live_tape, _, _ = _run(loss_builder, moved)
            if not _same_decisions(live_tape.decisions, base_tape.decisions):
                crossed = True
                break
        if crossed:
            skipped += 1
            continue

        vals = []
        for sgn in (1.0, -1.0):
            moved = dict(inputs)
            moved[name] = inputs[name].copy()
            moved[name].reshape(-1)[i] += sgn * h
            replay_tape, _, lv = _run(loss_builder, moved, frozen=frozen)
            # kinks of the frozen function itself (e.g. clamps) also count
            if not _same_decisions(replay_tape.decisions, base_tape.decisions):
                crossed = True
                break
            vals.append(lv.item())
        if crossed:
            skipped += 1
            continue
        numeric = (vals[0] - vals[1]) / (2.0 * h)

        err = abs(analytic - numeric)
        rel = err / max(abs(analytic), abs(numeric), rel_floor)
        max_abs = max(max_abs, err)
        max_rel = max(max_rel, rel)
        compared += 1

    return GradCheckReport(max_abs, max_rel, compared, skipped)
