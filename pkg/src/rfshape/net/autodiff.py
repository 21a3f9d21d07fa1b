"""Minimal reverse-mode autodiff over float64 numpy arrays.

Covers exactly the ops the completion network needs.  Every op returns a new
Tensor recording its parents and a closure that maps the output gradient to
parent gradient contributions.  ``backward`` runs an iterative topological
sort, so deep graphs do not hit the recursion limit.

Ties and matchings follow fixed-choice envelope semantics: row max-pooling
routes gradient to the lowest winning row index, and the cloud losses hold
the nearest-neighbor/assignment structure computed in the forward pass fixed
while differentiating.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from ..metrics import emd_approx_assignment

_NORM_EPS = 1e-12


class GraphCycle(RuntimeError):
    """Raised if the recorded graph is not a DAG (corrupted tape)."""


class Tensor:
    """Array node on the tape.  ``grad`` is populated by ``backward``."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False,
                 parents: Sequence["Tensor"] = (),
                 backward_fn: Optional[Callable[[np.ndarray], None]] = None,
                 name: str = ""):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in parents)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g


def parameter(value, name: str = "") -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def constant(value, name: str = "") -> Tensor:
    return Tensor(value, requires_grad=False, name=name)


def _topo_order(root: Tensor) -> list:
    """Children-before-parents order via iterative DFS with cycle check."""
    order = []
    state = {}  # id -> 1 while open, 2 when closed
    stack = [(root, iter(root.parents))]
    state[id(root)] = 1
    while stack:
        node, it = stack[-1]
        advanced = False
        for parent in it:
            s = state.get(id(parent))
            if s == 1:
                raise GraphCycle("autodiff graph contains a cycle")
            if s is None:
                state[id(parent)] = 1
                stack.append((parent, iter(parent.parents)))
                advanced = True
                break
        if not advanced:
            stack.pop()
            state[id(node)] = 2
            order.append(node)
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor reachable from ``loss``."""
    if loss.value.shape != ():
        raise ValueError("backward expects a scalar loss")
    order = _topo_order(loss)
    loss.grad = np.array(1.0)
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None \
                and node.requires_grad:
            node.backward_fn(node.grad)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x (n, d) @ w (d, m) + b (m,)"""
    out_val = x.value @ w.value + b.value

    def back(g):
        if x.requires_grad:
            x._accum(g @ w.value.T)
        if w.requires_grad:
            w._accum(x.value.T @ g)
        if b.requires_grad:
            b._accum(g.sum(axis=0))

    return Tensor(out_val, parents=(x, w, b), backward_fn=back)


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0.0
    out_val = np.where(mask, x.value, 0.0)

    def back(g):
        if x.requires_grad:
            x._accum(g * mask)

    return Tensor(out_val, parents=(x,), backward_fn=back)


def maxpool_rows(x: Tensor) -> Tensor:
    """Column-wise max over rows: (n, d) -> (d,).  Ties pick the lowest row."""
    idx = np.argmax(x.value, axis=0)  # argmax returns the first maximum
    cols = np.arange(x.value.shape[1])
    out_val = x.value[idx, cols]

    def back(g):
        if x.requires_grad:
            gx = np.zeros_like(x.value)
            gx[idx, cols] = g
            x._accum(gx)

    return Tensor(out_val, parents=(x,), backward_fn=back)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    out_val = np.concatenate([p.value for p in parts], axis=1)
    widths = [p.value.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def back(g):
        for p, a, b in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._accum(g[:, a:b])

    return Tensor(out_val, parents=tuple(parts), backward_fn=back)


def reshape(x: Tensor, shape) -> Tensor:
    out_val = x.value.reshape(shape)

    def back(g):
        if x.requires_grad:
            x._accum(np.asarray(g).reshape(x.value.shape))

    return Tensor(out_val, parents=(x,), backward_fn=back)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows (with repetition): (n, d)[idx] -> (len(idx), d)."""
    idx = np.asarray(idx, dtype=np.int64)
    out_val = x.value[idx]

    def back(g):
        if x.requires_grad:
            gx = np.zeros_like(x.value)
            np.add.at(gx, idx, g)
            x._accum(gx)

    return Tensor(out_val, parents=(x,), backward_fn=back)


def add(x: Tensor, y: Tensor) -> Tensor:
    if x.value.shape != y.value.shape:
        raise ValueError("add requires matching shapes")
    out_val = x.value + y.value

    def back(g):
        if x.requires_grad:
            x._accum(g)
        if y.requires_grad:
            y._accum(g)

    return Tensor(out_val, parents=(x, y), backward_fn=back)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    out_val = x.value * s

    def back(g):
        if x.requires_grad:
            x._accum(g * s)

    return Tensor(out_val, parents=(x,), backward_fn=back)


def softmax_cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Scalar cross-entropy of a single (K,) logit vector."""
    z = logits.value
    if z.ndim != 1:
        raise ValueError("logits must be a flat vector")
    if not 0 <= label < len(z):
        raise ValueError("label out of range")
    shifted = z - z.max()
    log_norm = np.log(np.exp(shifted).sum())
    out_val = log_norm - shifted[label]
    probs = np.exp(shifted - log_norm)

    def back(g):
        if logits.requires_grad:
            gz = probs.copy()
            gz[label] -= 1.0
            logits._accum(g * gz)

    return Tensor(out_val, parents=(logits,), backward_fn=back)


def chamfer_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Squared bidirectional Chamfer against a fixed target cloud.

    Nearest neighbors found in the forward pass stay fixed for the gradient;
    at a neighbor switchover both choices give equal distance, so the loss is
    continuous and this is the standard subgradient.
    """
    t = np.asarray(target, dtype=np.float64)
    p = pred.value
    if p.ndim != 2 or p.shape[1] != 3 or t.ndim != 2 or t.shape[1] != 3:
        raise ValueError("clouds must have shape (n, 3)")
    if len(p) == 0 or len(t) == 0:
        raise ValueError("empty cloud")
    d2 = np.sum((p[:, None, :] - t[None, :, :]) ** 2, axis=2)
    fwd_idx = np.argmin(d2, axis=1)
    rev_idx = np.argmin(d2, axis=0)
    fwd = d2[np.arange(len(p)), fwd_idx].mean()
    rev = d2[rev_idx, np.arange(len(t))].mean()

    def back(g):
        if pred.requires_grad:
            gp = 2.0 * (p - t[fwd_idx]) / len(p)
            np.add.at(gp, rev_idx, 2.0 * (p[rev_idx] - t) / len(t))
            pred._accum(g * gp)

    return Tensor(fwd + rev, parents=(pred,), backward_fn=back)


def emd_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean matched Euclidean distance under an auction assignment.

    The matching is computed once in the forward pass and treated as fixed
    while differentiating (envelope gradient).
    """
    t = np.asarray(target, dtype=np.float64)
    p = pred.value
    if p.shape != t.shape or p.ndim != 2 or p.shape[1] != 3:
        raise ValueError("emd_loss needs equal-size (n, 3) clouds")
    _, assign = emd_approx_assignment(p, t)
    diff = p - t[assign]
    norms = np.linalg.norm(diff, axis=1)
    out_val = norms.mean()

    def back(g):
        if pred.requires_grad:
            safe = np.maximum(norms, _NORM_EPS)
            pred._accum(g * diff / (safe[:, None] * len(p)))

    return Tensor(out_val, parents=(pred,), backward_fn=back)
