"""Small reverse-mode autodiff over numpy arrays.

A :class:`Tape` records every operation of a forward pass together with the
intermediates its backward rule needs. Parameters live in a :class:`ParamStore`
and are pulled onto a tape by name, so one store can serve many forward passes
(rollouts, minibatches, gradient checks).

All math is float64. Batched ops treat the leading axis as the batch.
"""

from __future__ import annotations

import json
import math
from collections.abc import Callable, Iterable, Mapping
from contextlib import contextmanager
from pathlib import Path

import numpy as np

CKPT_FORMAT = "metavim-ckpt-v1"


class NumericError(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


# --------------------------------------------------------------------------
# parameters and optimizer state


class ParamStore:
    """Named float64 parameter arrays plus per-parameter Adam state."""

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.adam_m: dict[str, np.ndarray] = {}
        self.adam_v: dict[str, np.ndarray] = {}
        self.adam_t: dict[str, int] = {}

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64)
        self.params[name] = arr
        self.adam_m[name] = np.zeros_like(arr)
        self.adam_v[name] = np.zeros_like(arr)
        self.adam_t[name] = 0
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def has_prefix(self, prefix: str) -> bool:
        return any(n.startswith(prefix) for n in self.params)

    def copy(self) -> ParamStore:
        out = ParamStore()
        for n, v in self.params.items():
            out.add(n, v.copy())
            out.adam_m[n] = self.adam_m[n].copy()
            out.adam_v[n] = self.adam_v[n].copy()
            out.adam_t[n] = self.adam_t[n]
        return out

    def size(self) -> int:
        return sum(v.size for v in self.params.values())


def uniform_init(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def add_affine(store: ParamStore, name: str, fan_in: int, fan_out: int,
               rng: np.random.Generator) -> None:
    store.add(f"{name}.W", uniform_init(rng, fan_out, fan_in))
    store.add(f"{name}.b", np.zeros(fan_out))


def add_mlp(store: ParamStore, name: str, sizes: Iterable[int],
            rng: np.random.Generator) -> None:
    sizes = list(sizes)
    for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        add_affine(store, f"{name}.l{k}", a, b, rng)


def add_gru(store: ParamStore, name: str, in_dim: int, hidden: int,
            rng: np.random.Generator) -> None:
    for gate in ("z", "r", "c"):
        store.add(f"{name}.W{gate}", uniform_init(rng, hidden, in_dim))
        store.add(f"{name}.U{gate}", uniform_init(rng, hidden, hidden))
        store.add(f"{name}.b{gate}", np.zeros(hidden))


def adam_step(store: ParamStore, grads: Mapping[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-5) -> None:
    """Bias-corrected Adam applied in place to the parameters named in ``grads``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    for name, g in grads.items():
        t = store.adam_t[name] + 1
        store.adam_t[name] = t
        m = store.adam_m[name]
        v = store.adam_v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        store.params[name] -= lr * m_hat / (np.sqrt(v_hat) + eps)


# --------------------------------------------------------------------------
# tape


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "needs_grad", "param")

    def __init__(self, value, parents=(), backward_fn=None, needs_grad=False, param=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.needs_grad = needs_grad
        self.param = param

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(shape={self.value.shape}, param={self.param})"


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


_kink_watch: list[list[float]] = []


@contextmanager
def track_kink_margin():
    """Record how close any non-smooth op came to its kink inside the block.

    Covers ReLU and abs inputs near 0 and ``clip`` inputs near a bound. Ties in
    ``minimum`` are not tracked: in the PPO surrogate both operands coincide
    exactly (and smoothly) whenever the ratio is inside the clip range, and the
    genuine kink is the clip bound. Finite differences are only meaningful when
    every such distance exceeds the step; gradient-check instances use this to
    reject draws.
    """
    box = [math.inf]
    _kink_watch.append(box)
    try:
        yield box
    finally:
        _kink_watch.pop()


def _note_kink(dist: np.ndarray) -> None:
    if _kink_watch and dist.size:
        _kink_watch[-1][0] = min(_kink_watch[-1][0], float(dist.min()))


class Tape:
    """Computation record. With ``record=False`` ops only compute values."""

    def __init__(self, store: ParamStore | None = None, record: bool = True) -> None:
        self.store = store
        self.record = record
        self.nodes: list[Node] = []
        self._param_nodes: dict[str, Node] = {}

    # leaves --------------------------------------------------------------

    def param(self, name: str) -> Node:
        node = self._param_nodes.get(name)
        if node is None:
            if self.store is None:
                raise KeyError(f"tape has no parameter store (asked for {name!r})")
            node = Node(self.store.params[name], needs_grad=self.record, param=name)
            self._param_nodes[name] = node
            if self.record:
                self.nodes.append(node)
        return node

    def leaf(self, value) -> Node:
        """An input whose gradient is wanted after backward."""
        node = Node(np.asarray(value, dtype=np.float64), needs_grad=self.record)
        if self.record:
            self.nodes.append(node)
        return node

    def const(self, value) -> Node:
        return Node(np.asarray(value, dtype=np.float64))

    def _emit(self, value, parents, backward_fn) -> Node:
        if not self.record or not any(p.needs_grad for p in parents):
            return Node(value)
        node = Node(value, parents, backward_fn, needs_grad=True)
        self.nodes.append(node)
        return node

    # linear algebra ------------------------------------------------------

    def affine(self, x: Node, prefix: str) -> Node:
        """``x @ W.T + b`` with parameters ``{prefix}.W`` and ``{prefix}.b``."""
        W = self.param(f"{prefix}.W")
        b = self.param(f"{prefix}.b")
        xv = x.value
        if xv.shape[-1] != W.value.shape[1]:
            raise ValueError(f"{prefix}: input width {xv.shape[-1]} != {W.value.shape[1]}")
        out = xv @ W.value.T + b.value

        def back(g):
            if xv.ndim == 1:
                gW = np.outer(g, xv)
                gb = g
            else:
                gW = g.T @ xv
                gb = g.sum(axis=0)
            return g @ W.value, gW, gb

        return self._emit(out, (x, W, b), back)

    def mlp(self, x: Node, prefix: str, n_layers: int, act: str) -> Node:
        h = x
        for k in range(n_layers):
            h = self.affine(h, f"{prefix}.l{k}")
            if k < n_layers - 1:
                h = self.tanh(h) if act == "tanh" else self.relu(h)
        return h

    # elementwise ---------------------------------------------------------

    def add(self, a: Node, b: Node) -> Node:
        out = a.value + b.value
        sa, sb = a.value.shape, b.value.shape
        return self._emit(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    def sub(self, a: Node, b: Node) -> Node:
        out = a.value - b.value
        sa, sb = a.value.shape, b.value.shape
        return self._emit(out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))

    def mul(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        out = av * bv
        return self._emit(out, (a, b), lambda g: (_unbroadcast(g * bv, av.shape),
                                                  _unbroadcast(g * av, bv.shape)))

    def scale(self, a: Node, c: float) -> Node:
        return self._emit(a.value * c, (a,), lambda g: (g * c,))

    def tanh(self, a: Node) -> Node:
        y = np.tanh(a.value)
        return self._emit(y, (a,), lambda g: (g * (1.0 - y * y),))

    def relu(self, a: Node) -> Node:
        mask = a.value > 0
        _note_kink(np.abs(a.value))
        return self._emit(a.value * mask, (a,), lambda g: (g * mask,))

    def sigmoid(self, a: Node) -> Node:
        y = _sigmoid(a.value)
        return self._emit(y, (a,), lambda g: (g * y * (1.0 - y),))

    def exp(self, a: Node) -> Node:
        y = np.exp(a.value)
        return self._emit(y, (a,), lambda g: (g * y,))

    def square(self, a: Node) -> Node:
        av = a.value
        return self._emit(av * av, (a,), lambda g: (2.0 * g * av,))

    def abs(self, a: Node) -> Node:
        av = a.value
        _note_kink(np.abs(av))
        return self._emit(np.abs(av), (a,), lambda g: (g * np.sign(av),))

    def minimum(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        pick_a = av <= bv
        return self._emit(np.where(pick_a, av, bv), (a, b),
                          lambda g: (g * pick_a, g * ~pick_a))

    def clip(self, a: Node, lo: float, hi: float) -> Node:
        av = a.value
        inside = (av >= lo) & (av <= hi)
        _note_kink(np.minimum(np.abs(av - lo), np.abs(av - hi)))
        return self._emit(np.clip(av, lo, hi), (a,), lambda g: (g * inside,))

    # shape ---------------------------------------------------------------

    def concat(self, parts: list[Node], axis: int = -1) -> Node:
        vals = [p.value for p in parts]
        out = np.concatenate(vals, axis=axis)
        cuts = np.cumsum([v.shape[axis] for v in vals])[:-1]

        def back(g):
            return tuple(np.split(g, cuts, axis=axis))

        return self._emit(out, tuple(parts), back)

    def cols(self, a: Node, start: int, stop: int) -> Node:
        av = a.value

        def back(g):
            full = np.zeros_like(av)
            full[..., start:stop] = g
            return (full,)

        return self._emit(av[..., start:stop], (a,), back)

    def rows(self, a: Node, idx: np.ndarray) -> Node:
        """Gather rows ``a[idx]`` (repeated indices allowed)."""
        av = a.value
        idx = np.asarray(idx)

        def back(g):
            full = np.zeros_like(av)
            np.add.at(full, idx, g)
            return (full,)

        return self._emit(av[idx], (a,), back)

    def pick(self, a: Node, idx: np.ndarray) -> Node:
        """Per-row element ``a[i, idx[i]]``; returns shape (B,)."""
        av = a.value
        ar = np.arange(av.shape[0])

        def back(g):
            full = np.zeros_like(av)
            full[ar, idx] = g
            return (full,)

        return self._emit(av[ar, idx], (a,), back)

    # reductions ----------------------------------------------------------

    def sum(self, a: Node) -> Node:
        shape = a.value.shape
        return self._emit(np.asarray(a.value.sum()), (a,), lambda g: (np.full(shape, g),))

    def mean(self, a: Node) -> Node:
        shape = a.value.shape
        n = a.value.size
        return self._emit(np.asarray(a.value.mean()), (a,),
                          lambda g: (np.full(shape, g / n),))

    def row_sum(self, a: Node) -> Node:
        shape = a.value.shape
        return self._emit(a.value.sum(axis=-1), (a,),
                          lambda g: (np.broadcast_to(g[..., None], shape).copy(),))

    def segment_sum(self, a: Node, idx: np.ndarray, n: int) -> Node:
        """``out[k] = sum of a[i] over i with idx[i] == k``; ``a`` is 1-D."""
        idx = np.asarray(idx, dtype=int)
        out = np.zeros(n)
        np.add.at(out, idx, a.value)
        return self._emit(out, (a,), lambda g: (g[idx],))

    def row_norm(self, a: Node) -> Node:
        av = a.value
        n = np.sqrt((av * av).sum(axis=-1))

        def back(g):
            safe = np.where(n > 0, n, 1.0)
            return ((g / safe)[..., None] * av,)

        return self._emit(n, (a,), back)

    def weighted_sum(self, a: Node, w: np.ndarray) -> Node:
        """Scalar ``sum_i w[i] * sum_j a[i, j]`` (or ``sum_i w[i] a[i]`` for 1-D)."""
        av = a.value
        w = np.asarray(w, dtype=np.float64)
        wb = w.reshape(w.shape + (1,) * (av.ndim - w.ndim))
        out = np.asarray((wb * av).sum())
        return self._emit(out, (a,), lambda g: (np.broadcast_to(g * wb, av.shape).copy(),))

    # probability ---------------------------------------------------------

    def log_softmax(self, a: Node) -> Node:
        av = a.value
        shift = av - av.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(shift).sum(axis=-1, keepdims=True))
        y = shift - lse
        p = np.exp(y)
        return self._emit(y, (a,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))

    def reparam(self, mu: Node, log_sigma: Node, noise: np.ndarray) -> Node:
        """``mu + exp(log_sigma) * noise``."""
        noise = np.asarray(noise, dtype=np.float64)
        s = np.exp(log_sigma.value)
        return self._emit(mu.value + s * noise, (mu, log_sigma),
                          lambda g: (g, g * s * noise))

    def kl_std_normal(self, mu: Node, log_sigma: Node) -> Node:
        """Per-row KL(N(mu, sigma^2) || N(0, I)) for diagonal Gaussians."""
        m, ls = mu.value, log_sigma.value
        var = np.exp(2.0 * ls)
        out = 0.5 * (m * m + var - 1.0 - 2.0 * ls).sum(axis=-1)

        def back(g):
            ge = g[..., None] if m.ndim > 1 else g
            return ge * m, ge * (var - 1.0)

        return self._emit(out, (mu, log_sigma), back)

    # recurrent -----------------------------------------------------------

    def gru(self, x: Node, h: Node, prefix: str) -> Node:
        """Gated recurrent step.

        z = sig(Wz x + Uz h + bz), r = sig(Wr x + Ur h + br),
        c = tanh(Wc x + Uc (r*h) + bc), h' = (1 - z) * h + z * c
        """
        P = {k: self.param(f"{prefix}.{k}") for k in
             ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wc", "Uc", "bc")}
        v = {k: n.value for k, n in P.items()}
        xv, hv = x.value, h.value
        if xv.shape[-1] != v["Wz"].shape[1] or hv.shape[-1] != v["Uz"].shape[0]:
            raise ValueError(f"{prefix}: gru shape mismatch x{xv.shape} h{hv.shape}")
        z = _sigmoid(xv @ v["Wz"].T + hv @ v["Uz"].T + v["bz"])
        r = _sigmoid(xv @ v["Wr"].T + hv @ v["Ur"].T + v["br"])
        rh = r * hv
        c = np.tanh(xv @ v["Wc"].T + rh @ v["Uc"].T + v["bc"])
        out = (1.0 - z) * hv + z * c
        order = ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wc", "Uc", "bc")

        def outer(g, a):
            return np.outer(g, a) if g.ndim == 1 else g.T @ a

        def bsum(g):
            return g if g.ndim == 1 else g.sum(axis=0)

        def back(g):
            gz = g * (c - hv) * z * (1.0 - z)
            gc = g * z * (1.0 - c * c)
            grh = gc @ v["Uc"]
            gr = grh * hv * r * (1.0 - r)
            gx = gz @ v["Wz"] + gr @ v["Wr"] + gc @ v["Wc"]
            gh = g * (1.0 - z) + grh * r + gz @ v["Uz"] + gr @ v["Ur"]
            grads = {
                "Wz": outer(gz, xv), "Uz": outer(gz, hv), "bz": bsum(gz),
                "Wr": outer(gr, xv), "Ur": outer(gr, hv), "br": bsum(gr),
                "Wc": outer(gc, xv), "Uc": outer(gc, rh), "bc": bsum(gc),
            }
            return (gx, gh) + tuple(grads[k] for k in order)

        return self._emit(out, (x, h) + tuple(P[k] for k in order), back)

    # backward ------------------------------------------------------------

    def backward(self, seeds: Node | list[tuple[Node, np.ndarray]],
                 upstream=None) -> dict[str, np.ndarray]:
        """Reverse pass. Returns gradients for every parameter on the tape.

        ``seeds`` is either a scalar node (upstream defaults to 1) or a list of
        ``(node, upstream_gradient)`` pairs.
        """
        if not self.record:
            raise RuntimeError("tape was created with record=False")
        if isinstance(seeds, Node):
            up = np.ones_like(seeds.value) if upstream is None else np.asarray(upstream, float)
            seeds = [(seeds, up)]
        for node in self.nodes:
            node.grad = None
        for node, up in seeds:
            up = np.asarray(up, dtype=np.float64)
            if up.shape != node.value.shape:
                raise ValueError(f"upstream shape {up.shape} != node shape {node.value.shape}")
            node.grad = up.copy() if node.grad is None else node.grad + up
        for node in reversed(self.nodes):
            if node.grad is None or node.backward_fn is None:
                continue
            pgrads = node.backward_fn(node.grad)
            for p, pg in zip(node.parents, pgrads):
                if not p.needs_grad:
                    continue
                p.grad = pg if p.grad is None else p.grad + pg
        out = {}
        for name, node in self._param_nodes.items():
            out[name] = np.zeros_like(node.value) if node.grad is None else np.asarray(node.grad)
        return out


# --------------------------------------------------------------------------
# convenience forward ops on plain vectors


def affine_forward(tape: Tape, prefix: str, x) -> Node:
    node = x if isinstance(x, Node) else tape.const(x)
    return tape.affine(node, prefix)


def gru_step(tape: Tape, prefix: str, x, h) -> Node:
    xn = x if isinstance(x, Node) else tape.const(x)
    hn = h if isinstance(h, Node) else tape.const(h)
    return tape.gru(xn, hn, prefix)


def gaussian_reparam_sample(tape: Tape, mu: Node, log_sigma: Node, noise) -> Node:
    return tape.reparam(mu, log_sigma, noise)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def categorical_entropy(logits: np.ndarray) -> np.ndarray:
    lp = log_softmax(logits)
    return -(np.exp(lp) * lp).sum(axis=-1)


# --------------------------------------------------------------------------
# finite-difference oracle


LossFn = Callable[[ParamStore], "tuple[float, Mapping[str, np.ndarray]]"]


def finite_diff_check(loss_fn: LossFn, store: ParamStore, step: float = 1e-5,
                      names: Iterable[str] | None = None, mode: str = "central") -> float:
    """Max relative error between analytic gradients and finite differences.

    ``loss_fn(store)`` must return ``(loss, grads)``. The relative error of each
    coordinate uses the denominator ``max(|analytic|, |numeric|, 1e-8)``.
    """
    loss0, grads = loss_fn(store)
    if not np.isfinite(loss0):
        raise NumericError("non-finite loss")
    names = list(grads) if names is None else list(names)
    worst = 0.0
    for name in names:
        p = store.params[name]
        analytic = np.asarray(grads[name])
        flat = p.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp, _ = loss_fn(store)
            if mode == "central":
                flat[i] = orig - step
                lm, _ = loss_fn(store)
                num = (lp - lm) / (2.0 * step)
            else:
                num = (lp - loss0) / step
            flat[i] = orig
            if not (np.isfinite(lp) and (mode != "central" or np.isfinite(lm))):
                raise NumericError(f"non-finite loss while perturbing {name}[{i}]")
            denom = max(abs(aflat[i]), abs(num), 1e-8)
            worst = max(worst, abs(aflat[i] - num) / denom)
    return worst


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, params: Mapping[str, np.ndarray],
                    meta: Mapping | None = None) -> None:
    doc = {
        "format": CKPT_FORMAT,
        "meta": dict(meta or {}),
        "params": {
            name: {"shape": list(np.shape(v)),
                   "values": [float(x) for x in np.asarray(v, dtype=np.float64).reshape(-1)]}
            for name, v in sorted(params.items())
        },
    }
    text = json.dumps(doc, sort_keys=True, indent=1, allow_nan=False)
    Path(path).write_text(text + "\n")


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CKPT_FORMAT:
        raise ValueError(f"not a {CKPT_FORMAT} checkpoint: format={doc.get('format')!r}")
    params = {}
    for name, entry in doc["params"].items():
        arr = np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
        params[name] = arr
    return params, doc.get("meta", {})


def store_from_params(params: Mapping[str, np.ndarray], prefixes: Iterable[str] | None = None) -> ParamStore:
    store = ParamStore()
    prefixes = None if prefixes is None else tuple(prefixes)
    for name, v in params.items():
        if prefixes is None or name.startswith(prefixes):
            store.add(name, v)
    return store
