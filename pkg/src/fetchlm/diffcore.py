"""Minimal dense-tensor library with reverse-mode automatic differentiation.

Everything is float64 numpy. A Graph is an append-only list of nodes, so
insertion order is already a topological order and the backward pass just
walks it in reverse; gradient accumulation order is therefore fixed and
runs are bit-reproducible. The op vocabulary is closed: adding an op means
writing an explicit forward/backward pair here and a finite-difference
test next to the others in tests/test_diffcore.py.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation, NumericError

# Leaves use the pseudo-kind "leaf"; everything else must be listed here.
OP_KINDS = frozenset(
    {
        "matmul",
        "add",
        "mul",
        "embedding_lookup",
        "mean_pool_rows",
        "tanh",
        "softmax_lastdim",
        "log_softmax_lastdim",
        "log",
        "exp",
        "sum",
        "concat_lastdim",
        "stack_rows",
        "transpose2d",
        "layernorm_lastdim",
        "scaled_dot_attention",
    }
)

_LAYERNORM_EPS = 1e-5


def _as_f64(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


def _shapes(vals) -> str:
    return ", ".join(str(v.shape) for v in vals)


def _softmax_last(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax_last(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


class Graph:
    """Single-threaded computation graph over float64 arrays.

    Nodes are referenced by integer id. Leaves hold inputs/parameters;
    `backward` returns a gradient for every leaf (zeros if the loss does
    not depend on it).
    """

    __slots__ = ("kinds", "inputs", "values", "extras", "names")

    def __init__(self) -> None:
        self.kinds: list[str] = []
        self.inputs: list[tuple[int, ...]] = []
        self.values: list[np.ndarray] = []
        self.extras: list = []
        self.names: list[str | None] = []

    def __len__(self) -> int:
        return len(self.kinds)

    def value(self, nid: int) -> np.ndarray:
        return self.values[nid]

    def leaf(self, value, name: str | None = None) -> int:
        arr = _as_f64(value).copy()
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite leaf value (name={name!r})")
        arr.flags.writeable = False
        return self._push("leaf", (), arr, None, name)

    def _push(self, kind, inputs, value, extra, name=None) -> int:
        nid = len(self.kinds)
        self.kinds.append(kind)
        self.inputs.append(inputs)
        self.values.append(value)
        self.extras.append(extra)
        self.names.append(name)
        return nid

    def op(self, kind: str, *input_ids: int, extra=None) -> int:
        """Record one op; returns the id of its output node."""
        if kind not in OP_KINDS:
            raise ContractViolation(f"unknown op kind {kind!r}")
        vals = [self.values[i] for i in input_ids]
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            out = np.asarray(_forward(kind, vals, extra), dtype=np.float64)
        if not np.all(np.isfinite(out)):
            raise NumericError(
                f"non-finite output at node {len(self.kinds)} ({kind})"
            )
        out.flags.writeable = False
        return self._push(kind, tuple(input_ids), out, extra)

    # -- convenience builders ------------------------------------------

    def matmul(self, a: int, b: int) -> int:
        return self.op("matmul", a, b)

    def add(self, a: int, b: int) -> int:
        return self.op("add", a, b)

    def mul(self, a: int, b: int) -> int:
        return self.op("mul", a, b)

    def tanh(self, a: int) -> int:
        return self.op("tanh", a)

    def log(self, a: int) -> int:
        return self.op("log", a)

    def exp(self, a: int) -> int:
        return self.op("exp", a)

    def sum(self, a: int) -> int:
        return self.op("sum", a)

    def softmax(self, a: int) -> int:
        return self.op("softmax_lastdim", a)

    def log_softmax(self, a: int) -> int:
        return self.op("log_softmax_lastdim", a)

    def concat(self, *ids: int) -> int:
        return self.op("concat_lastdim", *ids)

    def stack_rows(self, *ids: int) -> int:
        return self.op("stack_rows", *ids)

    def transpose(self, a: int) -> int:
        return self.op("transpose2d", a)

    def layernorm(self, a: int) -> int:
        return self.op("layernorm_lastdim", a)

    def attention(self, q: int, k: int, v: int) -> int:
        return self.op("scaled_dot_attention", q, k, v)

    def embedding(self, table: int, token_ids) -> int:
        ids = np.asarray(token_ids, dtype=np.intp)
        return self.op("embedding_lookup", table, extra=ids)

    def mean_pool(self, a: int) -> int:
        return self.op("mean_pool_rows", a)

    # -- differentiation ------------------------------------------------

    def backward(self, loss_id: int) -> dict[int, np.ndarray]:
        """Gradient of the scalar at `loss_id` w.r.t. every leaf.

        Visits nodes in exact reverse insertion order (= reverse
        topological order), so accumulation order is deterministic.
        """
        loss_val = self.values[loss_id]
        if loss_val.ndim != 0:
            raise ContractViolation(
                f"backward requires a scalar loss, got shape {loss_val.shape}"
            )
        adj: list[np.ndarray | None] = [None] * len(self.kinds)
        adj[loss_id] = np.ones((), dtype=np.float64)
        for nid in range(loss_id, -1, -1):
            g = adj[nid]
            if g is None or self.kinds[nid] == "leaf":
                continue
            in_ids = self.inputs[nid]
            grads = _backward(
                self.kinds[nid],
                g,
                [self.values[i] for i in in_ids],
                self.values[nid],
                self.extras[nid],
            )
            for iid, ig in zip(in_ids, grads):
                if adj[iid] is None:
                    adj[iid] = ig.copy()
                else:
                    adj[iid] = adj[iid] + ig
        out: dict[int, np.ndarray] = {}
        for nid, kind in enumerate(self.kinds):
            if kind == "leaf":
                g = adj[nid]
                out[nid] = np.zeros_like(self.values[nid]) if g is None else g
        return out

    def replay(self, upto: int, overrides: dict[int, np.ndarray]) -> np.ndarray:
        """Re-run the forward pass with some leaf values substituted.

        Does not mutate the graph; used by finite_diff_check.
        """
        vals: list[np.ndarray | None] = [None] * (upto + 1)
        for nid in range(upto + 1):
            if self.kinds[nid] == "leaf":
                vals[nid] = overrides.get(nid, self.values[nid])
            else:
                vals[nid] = _forward(
                    self.kinds[nid],
                    [vals[i] for i in self.inputs[nid]],
                    self.extras[nid],
                )
        return vals[upto]


def forward_op(graph: Graph, kind: str, input_ids, extra=None) -> int:
    """Record `kind` applied to `input_ids` on `graph`."""
    return graph.op(kind, *input_ids, extra=extra)


def register_leaves(graph: Graph, params, prefix: str = "") -> dict[str, int]:
    """Register every ndarray field of a params dataclass as a named leaf.

    Returns field name -> leaf node id, so gradients from backward() can be
    routed back to the tensors they belong to.
    """
    import dataclasses

    out: dict[str, int] = {}
    for f in dataclasses.fields(params):
        val = getattr(params, f.name)
        if isinstance(val, np.ndarray):
            out[f.name] = graph.leaf(val, name=prefix + f.name)
    return out


def register_named_leaves(graph: Graph, tensors, prefix: str = "") -> dict[str, int]:
    """Same as register_leaves for a plain name -> ndarray mapping."""
    return {name: graph.leaf(val, name=prefix + name) for name, val in tensors.items()}


def backward(graph: Graph, loss_id: int) -> dict[int, np.ndarray]:
    return graph.backward(loss_id)


# ---------------------------------------------------------------------
# forward / backward rules
# ---------------------------------------------------------------------


def _forward(kind: str, vals, extra) -> np.ndarray:
    if kind == "matmul":
        a, b = vals
        if a.ndim == 0 or b.ndim == 0 or a.ndim > 2 or b.ndim > 2:
            raise ContractViolation(f"matmul needs 1-D/2-D operands, got {_shapes(vals)}")
        if a.shape[-1] != (b.shape[0] if b.ndim >= 1 else -1):
            raise ContractViolation(f"matmul inner dims disagree: {_shapes(vals)}")
        return np.matmul(a, b)
    if kind == "add":
        a, b = vals
        if a.shape == b.shape:
            return a + b
        if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
            return a + b  # row-broadcast bias
        raise ContractViolation(f"add shapes disagree: {_shapes(vals)}")
    if kind == "mul":
        a, b = vals
        if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
            return a * b
        raise ContractViolation(f"mul shapes disagree: {_shapes(vals)}")
    if kind == "embedding_lookup":
        (table,) = vals
        if table.ndim != 2:
            raise ContractViolation(f"embedding table must be 2-D, got {table.shape}")
        ids = extra
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise ContractViolation(
                f"token id out of range [0, {table.shape[0]}): {ids}"
            )
        return table[ids]
    if kind == "mean_pool_rows":
        (x,) = vals
        if x.ndim != 2 or x.shape[0] == 0:
            raise ContractViolation(f"mean_pool_rows needs a non-empty matrix, got {x.shape}")
        return x.mean(axis=0)
    if kind == "tanh":
        return np.tanh(vals[0])
    if kind == "softmax_lastdim":
        x = vals[0]
        if x.ndim == 0 or x.shape[-1] == 0:
            raise ContractViolation(f"softmax_lastdim needs a non-empty last dim, got {x.shape}")
        return _softmax_last(x)
    if kind == "log_softmax_lastdim":
        x = vals[0]
        if x.ndim == 0 or x.shape[-1] == 0:
            raise ContractViolation(
                f"log_softmax_lastdim needs a non-empty last dim, got {x.shape}"
            )
        return _log_softmax_last(x)
    if kind == "log":
        return np.log(vals[0])
    if kind == "exp":
        return np.exp(vals[0])
    if kind == "sum":
        return np.asarray(vals[0].sum(), dtype=np.float64)
    if kind == "concat_lastdim":
        if not vals:
            raise ContractViolation("concat_lastdim needs at least one input")
        if all(v.ndim <= 1 for v in vals):
            return np.concatenate([np.atleast_1d(v) for v in vals])
        if all(v.ndim == 2 for v in vals) and len({v.shape[0] for v in vals}) == 1:
            return np.concatenate(vals, axis=1)
        raise ContractViolation(f"concat_lastdim shapes disagree: {_shapes(vals)}")
    if kind == "stack_rows":
        if not vals or any(v.ndim > 1 for v in vals) or len({v.shape for v in vals}) != 1:
            raise ContractViolation(
                f"stack_rows needs equal-shape scalars or vectors, got {_shapes(vals)}"
            )
        return np.stack(vals, axis=0)
    if kind == "transpose2d":
        x = vals[0]
        if x.ndim != 2:
            raise ContractViolation(f"transpose2d needs a matrix, got {x.shape}")
        return np.ascontiguousarray(x.T)
    if kind == "layernorm_lastdim":
        x = vals[0]
        if x.ndim == 0 or x.shape[-1] < 2:
            raise ContractViolation(f"layernorm_lastdim needs last dim >= 2, got {x.shape}")
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        return (x - mu) / np.sqrt(var + _LAYERNORM_EPS)
    if kind == "scaled_dot_attention":
        q, k, v = vals
        if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
            raise ContractViolation(f"attention needs matrices, got {_shapes(vals)}")
        if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
            raise ContractViolation(f"attention shapes disagree: {_shapes(vals)}")
        scores = q @ k.T / np.sqrt(q.shape[1])
        return _softmax_last(scores) @ v
    raise ContractViolation(f"unknown op kind {kind!r}")


def _backward(kind: str, g: np.ndarray, vals, out: np.ndarray, extra):
    if kind == "matmul":
        a, b = vals
        if a.ndim == 2 and b.ndim == 2:
            return g @ b.T, a.T @ g
        if a.ndim == 1 and b.ndim == 2:
            return b @ g, np.outer(a, g)
        if a.ndim == 2 and b.ndim == 1:
            return np.outer(g, b), a.T @ g
        return g * b, g * a  # 1-D dot product, g is scalar
    if kind == "add":
        a, b = vals
        gb = g.sum(axis=0) if b.shape != g.shape else g
        return g, gb
    if kind == "mul":
        a, b = vals
        ga = g * b
        gb = g * a
        if a.ndim == 0 and g.ndim != 0:
            ga = np.asarray(ga.sum())
        if b.ndim == 0 and g.ndim != 0:
            gb = np.asarray(gb.sum())
        return ga, gb
    if kind == "embedding_lookup":
        (table,) = vals
        gt = np.zeros_like(table)
        np.add.at(gt, extra, g)
        return (gt,)
    if kind == "mean_pool_rows":
        (x,) = vals
        return (np.tile(g / x.shape[0], (x.shape[0], 1)),)
    if kind == "tanh":
        return (g * (1.0 - out * out),)
    if kind == "softmax_lastdim":
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - dot) * out,)
    if kind == "log_softmax_lastdim":
        p = np.exp(out)
        return (g - p * g.sum(axis=-1, keepdims=True),)
    if kind == "log":
        return (g / vals[0],)
    if kind == "exp":
        return (g * out,)
    if kind == "sum":
        return (np.full_like(vals[0], float(g)),)
    if kind == "concat_lastdim":
        grads = []
        offset = 0
        for v in vals:
            if v.ndim == 0:
                grads.append(np.asarray(g[offset]))
                offset += 1
            elif v.ndim == 1:
                grads.append(g[offset : offset + v.shape[0]])
                offset += v.shape[0]
            else:
                grads.append(g[:, offset : offset + v.shape[1]])
                offset += v.shape[1]
        return tuple(grads)
    if kind == "stack_rows":
        return tuple(g[i] for i in range(len(vals)))
    if kind == "transpose2d":
        return (np.ascontiguousarray(g.T),)
    if kind == "layernorm_lastdim":
        x = vals[0]
        n = x.shape[-1]
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + _LAYERNORM_EPS)
        xhat = (x - mu) * inv
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)
    if kind == "scaled_dot_attention":
        q, k, v = vals
        scale = 1.0 / np.sqrt(q.shape[1])
        scores = q @ k.T * scale
        attn = _softmax_last(scores)
        dv = attn.T @ g
        da = g @ v.T
        ds = (da - (da * attn).sum(axis=-1, keepdims=True)) * attn
        return ds @ k * scale, ds.T @ q * scale, dv
    raise ContractViolation(f"unknown op kind {kind!r}")


def finite_diff_check(
    graph: Graph, loss_id: int, leaf_id: int, h: float = 1e-5
) -> float:
    """Max relative error of the analytic gradient at `leaf_id` against a
    central finite difference of the loss; reports, never raises on
    disagreement."""
    if h <= 0:
        raise ContractViolation(f"finite_diff_check needs h > 0, got {h}")
    analytic = graph.backward(loss_id)[leaf_id]
    base = graph.values[leaf_id]
    numeric = np.zeros_like(base)
    flat = base.ravel()
    for i in range(flat.size):
        bumped = base.copy()
        bumped.ravel()[i] = flat[i] + h
        up = float(graph.replay(loss_id, {leaf_id: bumped}))
        bumped.ravel()[i] = flat[i] - h
        down = float(graph.replay(loss_id, {leaf_id: bumped}))
        numeric.ravel()[i] = (up - down) / (2.0 * h)
    denom = np.maximum(1.0, np.abs(numeric))
    err = np.abs(analytic - numeric) / denom
    return float(err.max()) if err.size else 0.0
