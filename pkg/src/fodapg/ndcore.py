"""Dense float64 matrices with reverse-mode gradients.

Everything differentiable in this package runs through the small Tensor type
below: 2-D C-contiguous float64 numpy arrays plus a tape of backward closures.
numpy supplies storage and matmul; every gradient rule is written out here.
Ops validate operand shapes (ShapeError) and reject non-finite results
(CheckError) so NaNs never propagate silently.

Scalars are represented as 1x1 matrices; `backward` only accepts those.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckError, LoadError, NotFoundError, ShapeError

CHECKPOINT_FORMAT = "fodapg.checkpoint/1"

_grad_enabled = True
_tensor_counter = 0


def as_matrix(value) -> np.ndarray:
    """Coerce to a 2-D C-order float64 array, copying only if needed."""
    arr = np.ascontiguousarray(value, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"expected 2-D matrix, got ndim={arr.ndim} shape={arr.shape}")
    return arr


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise CheckError(f"non-finite values produced by {op}")
    return arr


@contextmanager
def no_grad():
    """Disable tape construction inside the block (inference / finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A matrix value plus an optional backward closure on the tape."""

    __slots__ = ("v", "g", "parents", "_bwd", "_tid", "is_param", "name")

    def __init__(self, value, parents=(), bwd=None, is_param=False, name=None):
        global _tensor_counter
        self.v = as_matrix(value)
        self.g = np.zeros_like(self.v) if is_param else None
        self.parents = tuple(parents)
        self._bwd = bwd
        self.is_param = is_param
        self.name = name
        _tensor_counter += 1
        self._tid = _tensor_counter

    @property
    def shape(self):
        return self.v.shape

    def item(self) -> float:
        if self.v.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.v.shape}")
        return float(self.v[0, 0])

    def __repr__(self):
        tag = self.name or ("param" if self.is_param else "tensor")
        return f"Tensor({tag}, shape={self.v.shape})"


def const(value, name=None) -> Tensor:
    """Wrap a value as a leaf with no gradient flow."""
    return Tensor(value, name=name)


def _make(value, parents, bwd, op: str) -> Tensor:
    _finite(value, op)
    if not _grad_enabled:
        return Tensor(value)
    return Tensor(value, parents=parents, bwd=bwd)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into .g for every reachable tensor.

    Parameter tensors accumulate across calls (zero them via ParamStore);
    intermediate tensors get fresh gradient buffers each call.
    """
    if loss.v.shape != (1, 1):
        raise ShapeError(f"backward needs a 1x1 loss, got {loss.v.shape}")
    nodes = []
    seen = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t.parents)
    for t in nodes:
        if t.is_param:
            if t.g is None:
                t.g = np.zeros_like(t.v)
        else:
            t.g = np.zeros_like(t.v)
    loss.g[0, 0] += 1.0
    nodes.sort(key=lambda t: t._tid, reverse=True)
    for t in nodes:
        if t._bwd is not None:
            t._bwd()


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.v.shape[1] != b.v.shape[0]:
        raise ShapeError(f"matmul: {a.v.shape} @ {b.v.shape}")
    out = _make(a.v @ b.v, (a, b), None, "matmul")

    def bwd():
        a.g += out.g @ b.v.T
        b.g += a.v.T @ out.g

    out._bwd = bwd if out.parents else None
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.v.shape != b.v.shape:
        raise ShapeError(f"add: {a.v.shape} vs {b.v.shape}")
    out = _make(a.v + b.v, (a, b), None, "add")

    def bwd():
        a.g += out.g
        b.g += out.g

    out._bwd = bwd if out.parents else None
    return out


def add_rowvec(m: Tensor, row: Tensor) -> Tensor:
    """m (n x c) + row (1 x c) broadcast over rows."""
    if row.v.shape[0] != 1 or m.v.shape[1] != row.v.shape[1]:
        raise ShapeError(f"add_rowvec: {m.v.shape} vs {row.v.shape}")
    out = _make(m.v + row.v, (m, row), None, "add_rowvec")

    def bwd():
        m.g += out.g
        row.g += out.g.sum(axis=0, keepdims=True)

    out._bwd = bwd if out.parents else None
    return out


def scale(a: Tensor, k: float) -> Tensor:
    k = float(k)
    out = _make(a.v * k, (a,), None, "scale")

    def bwd():
        a.g += out.g * k

    out._bwd = bwd if out.parents else None
    return out


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    if a.v.shape != b.v.shape:
        raise ShapeError(f"hadamard: {a.v.shape} vs {b.v.shape}")
    out = _make(a.v * b.v, (a, b), None, "hadamard")

    def bwd():
        a.g += out.g * b.v
        b.g += out.g * a.v

    out._bwd = bwd if out.parents else None
    return out


def transpose(a: Tensor) -> Tensor:
    out = _make(np.ascontiguousarray(a.v.T), (a,), None, "transpose")

    def bwd():
        a.g += out.g.T

    out._bwd = bwd if out.parents else None
    return out


def concat_cols(*parts: Tensor) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols: no operands")
    rows = parts[0].v.shape[0]
    for p in parts:
        if p.v.shape[0] != rows:
            raise ShapeError(f"concat_cols: row mismatch {[p.v.shape for p in parts]}")
    out = _make(np.concatenate([p.v for p in parts], axis=1), parts, None, "concat_cols")

    def bwd():
        j = 0
        for p in parts:
            w = p.v.shape[1]
            p.g += out.g[:, j:j + w]
            j += w

    out._bwd = bwd if out.parents else None
    return out


def concat_rows(*parts: Tensor) -> Tensor:
    if not parts:
        raise ShapeError("concat_rows: no operands")
    cols = parts[0].v.shape[1]
    for p in parts:
        if p.v.shape[1] != cols:
            raise ShapeError(f"concat_rows: col mismatch {[p.v.shape for p in parts]}")
    out = _make(np.concatenate([p.v for p in parts], axis=0), parts, None, "concat_rows")

    def bwd():
        i = 0
        for p in parts:
            h = p.v.shape[0]
            p.g += out.g[i:i + h, :]
            i += h

    out._bwd = bwd if out.parents else None
    return out


def slice_rows(a: Tensor, i0: int, i1: int) -> Tensor:
    if not (0 <= i0 < i1 <= a.v.shape[0]):
        raise ShapeError(f"slice_rows [{i0}:{i1}] on {a.v.shape}")
    out = _make(a.v[i0:i1, :].copy(), (a,), None, "slice_rows")

    def bwd():
        a.g[i0:i1, :] += out.g

    out._bwd = bwd if out.parents else None
    return out


def slice_cols(a: Tensor, j0: int, j1: int) -> Tensor:
    if not (0 <= j0 < j1 <= a.v.shape[1]):
        raise ShapeError(f"slice_cols [{j0}:{j1}] on {a.v.shape}")
    out = _make(a.v[:, j0:j1].copy(), (a,), None, "slice_cols")

    def bwd():
        a.g[:, j0:j1] += out.g

    out._bwd = bwd if out.parents else None
    return out


def repeat_rows(row: Tensor, n: int) -> Tensor:
    """Tile a 1 x c row into an n x c matrix."""
    if row.v.shape[0] != 1:
        raise ShapeError(f"repeat_rows needs 1 x c, got {row.v.shape}")
    out = _make(np.repeat(row.v, n, axis=0), (row,), None, "repeat_rows")

    def bwd():
        row.g += out.g.sum(axis=0, keepdims=True)

    out._bwd = bwd if out.parents else None
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.v)
    out = _make(y, (a,), None, "tanh")

    def bwd():
        a.g += out.g * (1.0 - y * y)

    out._bwd = bwd if out.parents else None
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.v))
    out = _make(y, (a,), None, "sigmoid")

    def bwd():
        a.g += out.g * y * (1.0 - y)

    out._bwd = bwd if out.parents else None
    return out


def relu(a: Tensor) -> Tensor:
    # subgradient at 0 taken as 0
    y = np.maximum(a.v, 0.0)
    out = _make(y, (a,), None, "relu")

    def bwd():
        a.g += out.g * (a.v > 0.0)

    out._bwd = bwd if out.parents else None
    return out


def softmax_rows(a: Tensor) -> Tensor:
    z = a.v - a.v.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    out = _make(y, (a,), None, "softmax_rows")

    def bwd():
        dy = out.g
        a.g += y * (dy - (dy * y).sum(axis=1, keepdims=True))

    out._bwd = bwd if out.parents else None
    return out


def log_softmax_rows(a: Tensor) -> Tensor:
    z = a.v - a.v.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    y = z - lse
    out = _make(y, (a,), None, "log_softmax_rows")

    def bwd():
        dy = out.g
        a.g += dy - np.exp(y) * dy.sum(axis=1, keepdims=True)

    out._bwd = bwd if out.parents else None
    return out


def sum_all(a: Tensor) -> Tensor:
    out = _make(np.array([[a.v.sum()]]), (a,), None, "sum_all")

    def bwd():
        a.g += out.g[0, 0]

    out._bwd = bwd if out.parents else None
    return out


def pick(a: Tensor, i: int, j: int) -> Tensor:
    """Select one entry as a 1x1 tensor."""
    if not (0 <= i < a.v.shape[0] and 0 <= j < a.v.shape[1]):
        raise ShapeError(f"pick ({i},{j}) on {a.v.shape}")
    out = _make(np.array([[a.v[i, j]]]), (a,), None, "pick")

    def bwd():
        a.g[i, j] += out.g[0, 0]

    out._bwd = bwd if out.parents else None
    return out


def rowwise_sumsq(a: Tensor) -> Tensor:
    """Per-row squared L2 norm as an r x 1 column."""
    y = (a.v * a.v).sum(axis=1, keepdims=True)
    out = _make(y, (a,), None, "rowwise_sumsq")

    def bwd():
        a.g += 2.0 * a.v * out.g

    out._bwd = bwd if out.parents else None
    return out


def outer_add(col: Tensor, row: Tensor) -> Tensor:
    """col (r x 1) + row (1 x c) -> r x c."""
    if col.v.shape[1] != 1 or row.v.shape[0] != 1:
        raise ShapeError(f"outer_add: {col.v.shape} + {row.v.shape}")
    out = _make(col.v + row.v, (col, row), None, "outer_add")

    def bwd():
        col.g += out.g.sum(axis=1, keepdims=True)
        row.g += out.g.sum(axis=0, keepdims=True)

    out._bwd = bwd if out.parents else None
    return out


def row_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row to unit L2 norm; rows with norm below eps stay zero."""
    norms = np.sqrt((a.v * a.v).sum(axis=1, keepdims=True))
    safe = np.where(norms > eps, norms, 1.0)
    y = np.where(norms > eps, a.v / safe, 0.0)
    out = _make(y, (a,), None, "row_normalize")

    def bwd():
        dy = out.g
        live = (norms > eps).astype(np.float64)
        dot = (dy * a.v).sum(axis=1, keepdims=True)
        a.g += live * (dy / safe - a.v * dot / (safe ** 3))

    out._bwd = bwd if out.parents else None
    return out


def lstm_step(x: Tensor, h_prev: Tensor, c_prev: Tensor, w: Tensor, b: Tensor):
    """One LSTM cell update: returns (h, c) as two tape tensors.

    Gate layout along the last axis of w and b is [input, forget, cell,
    output]: z = [x, h_prev] @ w + b; i, f, o pass through sigmoid, g through
    tanh; c = f*c_prev + i*g; h = o*tanh(c). Fused into a single tape node
    pair sharing cached activations so a T-step unroll stays O(T) nodes.
    """
    n, d_h = h_prev.v.shape
    d_in = x.v.shape[1]
    if x.v.shape[0] != n or c_prev.v.shape != (n, d_h):
        raise ShapeError(f"lstm_step: x {x.v.shape}, h {h_prev.v.shape}, "
                         f"c {c_prev.v.shape}")
    if w.v.shape != (d_in + d_h, 4 * d_h) or b.v.shape != (1, 4 * d_h):
        raise ShapeError(f"lstm_step: weights {w.v.shape}, bias {b.v.shape} "
                         f"for d_in={d_in}, d_h={d_h}")
    xin = np.concatenate([x.v, h_prev.v], axis=1)
    z = xin @ w.v + b.v
    zi, zf, zg, zo = np.split(z, 4, axis=1)
    gi = 1.0 / (1.0 + np.exp(-zi))
    gf = 1.0 / (1.0 + np.exp(-zf))
    gg = np.tanh(zg)
    go = 1.0 / (1.0 + np.exp(-zo))
    c_new = gf * c_prev.v + gi * gg
    tc = np.tanh(c_new)
    parents = (x, h_prev, c_prev, w, b)
    c_t = _make(c_new, parents, None, "lstm_step")
    h_t = _make(go * tc, parents + (c_t,), None, "lstm_step")
    if not c_t.parents:
        return h_t, c_t

    # h is created after c, so h's closure runs first and may push the
    # tanh-path contribution into c's gradient before c's closure fires
    def bwd_h():
        dh = h_t.g
        c_t.g += dh * go * (1.0 - tc * tc)
        dzo = dh * tc * go * (1.0 - go)
        w.g[:, 3 * d_h:] += xin.T @ dzo
        b.g[:, 3 * d_h:] += dzo.sum(axis=0, keepdims=True)
        dxin = dzo @ w.v[:, 3 * d_h:].T
        x.g += dxin[:, :d_in]
        h_prev.g += dxin[:, d_in:]

    def bwd_c():
        dc = c_t.g
        c_prev.g += dc * gf
        dz = np.concatenate([dc * gg * gi * (1.0 - gi),
                             dc * c_prev.v * gf * (1.0 - gf),
                             dc * gi * (1.0 - gg * gg)], axis=1)
        w.g[:, :3 * d_h] += xin.T @ dz
        b.g[:, :3 * d_h] += dz.sum(axis=0, keepdims=True)
        dxin = dz @ w.v[:, :3 * d_h].T
        x.g += dxin[:, :d_in]
        h_prev.g += dxin[:, d_in:]

    h_t._bwd = bwd_h
    c_t._bwd = bwd_c
    return h_t, c_t


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named parameter tensors, iterated in sorted-name order everywhere."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ShapeError(f"duplicate parameter name {name!r}")
        t = Tensor(value, is_param=True, name=name)
        self._params[name] = t
        return t

    def get(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise NotFoundError(f"no parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        for name in self.names():
            yield name, self._params[name]

    def n_scalars(self) -> int:
        return sum(t.v.size for t in self._params.values())

    def zero_grads(self) -> None:
        for t in self._params.values():
            if t.g is None:
                t.g = np.zeros_like(t.v)
            else:
                t.g[:] = 0.0

    def clone_values(self) -> dict[str, np.ndarray]:
        return {name: t.v.copy() for name, t in self.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in values.items():
            t = self.get(name)
            arr = as_matrix(arr)
            if arr.shape != t.v.shape:
                raise ShapeError(f"{name}: {arr.shape} into {t.v.shape}")
            t.v[:] = arr

    # -- checkpoint io: plain JSON, repr floats round-trip exactly

    def to_payload(self) -> dict:
        params = {}
        for name, t in self.items():
            params[name] = {"shape": list(t.v.shape), "data": t.v.tolist()}
        return {"format": CHECKPOINT_FORMAT, "params": params}

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_payload(), fh)

    @classmethod
    def from_payload(cls, payload: dict) -> "ParamStore":
        if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
            raise LoadError(f"unsupported checkpoint format: {payload.get('format')!r}"
                            if isinstance(payload, dict) else "checkpoint payload is not an object")
        store = cls()
        params = payload.get("params")
        if not isinstance(params, dict):
            raise LoadError("checkpoint missing params table")
        for name in sorted(params):
            entry = params[name]
            try:
                shape = tuple(entry["shape"])
                arr = as_matrix(entry["data"])
            except (KeyError, TypeError, ValueError, ShapeError) as exc:
                raise LoadError(f"malformed checkpoint entry {name!r}: {exc}") from exc
            if arr.shape != shape:
                raise LoadError(f"checkpoint entry {name!r}: shape {shape} vs data {arr.shape}")
            store.add(name, arr)
        return store

    @classmethod
    def load(cls, path) -> "ParamStore":
        try:
            with open(path) as fh:
                payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise LoadError(f"checkpoint is not valid JSON: {exc}") from exc
        return cls.from_payload(payload)


# ---------------------------------------------------------------------------
# finite-difference certification


@dataclass
class GradCheckReport:
    """Outcome of comparing tape gradients against central differences."""

    max_rel_err: float
    per_param: dict[str, float] = field(default_factory=dict)
    checked_coords: int = 0
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def grad_check(f, store: ParamStore, h: float = 1e-5, tolerance: float = 1e-4,
               max_coords_per_param: int = 200, seed: int = 0) -> GradCheckReport:
    """Certify tape gradients of scalar f() against central differences.

    f rebuilds its forward pass from the store's current values and returns a
    1x1 Tensor. Up to max_coords_per_param coordinates per parameter are
    sampled with a seeded counter-based generator; each is perturbed by +/- h
    in place (and restored) to form (f(x+h) - f(x-h)) / 2h. Relative error is
    |ga - gf| / max(|ga|, |gf|, 1e-6); the floor keeps rounding noise on
    near-zero coordinates (fd error ~ eps * |f| / h) from masquerading as a
    gradient bug while still flagging any absolute deviation >= 1e-10.
    """
    store.zero_grads()
    loss = f()
    if not isinstance(loss, Tensor) or loss.v.shape != (1, 1):
        raise ShapeError("grad_check: f must return a 1x1 Tensor")
    backward(loss)
    analytic = {name: t.g.copy() for name, t in store.items()}

    rng = np.random.Generator(np.random.Philox(seed))
    per_param = {}
    checked = 0
    for name, t in store.items():
        flat = t.v.reshape(-1)
        ana = analytic[name].reshape(-1)
        n = flat.size
        if n <= max_coords_per_param:
            coords = np.arange(n)
        else:
            coords = np.sort(rng.choice(n, size=max_coords_per_param, replace=False))
        worst = 0.0
        for i in coords:
            keep = flat[i]
            flat[i] = keep + h
            with no_grad():
                up = f().item()
            flat[i] = keep - h
            with no_grad():
                down = f().item()
            flat[i] = keep
            fd = (up - down) / (2.0 * h)
            rel = abs(ana[i] - fd) / max(abs(ana[i]), abs(fd), 1e-6)
            worst = max(worst, rel)
            checked += 1
        per_param[name] = worst
    max_rel = max(per_param.values()) if per_param else 0.0
    return GradCheckReport(max_rel_err=max_rel, per_param=per_param,
                           checked_coords=checked, tolerance=tolerance)
