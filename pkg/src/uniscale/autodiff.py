"""Minimal dense-tensor reverse-mode autodiff on float64 numpy arrays.

Define-by-run: every op records its inputs and a vector-Jacobian closure on
the output tensor; ``backward`` topologically sorts the implied graph and
accumulates gradients into the ``requires_grad`` leaves. Single-threaded per
graph; distinct graphs over read-only parameters may run concurrently.

Broadcasting is restricted to leading-axis expansion: two shapes are
compatible iff one is a suffix of the other. Anything else needs an explicit
reshape, which keeps shape errors loud.
"""

from __future__ import annotations

import json
import struct

import numpy as np

CHECKPOINT_MAGIC = b"USCK"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Raised when op inputs do not conform to the op's shape rule."""


class GraphError(RuntimeError):
    """Raised on graph-protocol violations (double backward, non-scalar loss)."""


class Tensor:
    """Dense float64 array node in a dynamically built backward graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_consumed")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def is_leaf(self):
        return not self._parents

    def zero_grad(self):
        self.grad = None

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all heavy lifting lives in the module-level ops
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _node(data, parents, vjp, requires_grad):
    out = Tensor(data, requires_grad=requires_grad)
    if requires_grad:
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _needs_grad(*tensors):
    return any(t.requires_grad for t in tensors)


def _suffix_compatible(sa, sb):
    """True iff one shape is a suffix of the other (leading-axis expansion)."""
    if len(sa) <= len(sb):
        return sb[len(sb) - len(sa):] == sa
    return sa[len(sa) - len(sb):] == sb


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return np.ascontiguousarray(g)


def _check_binary(kind, a, b):
    if not _suffix_compatible(a.shape, b.shape):
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# elementwise / binary ops


def add(a, b):
    _check_binary("add", a, b)
    data = a.data + b.data

    def vjp(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _node(data, (a, b), vjp, _needs_grad(a, b))


def sub(a, b):
    _check_binary("sub", a, b)
    data = a.data - b.data

    def vjp(g):
        return (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape))

    return _node(data, (a, b), vjp, _needs_grad(a, b))


def mul(a, b):
    _check_binary("mul", a, b)
    data = a.data * b.data

    def vjp(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), vjp, _needs_grad(a, b))


def scale(a, c):
    c = float(c)

    def vjp(g):
        return (g * c,)

    return _node(a.data * c, (a,), vjp, a.requires_grad)


def matmul(a, b):
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: rank >= 2 required, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ for {a.shape} and {b.shape}")
    if not _suffix_compatible(a.shape[:-2], b.shape[:-2]):
        raise ShapeError(f"matmul: batch dims differ for {a.shape} and {b.shape}")
    data = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _node(data, (a, b), vjp, _needs_grad(a, b))


def exp(a):
    data = np.exp(a.data)

    def vjp(g):
        return (g * data,)

    return _node(data, (a,), vjp, a.requires_grad)


def log(a):
    if np.any(a.data <= 0):
        raise ShapeError("log: nonpositive input")
    data = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _node(data, (a,), vjp, a.requires_grad)


def absval(a):
    data = np.abs(a.data)
    sign = np.sign(a.data)  # subgradient 0 at the kink

    def vjp(g):
        return (g * sign,)

    return _node(data, (a,), vjp, a.requires_grad)


def huber(a, delta=1.0):
    delta = float(delta)
    if delta <= 0:
        raise ShapeError("huber: delta must be positive")
    absx = np.abs(a.data)
    quad = absx <= delta
    data = np.where(quad, 0.5 * a.data * a.data, delta * (absx - 0.5 * delta))
    dgrad = np.clip(a.data, -delta, delta)

    def vjp(g):
        return (g * dgrad,)

    return _node(data, (a,), vjp, a.requires_grad)


def relu(a):
    mask = a.data > 0

    def vjp(g):
        return (g * mask,)

    return _node(a.data * mask, (a,), vjp, a.requires_grad)


def sigmoid(a):
    data = 1.0 / (1.0 + np.exp(-a.data))

    def vjp(g):
        return (g * data * (1.0 - data),)

    return _node(data, (a,), vjp, a.requires_grad)


# ---------------------------------------------------------------------------
# normalizations and reductions


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - dot),)

    return _node(data, (a,), vjp, a.requires_grad)


def layer_normalize(a, eps=1e-6):
    """Parameter-free zero-mean unit-variance normalization over the last axis."""
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    sigma = np.sqrt(var + eps)
    y = (a.data - mu) / sigma
    n = a.shape[-1]

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return ((g - gm - y * gy) / sigma,)

    del n
    return _node(y, (a,), vjp, a.requires_grad)


def l2_normalize(a, eps=1e-12):
    """Unit-norm over the last axis; inputs with norm below eps are rejected."""
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    if np.any(norm < eps):
        raise ShapeError("l2-normalize-last-axis: input norm below eps")
    y = a.data / norm

    def vjp(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - y * dot) / norm,)

    return _node(y, (a,), vjp, a.requires_grad)


def _axis_reduce_vjp(a, axis, weight):
    def vjp(g):
        if axis is None:
            return (np.full(a.shape, 1.0, dtype=np.float64) * g * weight,)
        return (np.expand_dims(g, axis) * np.ones(a.shape) * weight,)

    return vjp


def tsum(a, axis=None):
    data = a.data.sum(axis=axis)
    return _node(data, (a,), _axis_reduce_vjp(a, axis, 1.0), a.requires_grad)


def tmean(a, axis=None):
    data = a.data.mean(axis=axis)
    count = a.data.size if axis is None else a.shape[axis]
    return _node(data, (a,), _axis_reduce_vjp(a, axis, 1.0 / count), a.requires_grad)


# ---------------------------------------------------------------------------
# structural ops


def concat(tensors, ):
    """Concatenate along the last axis; all leading extents must agree."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat-last-axis: empty input list")
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(
                f"concat-last-axis: leading dims differ: {tensors[0].shape} vs {t.shape}"
            )
    data = np.concatenate([t.data for t in tensors], axis=-1)
    widths = [t.shape[-1] for t in tensors]
    splits = np.cumsum(widths)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=-1))

    return _node(data, tensors, vjp, _needs_grad(*tensors))


def slice_axis(a, axis, start, stop):
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    data = a.data[idx]

    def vjp(g):
        full = np.zeros(a.shape)
        full[idx] = g
        return (full,)

    return _node(data, (a,), vjp, a.requires_grad)


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    data = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return _node(data, (a,), vjp, a.requires_grad)


def transpose(a, axes=None):
    """Permute axes; default swaps the last two."""
    if axes is None:
        if a.data.ndim < 2:
            raise ShapeError(f"transpose-last-two: rank >= 2 required, got {a.shape}")
        axes = list(range(a.data.ndim - 2)) + [a.data.ndim - 1, a.data.ndim - 2]
    axes = tuple(int(x) for x in axes)
    inv = np.argsort(axes)
    data = np.transpose(a.data, axes)

    def vjp(g):
        return (np.ascontiguousarray(np.transpose(g, inv)),)

    return _node(data, (a,), vjp, a.requires_grad)


OP_KINDS = {
    "matmul": lambda inputs, **at: matmul(*inputs),
    "add": lambda inputs, **at: add(*inputs),
    "mul": lambda inputs, **at: mul(*inputs),
    "concat-last-axis": lambda inputs, **at: concat(inputs),
    "softmax-over-axis": lambda inputs, **at: softmax(inputs[0], at.get("axis", -1)),
    "exp": lambda inputs, **at: exp(inputs[0]),
    "log": lambda inputs, **at: log(inputs[0]),
    "abs": lambda inputs, **at: absval(inputs[0]),
    "huber": lambda inputs, **at: huber(inputs[0], at.get("delta", 1.0)),
    "layer-normalize": lambda inputs, **at: layer_normalize(inputs[0]),
    "l2-normalize-last-axis": lambda inputs, **at: l2_normalize(inputs[0]),
    "mean-over-axis": lambda inputs, **at: tmean(inputs[0], at.get("axis")),
    "sum-over-axis": lambda inputs, **at: tsum(inputs[0], at.get("axis")),
    "relu": lambda inputs, **at: relu(inputs[0]),
    "slice": lambda inputs, **at: slice_axis(inputs[0], at["axis"], at["start"], at["stop"]),
    "reshape": lambda inputs, **at: reshape(inputs[0], at["shape"]),
    "transpose-last-two": lambda inputs, **at: transpose(inputs[0]),
    "sigmoid": lambda inputs, **at: sigmoid(inputs[0]),
}


def forward_op(kind, inputs, **attrs):
    """Dispatch a recorded forward operation by kind name."""
    if kind not in OP_KINDS:
        raise ShapeError(f"unknown op kind: {kind}")
    return OP_KINDS[kind](list(inputs), **attrs)


# ---------------------------------------------------------------------------
# backward


def _toposort(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward: graph already consumed; rebuild the forward pass")
    loss._consumed = True
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf():
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# finite-difference checking


class GradCheckResult:
    def __init__(self, passed, worst_rel, worst_index, message=""):
        self.passed = passed
        self.worst_rel = worst_rel
        self.worst_index = worst_index
        self.message = message

    def __bool__(self):
        return self.passed

    def __repr__(self):
        status = "pass" if self.passed else "FAIL"
        return (f"GradCheckResult({status}, worst_rel={self.worst_rel:.3e}, "
                f"at={self.worst_index}, {self.message})")


def finite_diff_check(f, x, step=1e-6, tolerance=1e-5):
    """Compare analytic gradient of scalar-valued ``f`` against central differences.

    ``f`` must be deterministic and accept a single Tensor. Reports the worst
    coordinate by relative error (absolute error where the denominator is tiny).
    """
    if step <= 0:
        raise ValueError("finite_diff_check: step must be positive")
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if out.data.size != 1:
        raise GraphError("finite_diff_check: f must return a scalar")
    backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    flat = x.data.copy().reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(Tensor(flat.reshape(x.shape))).item()
        flat[i] = orig - step
        lo = f(Tensor(flat.reshape(x.shape))).item()
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * step)

    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        bad = np.argwhere(~(np.isfinite(analytic.reshape(-1)) & np.isfinite(numeric)))
        return GradCheckResult(False, np.inf, tuple(bad[0]), "non-finite gradient")

    a = analytic.reshape(-1)
    denom = np.maximum(np.abs(a) + np.abs(numeric), 1.0)
    rel = np.abs(a - numeric) / denom
    worst = int(np.argmax(rel))
    worst_idx = np.unravel_index(worst, x.shape) if x.data.ndim else ()
    return GradCheckResult(bool(rel[worst] < tolerance), float(rel[worst]), worst_idx)


# ---------------------------------------------------------------------------
# optimizer


def init_adamw_state(params):
    """Fresh AdamW state for a name -> Tensor parameter dict."""
    return {
        "step": 0,
        "skipped": 0,
        "m": {k: np.zeros_like(p.data) for k, p in params.items()},
        "v": {k: np.zeros_like(p.data) for k, p in params.items()},
    }


def global_grad_norm(grads):
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    return float(np.sqrt(total))


def adamw_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8,
               weight_decay=0.0, clip_norm=None):
    """One decoupled-weight-decay Adam step over a parameter dict.

    ``lr`` is either a float or a name -> float mapping (per-group rates).
    The global gradient norm is clipped to ``clip_norm`` before the moment
    update. A NaN anywhere in the gradients rejects the whole step and bumps
    ``state['skipped']``. Returns True if the step was applied.
    """
    if lr is None or (np.isscalar(lr) and lr < 0):
        raise ValueError("adamw_step: lr must be nonnegative")
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            state["skipped"] += 1
            return False

    if clip_norm is not None:
        norm = global_grad_norm(grads)
        if norm > clip_norm > 0:
            factor = clip_norm / norm
            grads = {k: g * factor for k, g in grads.items()}

    state["step"] += 1
    t = state["step"]
    b1, b2 = betas
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        rate = lr[name] if isinstance(lr, dict) else float(lr)
        m = state["m"][name]
        v = state["v"][name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data -= rate * update
        if weight_decay:
            p.data -= rate * weight_decay * p.data
    return True


def warmup_lr(step, peak, warmup_steps, floor=1e-8):
    """Linear warmup from ``floor`` at step 0 to ``peak`` at ``warmup_steps``."""
    if warmup_steps <= 0 or step >= warmup_steps:
        return float(peak)
    frac = step / warmup_steps
    return float(floor + (peak - floor) * frac)


# ---------------------------------------------------------------------------
# checkpoint io ("USCK")


def save_checkpoint(path, params, header=None):
    """Write parameters in the USCK binary format (little-endian f64 payloads)."""
    header_bytes = json.dumps(header or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = params[name]
            data = arr.data if isinstance(arr, Tensor) else np.asarray(arr, dtype=np.float64)
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<I", data.ndim))
            for ext in data.shape:
                fh.write(struct.pack("<I", ext))
            fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


class CheckpointError(ValueError):
    """Raised for malformed or truncated checkpoint files."""


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path):
    """Read a USCK file; returns (header dict, name -> float64 array)."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != CHECKPOINT_MAGIC:
            raise CheckpointError("bad magic; not a USCK checkpoint")
        version, = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        hlen, = struct.unpack("<I", _read_exact(fh, 4, "header length"))
        header = json.loads(_read_exact(fh, hlen, "header").decode("utf-8"))
        count, = struct.unpack("<I", _read_exact(fh, 4, "parameter count"))
        params = {}
        for _ in range(count):
            nlen, = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, nlen, "name").decode("utf-8")
            rank, = struct.unpack("<I", _read_exact(fh, 4, "rank"))
            shape = tuple(struct.unpack("<I", _read_exact(fh, 4, "extent"))[0]
                          for _ in range(rank))
            nbytes = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8
            payload = _read_exact(fh, nbytes, f"payload of {name}")
            params[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    return header, params
