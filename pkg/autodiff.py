"""
Reverse-mode differentiation over dense numpy arrays

A Tensor records the op that produced it and a closure computing its parents'
gradients. Creation order is a topological order, so backward simply walks the
reachable nodes by descending creation id. backward() hands gradients back in a
map keyed by leaf; shared parameter tensors are never written to, which keeps
concurrent graphs over the same parameters safe.
"""

import itertools
import logging
import struct
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np

from errors import (
    CheckpointVersionMismatch,
    CountMismatch,
    GraphConsumed,
    IndexOutOfRange,
    MalformedHeader,
    NonScalarLoss,
    ShapeMismatch,
)
from scene_model import atomic_write, read_bytes

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

_ids = itertools.count()

CHECKPOINT_MAGIC = b"SCK1"
CHECKPOINT_VERSION = 1


class Tensor:
    """Dense float64 array plus the bookkeeping reverse mode needs"""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 parents: Sequence["Tensor"] = (), backward_fn: Optional[Callable] = None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.op = op
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.id = next(_ids)
        self.consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        if self.size != 1:
            raise NonScalarLoss(f"item() on a tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), name=self.name)

    def __repr__(self):
        label = f" '{self.name}'" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(data)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(value: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Record an op output; untracked when no parent needs a gradient"""
    if any(p.requires_grad for p in parents):
        return Tensor(value, requires_grad=True, parents=parents, backward_fn=backward_fn, op=op)
    return Tensor(value, op=op)


def _rows_in_range(index: np.ndarray, n: int, op: str) -> np.ndarray:
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexOutOfRange(f"{op}: row index outside [0, {n})")
    return index


def _scatter(index: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n,) + values.shape[1:])
    np.add.at(out, index, values)
    return out


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch("matmul needs (n,k) @ (k,m)", [a.shape, b.shape])
    return _node(a.data @ b.data, "matmul", (a, b),
                 lambda g: [g @ b.data.T, a.data.T @ g])


def _pair(a, b, op: str):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeMismatch(f"{op} needs equal shapes or a scalar operand", [a.shape, b.shape])
    return a, b


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    return np.asarray(g.sum()) if t.ndim == 0 and g.ndim != 0 else g


def add(a, b) -> Tensor:
    a, b = _pair(a, b, "add")
    return _node(a.data + b.data, "add", (a, b),
                 lambda g: [_unbroadcast(g, a), _unbroadcast(g, b)])


def mul(a, b) -> Tensor:
    a, b = _pair(a, b, "mul")
    return _node(a.data * b.data, "mul", (a, b),
                 lambda g: [_unbroadcast(g * b.data, a), _unbroadcast(g * a.data, b)])


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: [g * mask])


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    shapes = [t.shape for t in tensors]
    try:
        value = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatch("concat operands disagree off the join axis", shapes)
    splits = np.cumsum([s[axis] for s in shapes])[:-1]
    return _node(value, "concat", tensors, lambda g: np.split(g, splits, axis=axis))


def gather_rows(a: Tensor, index) -> Tensor:
    index = _rows_in_range(index, a.shape[0], "gather_rows")
    n = a.shape[0]
    return _node(a.data[index], "gather_rows", (a,), lambda g: [_scatter(index, g, n)])


def scatter_add_rows(a: Tensor, index, n_rows: int) -> Tensor:
    index = _rows_in_range(index, n_rows, "scatter_add_rows")
    if index.shape[0] != a.shape[0]:
        raise ShapeMismatch("scatter_add_rows needs one target row per input row", [a.shape, index.shape])
    return _node(_scatter(index, a.data, n_rows), "scatter_add_rows", (a,), lambda g: [g[index]])


def _softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def row_softmax(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeMismatch("row_softmax needs a matrix", [a.shape])
    y = _softmax(a.data)
    return _node(y, "row_softmax", (a,),
                 lambda g: [y * (g - (g * y).sum(axis=1, keepdims=True))])


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """
    Per-row cross entropy, fused with a row-max stabilised log-sum-exp

    Returns an (n,) tensor; reduce it with mean() or sum().
    """
    if logits.ndim != 2:
        raise ShapeMismatch("softmax_cross_entropy needs (n, classes) logits", [logits.shape])
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, m = logits.shape
    if targets.shape[0] != n:
        raise ShapeMismatch("one target per logit row", [logits.shape, targets.shape])
    if targets.size and (targets.min() < 0 or targets.max() >= m):
        raise IndexOutOfRange(f"softmax_cross_entropy: target outside [0, {m})")
    x = logits.data
    row_max = x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(x - row_max).sum(axis=1)) + row_max[:, 0]
    rows = np.arange(n)
    value = lse - x[rows, targets]

    def backward(g):
        d = _softmax(x)
        d[rows, targets] -= 1.0
        return [d * g[:, None]]

    return _node(value, "softmax_cross_entropy", (logits,), backward)


def l2_normalize_rows(a: Tensor, eps: float = 1e-12) -> Tensor:
    norm = np.maximum(np.linalg.norm(a.data, axis=1, keepdims=True), eps)
    y = a.data / norm
    return _node(y, "l2_normalize_rows", (a,),
                 lambda g: [(g - y * (g * y).sum(axis=1, keepdims=True)) / norm])


def cosine_rows(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeMismatch("cosine_rows needs two matrices of equal shape", [a.shape, b.shape])
    na = np.maximum(np.linalg.norm(a.data, axis=1), eps)
    nb = np.maximum(np.linalg.norm(b.data, axis=1), eps)
    cos = (a.data * b.data).sum(axis=1) / (na * nb)

    def backward(g):
        ga = b.data / (na * nb)[:, None] - cos[:, None] * a.data / (na * na)[:, None]
        gb = a.data / (na * nb)[:, None] - cos[:, None] * b.data / (nb * nb)[:, None]
        return [ga * g[:, None], gb * g[:, None]]

    return _node(cos, "cosine_rows", (a, b), backward)


def mean(a: Tensor) -> Tensor:
    n = a.size
    if n == 0:
        raise ShapeMismatch("mean of an empty tensor", [a.shape])
    return _node(np.asarray(a.data.sum() / n), "mean", (a,),
                 lambda g: [np.full(a.shape, float(g) / n)])


def sum(a: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    if axis is None:
        return _node(np.asarray(a.data.sum()), "sum", (a,), lambda g: [np.full(a.shape, float(g))])
    return _node(a.data.sum(axis=axis), "sum", (a,),
                 lambda g: [np.broadcast_to(np.expand_dims(g, axis), a.shape).copy()])


def broadcast_rows(a: Tensor, b: Tensor) -> Tensor:
    """a (n,c) plus the row vector b (c,) on every row"""
    if a.ndim != 2 or b.shape != (a.shape[1],):
        raise ShapeMismatch("broadcast_rows needs (n,c) and (c,)", [a.shape, b.shape])
    return _node(a.data + b.data, "broadcast_rows", (a, b), lambda g: [g, g.sum(axis=0)])


def select(a: Tensor, k: int) -> Tensor:
    """Slice a[k] out of the leading axis"""
    if not 0 <= k < a.shape[0]:
        raise IndexOutOfRange(f"select: {k} outside [0, {a.shape[0]})")

    def backward(g):
        out = np.zeros(a.shape)
        out[k] = g
        return [out]

    return _node(a.data[k], "select", (a,), backward)


def columns(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim != 2 or not 0 <= start < stop <= a.shape[1]:
        raise ShapeMismatch(f"columns [{start}:{stop}) out of range", [a.shape])

    def backward(g):
        out = np.zeros(a.shape)
        out[:, start:stop] = g
        return [out]

    return _node(a.data[:, start:stop], "columns", (a,), backward)


def scale_rows(a: Tensor, w: Tensor) -> Tensor:
    """Row i of a times the scalar w[i]"""
    a, w = _as_tensor(a), _as_tensor(w)
    if a.ndim != 2 or w.shape != (a.shape[0],):
        raise ShapeMismatch("scale_rows needs (n,c) and (n,)", [a.shape, w.shape])
    return _node(a.data * w.data[:, None], "scale_rows", (a, w),
                 lambda g: [g * w.data[:, None], (g * a.data).sum(axis=1)])


def segment_softmax(scores: Tensor, segments, n_segments: int) -> Tensor:
    """Softmax of a flat score vector within each segment id"""
    segments = _rows_in_range(segments, n_segments, "segment_softmax")
    if scores.shape != segments.shape:
        raise ShapeMismatch("one segment id per score", [scores.shape, segments.shape])
    x = scores.data
    seg_max = np.full(n_segments, -np.inf)
    np.maximum.at(seg_max, segments, x)
    e = np.exp(x - seg_max[segments])
    denom = np.bincount(segments, weights=e, minlength=n_segments)
    y = e / denom[segments]

    def backward(g):
        dot = np.bincount(segments, weights=g * y, minlength=n_segments)
        return [y * (g - dot[segments])]

    return _node(y, "segment_softmax", (scores,), backward)


def custom(name: str, inputs: Sequence[Tensor], value: np.ndarray, backward_fn: Callable) -> Tensor:
    """Wrap an externally computed value and its vector-Jacobian product"""
    return _node(np.asarray(value, dtype=np.float64), name, tuple(inputs), backward_fn)


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------

class Gradients(dict):
    """Leaf tensor -> gradient array"""

    def of(self, tensor: Tensor) -> np.ndarray:
        return self.get(tensor, np.zeros(tensor.shape))

    def by_name(self) -> Dict[str, np.ndarray]:
        return {t.name: g for t, g in self.items() if t.name}


def _reachable(loss: Tensor) -> List[Tensor]:
    seen, stack, nodes = set(), [loss], []
    while stack:
        node = stack.pop()
        if node.id in seen or not node.requires_grad:
            continue
        seen.add(node.id)
        nodes.append(node)
        stack.extend(node.parents)
    nodes.sort(key=lambda t: t.id, reverse=True)
    return nodes


def backward(loss: Tensor) -> Gradients:
    if loss.size != 1:
        raise NonScalarLoss(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.consumed:
        raise GraphConsumed("backward was already run on this graph; rebuild it first")
    loss.consumed = True

    grads: Dict[int, np.ndarray] = {loss.id: np.ones(loss.shape)}
    result = Gradients()
    for node in _reachable(loss):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node.is_leaf:
            result[node] = g.reshape(node.shape)
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad or pg is None:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
        node.backward_fn = None
        node.parents = ()
    return result


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    checked: int
    excluded: int
    worst: Optional[str] = None
    per_input: Dict[str, float] = field(default_factory=dict)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max_rel_err={self.max_rel_err:.3e} checked={self.checked} "
                f"excluded={self.excluded}" + (f" worst={self.worst}" if self.worst else ""))


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(1e-8, abs(a) + abs(n))


def _pick_coords(analytic: np.ndarray, max_coords: Optional[int], rng: np.random.Generator) -> np.ndarray:
    flat = np.abs(analytic.reshape(-1))
    if max_coords is None or flat.size <= max_coords:
        return np.arange(flat.size)
    strongest = np.argsort(-flat, kind="stable")[: max_coords // 2]
    rest = np.setdiff1d(np.arange(flat.size), strongest)
    drawn = rng.choice(rest, size=max_coords - strongest.size, replace=False)
    return np.sort(np.concatenate([strongest, drawn]))


def _central(f: Callable[..., Tensor], inputs: Sequence[Tensor], flat: np.ndarray, c: int, step: float):
    original = flat[c]
    flat[c] = original + step
    fp = f(*inputs).item()
    flat[c] = original - step
    fm = f(*inputs).item()
    flat[c] = original
    return fp, fm


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5, tol: float = 1e-4,
               max_coords: Optional[int] = None, seed: int = 0) -> GradCheckReport:
    """
    Compare backward() against finite differences coordinate by coordinate

    Each coordinate is compared with the central difference D(h) and, when
    that misses `tol`, with the Richardson estimate (4 D(h/2) - D(h)) / 3.
    A coordinate that still misses is measured again at h/10 and h/100 as
    long as round-off stays well below `tol`; the best error is kept.

    Kink rule: a coordinate whose one-sided slopes disagree by more than 10% at
    any tried step is a non-differentiable point (e.g. relu at 0) and is
    excluded. Coordinates whose gradient is below the round-off floor of the
    difference quotient at h are excluded too. f(*inputs) must be pure.
    """
    inputs = list(inputs)
    loss = f(*inputs)
    f0 = loss.item()
    analytic = backward(loss)
    rng = np.random.default_rng(seed)
    eps = np.finfo(np.float64).eps
    scale = max(1.0, abs(f0))

    worst_err, worst, checked, excluded = 0.0, None, 0, 0
    per_input = {}
    for k, x in enumerate(inputs):
        label = x.name or f"input{k}"
        a_grad = analytic.of(x)
        coords = _pick_coords(a_grad, max_coords, rng)
        flat = x.data.reshape(-1)
        input_err = 0.0
        for c in coords:
            a = float(a_grad.reshape(-1)[c])
            err, kink = None, False
            for step in (h, h / 10.0, h / 100.0):
                if step < h and abs(a) * step * tol < 10.0 * eps * scale:
                    break
                fp, fm = _central(f, inputs, flat, c, step)
                right, left = (fp - f0) / step, (f0 - fm) / step
                if abs(right - left) > 0.1 * (abs(right) + abs(left)):
                    kink = True
                    break
                d_full = (fp - fm) / (2.0 * step)
                if step == h and abs(a) + abs(d_full) < 50.0 * eps * scale / (h * tol):
                    kink = True
                    break
                this = relative_error(a, d_full)
                if this > tol:
                    hp, hm = _central(f, inputs, flat, c, step / 2.0)
                    d_half = (hp - hm) / step
                    this = min(this, relative_error(a, (4.0 * d_half - d_full) / 3.0))
                err = this if err is None else min(err, this)
                if err <= tol:
                    break
            if kink or err is None:
                excluded += 1
                continue
            checked += 1
            input_err = max(input_err, err)
            if err > worst_err:
                worst_err, worst = err, f"{label}[{int(c)}]"
        per_input[label] = input_err

    report = GradCheckReport(worst_err, worst_err <= tol, checked, excluded, worst, per_input)
    logger.debug(f"grad_check: {report}")
    return report


# ---------------------------------------------------------------------------
# SCK1 checkpoints
# ---------------------------------------------------------------------------

def checkpoint_to_bytes(entries: Mapping[str, Union[np.ndarray, Tensor]]) -> bytes:
    chunks = [struct.pack("<4sII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(entries))]
    for name, value in entries.items():
        data = np.ascontiguousarray(value.data if isinstance(value, Tensor) else value, dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<B", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
    return b"".join(chunks)


def checkpoint_from_bytes(payload: bytes) -> Dict[str, np.ndarray]:
    if len(payload) < 12:
        raise MalformedHeader("checkpoint shorter than its header")
    magic, version, count = struct.unpack_from("<4sII", payload, 0)
    if magic != CHECKPOINT_MAGIC:
        raise MalformedHeader(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionMismatch(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")

    entries: Dict[str, np.ndarray] = {}
    offset = 12
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", payload, offset)
            offset += 2
            name = payload[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", payload, offset)
            offset += 1
            shape = struct.unpack_from(f"<{rank}I", payload, offset)
            offset += 4 * rank
            n = int(np.prod(shape, dtype=np.int64))
            if offset + 8 * n > len(payload):
                raise CountMismatch(f"checkpoint entry '{name}' is truncated")
            entries[name] = np.frombuffer(payload, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64)
            offset += 8 * n
    except (struct.error, UnicodeDecodeError) as e:
        raise MalformedHeader(f"corrupt checkpoint entry table: {e}")
    if offset != len(payload):
        raise CountMismatch(f"{len(payload) - offset} trailing bytes after {count} checkpoint entries")
    return entries


def save_checkpoint(entries: Mapping[str, Union[np.ndarray, Tensor]], path) -> None:
    atomic_write(path, checkpoint_to_bytes(entries))
    logger.info(f"Checkpoint with {len(entries)} entries saved to {path}")


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    return checkpoint_from_bytes(read_bytes(path))


def as_parameters(arrays: Mapping[str, np.ndarray], names: Optional[Iterable[str]] = None) -> Dict[str, Tensor]:
    """Fresh leaf tensors for a named parameter set"""
    keys = list(names) if names is not None else list(arrays)
    return {k: parameter(arrays[k], name=k) for k in keys}
