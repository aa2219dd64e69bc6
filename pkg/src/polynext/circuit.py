"""Arithmetic circuits over {INPUT, CONST, ADD, MUL}.

A circuit is a DAG stored as parallel arrays indexed by node id. Operands
always precede the node that uses them, so node order is a valid evaluation
order. Every node carries a degree bound (INPUT 1, CONST 0, ADD max, MUL sum)
and a multiplicative depth that counts only products of two non-constant
operands.

Text format, one node per line with dense ids from 0::

    <id> INPUT <index>
    <id> CONST <value, 17 significant digits>
    <id> ADD <a> <b>
    <id> MUL <a> <b>
    OUTPUTS <id> <id> ...
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

INPUT, CONST, ADD, MUL = 0, 1, 2, 3
KIND_NAMES = ("INPUT", "CONST", "ADD", "MUL")
DEFAULT_MAX_NODES = 10_000_000


class CircuitFormatError(ValueError):
    pass


class CircuitTooLarge(RuntimeError):
    pass


@dataclass
class ArithmeticCircuit:
    kind: np.ndarray  # uint8 codes
    a: np.ndarray  # first operand, or input index for INPUT
    b: np.ndarray  # second operand (-1 when unused)
    value: np.ndarray  # CONST payload
    outputs: np.ndarray
    _analysis: dict | None = field(default=None, repr=False)

    @property
    def num_nodes(self) -> int:
        return int(self.kind.size)

    @property
    def num_inputs(self) -> int:
        mask = self.kind == INPUT
        return int(self.a[mask].max()) + 1 if mask.any() else 0

    def analysis(self) -> dict:
        if self._analysis is None:
            self._analysis = _analyze(self.kind, self.a, self.b)
        return self._analysis

    @property
    def degree(self) -> np.ndarray:
        return self.analysis()["degree"]

    def counts(self) -> dict[str, int]:
        return {name: int((self.kind == code).sum()) for code, name in enumerate(KIND_NAMES)}


def _analyze(kind: np.ndarray, a: np.ndarray, b: np.ndarray) -> dict:
    """Degree, multiplicative depth and evaluation level per node (one sweep)."""
    n = kind.size
    deg = [0] * n
    depth = [0] * n
    level = [0] * n
    for i, (k, x, y) in enumerate(zip(kind.tolist(), a.tolist(), b.tolist())):
        if k == INPUT:
            deg[i] = 1
        elif k == ADD or k == MUL:
            if not (0 <= x < i and 0 <= y < i):
                raise CircuitFormatError(f"node {i}: operands must precede the node")
            level[i] = max(level[x], level[y]) + 1
            if k == ADD:
                deg[i] = max(deg[x], deg[y])
                depth[i] = max(depth[x], depth[y])
            else:
                deg[i] = deg[x] + deg[y]
                depth[i] = max(depth[x], depth[y]) + (1 if deg[x] and deg[y] else 0)
    return {"degree": np.array(deg, dtype=np.int64), "mul_depth": np.array(depth, dtype=np.int64),
            "level": np.array(level, dtype=np.int64)}


# ------------------------------------------------------------------ builder

class CircuitBuilder:
    """Append-only node store with vectorized bulk creation and constant interning."""

    def __init__(self, max_nodes: int = DEFAULT_MAX_NODES, capacity: int = 1024):
        self.max_nodes = max_nodes
        self.n = 0
        self._cap = capacity
        self.kind = np.zeros(capacity, np.uint8)
        self.a = np.zeros(capacity, np.int64)
        self.b = np.zeros(capacity, np.int64)
        self.value = np.zeros(capacity)
        self.deg = np.zeros(capacity, np.int64)
        self.depth = np.zeros(capacity, np.int64)
        self.level = np.zeros(capacity, np.int64)
        self._consts: dict[float, int] = {}
        self._num_inputs = 0

    def _reserve(self, k: int) -> np.ndarray:
        if self.n + k > self.max_nodes:
            raise CircuitTooLarge(f"circuit exceeds max_nodes={self.max_nodes}")
        if self.n + k > self._cap:
            cap = max(2 * self._cap, self.n + k)
            for name in ("kind", "a", "b", "value", "deg", "depth", "level"):
                old = getattr(self, name)
                new = np.zeros(cap, old.dtype)
                new[:self.n] = old[:self.n]
                setattr(self, name, new)
            self._cap = cap
        ids = np.arange(self.n, self.n + k)
        self.n += k
        return ids

    def inputs(self, shape) -> np.ndarray:
        k = int(np.prod(shape))
        ids = self._reserve(k)
        self.kind[ids] = INPUT
        self.a[ids] = np.arange(self._num_inputs, self._num_inputs + k)
        self.b[ids] = -1
        self.deg[ids] = 1
        self._num_inputs += k
        return ids.reshape(shape)

    def const(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        uniq, inverse = np.unique(values.reshape(-1), return_inverse=True)
        uid = np.empty(uniq.size, np.int64)
        fresh = []
        for i, v in enumerate(uniq.tolist()):
            key = v + 0.0  # fold -0.0 into 0.0
            node = self._consts.get(key)
            if node is None:
                fresh.append(i)
                uid[i] = -1
            else:
                uid[i] = node
        if fresh:
            ids = self._reserve(len(fresh))
            self.kind[ids] = CONST
            self.a[ids] = -1
            self.b[ids] = -1
            self.value[ids] = uniq[fresh] + 0.0
            uid[fresh] = ids
            for i, node in zip(fresh, ids.tolist()):
                self._consts[float(uniq[i]) + 0.0] = node
        return uid[inverse].reshape(values.shape)

    def _binary(self, code: int, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        x, y = np.broadcast_arrays(np.asarray(x, np.int64), np.asarray(y, np.int64))
        shape = x.shape
        x, y = x.reshape(-1), y.reshape(-1)
        if (x < 0).any() or (y < 0).any():
            raise ValueError("operand ids must be valid nodes")
        ids = self._reserve(x.size)
        self.kind[ids] = code
        self.a[ids] = x
        self.b[ids] = y
        self.level[ids] = np.maximum(self.level[x], self.level[y]) + 1
        dx, dy = self.deg[x], self.deg[y]
        base = np.maximum(self.depth[x], self.depth[y])
        if code == ADD:
            self.deg[ids] = np.maximum(dx, dy)
            self.depth[ids] = base
        else:
            self.deg[ids] = dx + dy
            self.depth[ids] = base + ((dx > 0) & (dy > 0))
        return ids.reshape(shape)

    def add(self, x, y) -> np.ndarray:
        return self._binary(ADD, x, y)

    def mul(self, x, y) -> np.ndarray:
        return self._binary(MUL, x, y)

    def sum_fold(self, terms: np.ndarray, axis: int = -1) -> np.ndarray:
        """Left-fold ADD chain over ``axis`` of an id array."""
        terms = np.moveaxis(np.asarray(terms), axis, -1)
        acc = terms[..., 0]
        for k in range(1, terms.shape[-1]):
            acc = self.add(acc, terms[..., k])
        return acc

    def masked_fold(self, terms: np.ndarray, valid: np.ndarray) -> np.ndarray:
        """Left-fold over the last axis skipping entries where ``valid`` is False."""
        acc = np.full(terms.shape[:-1], -1, np.int64)
        for k in range(terms.shape[-1]):
            t, v = terms[..., k], valid[..., k]
            first = v & (acc < 0)
            acc = np.where(first, t, acc)
            more = v & ~first
            if more.any():
                acc[more] = self.add(acc[more], t[more])
        if (acc < 0).any():
            acc = np.where(acc < 0, self.const(np.zeros(acc.shape)), acc)
        return acc

    def build(self, outputs) -> ArithmeticCircuit:
        n = self.n
        outputs = np.asarray(outputs, np.int64).reshape(-1)
        analysis = {"degree": self.deg[:n].copy(), "mul_depth": self.depth[:n].copy(),
                    "level": self.level[:n].copy()}
        return ArithmeticCircuit(self.kind[:n].copy(), self.a[:n].copy(), self.b[:n].copy(),
                                 self.value[:n].copy(), outputs, analysis)


# --------------------------------------------------------------- evaluation

def eval_circuit(circuit: ArithmeticCircuit, inputs) -> np.ndarray:
    """Evaluate all outputs.

    ``inputs`` has shape (num_inputs,) or (samples, num_inputs); the result
    has shape (num_outputs,) or (samples, num_outputs). Object arrays (for
    example sympy symbols) are evaluated with their own arithmetic.
    """
    x = np.asarray(inputs)
    single = x.ndim == 1
    if single:
        x = x[None]
    if x.shape[1] != circuit.num_inputs:
        raise ValueError(f"circuit has {circuit.num_inputs} inputs, got {x.shape[1]}")
    dtype = object if x.dtype == object else np.float64
    vals = np.zeros((circuit.num_nodes, x.shape[0]), dtype=dtype)
    if dtype is object:
        vals[:] = 0
    k, a, b = circuit.kind, circuit.a, circuit.b
    inp = np.flatnonzero(k == INPUT)
    vals[inp] = x[:, a[inp]].T
    con = np.flatnonzero(k == CONST)
    vals[con] = circuit.value[con][:, None]
    bad = np.flatnonzero(k > MUL)
    if bad.size:
        raise ValueError(f"cannot evaluate nodes of unknown kind: {bad[:10].tolist()}")
    level = circuit.analysis()["level"]
    order = np.argsort(level, kind="stable")
    bounds = np.searchsorted(level[order], np.arange(1, level.max() + 2)) if level.size else []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        idx = order[lo:hi]
        is_add = k[idx] == ADD
        ia, im = idx[is_add], idx[~is_add]
        if ia.size:
            vals[ia] = vals[a[ia]] + vals[b[ia]]
        if im.size:
            vals[im] = vals[a[im]] * vals[b[im]]
    out = vals[circuit.outputs].T
    return out[0] if single else out


@dataclass
class Certificate:
    ok: bool
    node_count: int
    max_degree: int
    mul_depth: int
    offending: list[int] = field(default_factory=list)


def verify_polynomial(circuit: ArithmeticCircuit) -> Certificate:
    """Check the node-kind whitelist and DAG order; report degree and depth."""
    n = circuit.num_nodes
    ids = np.arange(n)
    bad_kind = circuit.kind > MUL
    binary = (circuit.kind == ADD) | (circuit.kind == MUL)
    bad_edge = binary & ((circuit.a < 0) | (circuit.a >= ids) | (circuit.b < 0) | (circuit.b >= ids))
    bad_out = circuit.outputs[(circuit.outputs < 0) | (circuit.outputs >= n)]
    offending = np.flatnonzero(bad_kind | bad_edge).tolist() + bad_out.tolist()
    if offending or circuit.outputs.size == 0:
        return Certificate(False, n, -1, -1, offending)
    an = circuit.analysis()
    outs = circuit.outputs
    return Certificate(True, n, int(an["degree"][outs].max()), int(an["mul_depth"][outs].max()))


# ----------------------------------------------------------------------- io

def write_circuit(circuit: ArithmeticCircuit, path: str | Path) -> None:
    lines = []
    for i, (k, a, b, v) in enumerate(zip(circuit.kind.tolist(), circuit.a.tolist(),
                                         circuit.b.tolist(), circuit.value.tolist())):
        if k == INPUT:
            lines.append(f"{i} INPUT {a}")
        elif k == CONST:
            lines.append(f"{i} CONST {v:.17g}")
        elif k in (ADD, MUL):
            lines.append(f"{i} {KIND_NAMES[k]} {a} {b}")
        else:
            raise ValueError(f"node {i} has unknown kind code {k}")
    lines.append("OUTPUTS " + " ".join(map(str, circuit.outputs.tolist())))
    Path(path).write_text("\n".join(lines) + "\n")


def read_circuit(path: str | Path) -> ArithmeticCircuit:
    kinds, aa, bb, vals = [], [], [], []
    outputs = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if outputs is not None:
                raise CircuitFormatError(f"line {lineno}: content after OUTPUTS")
            if parts[0] == "OUTPUTS":
                try:
                    outputs = [int(p) for p in parts[1:]]
                except ValueError:
                    raise CircuitFormatError(f"line {lineno}: non-integer output id") from None
                if not outputs:
                    raise CircuitFormatError(f"line {lineno}: circuit has no outputs")
                if any(not 0 <= o < len(kinds) for o in outputs):
                    raise CircuitFormatError(f"line {lineno}: output id out of range")
                continue
            try:
                nid, tag, args = int(parts[0]), parts[1], parts[2:]
                if nid != len(kinds):
                    raise CircuitFormatError(f"line {lineno}: expected id {len(kinds)}, got {nid}")
                if tag == "INPUT" and len(args) == 1:
                    kinds.append(INPUT); aa.append(int(args[0])); bb.append(-1); vals.append(0.0)
                elif tag == "CONST" and len(args) == 1:
                    kinds.append(CONST); aa.append(-1); bb.append(-1); vals.append(float(args[0]))
                elif tag in ("ADD", "MUL") and len(args) == 2:
                    x, y = int(args[0]), int(args[1])
                    if not (0 <= x < nid and 0 <= y < nid):
                        raise CircuitFormatError(f"line {lineno}: operands must precede node {nid}")
                    kinds.append(ADD if tag == "ADD" else MUL); aa.append(x); bb.append(y); vals.append(0.0)
                else:
                    raise CircuitFormatError(f"line {lineno}: malformed node {line.strip()!r}")
            except (ValueError, IndexError) as exc:
                if isinstance(exc, CircuitFormatError):
                    raise
                raise CircuitFormatError(f"line {lineno}: malformed node {line.strip()!r}") from None
    if outputs is None:
        raise CircuitFormatError("missing OUTPUTS line")
    return ArithmeticCircuit(np.array(kinds, np.uint8), np.array(aa, np.int64),
                             np.array(bb, np.int64), np.array(vals, np.float64),
                             np.array(outputs, np.int64))
