"""The DFST agent: a linear recurrence with per-symbol transition matrices.

Given the one-hot observation ``x_t`` the model updates

    h_{t+1} = A[x_t] h_t,   s_hat_t = B[x_t] h_t,   m_hat_t = C[x_t] h_t

and emits ``argmax(s_hat_t)`` / ``argmax(m_hat_t)``.  Since the observation
only selects a slice, a token index stands in for the one-hot vector
everywhere below.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NonFiniteError, ParseError, PreconditionError
from .grid_env import MOTION_DELTAS, N_MOTIONS, Alphabet, Position, WorldState
from .io_utils import atomic_write_bytes

CHECKPOINT_MAGIC = b"DFST-CHECKPOINT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DfstDims:
    d: int
    n_sym: int
    n_mot: int = N_MOTIONS

    def __post_init__(self):
        if self.d < 1 or self.n_sym < 2 or self.n_mot != N_MOTIONS:
            raise ValueError(f"invalid dims {self}")


@dataclass
class DfstParams:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    h0: np.ndarray
    alphabet: Alphabet

    def __post_init__(self):
        n_sym, d = self.A.shape[0], self.h0.shape[0]
        if self.A.shape != (n_sym, d, d):
            raise ValueError(f"A has shape {self.A.shape}")
        if self.B.shape != (n_sym, n_sym, d):
            raise ValueError(f"B has shape {self.B.shape}")
        if self.C.shape != (n_sym, N_MOTIONS, d):
            raise ValueError(f"C has shape {self.C.shape}")
        if n_sym != len(self.alphabet):
            raise ValueError("tensor symbol axis does not match the alphabet")

    @property
    def dims(self) -> DfstDims:
        return DfstDims(self.h0.shape[0], self.A.shape[0])

    @property
    def dtype(self):
        return self.A.dtype

    def tensors(self) -> tuple[np.ndarray, ...]:
        return self.A, self.B, self.C, self.h0

    def astype(self, dtype) -> "DfstParams":
        return DfstParams(*(t.astype(dtype) for t in self.tensors()), self.alphabet)

    def copy(self) -> "DfstParams":
        return DfstParams(*(t.copy() for t in self.tensors()), self.alphabet)

    def is_finite(self) -> bool:
        return all(np.isfinite(t).all() for t in self.tensors())


@dataclass
class ForwardTrace:
    h: np.ndarray         # (T, d): h_1 .. h_T
    s_logits: np.ndarray  # (T, n_sym)
    m_logits: np.ndarray  # (T, n_mot)


def param_count(dims: DfstDims) -> int:
    d, k, r = dims.d, dims.n_sym, dims.n_mot
    return k * d * d + k * k * d + k * r * d + d


def init_identity(dims: DfstDims, alphabet: Alphabet, seed=None, dtype=np.float32) -> DfstParams:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    A = np.broadcast_to(np.eye(dims.d, dtype=dtype), (dims.n_sym, dims.d, dims.d)).copy()
    B = np.zeros((dims.n_sym, dims.n_sym, dims.d), dtype=dtype)
    C = np.zeros((dims.n_sym, dims.n_mot, dims.d), dtype=dtype)
    # uniform on the open interval (0, 1)
    h0 = rng.random(dims.d)
    while np.any(h0 == 0.0):
        h0[h0 == 0.0] = rng.random(int(np.sum(h0 == 0.0)))
    h0 = (h0 / np.linalg.norm(h0)).astype(dtype)
    return DfstParams(A, B, C, h0, alphabet)


def _check_tokens(params: DfstParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64)
    if x.ndim != 1:
        raise ValueError("token sequence must be one-dimensional")
    if x.size and (x.min() < 0 or x.max() >= params.A.shape[0]):
        raise PreconditionError("token index out of range")
    return x


def _heads(params: DfstParams, x: np.ndarray, h_prev: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # h_prev[t] is the state the head reads at step t
    s = np.einsum("tkd,td->tk", params.B[x], h_prev)
    m = np.einsum("tkd,td->tk", params.C[x], h_prev)
    return s, m


def forward(params: DfstParams, x) -> ForwardTrace:
    """Teacher-forced pass over an observation sequence, one step at a time."""
    x = _check_tokens(params, x)
    T, d = len(x), params.h0.shape[0]
    H = np.empty((T + 1, d), dtype=params.dtype)
    H[0] = params.h0
    A = params.A
    for t in range(T):
        H[t + 1] = A[x[t]] @ H[t]
    s, m = _heads(params, x, H[:T])
    return ForwardTrace(H[1:], s, m)


def prefix_products(mats: np.ndarray) -> np.ndarray:
    """Inclusive scan ``P_t = M_t @ ... @ M_0`` by recursive doubling.

    Each of the ``ceil(log2 T)`` rounds is a single batched matmul.
    """
    P = mats.copy()
    T = len(P)
    stride = 1
    while stride < T:
        P[stride:] = P[stride:] @ P[:-stride]
        stride *= 2
    return P


def forward_scan(params: DfstParams, x) -> ForwardTrace:
    """Same semantics as :func:`forward`, with hidden states from a parallel scan."""
    x = _check_tokens(params, x)
    T = len(x)
    if T == 0:
        d = params.h0.shape[0]
        empty = np.empty((0, d), dtype=params.dtype)
        return ForwardTrace(empty, empty[:, :0].reshape(0, params.B.shape[1]), empty[:, :0].reshape(0, N_MOTIONS))
    P = prefix_products(params.A[x])
    H = P @ params.h0
    h_prev = np.concatenate([params.h0[None, :], H[:-1]], axis=0)
    s, m = _heads(params, x, h_prev)
    return ForwardTrace(H, s, m)


def decode(logits) -> int:
    """Argmax with ties broken toward the lowest index."""
    v = np.asarray(logits)
    if v.size == 0:
        raise PreconditionError("cannot decode an empty logit vector")
    if np.isnan(v).any():
        raise NonFiniteError("NaN in logits")
    return int(np.argmax(v))


@dataclass(frozen=True)
class OracleTimed:
    """Run for exactly ``steps`` steps (the expert's trajectory length)."""

    steps: int


@dataclass(frozen=True)
class Fixpoint:
    """Halt after ``k`` consecutive steps that rewrite the observed symbol and stay."""

    k: int = 8


@dataclass
class RolloutResult:
    world: WorldState
    steps: int
    halted: bool
    position: Position = field(default=Position(0, 0))
    error: str | None = None


class DfstRunner:
    """Closed-loop driver with the three heads fused into one matrix per symbol."""

    def __init__(self, params: DfstParams):
        self.params = params
        self.d = params.h0.shape[0]
        self.n_sym = params.B.shape[1]
        self.W = np.ascontiguousarray(np.concatenate([params.A, params.B, params.C], axis=1))

    def _loop(self, world: WorldState, p0, n_steps: int, fix_k: int | None, record):
        d, n_sym = self.d, self.n_sym
        W = self.W
        h = self.params.h0.copy()
        cells = world.cells
        lam = world.alphabet.lambda_index
        col, row = p0
        still = 0
        steps = 0
        sym_head, mot_head = slice(d, d + n_sym), slice(d + n_sym, None)
        while steps < n_steps:
            key = (col, row)
            x = cells.get(key, lam)
            out = W[x] @ h
            h = out[:d]
            s = int(out[sym_head].argmax())
            m = int(out[mot_head].argmax())
            # argmax lands on the first NaN if there is one, and a NaN state
            # reaches both heads on the same step
            vs, vm = out[d + s], out[d + n_sym + m]
            if vs != vs or vm != vm:
                raise NonFiniteError(f"non-finite activations at step {steps}")
            if record is not None:
                record((x, s, m))
            if s != x:
                if s == lam:
                    del cells[key]
                else:
                    cells[key] = s
            dc, dr = MOTION_DELTAS[m]
            col += dc
            row += dr
            steps += 1
            if fix_k is not None:
                still = still + 1 if (s == x and m == 4) else 0
                if still >= fix_k:
                    return steps, True, Position(col, row)
        return steps, fix_k is None, Position(col, row)

    def rollout(self, world: WorldState, p0, halt, budget: int) -> RolloutResult:
        if budget <= 0:
            raise PreconditionError("budget must be positive")
        if isinstance(halt, OracleTimed):
            n, fix_k = min(halt.steps, budget), None
        elif isinstance(halt, Fixpoint):
            n, fix_k = budget, halt.k
        else:
            raise TypeError(f"unknown halt mode {halt!r}")
        try:
            steps, halted, pos = self._loop(world, p0, n, fix_k, None)
        except NonFiniteError as exc:
            return RolloutResult(world, 0, False, Position(*p0), str(exc))
        if isinstance(halt, OracleTimed):
            halted = halt.steps <= budget
        return RolloutResult(world, steps, halted, pos)

    def trace(self, world: WorldState, p0, n_steps: int) -> list:
        out: list = []
        try:
            self._loop(world, p0, n_steps, None, out.append)
        except NonFiniteError:
            pass
        return out


def rollout(params: DfstParams, w0: WorldState, p0, halt, budget: int) -> RolloutResult:
    """Closed loop: observe, decode, write, move; ``w0`` is modified in place."""
    return DfstRunner(params).rollout(w0, p0, halt, budget)


# --- checkpoints -----------------------------------------------------------


def checkpoint_bytes(params: DfstParams, meta: dict | None = None) -> bytes:
    dims = params.dims
    header = {
        "format_version": CHECKPOINT_VERSION,
        "d": dims.d,
        "n_sym": dims.n_sym,
        "n_mot": dims.n_mot,
        "alphabet": list(params.alphabet.symbols),
        "radix": params.alphabet.radix,
        "operator": params.alphabet.operator_glyph,
        "dtype": "<f4",
        "order": ["A", "B", "C", "h0"],
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    body = b"".join(np.ascontiguousarray(t, dtype="<f4").tobytes() for t in params.tensors())
    return CHECKPOINT_MAGIC + b"\n" + struct.pack("<I", len(head)) + head + body


def parse_checkpoint(data: bytes) -> tuple[DfstParams, dict]:
    prefix = CHECKPOINT_MAGIC + b"\n"
    if not data.startswith(prefix) or len(data) < len(prefix) + 4:
        raise ParseError("not a DFST checkpoint")
    (n,) = struct.unpack_from("<I", data, len(prefix))
    start = len(prefix) + 4
    try:
        header = json.loads(data[start : start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"bad checkpoint header: {exc}") from None
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {header.get('format_version')}")
    d, k, r = header["d"], header["n_sym"], header["n_mot"]
    shapes = [(k, d, d), (k, k, d), (k, r, d), (d,)]
    body = np.frombuffer(data, dtype="<f4", offset=start + n)
    if body.size != sum(int(np.prod(s)) for s in shapes):
        raise ParseError("checkpoint payload has the wrong size")
    tensors, off = [], 0
    for s in shapes:
        size = int(np.prod(s))
        tensors.append(body[off : off + size].reshape(s).astype(np.float32))
        off += size
    alphabet = Alphabet.for_task(header["radix"], header["operator"])
    if list(alphabet.symbols) != header["alphabet"]:
        raise ParseError("checkpoint alphabet is not in canonical order")
    return DfstParams(*tensors, alphabet), header.get("meta", {})


def save_checkpoint(params: DfstParams, path, meta: dict | None = None) -> None:
    atomic_write_bytes(path, checkpoint_bytes(params, meta))


def load_checkpoint(path) -> tuple[DfstParams, dict]:
    return parse_checkpoint(Path(path).read_bytes())
