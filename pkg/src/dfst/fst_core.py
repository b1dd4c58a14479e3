"""Grid agents as explicit transition tables.

An :class:`FstSpec` is a deterministic table ``(state, observed symbol) ->
(state, written symbol, motion)``.  This module holds the interpreter, the
four hand-built arithmetic experts, the textual table format, the one-hot
compiler into DFST tensors and the side-by-side emulation checker.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path

import numpy as np

from .errors import IncompleteTableError, ParseError, PreconditionError
from .grid_env import Alphabet, MOTION_DELTAS, Motion, Position, WorldState

ANCHOR = Position(0, 0)


class ExpertTask(enum.Enum):
    add2 = ("add", 2)
    add10 = ("add", 10)
    mult2 = ("mult", 2)
    mult10 = ("mult", 10)

    @property
    def op(self) -> str:
        return self.value[0]

    @property
    def radix(self) -> int:
        return self.value[1]

    @property
    def operator_glyph(self) -> str:
        return "+" if self.op == "add" else "×"

    @property
    def alphabet(self) -> Alphabet:
        return Alphabet.for_task(self.radix, self.operator_glyph)

    @classmethod
    def parse(cls, name) -> "ExpertTask":
        if isinstance(name, cls):
            return name
        try:
            return cls[name]
        except KeyError:
            raise ValueError(f"unknown task {name!r}; expected one of {[t.name for t in cls]}") from None


@dataclass(frozen=True)
class FstSpec:
    n_states: int
    q0: int
    qf: int | None  # None: a table that never halts
    delta: dict
    alphabet: Alphabet
    state_names: tuple[str, ...] = ()
    _table: list = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not (0 <= self.q0 < self.n_states and (self.qf is None or 0 <= self.qf < self.n_states)):
            raise ValueError("q0/qf out of range")
        n_sym = len(self.alphabet)
        table = [[None] * n_sym for _ in range(self.n_states)]
        for (q, s), (q2, s2, m) in self.delta.items():
            if not (0 <= q < self.n_states and 0 <= q2 < self.n_states):
                raise ValueError(f"transition {(q, s)} maps out of state range")
            if not (0 <= s < n_sym and 0 <= s2 < n_sym):
                raise ValueError(f"transition {(q, s)} uses a symbol out of range")
            if q == self.qf:
                raise ValueError("the halting state must not have outgoing transitions")
            table[q][s] = (q2, s2, int(m))
        if self.state_names and len(self.state_names) != self.n_states:
            raise ValueError("state_names must name every state")
        object.__setattr__(self, "_table", table)

    def transition(self, q: int, s: int):
        t = self._table[q][s]
        if t is None:
            raise IncompleteTableError(
                f"no transition for state {self.state_label(q)} reading {self.alphabet.symbols[s]!r}"
            )
        return t

    def state_label(self, q: int) -> str:
        return self.state_names[q] if self.state_names else str(q)


@dataclass
class EmulationReport:
    n_inputs: int = 0
    n_exact: int = 0
    first_divergence: tuple | None = None

    def __post_init__(self):
        assert self.n_exact <= self.n_inputs


class _TableBuilder:
    """Collects named states and transitions, then numbers them."""

    def __init__(self, alphabet: Alphabet):
        self.alphabet = alphabet
        self.names: list[str] = []
        self.rules: dict = {}

    def state(self, name: str) -> str:
        if name not in self.names:
            self.names.append(name)
        return name

    def on(self, q: str, read, q2: str, write, motion: Motion):
        self.state(q)
        self.state(q2)
        key = (q, self._sym(read))
        if key in self.rules:
            raise ValueError(f"duplicate transition {key}")
        self.rules[key] = (q2, self._sym(write), motion)

    def _sym(self, s) -> int:
        return self.alphabet.index(s) if isinstance(s, str) else int(s)

    def build(self, q0: str, qf: str) -> FstSpec:
        self.state(q0)
        self.state(qf)
        # q0 first, halting state last
        order = [q0] + [n for n in self.names if n not in (q0, qf)] + [qf]
        idx = {n: i for i, n in enumerate(order)}
        delta = {(idx[q], s): (idx[q2], s2, int(m)) for (q, s), (q2, s2, m) in self.rules.items()}
        return FstSpec(len(order), 0, idx[qf], delta, self.alphabet, tuple(order))


def _addition_expert(alphabet: Alphabet) -> FstSpec:
    # Operand digits of b are taken from its right end one at a time and added
    # into a in place.  A marker (the operator glyph) on row 1 sits above the
    # column of a that receives the next digit.
    R = alphabet.radix
    lam, op = alphabet.lambda_index, alphabet.operator_index
    digits = range(R)
    U, D, L, Rt, S = Motion
    t = _TableBuilder(alphabet)

    for v in digits:
        t.on("start", v, "start", v, Rt)
    t.on("start", op, "last_a", op, L)
    t.on("start", lam, "halt", lam, S)
    for v in digits:
        t.on("last_a", v, "mark", v, U)
    t.on("mark", lam, "mark_right", op, Rt)
    t.on("mark_right", lam, "seek", lam, D)
    for v in list(digits) + [op]:
        t.on("seek", v, "seek", v, Rt)
    t.on("seek", lam, "take", lam, L)
    for d in digits:
        t.on("take", d, f"carry{d}", lam, U)
    t.on("take", op, "finish_up", lam, U)
    for d in digits:
        t.on(f"carry{d}", lam, f"carry{d}", lam, L)
        t.on(f"carry{d}", op, f"add{d}", op, D)
        for v in list(digits) + [lam]:
            total = (0 if v == lam else v) + d
            if total < R:
                t.on(f"add{d}", v, "unmark", total, U)
            else:
                t.on(f"add{d}", v, "inc", total - R, L)
    for v in list(digits) + [lam]:
        total = (0 if v == lam else v) + 1
        if total < R:
            t.on("inc", v, "unmark", total, U)
        else:
            t.on("inc", v, "inc", 0, L)
    t.on("unmark", lam, "unmark", lam, Rt)
    t.on("unmark", op, "mark", lam, L)
    t.on("finish_up", lam, "finish_up", lam, L)
    # The column right of the marker always holds the last digit written, so
    # the sweep to the answer's right end and back to its left end only ever
    # crosses answer digits.  Every trajectory exercises these transitions,
    # unlike a direct leftward scan over a's untouched high digits.
    t.on("finish_up", op, "descend", lam, Rt)
    t.on("descend", lam, "to_right", lam, D)
    for v in digits:
        t.on("to_right", v, "to_right", v, Rt)
        t.on("to_left", v, "to_left", v, L)
    t.on("to_right", lam, "to_left", lam, L)
    t.on("to_left", lam, "strip", lam, Rt)
    _strip_leading_zeros(t, R)
    return t.build("start", "halt")


def _multiplication_expert(alphabet: Alphabet) -> FstSpec:
    # Long multiplication by repeated addition.  The accumulator lives on row
    # -1 and always covers a's last column.  Each multiplier digit d (taken
    # from b's right end) is decremented while a is added into the
    # accumulator; once it reaches 0 it is erased and the accumulator is
    # shifted one column right with a zero filled in on the left.
    R = alphabet.radix
    lam, op = alphabet.lambda_index, alphabet.operator_index
    digits = range(R)
    U, D, L, Rt, S = Motion
    t = _TableBuilder(alphabet)

    for v in digits:
        t.on("start", v, "start", v, Rt)
    t.on("start", op, "last_a", op, L)
    t.on("start", lam, "halt", lam, S)
    for v in digits:
        t.on("last_a", v, "init_acc", v, D)
    t.on("init_acc", lam, "seek", 0, U)
    for v in list(digits) + [op]:
        t.on("seek", v, "seek", v, Rt)
    t.on("seek", lam, "take", lam, L)
    t.on("take", lam, "take", lam, L)
    t.on("take", 0, "shift_go", lam, L)
    for d in range(1, R):
        t.on("take", d, "goto_a", d - 1, L)
    t.on("take", op, "erase_a", lam, L)
    for v in digits:
        t.on("goto_a", v, "goto_a", v, L)
    t.on("goto_a", op, "add_up0", op, L)
    # column-wise addition of a into the accumulator
    for c in (0, 1):
        for v in digits:
            t.on(f"add_up{c}", v, f"add_dn{c}_{v}", v, D)
            for s in list(digits) + [lam]:
                total = (0 if s == lam else s) + v + c
                t.on(f"add_dn{c}_{v}", s, f"add_left{total // R}", total % R, L)
        for s in list(digits) + [lam]:
            t.on(f"add_left{c}", s, f"add_up{c}", s, U)
    t.on("add_up0", lam, "seek", lam, Rt)
    t.on("add_up1", lam, "inc", lam, D)
    for s in list(digits) + [lam]:
        total = (0 if s == lam else s) + 1
        if total < R:
            t.on("inc", s, "skip", total, U)
        else:
            t.on("inc", s, "inc", 0, L)
    t.on("skip", lam, "skip", lam, Rt)
    for v in digits:
        t.on("skip", v, "seek", v, Rt)
    # shift the accumulator right by one column, zero-filling on the left
    for v in digits:
        t.on("shift_go", v, "shift_go", v, L)
    t.on("shift_go", op, "shift_last_a", op, L)
    for v in digits:
        t.on("shift_last_a", v, "shift_find", v, D)
        t.on("shift_find", v, "shift_find", v, L)
    t.on("shift_find", lam, "shift_start", lam, Rt)
    for x in digits:
        t.on("shift_start", x, f"hold{x}", 0, Rt)
        for y in digits:
            t.on(f"hold{x}", y, f"hold{y}", x, Rt)
        t.on(f"hold{x}", lam, "return", x, U)
    t.on("return", lam, "take", lam, L)
    for v in list(digits) + [op]:
        t.on("return", v, "seek", v, Rt)
    # cleanup: erase a, then strip the accumulator's leading zeros
    for v in digits:
        t.on("erase_a", v, "erase_a", lam, L)
    t.on("erase_a", lam, "acc_entry", lam, D)
    for v in digits:
        t.on("acc_entry", v, "find_msd", v, L)
        t.on("find_msd", v, "find_msd", v, L)
        t.on("acc_right", v, "strip", v, S)
    t.on("acc_entry", lam, "acc_right", lam, Rt)
    t.on("acc_right", lam, "acc_right", lam, Rt)
    t.on("find_msd", lam, "strip", lam, Rt)
    _strip_leading_zeros(t, R)
    return t.build("start", "halt")


def _strip_leading_zeros(t: _TableBuilder, R: int):
    lam = t.alphabet.lambda_index
    t.on("strip", 0, "strip", lam, Motion.R)
    for v in range(1, R):
        t.on("strip", v, "halt", v, Motion.S)
    t.on("strip", lam, "write_zero", lam, Motion.L)
    t.on("write_zero", lam, "halt", 0, Motion.S)


_EXPERT_CACHE: dict = {}


def expert_spec(task) -> FstSpec:
    task = ExpertTask.parse(task)
    if task not in _EXPERT_CACHE:
        build = _addition_expert if task.op == "add" else _multiplication_expert
        _EXPERT_CACHE[task] = build(task.alphabet)
    return _EXPERT_CACHE[task]


def input_world(alphabet: Alphabet, a: str, b: str) -> WorldState:
    w = WorldState(alphabet)
    w.write_string(ANCHOR, a + alphabet.operator_glyph + b)
    return w


def step_fst(spec: FstSpec, q: int, w: WorldState, p) -> tuple[int, WorldState, Position]:
    if q == spec.qf:
        raise PreconditionError("cannot step from the halting state")
    q2, s2, m = spec.transition(q, w.read(p))
    w.write(p, s2)
    dc, dr = MOTION_DELTAS[m]
    return q2, w, Position(p[0] + dc, p[1] + dr)


def run_fst(spec: FstSpec, w0: WorldState, p0=ANCHOR, max_steps: int = 10**9, trace: list | None = None):
    """Run from ``(q0, w0, p0)`` until the halting state or ``max_steps``.

    ``w0`` is modified in place.  When ``trace`` is a list, the triples
    ``(observed, written, motion)`` are appended to it.
    Returns ``(world, steps, halted)``.
    """
    if max_steps <= 0:
        raise PreconditionError("max_steps must be positive")
    table = spec._table
    cells = w0.cells
    lam = w0.alphabet.lambda_index
    qf = spec.qf
    q = spec.q0
    col, row = p0
    steps = 0
    record = trace.append if trace is not None else None
    while q != qf and steps < max_steps:
        key = (col, row)
        x = cells.get(key, lam)
        t = table[q][x]
        if t is None:
            raise IncompleteTableError(
                f"no transition for state {spec.state_label(q)} reading {spec.alphabet.symbols[x]!r}"
            )
        q, s, m = t
        if s != x:
            if s == lam:
                del cells[key]
            else:
                cells[key] = s
        if record is not None:
            record((x, s, m))
        dc, dr = MOTION_DELTAS[m]
        col += dc
        row += dr
        steps += 1
    return w0, steps, q == qf


def run_on_operands(spec: FstSpec, a: str, b: str, max_steps: int = 10**9, trace=None):
    w = input_world(spec.alphabet, a, b)
    return run_fst(spec, w, ANCHOR, max_steps, trace)


def visited_pairs(spec: FstSpec, inputs, max_steps: int = 10**7) -> set:
    """(state, symbol) pairs exercised by running ``spec`` on ``inputs``."""
    seen = set()
    for a, b in inputs:
        w = input_world(spec.alphabet, a, b)
        q, p = spec.q0, ANCHOR
        for _ in range(max_steps):
            if q == spec.qf:
                break
            seen.add((q, w.read(p)))
            q, w, p = step_fst(spec, q, w, p)
    return seen


# --- textual table format -------------------------------------------------

_MOTION_NAMES = [m.name for m in Motion]


def dump_fst(spec: FstSpec) -> str:
    syms = spec.alphabet.symbols
    lines = [
        f"alphabet {' '.join(syms)}",
        f"radix {spec.alphabet.radix}",
        f"operator {spec.alphabet.operator_glyph}",
        f"states {spec.n_states}",
        f"initial {spec.q0}",
        f"final {'none' if spec.qf is None else spec.qf}",
    ]
    for q, name in enumerate(spec.state_names):
        lines.append(f"name {q} {name}")
    for (q, s), (q2, s2, m) in sorted(spec.delta.items()):
        lines.append(f"{q} {syms[s]} -> {q2} {syms[s2]} {_MOTION_NAMES[m]}")
    return "\n".join(lines) + "\n"


def load_fst(text: str) -> FstSpec:
    header: dict = {}
    names: dict[int, str] = {}
    rows = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if "->" in parts:
            if len(parts) != 6 or parts[2] != "->":
                raise ParseError(f"malformed transition {raw!r}", lineno)
            rows.append((lineno, parts))
        elif parts[0] == "alphabet":
            header["alphabet"] = tuple(parts[1:])
        elif parts[0] == "name" and len(parts) == 3:
            names[_int(parts[1], lineno)] = parts[2]
        elif parts[0] == "final" and parts[1:] == ["none"]:
            header["final"] = None
        elif parts[0] in ("radix", "states", "initial", "final") and len(parts) == 2:
            header[parts[0]] = _int(parts[1], lineno)
        elif parts[0] == "operator" and len(parts) == 2:
            header["operator"] = parts[1]
        else:
            raise ParseError(f"unrecognized line {raw!r}", lineno)
    missing = {"alphabet", "radix", "operator", "states", "initial", "final"} - header.keys()
    if missing:
        raise ParseError(f"missing header fields: {sorted(missing)}")
    alphabet = Alphabet.for_task(header["radix"], header["operator"])
    if alphabet.symbols != header["alphabet"]:
        raise ParseError(f"alphabet {header['alphabet']} does not match the canonical ordering {alphabet.symbols}")
    delta = {}
    for lineno, (q, s, _, q2, s2, m) in rows:
        if m not in _MOTION_NAMES:
            raise ParseError(f"unknown motion {m!r}", lineno)
        try:
            key = (_int(q, lineno), alphabet.index(s))
            val = (_int(q2, lineno), alphabet.index(s2), _MOTION_NAMES.index(m))
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        if key in delta:
            raise ParseError(f"nondeterministic: duplicate transition for {(q, s)}", lineno)
        delta[key] = val
    n = header["states"]
    if names and set(names) != set(range(n)):
        raise ParseError("state names must cover every state")
    state_names = tuple(names[i] for i in range(n)) if names else ()
    try:
        return FstSpec(n, header["initial"], header["final"], delta, alphabet, state_names)
    except ValueError as exc:
        raise ParseError(str(exc)) from None


def _int(tok: str, lineno: int) -> int:
    try:
        return int(tok)
    except ValueError:
        raise ParseError(f"expected an integer, got {tok!r}", lineno) from None


def save_fst(spec: FstSpec, path) -> None:
    from .io_utils import atomic_write_text

    atomic_write_text(path, dump_fst(spec))


def read_fst(path) -> FstSpec:
    return load_fst(Path(path).read_text(encoding="utf-8"))


def random_fst(n_states: int, alphabet: Alphabet, rng: np.random.Generator, p_halt: float = 0.05) -> FstSpec:
    """A random total table; each transition enters the halting state with probability ``p_halt``."""
    qf = n_states - 1
    n_sym = len(alphabet)
    delta = {}
    for q in range(n_states - 1):
        for s in range(n_sym):
            q2 = qf if rng.random() < p_halt else int(rng.integers(0, n_states - 1))
            delta[(q, s)] = (q2, int(rng.integers(0, n_sym)), int(rng.integers(0, len(Motion))))
    return FstSpec(n_states, 0, qf, delta, alphabet)


# --- one-hot compilation and emulation check -------------------------------


def compile_fst(spec: FstSpec, d: int | None = None, dtype=np.float32):
    """One-hot embedding of the table into DFST tensors.

    State ``q_i`` becomes basis vector ``e_i``; a transition
    ``(q_i, s_j) -> (q_i', s_j', m_l)`` sets ``A[j, i', i]``, ``B[j, j', i]``
    and ``C[j, l, i]`` to one.  Missing transitions leave zero slices.
    """
    from .dfst_model import DfstParams

    d = spec.n_states if d is None else d
    if d < spec.n_states:
        raise PreconditionError(f"hidden dimension {d} is smaller than the {spec.n_states} states")
    n_sym = len(spec.alphabet)
    A = np.zeros((n_sym, d, d), dtype=dtype)
    B = np.zeros((n_sym, n_sym, d), dtype=dtype)
    C = np.zeros((n_sym, len(Motion), d), dtype=dtype)
    h0 = np.zeros(d, dtype=dtype)
    h0[spec.q0] = 1
    for (i, j), (i2, j2, m) in spec.delta.items():
        A[j, i2, i] = 1
        B[j, j2, i] = 1
        C[j, m, i] = 1
    return DfstParams(A, B, C, h0, spec.alphabet)


def _compare_one(spec: FstSpec, params, max_steps: int, pair):
    from .dfst_model import DfstRunner

    a, b = pair
    expected: list = []
    run_on_operands(spec, a, b, max_steps, expected)
    got = DfstRunner(params).trace(input_world(spec.alphabet, a, b), ANCHOR, len(expected))
    for t, (e, g) in enumerate(zip(expected, got)):
        if e != g:
            return t, e[1:], g[1:]
    if len(got) < len(expected):
        # the model produced non-finite activations and stopped early
        return len(got), expected[len(got)][1:], None
    return None


def verify_emulation(spec: FstSpec, params, inputs, max_steps: int = 10**7, workers: int | None = None) -> EmulationReport:
    """Run the table and the DFST side by side and compare every action.

    Both run closed loop on their own worlds for the table's trajectory
    length; the first step where observation or action differ is reported.
    """
    from .parallel import pmap

    if tuple(params.alphabet.symbols) != tuple(spec.alphabet.symbols):
        raise PreconditionError("alphabets disagree")
    inputs = list(inputs)
    outcomes = pmap(partial(_compare_one, spec, params, max_steps), inputs, workers, chunksize=4)
    report = EmulationReport(n_inputs=len(inputs))
    for pair, out in zip(inputs, outcomes):
        if out is None:
            report.n_exact += 1
        elif report.first_divergence is None:
            report.first_divergence = (pair, *out)
    return report
