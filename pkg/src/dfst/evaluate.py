"""Closed-loop evaluation: exact match against a big-integer oracle, PLG/RLG.

PLG(m) passes when 5 random pairs with exactly ``m`` digits and 5 random
pairs with at most ``m`` digits are all solved exactly.  RLG(m) additionally
requires every same-digit pair ``(d*m, e*m)``.  Search results are lower
bounds at the probed granularity.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .dfst_model import DfstParams, DfstRunner, Fixpoint, OracleTimed, load_checkpoint
from .errors import DfstError, PreconditionError
from .fst_core import ANCHOR, ExpertTask, expert_spec, input_world, run_on_operands
from .grid_env import read_answer
from .io_utils import atomic_write_text
from .train import LossLog

DEFAULT_STEP_BUDGET = 10**8
N_PLG_PROBES = 5


# --- big-integer oracle on little-endian digit vectors -------------------------


def to_digits(s: str, radix: int) -> list[int]:
    out = []
    for ch in reversed(s):
        v = ord(ch) - 48
        if not 0 <= v < radix:
            raise PreconditionError(f"invalid radix-{radix} digit {ch!r}")
        out.append(v)
    if not out:
        raise PreconditionError("empty digit string")
    return _trim(out)


def _trim(v: list[int]) -> list[int]:
    while len(v) > 1 and v[-1] == 0:
        v.pop()
    return v


def from_digits(v: list[int]) -> str:
    return "".join(chr(48 + x) for x in reversed(v))


def add_digits(x: list[int], y: list[int], radix: int) -> list[int]:
    out, carry = [], 0
    for i in range(max(len(x), len(y))):
        t = (x[i] if i < len(x) else 0) + (y[i] if i < len(y) else 0) + carry
        out.append(t % radix)
        carry = t // radix
    if carry:
        out.append(carry)
    return _trim(out)


def mul_digits(x: list[int], y: list[int], radix: int) -> list[int]:
    out = [0] * (len(x) + len(y))
    for i, xi in enumerate(x):
        if xi == 0:
            continue
        carry = 0
        for j, yj in enumerate(y):
            t = out[i + j] + xi * yj + carry
            out[i + j] = t % radix
            carry = t // radix
        k = i + len(y)
        while carry:
            t = out[k] + carry
            out[k] = t % radix
            carry = t // radix
            k += 1
    return _trim(out)


def oracle(task, a: str, b: str) -> str:
    task = ExpertTask.parse(task)
    x, y = to_digits(a, task.radix), to_digits(b, task.radix)
    fn = add_digits if task.op == "add" else mul_digits
    return from_digits(fn(x, y, task.radix))


# --- exact match ---------------------------------------------------------------


@dataclass
class ProbeResult:
    a: str
    b: str
    predicted: str | None
    expected: str
    match: bool
    steps: int
    halted: bool
    reason: str = ""


MatchFn = Callable[[str, str], ProbeResult]


def solve(params: DfstParams, task, a: str, b: str, halt="oracle", budget: int = 10**9,
          runner: DfstRunner | None = None) -> ProbeResult:
    task = ExpertTask.parse(task)
    if tuple(params.alphabet.symbols) != tuple(task.alphabet.symbols):
        raise PreconditionError("checkpoint alphabet does not match the task")
    expected = oracle(task, a, b)
    if halt == "oracle":
        _, t_star, _ = run_on_operands(expert_spec(task), a, b)
        mode = OracleTimed(t_star)
    elif halt == "fixpoint":
        mode = Fixpoint()
    elif isinstance(halt, (OracleTimed, Fixpoint)):
        mode = halt
    else:
        raise ValueError(f"unknown halt mode {halt!r}")
    runner = runner or DfstRunner(params)
    res = runner.rollout(input_world(task.alphabet, a, b), ANCHOR, mode, budget)
    if res.error:
        return ProbeResult(a, b, None, expected, False, res.steps, False, res.error)
    if not res.halted:
        return ProbeResult(a, b, None, expected, False, res.steps, False, "did not halt")
    try:
        got = read_answer(res.world)
    except DfstError as exc:
        return ProbeResult(a, b, None, expected, False, res.steps, True, f"{exc.kind}: {exc}")
    return ProbeResult(a, b, got, expected, got == expected, res.steps, True)


def exact_match(params: DfstParams, task, a: str, b: str, halt="oracle") -> bool:
    return solve(params, task, a, b, halt).match


class Evaluator:
    """Runs probes for one model and keeps every result and the step count."""

    def __init__(self, params: DfstParams | None, task, halt="oracle", match_fn: MatchFn | None = None,
                 step_budget: int = DEFAULT_STEP_BUDGET):
        self.task = ExpertTask.parse(task)
        self.halt = halt
        self.results: list[ProbeResult] = []
        self.steps_used = 0
        self.step_budget = step_budget
        if match_fn is None:
            if params is None:
                raise ValueError("need params or match_fn")
            runner = DfstRunner(params)
            match_fn = lambda a, b: solve(params, self.task, a, b, halt, runner=runner)  # noqa: E731
        self.match_fn = match_fn

    @property
    def exhausted(self) -> bool:
        return self.steps_used >= self.step_budget

    def check(self, a: str, b: str) -> bool:
        r = self.match_fn(a, b)
        self.results.append(r)
        self.steps_used += r.steps
        return r.match

    def check_all(self, pairs) -> bool:
        # stop at the first failure: probes only need a pass/fail verdict
        return all(self.check(a, b) for a, b in pairs)


def _random_operand(rng: np.random.Generator, radix: int, length: int, nonzero_lead: bool) -> str:
    digits = rng.integers(0, radix, size=length)
    if nonzero_lead:
        digits[0] = rng.integers(1, radix)
    return "".join(chr(48 + int(v)) for v in digits)


def plg_pairs(task, m: int, seed: int) -> list[tuple[str, str]]:
    task = ExpertTask.parse(task)
    if m < 1:
        raise PreconditionError("m must be >= 1")
    rng = np.random.default_rng([seed, m])
    R = task.radix
    pairs = []
    for _ in range(N_PLG_PROBES):
        pairs.append((_random_operand(rng, R, m, True), _random_operand(rng, R, m, True)))
    for _ in range(N_PLG_PROBES):
        la, lb = (int(v) for v in rng.integers(1, m + 1, size=2))
        pairs.append((_random_operand(rng, R, la, False), _random_operand(rng, R, lb, False)))
    return pairs


def same_digit_pairs(task, m: int) -> list[tuple[str, str]]:
    R = ExpertTask.parse(task).radix
    return [(str(d) * m, str(e) * m) for d in range(R) for e in range(R)]


def _as_evaluator(model, task, halt) -> Evaluator:
    if isinstance(model, Evaluator):
        return model
    if callable(model) and not isinstance(model, DfstParams):
        return Evaluator(None, task, halt, match_fn=model)
    return Evaluator(model, task, halt)


def plg_probe(model, task, m: int, seed: int = 0, halt="oracle") -> bool:
    ev = _as_evaluator(model, task, halt)
    return ev.check_all(plg_pairs(ev.task, m, seed))


def rlg_probe(model, task, m: int, seed: int = 0, halt="oracle") -> bool:
    ev = _as_evaluator(model, task, halt)
    return plg_probe(ev, task, m, seed) and ev.check_all(same_digit_pairs(ev.task, m))


def probe_grid(m_max: int, step: int, schedule: str = "linear") -> list[int]:
    if m_max < 1 or step < 1:
        raise PreconditionError("need m_max >= 1 and step >= 1")
    if schedule == "linear":
        grid = list(range(1, m_max + 1, step))
    elif schedule == "geometric":
        grid, m = [], 1
        while m <= m_max:
            grid.append(m)
            m = m + 1 if m < 64 else max(m + 1, round(m * 1.5))
    else:
        raise ValueError(f"unknown schedule {schedule!r}")
    if grid[-1] != m_max:
        grid.append(m_max)
    return grid


@dataclass
class EvalReport:
    task: str
    checkpoint: str
    plg: int
    rlg: int
    halt_mode: str
    probed: list[int] = field(default_factory=list)
    probes: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.rlg > self.plg:
            raise ValueError(f"RLG {self.rlg} exceeds PLG {self.plg}")

    def to_text(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True, ensure_ascii=False) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def probes_csv(self) -> str:
        buf = io.StringIO()
        fields = ["a", "b", "predicted", "expected", "match", "steps", "halted", "reason"]
        w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for p in self.probes:
            w.writerow(p)
        return buf.getvalue()


def lg_search(model, task, m_max: int, step: int = 1, seed: int = 0, halt="oracle",
              schedule: str = "linear", refine: bool = False, step_budget: int = DEFAULT_STEP_BUDGET,
              checkpoint: str = "") -> EvalReport:
    """Probe increasing digit counts; PLG/RLG end at the first failing probe.

    With ``refine``, a failure after a gap in the probe grid is narrowed down
    by binary search between the last pass and the first failure.
    """
    ev = model if isinstance(model, Evaluator) else _as_evaluator(model, task, halt)
    ev.step_budget = step_budget
    task = ev.task
    notes: list[str] = []
    probed: list[int] = []
    cache: dict = {}

    def plg_ok(m):
        if ("p", m) not in cache:
            probed.append(m)
            cache[("p", m)] = plg_probe(ev, task, m, seed)
        return cache[("p", m)]

    def rlg_ok(m):
        if ("r", m) not in cache:
            cache[("r", m)] = plg_ok(m) and ev.check_all(same_digit_pairs(task, m))
        return cache[("r", m)]

    def narrow(lo, hi, ok):
        while refine and hi - lo > 1 and not ev.exhausted:
            mid = (lo + hi) // 2
            lo, hi = (mid, hi) if ok(mid) else (lo, mid)
        return lo

    plg = rlg = 0
    rlg_open = True
    for m in probe_grid(m_max, step, schedule):
        if ev.exhausted:
            notes.append(f"step budget of {ev.step_budget} exhausted before m={m}; results are truncated")
            break
        if not plg_ok(m):
            plg = narrow(plg, m, plg_ok)
            if rlg_open:
                rlg = narrow(rlg, plg + 1, rlg_ok)
            break
        if rlg_open and not rlg_ok(m):
            rlg = narrow(rlg, m, rlg_ok)
            rlg_open = False
        plg = m
        if rlg_open:
            rlg = m
    return EvalReport(task.name, checkpoint, plg, min(rlg, plg), str(halt), sorted(probed),
                      [asdict(r) for r in ev.results], notes)


# --- generalization curves -------------------------------------------------------


def generalization_curve(checkpoints, task, m_max: int, step: int = 1, seed: int = 0,
                         loss_log: LossLog | None = None, halt="oracle") -> str:
    """CSV ``iter,loss,rlg,plg``: one row per checkpoint, sorted by iteration."""
    rows = {}
    for ck in checkpoints:
        if isinstance(ck, tuple):
            it, params = ck
            name = f"iter{it}"
        else:
            path = Path(ck)
            if not path.exists():
                raise FileNotFoundError(f"missing checkpoint {path}")
            params, meta = load_checkpoint(path)
            it, name = int(meta["iter"]), str(path)
        rep = lg_search(params, task, m_max, step, seed, halt, checkpoint=name)
        loss = _loss_at(loss_log, it)
        rows[it] = (loss, rep.rlg, rep.plg)
    buf = io.StringIO()
    buf.write("iter,loss,rlg,plg\n")
    for it in sorted(rows):
        loss, rlg, plg = rows[it]
        buf.write(f"{it},{'' if loss is None else repr(loss)},{rlg},{plg}\n")
    return buf.getvalue()


def _loss_at(log: LossLog | None, it: int):
    # a checkpoint after `it` updates pairs with the last logged loss (iter it-1)
    if log is None or not log.iters:
        return None
    idx = np.searchsorted(log.iters, it - 1, side="right") - 1
    return log.losses[idx] if idx >= 0 else None


def write_report(report: EvalReport, path) -> None:
    atomic_write_text(path, report.to_text())
