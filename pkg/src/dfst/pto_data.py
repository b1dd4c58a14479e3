"""Policy-trajectory observations (PTOs) and the data-selection sampler."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from functools import partial
from itertools import product
from pathlib import Path

import numpy as np

from .errors import InfeasibleError, IntegrityError, ParseError, PreconditionError, RunawayExpertError
from .fst_core import ANCHOR, ExpertTask, FstSpec, expert_spec, input_world, run_fst
from .grid_env import MOTION_DELTAS, N_MOTIONS, Motion
from .io_utils import atomic_write_text
from .parallel import pmap

FORMAT_VERSION = 1
DEFAULT_MAX_STEPS = 10**7

# upper bounds on trajectory length reported for the reference experts
PAPER_MAX_LEN = {"add": 70, "mult": 464}


@dataclass
class Pto:
    task: ExpertTask
    a: str
    b: str
    x: list[int]
    s: list[int]
    m: list[int]

    def __len__(self) -> int:
        return len(self.x)

    def validate(self) -> None:
        n_sym = len(self.task.alphabet)
        if not (len(self.x) == len(self.s) == len(self.m)):
            raise IntegrityError(f"unequal sequence lengths for ({self.a}, {self.b})")
        if any(not 0 <= v < n_sym for v in self.x) or any(not 0 <= v < n_sym for v in self.s):
            raise IntegrityError(f"symbol token out of range for ({self.a}, {self.b})")
        if any(not 0 <= v < N_MOTIONS for v in self.m):
            raise IntegrityError(f"motion token out of range for ({self.a}, {self.b})")
        _check_operands(self.task.radix, self.a, self.b, IntegrityError)

    def replay_consistent(self) -> bool:
        """Replay (s, m) on the input world and check it regenerates x."""
        w = input_world(self.task.alphabet, self.a, self.b)
        col, row = ANCHOR
        for x, s, m in zip(self.x, self.s, self.m):
            if w.read((col, row)) != x:
                return False
            w.write((col, row), s)
            dc, dr = MOTION_DELTAS[m]
            col, row = col + dc, row + dr
        return True


def _check_operands(radix: int, a: str, b: str, exc=PreconditionError) -> None:
    digits = "0123456789"[:radix]
    for v in (a, b):
        if not v or any(c not in digits for c in v):
            raise exc(f"{v!r} is not a non-empty radix-{radix} digit string")


def record_pto(spec: FstSpec, task, a: str, b: str, max_steps: int = DEFAULT_MAX_STEPS) -> Pto:
    task = ExpertTask.parse(task)
    _check_operands(task.radix, a, b)
    trace: list = []
    _, steps, halted = run_fst(spec, input_world(spec.alphabet, a, b), ANCHOR, max_steps, trace)
    if not halted:
        raise RunawayExpertError(f"expert did not halt within {max_steps} steps on ({a}, {b})")
    x, s, m = (list(col) for col in zip(*trace))
    return Pto(task, a, b, x, s, m)


@dataclass
class Dataset:
    task: ExpertTask
    radix: int
    p: int
    q: int
    n: int
    seed: int
    records: list[Pto]
    manifest: dict = field(default_factory=dict)

    def check(self) -> None:
        if len(self.records) != self.n:
            raise IntegrityError(f"{len(self.records)} records but N = {self.n}")
        if sum(self.manifest.values()) != self.n:
            raise IntegrityError(f"manifest {self.manifest} does not sum to N = {self.n}")
        pairs = {(r.a, r.b) for r in self.records}
        if len(pairs) != len(self.records):
            raise IntegrityError("duplicate operand pairs")
        for r in self.records:
            if r.task != self.task:
                raise IntegrityError(f"record ({r.a}, {r.b}) belongs to task {r.task.name}")
            r.validate()

    @property
    def max_len(self) -> int:
        return max((len(r) for r in self.records), default=0)


def count_up_to(radix: int, p: int) -> int:
    """Number of digit strings (leading zeros allowed) with 1..p digits."""
    return radix * (radix**p - 1) // (radix - 1)


def stratum_sizes(radix: int, p: int, n: int) -> tuple[int, int, int]:
    s1 = count_up_to(radix, p) ** 2
    s2 = radix**2
    return s1, s2, n - s1 - s2


def _strings_up_to(radix: int, p: int):
    digits = "0123456789"[:radix]
    for length in range(1, p + 1):
        for tup in product(digits, repeat=length):
            yield "".join(tup)


def _random_string(rng: np.random.Generator, radix: int, q: int) -> str:
    length = int(rng.integers(1, q + 1))
    return "".join("0123456789"[int(v)] for v in rng.integers(0, radix, size=length))


def select_pairs(radix: int, p: int, q: int, n: int, seed: int) -> tuple[list, dict]:
    """Operand pairs of the three strata, in deterministic order."""
    if p < 1 or q < p:
        raise PreconditionError(f"need 1 <= p <= q, got p={p}, q={q}")
    available = count_up_to(radix, q) ** 2
    if n > available:
        raise InfeasibleError(f"N={n} exceeds the {available} distinct pairs with up to {q} digits")

    pairs: list = []
    seen: set = set()
    manifest = {"exhaustive": 0, "same_digit": 0, "random": 0}
    strings = list(_strings_up_to(radix, p))
    for a in strings:
        for b in strings:
            pairs.append((a, b))
            seen.add((a, b))
            manifest["exhaustive"] += 1
    for d in range(radix):
        for e in range(radix):
            pair = (str(d) * q, str(e) * q)
            if pair in seen:
                # only possible when q == p; the pair is already in stratum 1
                continue
            pairs.append(pair)
            seen.add(pair)
            manifest["same_digit"] += 1
    if n < len(pairs):
        raise PreconditionError(f"N={n} is smaller than the {len(pairs)} exhaustive and same-digit pairs")
    rng = np.random.default_rng(seed)
    while len(pairs) < n:
        pair = (_random_string(rng, radix, q), _random_string(rng, radix, q))
        if pair in seen:
            continue
        pairs.append(pair)
        seen.add(pair)
        manifest["random"] += 1
    return pairs, manifest


def ds_sample(radix: int, task, p: int, q: int, n: int, seed: int = 0, max_steps: int = DEFAULT_MAX_STEPS) -> Dataset:
    task = ExpertTask.parse(task)
    if radix != task.radix:
        raise PreconditionError(f"task {task.name} has radix {task.radix}, not {radix}")
    pairs, manifest = select_pairs(radix, p, q, n, seed)
    records = pmap(partial(_record_pair, task, max_steps), pairs)
    ds = Dataset(task, radix, p, q, n, seed, records, manifest)
    bound = PAPER_MAX_LEN[task.op]
    if ds.max_len > bound:
        warnings.warn(
            f"{task.name}: longest trajectory has {ds.max_len} steps, above the reference bound of {bound}",
            stacklevel=2,
        )
    return ds


def _record_pair(task, max_steps, pair) -> Pto:
    return record_pto(expert_spec(task), task, pair[0], pair[1], max_steps)


# --- file format ------------------------------------------------------------
#
# line 1: JSON header (task, radix, p, q, N, seed, version, manifest, token tables)
# then one record per line: a <TAB> b <TAB> x <TAB> s <TAB> m, sequences as
# comma-separated token indices.


def _header(ds: Dataset) -> dict:
    return {
        "format": "dfst-pto-dataset",
        "format_version": FORMAT_VERSION,
        "task": ds.task.name,
        "radix": ds.radix,
        "p": ds.p,
        "q": ds.q,
        "N": ds.n,
        "seed": ds.seed,
        "manifest": ds.manifest,
        "symbols": list(ds.task.alphabet.symbols),
        "motions": [mo.name for mo in Motion],
    }


def dumps_dataset(ds: Dataset) -> str:
    lines = [json.dumps(_header(ds), sort_keys=True, ensure_ascii=False)]
    for r in ds.records:
        seqs = (",".join(map(str, v)) for v in (r.x, r.s, r.m))
        lines.append("\t".join([r.a, r.b, *seqs]))
    return "\n".join(lines) + "\n"


def save_dataset(ds: Dataset, path) -> None:
    atomic_write_text(path, dumps_dataset(ds))


def loads_dataset(text: str) -> Dataset:
    lines = text.split("\n")
    if not lines or not lines[0].strip():
        raise ParseError("missing header", 1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad header: {exc.msg}", 1) from None
    if header.get("format") != "dfst-pto-dataset" or header.get("format_version") != FORMAT_VERSION:
        raise ParseError("not a version-1 PTO dataset", 1)
    try:
        task = ExpertTask.parse(header["task"])
        ds = Dataset(task, header["radix"], header["p"], header["q"], header["N"], header["seed"], [], header["manifest"])
    except (KeyError, ValueError) as exc:
        raise ParseError(f"bad header field: {exc}", 1) from None
    if header["symbols"] != list(task.alphabet.symbols) or header["motions"] != [mo.name for mo in Motion]:
        raise IntegrityError("token tables do not match the task")
    if ds.radix != task.radix:
        raise IntegrityError(f"radix {ds.radix} does not match task {task.name}")
    if text and not text.endswith("\n"):
        raise ParseError("file is truncated (no final newline)", len(lines))
    for lineno, line in enumerate(lines[1:-1], 2):
        fields = line.split("\t")
        if len(fields) != 5:
            raise ParseError(f"expected 5 tab-separated fields, got {len(fields)}", lineno)
        try:
            x, s, m = ([int(v) for v in f.split(",")] if f else [] for f in fields[2:])
        except ValueError:
            raise ParseError("token sequences must be comma-separated integers", lineno) from None
        ds.records.append(Pto(task, fields[0], fields[1], x, s, m))
    ds.check()
    return ds


def load_dataset(path) -> Dataset:
    return loads_dataset(Path(path).read_text(encoding="utf-8"))
