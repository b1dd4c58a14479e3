"""Next-action-prediction training of DFSTs.

The loss of one trajectory of length ``T`` is

    1/(2T) * sum_t ( ||s_hat_t - s_t||^2 + ||m_hat_t - m_t||^2 )

with one-hot targets; a batch loss is the mean over trajectories.  Gradients
are computed by reverse accumulation through the linear recurrence.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dfst_model import DfstDims, DfstParams, init_identity, save_checkpoint
from .errors import DegenerateSampleError, DivergenceError, PreconditionError
from .fst_core import ExpertTask
from .grid_env import N_MOTIONS
from .io_utils import atomic_write_text
from .pto_data import Dataset, load_dataset


@dataclass
class TrainConfig:
    task: str = "add2"
    radix: int = 2
    d: int = 19
    lr0: float = 0.01
    total_iters: int = 50_000
    batch_size: int = 32
    seed: int = 0
    checkpoint_every: int = 10_000
    dataset_path: str = ""
    out_dir: str = "runs/add2"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    sampling: str = "replacement"  # or "epoch" (shuffle without replacement)

    def __post_init__(self):
        if self.lr0 <= 0 or self.total_iters < 1 or self.batch_size < 1:
            raise PreconditionError("need lr0 > 0, total_iters >= 1, batch_size >= 1")
        if self.sampling not in ("replacement", "epoch"):
            raise PreconditionError(f"unknown sampling mode {self.sampling!r}")


_CONFIG_TYPES = {f: type(v) for f, v in asdict(TrainConfig()).items()}
_CONFIG_ALIASES = {"dims": "d"}


def parse_config(text: str, base_dir=None) -> TrainConfig:
    """Read ``key = value`` lines; ``#`` starts a comment."""
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise PreconditionError(f"config line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        key = _CONFIG_ALIASES.get(key, key)
        if key not in _CONFIG_TYPES:
            raise PreconditionError(f"config line {lineno}: unknown key {key!r}")
        kind = _CONFIG_TYPES[key]
        try:
            values[key] = int(float(val)) if kind is int else kind(val)
        except ValueError:
            raise PreconditionError(f"config line {lineno}: bad value for {key}: {val!r}") from None
    cfg = TrainConfig(**values)
    if base_dir is not None:
        for key in ("dataset_path", "out_dir"):
            path = getattr(cfg, key)
            if path and not Path(path).is_absolute():
                setattr(cfg, key, str(Path(base_dir) / path))
    return cfg


def load_config(path) -> TrainConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"))


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in asdict(cfg).items())


@dataclass
class GradTensors:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    h0: np.ndarray

    def tensors(self):
        return self.A, self.B, self.C, self.h0


@dataclass
class LossLog:
    iters: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)

    def append(self, it: int, loss: float, lr: float):
        if self.iters and it <= self.iters[-1]:
            raise ValueError("iterations must increase")
        self.iters.append(it)
        self.losses.append(loss)
        self.lrs.append(lr)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("iter,loss,lr\n")
        for it, loss, lr in zip(self.iters, self.losses, self.lrs):
            buf.write(f"{it},{loss!r},{lr!r}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "LossLog":
        log = cls()
        for row in csv.DictReader(io.StringIO(text)):
            log.append(int(row["iter"]), float(row["loss"]), float(row["lr"]))
        return log


class _Batch:
    """Trajectories padded to a common length, with a validity mask."""

    def __init__(self, batch, n_sym: int):
        if not batch:
            raise DegenerateSampleError("empty batch")
        lengths = np.array([len(r.x) for r in batch])
        if lengths.min() == 0:
            raise DegenerateSampleError("empty trajectory")
        nb, T = len(batch), int(lengths.max())
        self.X = np.zeros((nb, T), dtype=np.int64)
        self.S = np.zeros((nb, T), dtype=np.int64)
        self.M = np.zeros((nb, T), dtype=np.int64)
        for i, r in enumerate(batch):
            n = lengths[i]
            self.X[i, :n], self.S[i, :n], self.M[i, :n] = r.x, r.s, r.m
        if self.X.max() >= n_sym or self.S.max() >= n_sym or self.M.max() >= N_MOTIONS or min(
            self.X.min(), self.S.min(), self.M.min()
        ) < 0:
            raise PreconditionError("token index out of range")
        self.mask = np.arange(T)[None, :] < lengths[:, None]
        self.lengths = lengths
        self.T = T


CHUNK_CELLS = 1 << 21  # max padded (trajectory, step) cells evaluated at once


def loss_and_grad(params: DfstParams, batch, need_grad: bool = True):
    """Mean NAP loss over ``batch`` and, optionally, its exact gradient.

    Large batches are split into length-sorted chunks whose means are
    recombined with weights, bounding the padded working set.
    """
    if isinstance(batch, _Batch) or not batch:
        return _loss_and_grad(params, batch, need_grad)
    lengths = [len(r.x) for r in batch]
    if len(batch) * max(lengths) <= CHUNK_CELLS:
        return _loss_and_grad(params, batch, need_grad)
    order = sorted(range(len(batch)), key=lengths.__getitem__)
    total, grads, start = 0.0, None, 0
    while start < len(order):
        stop = start + 1
        while stop < len(order) and (stop + 1 - start) * lengths[order[stop]] <= CHUNK_CELLS:
            stop += 1
        chunk = [batch[i] for i in order[start:stop]]
        w = len(chunk) / len(batch)
        loss, g = _loss_and_grad(params, chunk, need_grad)
        total += w * loss
        if need_grad:
            scaled = [w * t for t in g.tensors()]
            grads = scaled if grads is None else [a + b for a, b in zip(grads, scaled)]
        start = stop
    return total, (GradTensors(*grads) if need_grad else None)


def _loss_and_grad(params: DfstParams, batch, need_grad: bool):
    A, B, C, h0 = params.tensors()
    dt = A.dtype
    n_sym, d = A.shape[0], A.shape[1]
    bt = batch if isinstance(batch, _Batch) else _Batch(batch, n_sym)
    X, mask, T = bt.X, bt.mask, bt.T
    nb = X.shape[0]

    # H[t] holds h_t for every trajectory; padded steps carry h forward unchanged
    H = np.empty((T + 1, nb, d), dtype=dt)
    H[0] = h0
    for t in range(T):
        hn = np.matmul(A[X[:, t]], H[t][:, :, None])[:, :, 0]
        H[t + 1] = np.where(mask[:, t, None], hn, H[t])
    Hbt = H[:T].transpose(1, 0, 2)  # (nb, T, d), state read at step t

    s_hat = np.zeros((nb, T, n_sym), dtype=dt)
    m_hat = np.zeros((nb, T, N_MOTIONS), dtype=dt)
    groups = [(j, X == j) for j in range(n_sym)]
    for j, sel in groups:
        if sel.any():
            hs = Hbt[sel]
            s_hat[sel] = hs @ B[j].T
            m_hat[sel] = hs @ C[j].T
    rs = s_hat.copy()
    rm = m_hat.copy()
    bi, ti = np.nonzero(mask)
    rs[bi, ti, bt.S[bi, ti]] -= 1
    rm[bi, ti, bt.M[bi, ti]] -= 1
    rs[~mask] = 0
    rm[~mask] = 0
    inv_len = (1.0 / bt.lengths).astype(dt)
    per_sample = 0.5 * inv_len * (np.sum(rs * rs, axis=(1, 2)) + np.sum(rm * rm, axis=(1, 2)))
    loss = float(np.mean(per_sample, dtype=np.float64))
    if not need_grad:
        return loss, None

    # dL/ds_hat for the batch mean
    scale = (inv_len / nb).astype(dt)[:, None, None]
    rs *= scale
    rm *= scale
    dB = np.zeros_like(B)
    dC = np.zeros_like(C)
    E = np.zeros((nb, T, d), dtype=dt)
    for j, sel in groups:
        if sel.any():
            hs = Hbt[sel]
            dB[j] = rs[sel].T @ hs
            dC[j] = rm[sel].T @ hs
            E[sel] = rs[sel] @ B[j] + rm[sel] @ C[j]

    # G[t] = dL/dh_{t+1}, the gradient flowing into step t's transition
    G = np.zeros((T, nb, d), dtype=dt)
    g = np.zeros((nb, d), dtype=dt)
    AT = A.transpose(0, 2, 1)
    for t in range(T - 1, -1, -1):
        G[t] = g
        back = np.matmul(AT[X[:, t]], g[:, :, None])[:, :, 0]
        g = np.where(mask[:, t, None], back, g) + E[:, t]
    Gbt = G.transpose(1, 0, 2)
    dA = np.zeros_like(A)
    for j, sel in groups:
        if sel.any():
            dA[j] = Gbt[sel].T @ Hbt[sel]
    dh0 = g.sum(axis=0)
    return loss, GradTensors(dA, dB, dC, dh0)


def nap_loss(params: DfstParams, batch) -> float:
    return loss_and_grad(params, batch, need_grad=False)[0]


def grad(params: DfstParams, batch) -> GradTensors:
    return loss_and_grad(params, batch)[1]


def cosine_lr(cfg: TrainConfig, t: int) -> float:
    if not 0 <= t <= cfg.total_iters:
        raise PreconditionError(f"iteration {t} outside [0, {cfg.total_iters}]")
    return cfg.lr0 * 0.5 * (1.0 + math.cos(math.pi * t / cfg.total_iters))


@dataclass
class AdamState:
    m: list
    v: list

    @classmethod
    def zeros_like(cls, params: DfstParams) -> "AdamState":
        return cls([np.zeros_like(t) for t in params.tensors()], [np.zeros_like(t) for t in params.tensors()])


def adam_step(params: DfstParams, grads: GradTensors, state: AdamState, t: int, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[DfstParams, AdamState]:
    """One bias-corrected Adam update (in place on ``params`` and ``state``)."""
    if t < 1:
        raise PreconditionError("Adam step counter starts at 1")
    gs = grads.tensors()
    if not all(np.isfinite(g).all() for g in gs):
        raise DivergenceError(f"non-finite gradient at Adam step {t}")
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for p, g, m, v in zip(params.tensors(), gs, state.m, state.v):
        dt = p.dtype
        m *= dt.type(beta1)
        m += dt.type(1.0 - beta1) * g
        v *= dt.type(beta2)
        v += dt.type(1.0 - beta2) * (g * g)
        m_hat = m / dt.type(bc1)
        v_hat = v / dt.type(bc2)
        p -= dt.type(lr) * m_hat / (np.sqrt(v_hat) + dt.type(eps))
    if not params.is_finite():
        raise DivergenceError(f"parameters became non-finite at Adam step {t}")
    return params, state


@dataclass
class TrainResult:
    params: DfstParams
    log: LossLog
    checkpoints: list[Path]


def checkpoint_name(it: int) -> str:
    return f"ckpt_{it:08d}.dfst"


def _batch_indices(cfg: TrainConfig, n: int, rng: np.random.Generator):
    if cfg.sampling == "replacement":
        while True:
            yield rng.integers(0, n, size=cfg.batch_size)
    else:
        buf = np.empty(0, dtype=np.int64)
        while True:
            while len(buf) < cfg.batch_size:
                buf = np.concatenate([buf, rng.permutation(n)])
            out, buf = buf[: cfg.batch_size], buf[cfg.batch_size :]
            yield out


def train_loop(cfg: TrainConfig, dataset: Dataset | None = None, progress=None) -> TrainResult:
    """Train from identity initialization; deterministic given ``cfg``."""
    ds = dataset if dataset is not None else load_dataset(cfg.dataset_path)
    task = ExpertTask.parse(cfg.task)
    if ds.task != task or ds.radix != cfg.radix:
        raise PreconditionError(f"dataset is for {ds.task.name}/R={ds.radix}, config asks for {task.name}/R={cfg.radix}")
    alphabet = task.alphabet
    init_seq, batch_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    params = init_identity(DfstDims(cfg.d, len(alphabet)), alphabet, np.random.default_rng(init_seq))
    state = AdamState.zeros_like(params)
    batches = _batch_indices(cfg, len(ds.records), np.random.default_rng(batch_seq))
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out_dir / "config.txt", format_config(cfg))
    log = LossLog()
    checkpoints: list[Path] = []

    for it in range(cfg.total_iters):
        lr = cosine_lr(cfg, it)
        batch = [ds.records[i] for i in next(batches)]
        loss, g = loss_and_grad(params, batch)
        if not math.isfinite(loss):
            raise DivergenceError(f"loss became non-finite at iteration {it}")
        adam_step(params, g, state, it + 1, lr, cfg.beta1, cfg.beta2, cfg.eps)
        log.append(it, loss, lr)
        done = it + 1
        if done % cfg.checkpoint_every == 0 or done == cfg.total_iters:
            path = out_dir / checkpoint_name(done)
            if path not in checkpoints:
                meta = {"task": task.name, "iter": done, "seed": cfg.seed, "batch_loss": loss}
                save_checkpoint(params, path, meta)
                checkpoints.append(path)
        if progress is not None:
            progress(it, loss, lr)
    atomic_write_text(out_dir / "loss.csv", log.to_csv())
    return TrainResult(params, log, checkpoints)
