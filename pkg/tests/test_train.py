import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dfst.dfst_model import DfstDims, DfstParams, init_identity
from dfst.errors import DegenerateSampleError, DivergenceError, PreconditionError
from dfst.fst_core import ExpertTask, compile_fst, expert_spec
from dfst.pto_data import Pto, ds_sample, record_pto, save_dataset
from dfst.train import (
    AdamState,
    GradTensors,
    LossLog,
    TrainConfig,
    adam_step,
    cosine_lr,
    format_config,
    grad,
    loss_and_grad,
    nap_loss,
    parse_config,
    train_loop,
)

TASK = ExpertTask.add2
A2 = TASK.alphabet


def random_instance(rng, d, T_max=12, n_traj=3, dtype=np.float64):
    n = len(A2)
    p = DfstParams(
        rng.normal(0, 0.6, (n, d, d)).astype(dtype),
        rng.normal(0, 1, (n, n, d)).astype(dtype),
        rng.normal(0, 1, (n, 5, d)).astype(dtype),
        rng.normal(0, 1, d).astype(dtype),
        A2,
    )
    batch = []
    for _ in range(n_traj):
        T = int(rng.integers(1, T_max + 1))
        batch.append(Pto(TASK, "1", "1", *(list(map(int, rng.integers(0, k, T))) for k in (n, n, 5))))
    return p, batch


def fd_gradient(params, batch, eps=1e-4):
    out = []
    for t in params.tensors():
        g = np.zeros_like(t)
        it = np.nditer(t, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = t[i]
            t[i] = old + eps
            up = nap_loss(params, batch)
            t[i] = old - eps
            down = nap_loss(params, batch)
            t[i] = old
            g[i] = (up - down) / (2 * eps)
        out.append(g)
    return out


def max_rel_err(analytic, numeric):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def test_loss_single_step_toy():
    n = len(A2)
    A = np.ones((n, 1, 1))
    B = np.zeros((n, n, 1))
    C = np.zeros((n, 5, 1))
    B[0, :, 0] = [1, 2, 0, -1]
    C[0, 3, 0] = 2
    p = DfstParams(A, B, C, np.array([0.5]), A2)
    pto = Pto(TASK, "1", "1", [0], [1], [3])
    # s_hat = [0.5, 1, 0, -0.5] vs e_1 -> 0.5; m_hat = e_3 vs e_3 -> 0; divided by 2T = 2
    assert nap_loss(p, [pto]) == pytest.approx(0.25, abs=1e-12)
    g = grad(p, [pto])
    assert np.allclose(g.B[0, :, 0], [0.25, 0, 0, -0.25])
    assert g.h0.tolist() == pytest.approx([1.0])
    assert not g.A.any()


def test_loss_identity_init_is_one():
    ds = ds_sample(2, "add2", 1, 3, 20, seed=0)
    p = init_identity(DfstDims(17, len(A2)), A2, seed=0)
    assert nap_loss(p, ds.records) == pytest.approx(1.0, abs=1e-6)


def test_loss_and_grad_zero_at_compiled_expert():
    spec = expert_spec("add2")
    batch = [record_pto(spec, "add2", a, b) for a, b in [("101", "11"), ("1", "0"), ("111", "111")]]
    p = compile_fst(spec)
    loss, g = loss_and_grad(p, batch)
    assert loss == 0.0
    assert not g.B.any() and not g.C.any() and not g.A.any() and not g.h0.any()


def test_degenerate_batches():
    p = init_identity(DfstDims(3, len(A2)), A2, seed=0)
    with pytest.raises(DegenerateSampleError):
        nap_loss(p, [])
    with pytest.raises(DegenerateSampleError):
        nap_loss(p, [Pto(TASK, "1", "1", [], [], [])])
    with pytest.raises(PreconditionError):
        nap_loss(p, [Pto(TASK, "1", "1", [0], [9], [0])])


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_gradient_matches_finite_differences(seed, d):
    p, batch = random_instance(np.random.default_rng(seed), d)
    analytic = grad(p, batch).tensors()
    assert max_rel_err(analytic, fd_gradient(p, batch)) < 1e-3


def test_batch_gradient_is_mean_of_samples():
    p, batch = random_instance(np.random.default_rng(4), 3, n_traj=5)
    whole = grad(p, batch).tensors()
    parts = [grad(p, [r]).tensors() for r in batch]
    for k, t in enumerate(whole):
        assert np.allclose(t, np.mean([g[k] for g in parts], axis=0), atol=1e-12)


def test_loss_permutation_invariant():
    p, batch = random_instance(np.random.default_rng(8), 3, n_traj=6)
    a = nap_loss(p, batch)
    b = nap_loss(p, batch[::-1])
    assert a == pytest.approx(b, rel=1e-12)


def test_cosine_lr():
    cfg = TrainConfig(lr0=0.01, total_iters=1000)
    assert cosine_lr(cfg, 0) == 0.01
    assert cosine_lr(cfg, 1000) == pytest.approx(0.0, abs=1e-18)
    assert cosine_lr(cfg, 500) == pytest.approx(0.005)
    lrs = [cosine_lr(cfg, t) for t in range(1001)]
    assert all(x >= y for x, y in zip(lrs, lrs[1:]))
    with pytest.raises(PreconditionError):
        cosine_lr(cfg, 1001)


def _toy_params(h0):
    n = len(A2)
    d = len(h0)
    return DfstParams(np.zeros((n, d, d)), np.zeros((n, n, d)), np.zeros((n, 5, d)), np.array(h0, float), A2)


def _grads_on_h0(params, g):
    return GradTensors(np.zeros_like(params.A), np.zeros_like(params.B), np.zeros_like(params.C), np.array(g, float))


def test_adam_zero_gradient():
    p = _toy_params([1.0, -2.0])
    state = AdamState.zeros_like(p)
    state.m[3][:] = [0.5, 0.5]
    state.v[3][:] = [0.25, 0.25]
    adam_step(p, _grads_on_h0(p, [0.0, 0.0]), state, 3, 0.1)
    # moments decay; the step is driven by the stored momentum alone
    assert np.allclose(state.m[3], 0.45) and np.allclose(state.v[3], 0.25 * 0.999)
    step = 0.1 * (0.45 / (1 - 0.9**3)) / (math.sqrt(0.25 * 0.999 / (1 - 0.999**3)) + 1e-8)
    assert p.h0 == pytest.approx([1.0 - step, -2.0 - step], abs=1e-12)
    # untouched tensors with zero gradient and zero moments stay put
    assert not p.A.any() and not p.B.any()


def test_adam_zero_gradient_fresh_state_is_noop():
    p = _toy_params([1.0, -2.0])
    state = AdamState.zeros_like(p)
    adam_step(p, _grads_on_h0(p, [0.0, 0.0]), state, 1, 0.1)
    assert p.h0.tolist() == [1.0, -2.0]


def test_adam_first_step_is_sign():
    p = _toy_params([1.0, -2.0])
    state = AdamState.zeros_like(p)
    adam_step(p, _grads_on_h0(p, [0.3, -7.0]), state, 1, 0.05)
    assert np.allclose(p.h0, [1.0 - 0.05, -2.0 + 0.05], atol=1e-7)


def test_adam_two_steps_reference():
    # scalar Adam evaluated by hand for beta=(0.9, 0.999), eps=1e-8, lr=0.1
    p = _toy_params([1.0, -2.0])
    state = AdamState.zeros_like(p)
    adam_step(p, _grads_on_h0(p, [0.5, -1.0]), state, 1, 0.1)
    assert p.h0 == pytest.approx([0.900000002, -1.900000001], abs=1e-12)
    adam_step(p, _grads_on_h0(p, [-0.25, 2.0]), state, 2, 0.1)
    assert p.h0 == pytest.approx([0.8733662987078463, -1.9366103534720749], abs=1e-12)


def test_adam_rejects_bad_inputs():
    p = _toy_params([1.0, 2.0])
    state = AdamState.zeros_like(p)
    with pytest.raises(DivergenceError):
        adam_step(p, _grads_on_h0(p, [np.nan, 0.0]), state, 1, 0.1)
    with pytest.raises(PreconditionError):
        adam_step(p, _grads_on_h0(p, [0.0, 0.0]), state, 0, 0.1)


def test_config_parse_roundtrip():
    cfg = parse_config("task = mult2\nradix = 2\ndims = 30\nlr0 = 1e-3\ntotal_iters = 3000000\n# c\n")
    assert (cfg.task, cfg.d, cfg.lr0, cfg.total_iters) == ("mult2", 30, 0.001, 3_000_000)
    assert parse_config(format_config(cfg)) == cfg
    with pytest.raises(PreconditionError):
        parse_config("nonsense = 1\n")
    with pytest.raises(PreconditionError):
        parse_config("lr0 = fast\n")


def test_shipped_presets_parse():
    from importlib.resources import files

    cfgs = files("dfst") / "configs"
    expected = {"add2": (19, 0.01, 500_000), "add10": (35, 0.001, 500_000),
                "mult2": (30, 0.001, 3_000_000), "mult10": (54, 0.001, 3_000_000)}
    for name, (d, lr, iters) in expected.items():
        cfg = parse_config((cfgs / f"{name}.paper").read_text())
        assert (cfg.task, cfg.d, cfg.lr0, cfg.total_iters, cfg.batch_size) == (name, d, lr, iters, 32)
        smoke = parse_config((cfgs / f"{name}.smoke").read_text())
        assert smoke.task == name and smoke.total_iters < iters
        # presets size the hidden state to hold the compiled expert exactly
        assert cfg.d == smoke.d == expert_spec(name).n_states


def test_loss_log_csv_roundtrip():
    log = LossLog()
    log.append(0, 1.0, 0.01)
    log.append(1, 0.5, 0.005)
    again = LossLog.from_csv(log.to_csv())
    assert again == log
    assert log.to_csv().splitlines()[0] == "iter,loss,lr"
    with pytest.raises(ValueError):
        log.append(1, 0.1, 0.0)


@pytest.fixture(scope="module")
def add2_data():
    return ds_sample(2, "add2", 1, 3, 20, seed=0)


def test_train_loop_short_run_is_deterministic(tmp_path, add2_data):
    runs = []
    for k in range(2):
        cfg = TrainConfig(total_iters=60, checkpoint_every=25, seed=5, out_dir=str(tmp_path / f"r{k}"))
        runs.append(train_loop(cfg, add2_data))
    a, b = runs
    assert [p.name for p in a.checkpoints] == ["ckpt_00000025.dfst", "ckpt_00000050.dfst", "ckpt_00000060.dfst"]
    for pa, pb in zip(a.checkpoints, b.checkpoints):
        assert pa.read_bytes() == pb.read_bytes()
    assert a.log == b.log
    assert a.log.losses[0] == pytest.approx(1.0, abs=1e-6)
    assert (tmp_path / "r0" / "loss.csv").read_text() == a.log.to_csv()


def test_train_loop_from_dataset_file(tmp_path, add2_data):
    path = tmp_path / "d.pto"
    save_dataset(add2_data, path)
    cfg = TrainConfig(total_iters=5, checkpoint_every=5, dataset_path=str(path), out_dir=str(tmp_path / "o"),
                      sampling="epoch")
    res = train_loop(cfg)
    assert len(res.log.iters) == 5 and len(res.checkpoints) == 1


def test_train_loop_rejects_mismatched_dataset(tmp_path, add2_data):
    cfg = TrainConfig(task="add10", radix=10, total_iters=5, out_dir=str(tmp_path))
    with pytest.raises(PreconditionError):
        train_loop(cfg, add2_data)


@pytest.mark.slow
def test_loss_decreases_within_5k_iterations(tmp_path, add2_data):
    improved = 0
    for seed in range(3):
        cfg = TrainConfig(total_iters=5000, checkpoint_every=5000, seed=seed, out_dir=str(tmp_path / str(seed)))
        res = train_loop(cfg, add2_data)
        final = nap_loss(res.params, add2_data.records)
        improved += final < res.log.losses[0]
    assert improved >= 2


def test_lr_is_logged_from_schedule(tmp_path, add2_data):
    cfg = TrainConfig(total_iters=4, checkpoint_every=4, out_dir=str(tmp_path))
    res = train_loop(cfg, add2_data)
    assert res.log.lrs == [cosine_lr(cfg, t) for t in range(4)]
    assert math.isclose(res.log.lrs[0], cfg.lr0)


def test_chunked_loss_matches_single_pass(monkeypatch):
    import dfst.train as train_mod

    p, batch = random_instance(np.random.default_rng(12), 3, n_traj=9)
    whole_loss, whole = loss_and_grad(p, batch)
    monkeypatch.setattr(train_mod, "CHUNK_CELLS", 20)
    loss, parts = loss_and_grad(p, batch)
    assert loss == pytest.approx(whole_loss, rel=1e-12)
    for a, b in zip(whole.tensors(), parts.tensors()):
        assert np.allclose(a, b, atol=1e-12)
