import copy

import numpy as np
import pytest

from anchorrec import compute as C
from anchorrec import train as T
from anchorrec.config import RunConfig, replace
from anchorrec.ingest import InteractionDataset, SyntheticSpec
from anchorrec.losses import total_loss
from anchorrec.model import forward, init_state, snapshot


def tiny_config(**sections) -> RunConfig:
    base = RunConfig(synth=SyntheticSpec(num_users=60, num_items=40, num_blocks=4, p_in=0.4, p_out=0.02,
                                         dims={"mm": 6, "t": 5, "v": 7}, clusters={"mm": 4, "t": 4, "v": 4}))
    sections.setdefault("data", {})
    sections["data"] = {"source": "synthetic", "k_sim": 4, **sections["data"]}
    sections["model"] = {"d": 8, "d_proj": 8, **sections.get("model", {})}
    sections["train"] = {"epochs_max": 3, "batch_size": 128, "learning_rate": 0.01, "eval_every": 1,
                         "seeds": [0], **sections.get("train", {})}
    return replace(base, **sections)


@pytest.fixture(scope="module")
def data():
    return T.prepare_data(tiny_config())


# ---------------------------------------------------------------- sampling

def test_forced_negative():
    train = InteractionDataset.from_pairs(1, 2, [(0, 0)])
    batch = T.sample_bpr_batch(train, 50, T.make_rng(0, 1))
    assert batch.tolist() == [[0, 0, 1]] * 50


def test_negatives_uniform_over_complement():
    train = InteractionDataset.from_pairs(1, 3, [(0, 0)])
    neg = T.sample_bpr_batch(train, 10_000, T.make_rng(1, 1))[:, 2]
    assert set(np.unique(neg)) == {1, 2}
    assert abs((neg == 1).sum() - 5000) <= 5 * np.sqrt(10_000 * 0.25)


def test_negatives_never_seen(data):
    train = data.split.train
    sets = train.item_sets()
    batch = T.sample_bpr_batch(train, 2000, T.make_rng(2, 1))
    assert all(int(i) in sets[u] and int(j) not in sets[u] for u, i, j in batch)


def test_sampling_deterministic(data):
    a = T.sample_bpr_batch(data.split.train, 300, T.make_rng(5, 1))
    b = T.sample_bpr_batch(data.split.train, 300, T.make_rng(5, 1))
    np.testing.assert_array_equal(a, b)


def test_saturated_user_skipped_with_warning():
    train = InteractionDataset.from_pairs(2, 2, [(0, 0), (0, 1), (1, 0)])
    with pytest.warns(RuntimeWarning, match="every item"):
        batch = T.sample_bpr_batch(train, 200, T.make_rng(0, 1))
    assert set(batch[:, 0]) == {1}


# ---------------------------------------------------------------- Adam

def test_adam_zero_gradient():
    theta, m, v = np.ones(3), np.full(3, 0.2), np.full(3, 0.5)
    new, m2, v2 = T.adam_step(theta, np.zeros(3), m, v, 0.1, 0.9, 0.999, 1e-8, 4)
    assert np.array_equal(m2, 0.9 * m) and np.array_equal(v2, 0.999 * v)
    # moments still move params: only a zero *history* leaves them fixed
    new0, _, _ = T.adam_step(theta, np.zeros(3), np.zeros(3), np.zeros(3), 0.1, 0.9, 0.999, 1e-8, 1)
    np.testing.assert_array_equal(new0, theta)


def test_adam_first_step_closed_form():
    g = np.array([0.5, -2.0, 1e-3])
    new, _, _ = T.adam_step(np.zeros(3), g, np.zeros(3), np.zeros(3), 0.01, 0.9, 0.999, 1e-8, 1)
    np.testing.assert_allclose(new, -0.01 * g / (np.abs(g) + 1e-8), rtol=0, atol=1e-15)


def test_adam_converges_on_quadratic():
    theta = np.random.default_rng(0).standard_normal(5)
    m = v = np.zeros(5)
    for t in range(1, 201):
        theta, m, v = T.adam_step(theta, theta, m, v, 0.1, 0.9, 0.999, 1e-8, t)
    assert np.linalg.norm(theta) < 1e-3


def test_adam_step_counter():
    with pytest.raises(ValueError):
        T.adam_step(np.zeros(1), np.zeros(1), np.zeros(1), np.zeros(1), 0.1, 0.9, 0.999, 1e-8, 0)


# ---------------------------------------------------------------- epochs

def _run_epoch(cfg, data, seed=0):
    state = init_state(data.ctx, cfg.model, T.make_rng(seed, 0))
    before = state.state_arrays()
    opt = T.Adam(cfg.train.learning_rate)
    parts = T.train_epoch(state, data, cfg, opt, T.make_rng(seed, 1))
    return before, state.state_arrays(), parts


def test_zero_learning_rate_is_null_update(data):
    before, after, _ = _run_epoch(tiny_config(train={"learning_rate": 0.0}), data)
    for k in before:
        assert np.array_equal(before[k], after[k]), k


def test_decoupling_without_anchor_terms(data):
    cfg = tiny_config(losses={"lambda1": 0.0, "lambda2": 0.0}, model={"lambda_recon": 0.0})
    before, after, _ = _run_epoch(cfg, data)
    touched = [k for k in before if not np.array_equal(before[k], after[k])]
    assert touched and all(not k.startswith(("proj.", "recon.")) for k in touched)
    assert {"id.user", "id.item"} <= set(touched)


def test_single_step_matches_hand_adam():
    spec = {"num_users": 6, "num_items": 5, "num_blocks": 1, "p_in": 0.6, "p_out": 0.0,
            "clusters": {"mm": 2, "t": 2, "v": 2}}
    cfg = tiny_config(synth=spec, data={"k_sim": 2}, train={"batch_size": 1000, "learning_rate": 0.05})
    data = T.prepare_data(cfg)
    assert data.ctx.num_items == 5
    state = init_state(data.ctx, cfg.model, 3)
    theta0 = state.state_arrays()
    rng = T.make_rng(0, 1)

    # replay the batch on a copy of the generator and differentiate by hand
    batch = T.sample_bpr_batch(data.split.train, 1000, copy.deepcopy(rng))
    items = np.unique(batch[:, 1:])
    ref = init_state(data.ctx, cfg.model, 3)
    with C.Tape() as tape:
        art = forward(ref, data.ctx, items)
        loss, _ = total_loss(art, batch, np.searchsorted(items, batch[:, 1:]), ref, data.features,
                             cfg.model, cfg.losses)
    tape.backward(loss)
    lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8

    T.train_epoch(state, data, cfg, T.Adam(lr, b1, b2, eps), rng)
    after = state.state_arrays()
    for name, p in ref.parameters().items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m, v = (1 - b1) * g, (1 - b2) * g * g
        expected = theta0[name] - lr * (m / (1 - b1)) / (np.sqrt(v / (1 - b2)) + eps)
        assert np.max(np.abs(after[name] - expected)) < 1e-10, name


def test_epoch_means_recompose(data):
    cfg = tiny_config(losses={"lambda1": 0.2, "lambda2": 0.3})
    _, _, parts = _run_epoch(cfg, data)
    assert abs(parts.total - (parts.interaction + 0.2 * parts.aal + 0.3 * parts.amp + parts.reg)) < 1e-10


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_aborts_epoch(data):
    cfg = tiny_config()
    state = init_state(data.ctx, cfg.model, 0)
    state.user_id.data[:] = 1e200
    with pytest.raises(T.TrainingError, match="batch 0"):
        T.train_epoch(state, data, cfg, T.Adam(), T.make_rng(0, 1))


# ---------------------------------------------------------------- fit

def test_patience_stopping_rule(data):
    cfg = tiny_config(train={"epochs_max": 10, "patience": 1, "eval_every": 1})
    values = iter([0.9, 0.8, 0.7, 0.6])
    res = T.fit(cfg, data, evaluate=lambda st, ep: {"recall@20": next(values)})
    assert res.stopped_epoch == 2
    assert res.best_epoch == res.best.epoch == 1
    assert [r["epoch"] for r in res.log if r["type"] == "eval"] == [1, 2]


@pytest.mark.parametrize("seq", [[0.1, 0.3, 0.2, 0.2, 0.5, 0.4], [0.5, 0.5, 0.1, 0.6, 0.6, 0.6]])
def test_best_checkpoint_is_never_worse(data, seq):
    cfg = tiny_config(train={"epochs_max": 6, "patience": 3})
    it = iter(seq)
    res = T.fit(cfg, data, evaluate=lambda st, ep: {"recall@20": next(it)})
    seen = [r["recall@20"] for r in res.log if r["type"] == "eval"]
    assert res.best_metrics["recall@20"] == max(seen)
    assert res.best_epoch == 1 + seen.index(max(seen))


def test_eval_schedule_includes_last_epoch(data):
    cfg = tiny_config(train={"epochs_max": 7, "eval_every": 3, "early_stopping": False})
    calls = []
    T.fit(cfg, data, evaluate=lambda st, ep: calls.append(ep) or {"recall@20": 0.0})
    assert calls == [3, 6, 7]


def test_empty_validation_warns():
    cfg = tiny_config(data={"split_ratios": [0.9, 0.0, 0.1]}, train={"epochs_max": 2})
    data = T.prepare_data(cfg)
    with pytest.warns(RuntimeWarning, match="empty validation"):
        res = T.fit(cfg, data)
    assert res.stopped_epoch == 2 and res.best_epoch == 2


def test_fit_deterministic(data):
    cfg = tiny_config()
    a, b = T.fit(cfg, data), T.fit(cfg, data)
    assert a.log == b.log
    for k, v in a.best.params.items():
        assert np.array_equal(v, b.best.params[k])


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path, data):
    cfg = tiny_config()
    res = T.fit(cfg, data)
    path = T.save_checkpoint(res.best, tmp_path / "c.ancr")
    assert path.read_bytes()[:4] == b"ANCR"
    back = T.load_checkpoint(path)
    assert (back.epoch, back.seed, back.step, back.config_hash) == (
        res.best.epoch, res.best.seed, res.best.step, cfg.hash())
    for group in ("params", "adam_m", "adam_v"):
        a, b = getattr(res.best, group), getattr(back, group)
        assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
    s1 = snapshot(res.best.restore(data.ctx, cfg), data.ctx)
    s2 = snapshot(back.restore(data.ctx), data.ctx)
    probe = s1.users[:5] @ s1.items.T
    assert np.array_equal(probe, s2.users[:5] @ s2.items.T)


def test_checkpoint_corruption(tmp_path, data):
    cfg = tiny_config(train={"epochs_max": 1})
    good = T.save_checkpoint(T.fit(cfg, data).best, tmp_path / "c.ancr").read_bytes()
    cases = {"magic": b"XXXX" + good[4:], "truncated": good[:-9], "trailing": good + b"\0"}
    for name, raw in cases.items():
        p = tmp_path / f"{name}.ancr"
        p.write_bytes(raw)
        with pytest.raises(T.CheckpointError):
            T.load_checkpoint(p)
    with pytest.raises(T.CheckpointError):
        T.load_checkpoint(tmp_path / "missing.ancr")


def test_checkpoint_shape_mismatch(data):
    ck = T.fit(tiny_config(train={"epochs_max": 1}), data).best
    with pytest.raises(T.CheckpointError, match="shape"):
        ck.restore(data.ctx, tiny_config(model={"d": 4}))


# ---------------------------------------------------------------- seeds

def test_aggregate_conventions():
    assert T.aggregate([{"r": 0.4}]) == {"r": {"mean": 0.4, "std": 0.0}}
    agg = T.aggregate([{"r": 1.0}, {"r": 3.0}])
    assert agg["r"]["mean"] == 2.0 and abs(agg["r"]["std"] - np.sqrt(2.0)) < 1e-15


def test_identical_seeds_have_zero_std(data):
    _, summary = T.run_seeds(tiny_config(train={"epochs_max": 2}), data, seeds=[7, 7, 7])
    assert all(s["std"] == 0.0 for s in summary["val"].values())


def test_five_seed_report(data):
    runs, summary = T.run_seeds(tiny_config(train={"epochs_max": 1}), data, seeds=range(5))
    assert [r.seed for r in runs] == [0, 1, 2, 3, 4]
    assert all(r.error is None for r in runs)
    assert "recall@20" in summary["test"]


def test_failing_seed_recorded(data, monkeypatch):
    real = T.fit

    def flaky(cfg, d, evaluate=None):
        if cfg.train.seed == 1:
            raise RuntimeError("boom")
        return real(cfg, d, evaluate)

    monkeypatch.setattr(T, "fit", flaky)
    runs, summary = T.run_seeds(tiny_config(train={"epochs_max": 1}), data, seeds=[0, 1])
    assert runs[1].error == "RuntimeError: boom" and runs[0].error is None
    assert summary["val"]["recall@20"]["std"] == 0.0
