import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from layerdrop.config import ConfigError, ModelConfig
from layerdrop.data import gen_synthetic
from layerdrop.evaluation import perplexity
from layerdrop.model import forward_lm, init_params, load_checkpoint
from layerdrop.numcore import Rng, Tensor
from layerdrop.train import (METRICS_HEADER, AdamState, MetricsRow, RunMetrics, TrainConfig,
                             Trainer, TrainingDiverged, adam_step, clip_grad_norm,
                             finetune_pruned, global_norm, lr_at, measure_throughput, train_lm)

SMALL = ModelConfig(n_layers=3, d_model=16, n_heads=2, d_ffn=32, vocab_size=65, max_seq_len=18)
FAST = TrainConfig(steps=20, batch=4, block_len=18, lr_peak=5e-3, eval_every=10)


@pytest.fixture(scope="module")
def copy_corpus():
    return gen_synthetic("copy", 6000, 0)


# --- config ------------------------------------------------------------------


def test_train_config_defaults_and_validation():
    c = TrainConfig()
    assert (c.beta1, c.beta2, c.eps, c.grad_clip) == (0.9, 0.98, 1e-8, 0.1)
    assert c.warmup_steps == c.steps // 10
    with pytest.raises(ConfigError):
        TrainConfig(steps=10, warmup_steps=11)
    with pytest.raises(ConfigError):
        TrainConfig(schedule="linear")
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"stepz": 3})
    assert TrainConfig.from_dict(c.to_dict()) == c


def test_layerdrop_one_rejected(copy_corpus):
    with pytest.raises(ConfigError):
        train_lm(SMALL.replace(layerdrop_p=1.0), FAST, copy_corpus)


# --- schedule ----------------------------------------------------------------


def test_lr_schedule_points():
    cfg = TrainConfig(steps=100, warmup_steps=10, lr_peak=1e-3)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(10, cfg) == 1e-3
    assert lr_at(5, cfg) == pytest.approx(5e-4, abs=1e-18)
    assert lr_at(55, cfg) == pytest.approx(1e-3 * (1 + math.cos(math.pi / 2)) / 2, abs=1e-18)
    assert lr_at(100, cfg) == pytest.approx(0.0, abs=1e-18)
    const = TrainConfig(steps=100, warmup_steps=10, lr_peak=1e-3, schedule="constant")
    assert lr_at(70, const) == 1e-3
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


@given(st.integers(1, 500), st.data())
def test_lr_bounded_and_warmup_monotone(steps, data):
    w = data.draw(st.integers(0, steps))
    cfg = TrainConfig(steps=steps, warmup_steps=w, lr_peak=1.0)
    vals = [lr_at(s, cfg) for s in range(steps + 1)]
    assert all(0.0 <= v <= 1.0 for v in vals)
    assert all(a <= b for a, b in zip(vals[:w], vals[1:w + 1]))
    assert all(a >= b - 1e-15 for a, b in zip(vals[w:], vals[w + 1:]))


# --- adam / clipping ---------------------------------------------------------


def test_adam_zero_grads_no_change():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    adam_step(p, {"w": np.zeros(2)}, AdamState(), 0.1)
    assert p["w"].data.tolist() == [1.0, -2.0]


def test_adam_first_step_hand_oracle():
    g = np.array([0.5, -2.0, 1e-3])
    p = {"w": Tensor(np.zeros(3))}
    st_ = AdamState()
    adam_step(p, {"w": g.copy()}, st_, 0.01)
    m = 0.1 * g / (1 - 0.9)
    v = 0.02 * g * g / (1 - 0.98)
    ref = -0.01 * m / (np.sqrt(v) + 1e-8)
    assert np.allclose(p["w"].data, ref, rtol=1e-12, atol=0)
    assert np.allclose(p["w"].data, -0.01 * np.sign(g), rtol=1e-4)
    # second step with the same gradient keeps the bias-corrected direction
    adam_step(p, {"w": g.copy()}, st_, 0.01)
    assert np.allclose(p["w"].data, 2 * ref, rtol=1e-9)


def test_adam_skips_missing_grads():
    p = {"a": Tensor(np.ones(2)), "b": Tensor(np.ones(2))}
    st_ = AdamState()
    adam_step(p, {"a": np.ones(2), "b": None}, st_, 0.1)
    assert p["b"].data.tolist() == [1.0, 1.0] and "b" not in st_.t and st_.t["a"] == 1


def test_adam_deterministic():
    def run():
        r = Rng(3)
        p = {"w": Tensor(r.uniform(-1, 1, 5))}
        st_ = AdamState()
        for _ in range(5):
            adam_step(p, {"w": r.uniform(-1, 1, 5)}, st_, 0.01)
        return p["w"].data, st_.m["w"], st_.v["w"]

    assert all(np.array_equal(a, b) for a, b in zip(run(), run()))


@given(st.integers(0, 10_000), st.floats(1e-3, 10.0))
def test_clip_bound(seed, clip):
    r = Rng(seed)
    grads = {str(i): r.uniform(-5, 5, (3, 4)) * float(r.random()) for i in range(4)}
    grads["none"] = None
    before = global_norm(grads)
    returned = clip_grad_norm(grads, clip)
    assert returned == before
    assert global_norm(grads) <= clip + 1e-9
    if before <= clip:
        assert global_norm(grads) == before


# --- training loop -----------------------------------------------------------


def test_copy_task_loss_decreases(copy_corpus):
    cfg = TrainConfig(steps=200, batch=8, block_len=18, lr_peak=1e-2, eval_every=50, seed=1)
    _, metrics = train_lm(SMALL, cfg, copy_corpus)
    assert [r.step for r in metrics.rows] == [50, 100, 150, 200]
    assert metrics.rows[-1].train_loss < metrics.rows[0].train_loss


def test_training_deterministic(copy_corpus):
    mc = SMALL.replace(layerdrop_p=0.5, dropout=0.1)
    a, ma = train_lm(mc, FAST, copy_corpus, valid=copy_corpus.head(200))
    b, mb = train_lm(mc, FAST, copy_corpus, valid=copy_corpus.head(200))
    assert ma.deterministic() == mb.deterministic()
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a.tensors(), b.tensors()))


def test_metrics_rows_and_files(tmp_path, copy_corpus):
    _, m = train_lm(SMALL.replace(layerdrop_p=0.3), FAST, copy_corpus,
                    valid=copy_corpus.head(100), out_dir=str(tmp_path))
    assert [r.step for r in m.rows] == [10, 20]
    assert all(r.valid_ppl is not None and math.isfinite(r.valid_ppl) for r in m.rows)
    assert all(0 <= r.active_layers_mean <= 3 for r in m.rows)
    back = RunMetrics.read_csv(tmp_path / "metrics.csv")
    assert back.deterministic() == m.deterministic()
    assert (tmp_path / "metrics.csv").read_text().splitlines()[0] == ",".join(METRICS_HEADER)
    assert load_checkpoint(tmp_path / "model.ckpt").config == SMALL.replace(layerdrop_p=0.3)


def test_metrics_csv_without_timing(tmp_path):
    m = RunMetrics()
    m.append(MetricsRow(1, 2.0, None, 123.0, 3.0))
    m.write_csv(tmp_path / "m.csv", include_timing=False)
    assert (tmp_path / "m.csv").read_text().splitlines()[1] == "1,2.0,,,3.0"
    with pytest.raises(ValueError):
        m.append(MetricsRow(1, 2.0, None, 1.0, 3.0))


def test_active_layers_mean_near_expectation(copy_corpus):
    mc = SMALL.replace(n_layers=4, layerdrop_p=0.25, d_model=8, d_ffn=8)
    cfg = TrainConfig(steps=300, batch=2, block_len=18, eval_every=300, seed=5)
    _, m = train_lm(mc, cfg, copy_corpus)
    sigma = math.sqrt(4 * 0.25 * 0.75 / 300)
    assert abs(m.rows[0].active_layers_mean - 3.0) <= 3 * sigma


def test_dropped_layers_get_no_update(copy_corpus):
    params = init_params(SMALL.replace(layerdrop_p=0.5), Rng(0))
    tr = Trainer(params, FAST, copy_corpus)
    before = [lp.attn.wq.data.copy() for lp in params.layers]
    mask_rng_state = Rng(tr.mask_rng.seed)
    mask_rng_state.state = tr.mask_rng.state
    from layerdrop.structdrop import sample_mask

    mask = sample_mask(tr.drop, params.config, mask_rng_state)
    tr.step()
    for i, gate in enumerate(mask.gates()):
        changed = not np.array_equal(before[i], params.layers[i].attn.wq.data)
        assert changed == gate.layer


def test_divergence_aborts_with_last_good(tmp_path, copy_corpus):
    params = init_params(SMALL, Rng(0))
    params.out_proj.data[0, 0] = np.nan
    with pytest.raises(TrainingDiverged) as exc:
        train_lm(SMALL, FAST, copy_corpus, init=params, out_dir=str(tmp_path))
    err = exc.value
    assert err.step == 1 and err.last_good_step == 0
    assert (tmp_path / "last_good.ckpt").exists()
    assert "step 1" in str(err)


def test_eval_independent_of_mask_seed(tiny_params):
    toks = [1, 2, 3]
    a = forward_lm(toks, tiny_params, mode="eval", rng=Rng(1)).data
    b = forward_lm(toks, tiny_params, mode="eval", rng=Rng(2)).data
    assert np.array_equal(a, b)


# --- finetuning --------------------------------------------------------------


def test_finetune_zero_steps_unchanged(copy_corpus):
    params, _ = train_lm(SMALL, FAST, copy_corpus)
    tuned, m = finetune_pruned(params, (1, 3), copy_corpus, 0)
    assert tuned.config.n_layers == 2 and not m.rows
    assert np.array_equal(tuned.layers[1].ffn.u.data, params.layers[2].ffn.u.data)
    same, _ = finetune_pruned(tuned, None, copy_corpus, 0)
    assert all(np.array_equal(x.data, y.data) for x, y in zip(same.tensors(), tuned.tensors()))


def test_finetune_deterministic_and_isolated(copy_corpus):
    params, _ = train_lm(SMALL.replace(layerdrop_p=0.5), FAST, copy_corpus)
    snapshot = [t.data.copy() for t in params.tensors()]
    a, ma = finetune_pruned(params, (1, 3), copy_corpus, 10, FAST)
    b, mb = finetune_pruned(params, (1, 3), copy_corpus, 10, FAST)
    assert ma.deterministic() == mb.deterministic()
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a.tensors(), b.tensors()))
    assert all(np.array_equal(s, t.data) for s, t in zip(snapshot, params.tensors()))
    assert a.config.layerdrop_p == 0.0
    assert all(r.active_layers_mean == 2.0 for r in ma.rows)


def test_finetune_improves_undertrained_prune(copy_corpus):
    params, _ = train_lm(SMALL.replace(layerdrop_p=0.5), FAST, copy_corpus)
    valid = gen_synthetic("copy", 900, 11)
    before = perplexity(params, valid, keep=(1, 3), block_len=18)
    tuned, _ = finetune_pruned(params, (1, 3), copy_corpus, 60,
                               FAST.replace(lr_peak=5e-3, warmup_steps=5))
    assert perplexity(tuned, valid, block_len=18) <= before


# --- throughput --------------------------------------------------------------


def test_throughput_rows_and_stability():
    mc = ModelConfig(n_layers=8, d_model=32, n_heads=2, d_ffn=64, vocab_size=65, max_seq_len=32)
    tc = TrainConfig(batch=4, block_len=32)
    rows = measure_throughput(mc, [0.0, 0.0, 0.5], 40, tc)
    assert [p for p, _ in rows] == [0.0, 0.0, 0.5]
    (_, a), (_, b), (_, c) = rows
    assert abs(a / b - 1.0) <= 0.10
    assert c > max(a, b)
    with pytest.raises(ValueError):
        measure_throughput(mc, [0.0], 1, tc)
