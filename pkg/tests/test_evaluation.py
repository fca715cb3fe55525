import csv
import json
import math

import numpy as np
import pytest

from layerdrop.config import GroupScheme, ModelConfig, param_count
from layerdrop.data import Corpus, gen_synthetic
from layerdrop.evaluation import (SweepResult, default_depths, drop_vs_prune_grid, nll_sum,
                                  perplexity, prune_curve, scheme_comparison, soft_checks,
                                  write_soft_checks)
from layerdrop.model import init_params
from layerdrop.numcore import Rng
from layerdrop.prune import depth_keep, prune_model
from layerdrop.train import TrainConfig, train_lm

CFG = ModelConfig(n_layers=4, d_model=8, n_heads=2, d_ffn=16, vocab_size=65, max_seq_len=16)
TC = TrainConfig(steps=12, batch=4, block_len=16, lr_peak=5e-3, eval_every=12)


@pytest.fixture(scope="module")
def corpora():
    c = gen_synthetic("zipf_bigram", 3000, 2)
    return c, gen_synthetic("zipf_bigram", 400, 9)


def test_uniform_model_ppl_256():
    cfg = ModelConfig(n_layers=1, d_model=4, n_heads=1, d_ffn=4, vocab_size=256, max_seq_len=8)
    p = init_params(cfg, Rng(0))
    p.out_proj.data[:] = 0.0
    c = Corpus(Rng(1).integers(256, 100))
    assert abs(perplexity(p, c, block_len=8) - 256.0) < 1e-6


def test_keep_all_equals_full(corpora):
    _, valid = corpora
    p = init_params(CFG, Rng(1))
    assert perplexity(p, valid, keep=(1, 2, 3, 4)) == perplexity(p, valid)


def test_keep_equals_pruned_model(corpora):
    _, valid = corpora
    p = init_params(CFG, Rng(1))
    assert perplexity(p, valid, keep=(2, 4)) == perplexity(prune_model(p, (2, 4)), valid)


def test_batch_size_invariance(corpora):
    _, valid = corpora
    p = init_params(CFG, Rng(2))
    a = perplexity(p, valid, batch=1)
    b = perplexity(p, valid, batch=7)
    assert abs(math.log(a) - math.log(b)) < 1e-10


def test_block_order_invariance(corpora):
    _, valid = corpora
    p = init_params(CFG, Rng(2))
    L = 16
    nb = (len(valid) - 1) // L
    perm = Rng(3).permutation(nb)
    # rebuild a corpus with blocks permuted; each block keeps its own next-token target
    blocks = [valid.tokens[k * L:(k + 1) * L + 1] for k in range(nb)]
    total, count = nll_sum(p, valid, block_len=L)
    total2 = 0.0
    for k in perm:
        t, c = nll_sum(p, Corpus(blocks[k]), block_len=L)
        total2 += t
    assert abs(total / count - total2 / count) < 1e-10


def test_trained_beats_untrained(corpora):
    train, valid = corpora
    untrained = perplexity(init_params(CFG, Rng(0).spawn("init")), valid)
    trained, _ = train_lm(CFG, TC.replace(steps=60, eval_every=60), train)
    assert perplexity(trained, valid) < untrained


def test_empty_corpus_rejected():
    p = init_params(CFG, Rng(0))
    with pytest.raises(ValueError):
        perplexity(p, Corpus(np.array([], dtype=np.int64)))


def test_sweep_result_duplicate_keys():
    r = SweepResult("x", ["a", "ppl"], ["a"])
    r.add(a=1, ppl=2.0)
    with pytest.raises(ValueError):
        r.add(a=1, ppl=3.0)


def test_default_depths():
    assert default_depths(8) == [8, 6, 4, 2]
    assert default_depths(2) == [2, 1]


def test_prune_curve_shape_and_full_depth(tmp_path, corpora):
    _, valid = corpora
    ld, base = init_params(CFG, Rng(1)), init_params(CFG, Rng(2))
    scratch = {r: init_params(CFG.replace(n_layers=r), Rng(r)) for r in (4, 3, 2, 1)}
    res = prune_curve(ld, base, scratch, valid)
    assert len(res.rows) == 3 * 4
    for r in (4, 3, 2, 1):
        assert sorted(res.column("label", r=r)) == ["baseline", "layerdrop", "scratch"]
        assert res.column("params_count", label="layerdrop", r=r) == [param_count(CFG, r)]
        assert res.column("keep", label="baseline", r=r) == [" ".join(map(str, depth_keep(4, r)))]
    assert res.column("ppl", label="layerdrop", r=4) == [perplexity(ld, valid)]
    assert res.column("ppl", label="baseline", r=4) == [perplexity(base, valid)]
    path = tmp_path / "curve.csv"
    res.write_csv(path)
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == 12 and rows[0]["experiment"] == "prune_curve"
    assert set(rows[0]) == {"experiment", "label", "r", "keep", "ppl", "params_count",
                            "layers_active"}


def test_prune_curve_rejects_mismatch(corpora):
    _, valid = corpora
    other = init_params(CFG.replace(d_model=12, n_heads=2), Rng(0))
    with pytest.raises(ValueError):
        prune_curve(init_params(CFG, Rng(1)), other, {}, valid)


def test_drop_vs_prune_grid_shape_and_determinism(tmp_path, corpora):
    train, valid = corpora
    a = drop_vs_prune_grid([0.0, 0.5], [4, 2, 1], CFG, TC, train, valid)
    b = drop_vs_prune_grid([0.0, 0.5], [4, 2, 1], CFG, TC, train, valid)
    assert len(a.rows) == 6
    assert a.rows == b.rows
    a.write_csv(tmp_path / "a.csv")
    b.write_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    a.write_manifest(tmp_path / "m.json", seed=0)
    cells = json.load(open(tmp_path / "m.json"))["cells"]
    assert [c["train_p"] for c in cells] == [0.0, 0.5]
    checks = soft_checks(a, 4)
    assert checks and all(isinstance(ok, bool) for _, ok, _ in checks)
    write_soft_checks(tmp_path / "soft.csv", checks)


def test_scheme_comparison_one_row_per_scheme(corpora):
    train, valid = corpora
    schemes = [GroupScheme.parse(s) for s in ("layer", "sublayer", "head")]
    res = scheme_comparison(schemes, CFG, TC.replace(steps=4, eval_every=4), train, valid)
    assert [r["scheme"] for r in res.rows] == ["layer", "sublayer", "head"]
    assert all(0 < r["rate"] < 1 and math.isfinite(r["ppl"]) for r in res.rows)
    names = [c[0] for c in soft_checks(res, 4)]
    assert "layer vs sublayer within band" in names
