import math

import numpy as np
import pytest

import relalign

MICRO_MOTIFS = {"hidden": 8, "label_embedding": 4, "pair_width": 8, "relation_width": 8, "mlp_hidden": 8}


@pytest.fixture(scope="module")
def bundle():
    return relalign.make_bundle(n_train=40, n_val=10, n_test=10, seed=3)


def test_bundle_is_deterministic(bundle):
    again = relalign.make_bundle(n_train=40, n_val=10, n_test=10, seed=3)
    assert again.spec_hash == bundle.spec_hash
    assert relalign.sample(again, "train", 5) == relalign.sample(bundle, "train", 5)
    assert bundle.size("train") == 40
    assert relalign.spec(bundle)["n_val"] == 10
    with pytest.raises(IndexError):
        bundle.sample_json("val", 10)


def test_corpus_round_trip(bundle, tmp_path):
    bundle.write(str(tmp_path))
    loaded = relalign.load_corpus(tmp_path)
    assert loaded.spec_hash == bundle.spec_hash
    assert relalign.sample(loaded, "test", 3) == relalign.sample(bundle, "test", 3)
    (tmp_path / "val.jsonl").write_text("{not json\n")
    with pytest.raises(relalign.DataError):
        relalign.load_corpus(tmp_path)


def test_row_masking():
    x = np.arange(1.0, 41.0).reshape(20, 2)
    assert np.array_equal(relalign.mask_rows(x, 0.0), x)
    assert not relalign.mask_rows(x, 1.0).any()
    masked = relalign.mask_rows(np.ones((20000, 3)), 0.1, seed=4)
    rate = 1.0 - masked[:, 0].mean()
    assert abs(rate - 0.1) < 0.01
    assert np.array_equal(masked, relalign.mask_rows(np.ones((20000, 3)), 0.1, seed=4))


def test_attention_masking_keeps_a_finite_logit_per_row():
    scores = relalign.mask_attention_logits(np.zeros((50, 3)), 0.9, seed=1)
    assert np.isneginf(scores).any()
    assert np.isfinite(scores).any(axis=1).all()


def test_kl_alignment():
    assert relalign.kl_alignment_loss(np.array([[1.0, 0.0]]), np.array([[0.5, 0.5]])) == pytest.approx(math.log(2))
    p = np.array([[0.2, 0.3, 0.5], [0.6, 0.2, 0.2]])
    assert relalign.kl_alignment_loss(p, p) == 0.0
    loss, grad = relalign.kl_alignment_grad(p, np.full((2, 3), 1 / 3))
    assert grad.shape == (2, 3)
    assert np.allclose(grad, -p / (1 / 3) / 2)
    assert relalign.combine_losses(1.0, 0.5) == pytest.approx(6.0)
    assert relalign.combine_losses(1.0, 0.5, target_mode="off") == 1.0


def test_train_and_evaluate(bundle, tmp_path):
    config = {
        "model": "mini-motifs",
        "mode": "predcls",
        "batch_size": 4,
        "total_iterations": 6,
        "eval_every": 3,
        "model_overrides": MICRO_MOTIFS,
    }
    record = relalign.train(config, bundle, tmp_path)
    assert [p["iteration"] for p in record["eval_points"]] == [3, 6]
    assert (tmp_path / "best.json").exists()
    report = relalign.evaluate_checkpoint(tmp_path / "best.json", bundle, split="test")
    assert report == record["test"]

    other = relalign.make_bundle(n_train=40, n_val=10, n_test=10, seed=4)
    with pytest.raises(relalign.DataError):
        relalign.evaluate_checkpoint(tmp_path / "best.json", other)


def test_sgtr_rejects_predcls(bundle):
    with pytest.raises(relalign.UnsupportedModeError):
        relalign.train({"model": "mini-sgtr", "mode": "predcls"}, bundle)


def test_builtin_grid_and_small_ablation(bundle):
    grid = relalign.builtin_grid("p_sweep")
    assert [c["align"]["p"] for c in grid["cells"][1:]] == [0.05, 0.1, 0.2, 0.4, 0.6]
    small = {
        "cells": [
            {"model": "mini-motifs", "label": "base", "align": {"target_mode": "off"}},
            {"model": "mini-motifs", "label": "ssa"},
        ],
        "seeds": [0, 1],
        "base": {"batch_size": 4, "total_iterations": 4, "eval_every": 2, "model_overrides": MICRO_MOTIFS},
    }
    table = relalign.run_ablation(small, bundle)
    assert [r["label"] for r in table["rows"]] == ["base", "ssa"]
    assert table["rows"][1]["stats"]["mR@50"]["n"] == 2
