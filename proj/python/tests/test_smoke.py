import json
import math

import numpy as np
import pytest

import mmoe


def test_topk_weights_and_nesting():
    idx, w = mmoe.select_topk(np.array([[0.4, 0.3, 0.2, 0.1]]), 2)
    assert idx == [[0, 1]]
    assert w[0] == pytest.approx([4 / 7, 3 / 7], abs=1e-12)
    scores = np.random.default_rng(0).random((50, 8))
    for k in range(1, 8):
        small, _ = mmoe.select_topk(scores, k)
        large, _ = mmoe.select_topk(scores, k + 1)
        assert all(set(a) <= set(b) for a, b in zip(small, large))


def test_topp():
    idx, _ = mmoe.select_topp(np.array([[0.2, 0.5, 0.3]]), 0.7)
    assert idx == [[1, 2]]
    idx, _ = mmoe.select_topp(np.array([[0.2, 0.5, 0.3]]), 1.0)
    assert len(idx[0]) == 3
    with pytest.raises(ValueError):
        mmoe.select_topp(np.array([[0.5, 0.5]]), 0.0)


def test_metrics():
    assert mmoe.spearman_rank([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8)
    assert mmoe.spearman_rank([1, 2, 3], [5, 5, 5]) is None
    assert mmoe.focused_spearman([4, 3, 2, 1, 0], [0, 1, 2, 3, 4], 2, 2) == pytest.approx(-1.0)
    assert mmoe.mods(np.eye(3)) == pytest.approx(0.0)
    assert mmoe.mods(np.array([[1, 0], [1, 1]])) == pytest.approx(math.sqrt(2) / 2, rel=1e-6)


def test_scheduler():
    p = mmoe.weighted_k_probabilities(1, 6, 2.0)
    assert p[0] == pytest.approx(1 / 10.8318, rel=1e-4)
    assert sum(p) == pytest.approx(1.0)
    assert mmoe.enforce_budget([5, 1, 6, 4], 2.0, 1, 6) == [2, 1, 3, 2]
    with pytest.raises(mmoe.ConfigError):
        mmoe.enforce_budget([6, 6], 0.5, 1, 6)


def test_train_eval_round_trip(tmp_path):
    config = {
        "model": {"vocab_size": 12, "d_model": 16, "d_ff": 16, "num_layers": 2, "num_heads": 2,
                  "num_experts": 4, "max_seq_len": 16},
        "train": {"strategy": {"kind": "mmoe_layer", "k_min": 1, "k_max": 4}, "tokens_total": 256,
                  "micro_batch_size": 4, "global_batch_size": 4, "seq_len": 16, "seed": 3},
    }
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(config))
    out = tmp_path / "run"
    mmoe.cli("train", "--config", cfg, "--output-dir", out, "--quiet")
    ck = mmoe.Checkpoint.load(str(out / "final.mmoe"))
    assert ck.step == 4
    assert ck.strategy == "mmoe_layer"
    assert mmoe.model_config(ck)["num_experts"] == 4
    a = ck.evaluate("2-2", sequences=8)
    b = ck.evaluate("2", sequences=8)
    assert a["avg_k"] == 2.0
    assert a["loss"] == b["loss"]
    assert ck.evaluate("1-2", sequences=8)["avg_k"] == 1.5
    assert len(ck.mods_profile()) == 2
    code, _, err = mmoe.run_cli(["eval", str(out / "final.mmoe"), "--k", "9"])
    assert code == 2 and err
