import math
from dataclasses import replace

import numpy as np
import pytest

from limssr.model import LIMSSR, save_checkpoint
from limssr.numerics.nn import Parameter
from limssr.training import (
    AdamW,
    NonFiniteTrainingError,
    SUITES,
    TrainConfig,
    clip_grad_norm,
    cosine_lr,
    suite_rows,
    train,
)


def test_cosine_endpoints():
    assert cosine_lr(0, 20, 2e-4) == 2e-4
    assert abs(cosine_lr(19, 20, 2e-4) - 2e-5) < 1e-9 * 2e-4
    mid = cosine_lr(5, 11, 1.0)
    assert abs(mid - (0.1 + 0.5 * 0.9 * (1 + math.cos(math.pi * 5 / 10)))) < 1e-15
    assert cosine_lr(0, 1, 3e-4) == 3e-4


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_adamw_step_oracle():
    p = Parameter(np.array([1.0, -2.0]), decay=True)
    p.grad = np.array([0.5, -0.1])
    opt = AdamW([p], weight_decay=0.1)
    opt.step(0.01)
    # first step: m_hat = g, v_hat = g^2, so update is lr * g / (|g| + eps)
    want = np.array([1.0, -2.0]) * (1 - 0.01 * 0.1) - 0.01 * np.array([0.5, -0.1]) / (np.array([0.5, 0.1]) + 1e-8)
    assert np.allclose(p.data, want, atol=1e-15)


def test_adamw_no_decay_on_flagged_params():
    p = Parameter(np.array([3.0]), decay=False)
    p.grad = np.zeros(1)
    AdamW([p], weight_decay=0.5).step(0.1)
    assert p.data[0] == 3.0


def test_clip_grad_norm():
    a, b = Parameter(np.zeros(2)), Parameter(np.zeros(1))
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm([a, b], 1.0) == 5.0
    assert np.allclose(np.r_[a.grad, b.grad], [0.6, 0.0, 0.8], atol=1e-12)


def test_zero_epochs(tiny):
    mc, ds = tiny
    model = LIMSSR(mc)
    before = {n: p.data.copy() for n, p in model.named_parameters().items()}
    assert train(model, ds, TrainConfig(epochs=0)) == []
    for n, p in model.named_parameters().items():
        assert np.array_equal(before[n], p.data)


def test_deterministic_runs(tiny, tmp_path):
    mc, ds = tiny
    outs = []
    for k in range(2):
        model = LIMSSR(mc)
        log = tmp_path / f"log{k}.csv"
        hist = train(model, ds, TrainConfig(epochs=2, seed=4), log_path=log)
        ck = tmp_path / f"m{k}.ckpt"
        save_checkpoint(model, ck)
        outs.append((hist, log.read_bytes(), ck.read_bytes()))
    assert outs[0] == outs[1]


def test_loss_decreases(tiny):
    mc, ds = tiny
    hist = train(LIMSSR(mc), ds, TrainConfig(epochs=10, learning_rate=3e-3, seed=1))
    assert hist[-1]["total"] < hist[0]["total"]


def test_log_columns(tiny, tmp_path):
    mc, ds = tiny
    log = tmp_path / "log.csv"
    train(LIMSSR(mc), ds, TrainConfig(epochs=1), log_path=log)
    assert log.read_text().splitlines()[0] == "epoch,lr,L_task,L_con,L_reg,total"


def test_path1_has_no_consistency(tiny):
    mc, ds = tiny
    hist = train(LIMSSR(replace(mc, path1_only=True)), ds, TrainConfig(epochs=1))
    assert hist[0]["con"] == 0.0


def test_without_metric_reg(tiny):
    mc, ds = tiny
    hist = train(LIMSSR(mc), ds, TrainConfig(epochs=1, use_metric_reg=False))
    assert hist[0]["reg"] == 0.0
    # fusion-token embeddings still train through the task path
    assert hist[0]["total"] == pytest.approx(10 * hist[0]["task"] + hist[0]["con"])


def test_non_finite_loss_aborts(tiny):
    mc, ds = tiny
    model = LIMSSR(mc)
    model.mda.lambda_syn.data[...] = np.inf
    with pytest.raises(NonFiniteTrainingError, match="epoch 0 batch 0"), np.errstate(invalid="ignore"):
        train(model, ds, TrainConfig(epochs=1))


def test_suites():
    rows = suite_rows("mda", _mc(), TrainConfig())
    assert [r[0] for r in rows] == ["full", "path1_only", "path2_only", "simple_average"]
    assert list(SUITES["removals"]) == ["full", "wo_lmrf", "wo_pcmi", "wo_con", "wo_reg"]
    with pytest.raises(KeyError):
        suite_rows("nope", _mc(), TrainConfig())


def _mc():
    from limssr.model import ModelConfig

    return ModelConfig()


@pytest.mark.slow
def test_loss_decreases_default_config(removal_suite):
    results, _ = removal_suite
    for seed, res in results["full"].items():
        totals = [h["total"] for h in res.history]
        k = max(1, len(totals) // 10)
        assert np.mean(totals[-k:]) < np.mean(totals[:k]), seed
