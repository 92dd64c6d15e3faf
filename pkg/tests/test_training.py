import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_config
from domino.config import TrainConfig, variant_overrides
from domino.data import build_dataset
from domino.errors import ConfigurationError, ContractViolation, NonFiniteLossError
from domino.model import build_model, images_to_tensor
from domino.training import (
    class_weights,
    class_weights_from_counts,
    encoder_digest,
    make_optimizer,
    poly_lr,
    train_loop,
    train_step,
    weighted_cross_entropy,
)


def test_class_weights_example():
    # frequencies 0.9 / 0.1 -> raw 1.111 / 10 -> mean-normalised
    np.testing.assert_allclose(class_weights_from_counts([900, 100]), [0.2, 1.8], atol=1e-12)


def test_class_weights_clamped():
    w = class_weights_from_counts([10**6, 1, 1, 10**6])
    assert w.max() / w.min() <= 100 + 1e-9
    assert w.mean() == pytest.approx(1.0)


def test_missing_class_named():
    with pytest.raises(ConfigurationError, match="class 2"):
        class_weights_from_counts([5, 5, 0])


def test_class_weights_from_dataset(tiny):
    cfg = tiny()
    ds = build_dataset("train_source", cfg)
    counts = sum(np.bincount(s.labels.ravel(), minlength=3) for s in ds)
    np.testing.assert_allclose(class_weights(ds, 3), class_weights_from_counts(counts))


def test_uniform_logits_loss_is_log_k():
    logits = torch.zeros(2, 4, 3, 3)
    labels = torch.randint(0, 4, (2, 3, 3))
    assert float(weighted_cross_entropy(logits, labels, np.ones(4))) == pytest.approx(math.log(4), abs=1e-6)
    assert float(weighted_cross_entropy(logits, labels, np.ones(4))) == pytest.approx(1.3863, abs=1e-4)


def test_confident_correct_loss_is_small():
    labels = torch.randint(0, 3, (1, 4, 4))
    logits = torch.nn.functional.one_hot(labels, 3).permute(0, 3, 1, 2).float() * 20
    assert float(weighted_cross_entropy(logits, labels, np.ones(3))) < 1e-3


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 1000), c=st.floats(1e-3, 1e3))
def test_weight_rescale_invariance(seed, c):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64)
    labels = torch.randint(0, 3, (2, 4, 4), generator=g)
    w = np.random.default_rng(seed).uniform(0.1, 3, 3)
    a = weighted_cross_entropy(logits, labels, w)
    b = weighted_cross_entropy(logits, labels, w * c)
    assert abs(float(a - b)) < 1e-12


def test_loss_contract_errors():
    with pytest.raises(ContractViolation):
        weighted_cross_entropy(torch.zeros(1, 3, 2, 2), torch.full((1, 2, 2), 3), np.ones(3))
    with pytest.raises(ContractViolation):
        weighted_cross_entropy(torch.zeros(1, 3, 2, 2), torch.zeros(1, 2, 3), np.ones(3))
    with pytest.raises(ContractViolation):
        weighted_cross_entropy(torch.zeros(1, 3, 2, 2), torch.zeros(1, 2, 2), np.array([1.0, 0.0, 1.0]))


def test_poly_lr_values():
    s = TrainConfig(total_iters=100, base_lr=1e-3)
    assert poly_lr(s, 0) == 1e-3
    assert poly_lr(s, 50) == pytest.approx(1e-3 * 0.5**0.9)
    assert poly_lr(s, 100) == 0.0
    with pytest.raises(ContractViolation):
        poly_lr(s, 101)


@settings(max_examples=30, deadline=None)
@given(total=st.integers(1, 5000), power=st.floats(0.1, 3.0))
def test_poly_lr_monotone(total, power):
    s = TrainConfig(total_iters=total, base_lr=0.01, poly_power=power)
    lrs = [poly_lr(s, t) for t in range(0, total + 1, max(1, total // 50))] + [poly_lr(s, total)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert lrs[0] == 0.01 and lrs[-1] == 0.0


def _tiny_step_setup(variant="baseline", **train):
    cfg = tiny_config(model=variant_overrides(variant), train=train)
    model = build_model(cfg, 0)
    ds = build_dataset("train_source", cfg)[:4]
    x = images_to_tensor([s.image for s in ds])
    y = torch.from_numpy(np.stack([s.labels for s in ds]).astype(np.int64))
    return cfg, model, x, y


def test_zero_gradient_step_only_decays():
    cfg, model, _, _ = _tiny_step_setup(weight_decay=0.1)
    opt = make_optimizer(model, cfg.train)
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    for p in model.parameters():
        p.grad = torch.zeros_like(p)
    lr = poly_lr(cfg.train, 0)
    for g in opt.param_groups:
        g["lr"] = lr
    opt.step()
    for n, p in model.named_parameters():
        torch.testing.assert_close(p.detach(), before[n] * (1 - lr * 0.1), rtol=0, atol=1e-7)


def test_train_step_rejects_out_of_range_iteration():
    cfg, model, x, y = _tiny_step_setup()
    opt = make_optimizer(model, cfg.train)
    with pytest.raises(ContractViolation):
        train_step(model, opt, (x, y, None), cfg.train, cfg.train.total_iters, np.ones(3))


def test_non_finite_loss_reports_state():
    cfg, model, x, y = _tiny_step_setup()
    opt = make_optimizer(model, cfg.train)
    with torch.no_grad():
        model.head.bias.fill_(float("nan"))
    with pytest.raises(NonFiniteLossError) as info:
        train_step(model, opt, (x, y, None), cfg.train, 0, np.ones(3))
    assert info.value.state["iter"] == 0
    assert info.value.state["param_finite"]["head.bias"] is False


def test_overfits_small_set():
    cfg, model, _, _ = _tiny_step_setup("domino-sub", total_iters=200, base_lr=1e-2)
    from domino.training import make_embedder

    ds = build_dataset("train_source", cfg)[:16]
    emb = make_embedder(cfg)
    x = images_to_tensor([s.image for s in ds])
    y = torch.from_numpy(np.stack([s.labels for s in ds]).astype(np.int64))
    w = torch.from_numpy(np.stack([emb(s.image)[1] for s in ds]).astype(np.float32))
    weights = class_weights(ds, 3)
    opt = make_optimizer(model, cfg.train)
    with torch.no_grad():
        initial = float(weighted_cross_entropy(model(x, w), y, weights))
    for t in range(200):
        train_step(model, opt, (x, y, w), cfg.train, t, weights)
    with torch.no_grad():
        final = float(weighted_cross_entropy(model(x, w), y, weights))
    assert final < 0.1 * initial, (initial, final)


def test_train_loop_is_deterministic(tiny):
    cfg = tiny(model=variant_overrides("domino-sub"))
    a, b = train_loop(cfg, seed=3), train_loop(cfg, seed=3)
    assert a.checkpoint == b.checkpoint
    assert a.records == b.records
    assert train_loop(cfg, seed=4).checkpoint != a.checkpoint


def test_zero_iterations_returns_initialisation(tiny):
    cfg = tiny(train={"total_iters": 0})
    result = train_loop(cfg, seed=2)
    init = build_model(cfg, 2).state_dict()
    assert all(torch.equal(v, init[k]) for k, v in result.model.state_dict().items())
    assert result.report is not None


def test_frozen_loop_attests_encoder(tiny):
    cfg = tiny(model=variant_overrides("frozen"))
    result = train_loop(cfg, seed=0)
    init = build_model(cfg, 0)
    assert encoder_digest(result.model) == encoder_digest(init)
    attest = [r for r in result.records if "frozen_attestation" in r]
    assert [r["iter"] for r in attest] == [2, 4, 5]
    assert all(r["frozen_attestation"]["unchanged"] for r in attest)


def test_loop_log_schedule_and_outputs(tiny, tmp_path):
    cfg = tiny()
    result = train_loop(cfg, seed=0, out_dir=tmp_path)
    iters = [r["iter"] for r in result.records if "split_metrics" not in r]
    assert iters == [1, 2, 4, 5]
    final = result.records[-1]["split_metrics"]
    assert set(final) == {"val_source_miou", "val_target_miou", "miou_percent"}
    assert {p.name for p in tmp_path.iterdir()} == {"checkpoint.bin", "metrics.jsonl", "config.json", "report.json"}


def test_synthetic_only_and_mixed_runs(tiny):
    for frac in (0.0, 0.5):
        result = train_loop(tiny(data={"real_fraction": frac}), seed=0)
        assert np.isfinite(result.records[-2]["loss"])
