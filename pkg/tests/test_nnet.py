import numpy as np
import pytest

from conftest import small_model
from oracles import fd_grads, random_grad_instance, rel_err
from tplab import nnet, objective
from tplab.objective import LossCfg


def test_init_deterministic():
    a, b = small_model(seed=4), small_model(seed=4)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
        assert not a.velocity[k].any()


def test_empty_hidden_dims_rejected():
    with pytest.raises(ValueError):
        nnet.init_model(nnet.ArchSpec(3, 2, ()), 0)


def test_zero_input_zero_bias_gives_equal_logits():
    m = small_model()
    for k in m.params:
        if k.startswith("b"):
            m.params[k][:] = 0
    logits = nnet.forward(m, np.zeros((1, 4))).logits
    assert np.all(logits == logits[0, 0])


def test_zero_head_gives_uniform_softmax():
    m = small_model(n_classes=5)
    m.params["Wout"][:] = 0
    m.params["bout"][:] = 0
    np.testing.assert_allclose(nnet.predict_proba(m, np.ones((3, 4))), 0.2)


def test_dropout_zero_train_equals_eval(rng):
    m = small_model(dropout_p=0.0)
    x = rng.normal(size=(5, 4))
    np.testing.assert_array_equal(nnet.forward(m, x, train=True, rng=rng).logits, nnet.forward(m, x).logits)


def test_eval_forward_deterministic(rng):
    m = small_model()
    x = rng.normal(size=(5, 4))
    a, b = nnet.forward(m, x), nnet.forward(m, x)
    np.testing.assert_array_equal(a.logits, b.logits)
    np.testing.assert_array_equal(a.predicted_loss, b.predicted_loss)
    np.testing.assert_array_equal(a.latent, a.block_activations[-1])
    np.testing.assert_array_equal(nnet.latent(m, x), a.latent)


def test_nan_names_block():
    m = small_model()
    m.params["W1"][0, 0] = np.nan
    with pytest.raises(FloatingPointError, match="block 1"):
        nnet.forward(m, np.ones((2, 4)))


def test_mc_predict_properties(rng):
    m = small_model()
    x = rng.normal(size=(6, 4))
    p = nnet.mc_predict(m, x, 10, rng)
    assert p.shape == (10, 6, 3)
    np.testing.assert_allclose(p.sum(axis=2), 1.0, atol=1e-9)
    q = nnet.mc_predict(small_model(dropout_p=0.0), x, 10, rng)
    assert np.all(q == q[0])


def test_gradients_match_finite_differences():
    worst = 0.0
    for seed in range(15):
        model, x, y, cfg, masks, l = random_grad_instance(seed)
        grads = nnet.loss_and_grads(model, x, y, cfg, masks=masks)[3]
        num = fd_grads(model, x, y, cfg, masks, l)
        worst = max(worst, max(rel_err(grads[k], num[k]) for k in grads))
    assert worst < 1e-4


def test_detach_backbone_equals_ce_only(rng):
    model, x, y, cfg, masks, _ = random_grad_instance(3)
    det = nnet.loss_and_grads(model, x, y, cfg, detach=True, masks=masks)[3]
    ce = nnet.loss_and_grads(model, x, y, LossCfg(eta=0.0), masks=masks)[3]
    for k in model.backbone_names():
        np.testing.assert_array_equal(det[k], ce[k])
    full = nnet.loss_and_grads(model, x, y, cfg, masks=masks)[3]
    for k in model.module_names():
        np.testing.assert_array_equal(det[k], full[k])


def test_eta_zero_matches_ce_gradient_and_zero_module_grads():
    model, x, y, cfg, masks, _ = random_grad_instance(5)
    g = nnet.loss_and_grads(model, x, y, LossCfg(eta=0.0), masks=masks)[3]
    for k in model.module_names():
        assert not g[k].any()
    # CE-only numerical gradient on the head
    h = 1e-6
    W = model.params["Wout"]
    W[0, 0] += h
    fp = objective.cross_entropy(nnet.forward(model, x, train=True, masks=masks).logits, y).mean()
    W[0, 0] -= 2 * h
    fm = objective.cross_entropy(nnet.forward(model, x, train=True, masks=masks).logits, y).mean()
    W[0, 0] += h
    assert g["Wout"][0, 0] == pytest.approx((fp - fm) / (2 * h), rel=1e-5)


def test_odd_batch_rejected(rng):
    m = small_model()
    with pytest.raises(ValueError):
        nnet.loss_and_grads(m, rng.normal(size=(3, 4)), [0, 1, 2], LossCfg(), rng=rng)


def test_sgd_step_rules():
    m = small_model()
    w0 = m.params["W0"].copy()
    g = {k: np.ones_like(v) for k, v in m.params.items()}
    nnet.sgd_step(m, g, 0.0, 0.9)
    np.testing.assert_array_equal(m.params["W0"], w0)

    m = small_model()
    w0 = m.params["W0"].copy()
    nnet.sgd_step(m, g, 0.1, 0.0)
    np.testing.assert_allclose(m.params["W0"], w0 - 0.1)

    m = small_model()
    w0 = m.params["W0"].copy()
    nnet.sgd_step(m, g, 0.1, 0.9)
    nnet.sgd_step(m, g, 0.1, 0.9)
    np.testing.assert_allclose(m.params["W0"], w0 - 0.1 * (1 + 1.9), atol=1e-15)


def test_sgd_shape_mismatch():
    m = small_model()
    g = {k: np.ones_like(v) for k, v in m.params.items()}
    g["W0"] = np.ones((1, 1))
    with pytest.raises(ValueError, match="W0"):
        nnet.sgd_step(m, g, 0.1, 0.9)


def test_checkpoint_roundtrip_bit_exact(tmp_path, rng):
    m = small_model()
    g = {k: rng.normal(size=v.shape) for k, v in m.params.items()}
    nnet.sgd_step(m, g, 0.01, 0.9)
    nnet.save_model(m, tmp_path / "m.json")
    back = nnet.load_model(tmp_path / "m.json")
    assert back.arch == m.arch
    for k in m.params:
        assert back.params[k].tobytes() == m.params[k].tobytes()
        assert back.velocity[k].tobytes() == m.velocity[k].tobytes()
    assert nnet.checkpoint_bytes(back) == nnet.checkpoint_bytes(m)


def test_param_order_is_documented():
    arch = nnet.ArchSpec(3, 2, (4, 5))
    assert list(arch.param_shapes()) == ["W0", "b0", "W1", "b1", "Wout", "bout", "U0", "c0", "U1", "c1", "v", "v0"]


def test_latent_consecutive_frames_close(default_bundle):
    from tplab import trainer
    from tplab.streamgen import FrameSet

    arch = nnet.ArchSpec(8, 4)
    m, _ = trainer.train(FrameSet.from_drives(default_bundle.initial_labeled),
                         FrameSet.from_drives(default_bundle.val),
                         trainer.TrainCfg(lr=0.03, max_epochs=40, patience=10), arch=arch)
    d = default_bundle.unlabeled[0]
    z = nnet.latent(m, d.x)
    step = np.median(np.linalg.norm(np.diff(z, axis=0), axis=1))
    means = np.array([z[d.y == c].mean(axis=0) for c in range(4)])
    cross = np.median([np.linalg.norm(means[i] - means[j]) for i in range(4) for j in range(i + 1, 4)])
    assert step < cross
