import numpy as np
import pytest

from tplab import nnet, trainer
from tplab.objective import LossCfg
from tplab.streamgen import FrameSet
from tplab.trainer import TrainCfg


def _sets(bundle):
    return (FrameSet.from_drives(bundle.initial_labeled), FrameSet.from_drives(bundle.val),
            FrameSet.from_drives(bundle.test))


def _arch(bundle):
    return nnet.ArchSpec(bundle.meta.feature_dim, bundle.meta.n_classes, (16, 16, 8), lossmod_mid_dim=4)


def test_evaluate_constant_predictor():
    m = nnet.init_model(nnet.ArchSpec(2, 3, (2,)), 0)
    m.params["Wout"][:] = 0
    m.params["bout"][:] = [0, 1, 0]
    y = np.array([1] * 3 + [0] * 7)
    fs = FrameSet(np.zeros((10, 2)), y, np.arange(10.0), np.full(10, "d", dtype=object), np.arange(10))
    assert trainer.evaluate(m, fs) == pytest.approx(0.3)
    with pytest.raises(ValueError):
        trainer.evaluate(m, FrameSet.empty(2))


def test_evaluate_ties_go_to_lowest_class():
    m = nnet.init_model(nnet.ArchSpec(2, 3, (2,)), 0)
    m.params["Wout"][:] = 0
    m.params["bout"][:] = 0
    fs = FrameSet(np.zeros((2, 2)), np.array([0, 1]), np.arange(2.0), np.full(2, "d", dtype=object), np.arange(2))
    assert trainer.evaluate(m, fs) == 0.5


def test_two_phase_history_and_restore(small_bundle):
    lab, val, _ = _sets(small_bundle)
    cfg = TrainCfg(lr=0.03, patience=5, max_epochs=200)
    model, hist = trainer.train(lab, val, cfg, arch=_arch(small_bundle))
    assert hist.detach_epoch is not None
    assert hist.best_epoch <= hist.stopped_epoch
    accs = hist.val_accuracy
    assert accs[hist.best_epoch - 1] == max(accs)
    assert trainer.evaluate(model, val) == pytest.approx(max(accs), abs=1e-12)
    phases = [e[3] for e in hist.epochs]
    assert phases.count(1) == hist.detach_epoch
    for ph in (1, 2):
        ep = [e for e in hist.epochs if e[3] == ph]
        best = max(range(len(ep)), key=lambda i: (ep[i][2], -i))
        assert len(ep) - 1 - best <= cfg.patience


def test_never_detach(small_bundle):
    lab, val, _ = _sets(small_bundle)
    _, hist = trainer.train(lab, val, TrainCfg(lr=0.03, patience=3, detach_schedule="never"),
                            arch=_arch(small_bundle))
    assert hist.detach_epoch is None
    assert {e[3] for e in hist.epochs} == {1}


def test_patience_one_strictly_decreasing(monkeypatch, small_bundle):
    lab, val, _ = _sets(small_bundle)
    seq = iter([0.9, 0.8, 0.7, 0.6, 0.5, 0.4])
    monkeypatch.setattr(trainer, "evaluate", lambda m, f: next(seq))
    model, hist = trainer.train(lab, val, TrainCfg(patience=1), arch=_arch(small_bundle))
    # phase 1 stops at epoch 2, phase 2 at its second epoch (epoch 4)
    assert hist.detach_epoch == 2
    assert hist.stopped_epoch == 4
    assert hist.best_epoch == 1


def test_deterministic_checkpoint(small_bundle):
    lab, val, _ = _sets(small_bundle)
    cfg = TrainCfg(lr=0.03, patience=3, max_epochs=20, seed=9)
    a, ha = trainer.train(lab, val, cfg, arch=_arch(small_bundle))
    b, hb = trainer.train(lab, val, cfg, arch=_arch(small_bundle))
    assert nnet.checkpoint_bytes(a) == nnet.checkpoint_bytes(b)
    assert ha.to_csv() == hb.to_csv()
    assert ha.to_csv().splitlines()[0] == "epoch,train_loss,val_acc,phase"


def test_continue_training_does_not_mutate_input(small_bundle):
    lab, val, _ = _sets(small_bundle)
    cfg = TrainCfg(lr=0.03, patience=2, max_epochs=5)
    m, _ = trainer.train(lab, val, cfg, arch=_arch(small_bundle))
    before = nnet.checkpoint_bytes(m)
    trainer.train(lab, val, cfg, model=m)
    assert nnet.checkpoint_bytes(m) == before


def test_preconditions(small_bundle):
    lab, val, _ = _sets(small_bundle)
    with pytest.raises(ValueError):
        trainer.train(lab.take([0]), val, TrainCfg(), arch=_arch(small_bundle))
    with pytest.raises(ValueError):
        trainer.train(lab, FrameSet.empty(8), TrainCfg(), arch=_arch(small_bundle))
    with pytest.raises(ValueError):
        TrainCfg(batch_size=3)


def test_nonfinite_loss_aborts(small_bundle):
    lab, val, _ = _sets(small_bundle)
    with pytest.raises(trainer.TrainingAborted) as e:
        trainer.train(lab, val, TrainCfg(lr=1e6, momentum=0.99), arch=_arch(small_bundle))
    assert e.value.epoch >= 1 and e.value.batch >= 0


def test_full_reference_accuracy_on_default_bundle(default_bundle):
    from tplab import rng as rngmod

    full = FrameSet.from_drives([*default_bundle.initial_labeled, *default_bundle.unlabeled]).canonical()
    _, val, test = _sets(default_bundle)
    cfg = TrainCfg(lr=0.03, loss_cfg=LossCfg(eta=0.0), seed=rngmod.child_seed(1, rngmod.TRAIN))
    model, _ = trainer.train(full, val, cfg, arch=nnet.ArchSpec(8, 4))
    assert trainer.evaluate(model, test) >= 0.9
