import math

import numpy as np
import pytest

from sapool import tensor as T
from sapool.backbone import default_sap_configs, tiny_resnet
from sapool.data import Dataset, synth_nonlocal_dataset
from sapool.errors import NumericError
from sapool.nn import Linear, Module
from sapool.train import (
    REPORT_HEADER,
    SGD,
    OptimConfig,
    accuracy,
    evaluate,
    first_nonfinite_layer,
    lr_at,
    train,
)


def small_synth(n=64, seed=0):
    ds = synth_nonlocal_dataset(n, seed=seed)
    m, s = ds.fit_normalization()
    return ds.with_normalization(m, s)


def small_net(method="sap", seed=1, **kw):
    return tiny_resnet(method, s1=4, in_channels=1, num_classes=2, seed=seed, width=0.5, **kw)


def test_accuracy_examples(rng):
    labels = np.arange(10)
    assert accuracy(np.eye(10), labels) == 1.0
    y = np.array([0, 0, 1, 2, 0])
    assert accuracy(np.zeros((5, 3)), y) == pytest.approx(3 / 5)
    labels = np.repeat(np.arange(10), 100)
    acc = accuracy(rng.normal(size=(1000, 10)), labels)
    assert abs(acc - 0.1) <= 0.03


def test_lr_schedule():
    cfg = OptimConfig(lr=0.1)
    assert lr_at(0, 10, cfg) == pytest.approx(0.1)
    assert lr_at(5, 10, cfg) == pytest.approx(0.05)
    assert lr_at(3, 10, OptimConfig(lr=0.1, cosine=False)) == 0.1
    warm = OptimConfig(lr=0.1, warmup_steps=4)
    assert [lr_at(i, 10, warm) for i in range(4)] == pytest.approx([0.025, 0.05, 0.075, 0.1])


def test_zero_lr_leaves_parameters(f64):
    ds = small_synth(32)
    net = small_net("avg")
    before = {k: v.copy() for k, v in net.state_dict().items() if "running" not in k}
    report = train(net, ds, None, OptimConfig(lr=0.0, batch_size=32, weight_decay=5e-4), 3, seed=1)
    after = net.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    # one full batch per epoch and frozen weights: train-mode BN sees the same
    # samples each time, only their order (and so the summation order) changes
    assert max(report.losses) - min(report.losses) < 1e-12


class LinReg(Module):
    def __init__(self):
        super().__init__()
        self.fc = Linear(2, 1)

    def forward(self, x):
        return self.fc(x)


def test_single_sgd_step_matches_hand_derivation(f64):
    net = LinReg()
    net.fc.weight.data[:] = [[0.5, -1.0]]
    net.fc.bias.data[:] = [0.25]
    x = np.array([[1.0, 2.0], [3.0, -1.0]])
    y = np.array([[1.0], [0.0]])
    lr, wd = 0.1, 0.01
    pred = x @ np.array([0.5, -1.0]) + 0.25
    resid = pred - y[:, 0]
    # loss = mean(resid^2): dL/dw = 2/N * X^T r, dL/db = 2/N * sum r
    gw = 2 / 2 * x.T @ resid + wd * np.array([0.5, -1.0])
    gb = 2 / 2 * resid.sum() + wd * 0.25
    opt = SGD(net.parameters(), momentum=0.9, weight_decay=wd)
    diff = T.sub(net(T.Tensor(x)), T.Tensor(y))
    T.mean(T.mul(diff, diff)).backward()
    opt.step(lr)
    assert np.allclose(net.fc.weight.data[0], np.array([0.5, -1.0]) - lr * gw, atol=1e-14)
    assert np.allclose(net.fc.bias.data, 0.25 - lr * gb, atol=1e-14)
    # second step uses the heavy-ball buffer: buf = 0.9*g1 + g2
    assert np.allclose(opt.momentum_buffer(net.fc.weight)[0], gw)


def test_same_seed_same_losses():
    ds = small_synth(48)
    runs = []
    for _ in range(2):
        r = train(small_net(), ds, ds, OptimConfig(lr=0.02, batch_size=16), 2, seed=7)
        runs.append((r.losses, r.to_csv()))
    assert runs[0][0] == runs[1][0] and runs[0][1] == runs[1][1]


def test_report_csv_layout():
    ds = small_synth(16)
    r = train(small_net("avg"), ds, ds, OptimConfig(lr=0.01, batch_size=8), 1, seed=3)
    lines = r.to_csv().splitlines()
    assert lines[0] == ",".join(REPORT_HEADER) == "epoch,train_loss,train_acc,test_acc,wall_ms,peak_act_bytes,seed"
    fields = lines[1].split(",")
    assert fields[0] == "0" and fields[4] == "0" and fields[6] == "3" and int(fields[5]) > 0


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_fixed_batch_loss_decreases(seed):
    ds = small_synth(32, seed=seed)
    net = small_net("sap", seed=seed)
    opt = SGD(net.parameters(), momentum=0.9, weight_decay=5e-4)
    xb, yb = next(ds.batches(32, seed=seed))
    losses = []
    for _ in range(6):
        loss = T.cross_entropy(net(T.Tensor(xb)), yb)
        losses.append(float(loss.data))
        opt.zero_grad()
        loss.backward()
        opt.step(0.01)
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_nonfinite_loss_names_layer():
    ds = small_synth(16)
    net = small_net("avg")
    net.stage2.blocks[0].conv1.weight.data[0, 0, 0, 0] = np.inf
    with pytest.raises(NumericError, match="stage2.block0.conv1"):
        train(net, ds, None, OptimConfig(lr=0.01, batch_size=8), 1, seed=1)


def test_first_nonfinite_layer_from_activation():
    net = small_net("sap", sap_configs=default_sap_configs(4, sigmoid=False, bn2=False))
    net.eval()
    pool = net.stem_pool
    pool.restore_conv.bias.data[:] = 1e4
    x = np.random.default_rng(0).normal(size=(2, 1, 32, 32)).astype(np.float32)
    # the logits stay finite; exp overflows inside the pooling layer itself
    assert first_nonfinite_layer(net, x) == "stem_pool"


def test_evaluate_restores_mode():
    ds = small_synth(8)
    net = small_net("max").train()
    acc = evaluate(net, ds)
    assert 0.0 <= acc <= 1.0 and net.training
