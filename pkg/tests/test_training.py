import math

import numpy as np
import pytest

from atdt.nets import TaskNetwork, TransferNet
from atdt.scenegen import build_dataset
from atdt.tensor import ContractError, Tensor
from atdt.training import (
    DEPTH,
    SEG,
    TrainConfig,
    TrainingAborted,
    depth_loss,
    encode_all,
    evaluate,
    feature_loss,
    segmentation_loss,
    train_multitask,
    train_task_network,
    train_transfer,
    transfer_loss,
    write_records_csv,
)
from atdt.nets import MultiTaskNetwork


@pytest.fixture(scope="module")
def data():
    return build_dataset(24, 8, 8, seed=3)


def tiny_cfg(steps=30, **kw):
    return TrainConfig(steps=steps, batch_size=4, eval_every=max(steps, 1), eval_batch=8, **kw)


# ------------------------------------------------------------------ losses
def test_uniform_logits_cross_entropy():
    labels = np.random.default_rng(0).integers(0, 6, size=(2, 1, 4, 4))
    loss = segmentation_loss(Tensor(np.zeros((2, 6, 4, 4))), labels)
    assert loss.item() == pytest.approx(math.log(6), abs=1e-12)


def test_confident_logits_cross_entropy_vanishes():
    labels = np.array([[[[0, 1], [2, 1]]]])
    for margin, bound in ((5.0, 0.02), (20.0, 1e-7)):
        logits = np.zeros((1, 3, 2, 2))
        for i in range(2):
            for j in range(2):
                logits[0, labels[0, 0, i, j], i, j] = margin
        assert segmentation_loss(Tensor(logits), labels).item() < bound


def test_hand_cross_entropy_2x2():
    logits = np.array([[[[1.0, 0.0], [2.0, -1.0]], [[0.0, 3.0], [0.5, 0.5]]]])
    labels = np.array([[[[0, 1], [1, 0]]]])
    by_hand = []
    for i in range(2):
        for j in range(2):
            z = logits[0, :, i, j]
            by_hand.append(-(z[labels[0, 0, i, j]] - math.log(sum(math.exp(v) for v in z))))
    assert segmentation_loss(Tensor(logits), labels).item() == pytest.approx(sum(by_hand) / 4, abs=1e-12)


def test_segmentation_loss_rejects_bad_labels():
    with pytest.raises(ContractError):
        segmentation_loss(Tensor(np.zeros((1, 3, 2, 2))), np.full((1, 1, 2, 2), 3))


def test_depth_loss_examples():
    rng = np.random.default_rng(1)
    t = rng.uniform(size=(2, 1, 4, 4))
    assert depth_loss(Tensor(t), t).item() == 0.0
    assert depth_loss(Tensor(t + 0.1), t).item() == pytest.approx(0.1, abs=1e-12)
    mask = np.zeros_like(t)
    mask[..., :2] = 1
    corrupted = t.copy()
    corrupted[..., 2:] += 5.0
    clean = depth_loss(Tensor(t + 0.1), t, mask).item()
    assert depth_loss(Tensor(corrupted + 0.1), t, mask).item() == pytest.approx(clean, abs=1e-12)
    with pytest.raises(ContractError):
        depth_loss(Tensor(t), t, np.zeros_like(t))


def test_transfer_loss_examples():
    rng = np.random.default_rng(2)
    target = rng.normal(size=(2, 3, 4, 4))
    assert transfer_loss(Tensor(target), target).item() == 0.0
    assert transfer_loss(Tensor(target + 0.3), target).item() == pytest.approx(0.09, abs=1e-12)
    g = Tensor(rng.normal(size=target.shape), requires_grad=True)
    t = Tensor(target, requires_grad=True)
    transfer_loss(g, t).backward()
    np.testing.assert_allclose(g.grad, 2 * (g.data - target) / target.size, atol=1e-15)
    assert t.grad is None
    assert transfer_loss(Tensor(target + 1.0), target, "l2").item() == pytest.approx(math.sqrt(target.size))
    with pytest.raises(ContractError):
        transfer_loss(Tensor(target), target[:, :2])


# ------------------------------------------------------------------- loops
def test_zero_steps_is_noop(data):
    net = TaskNetwork(6, seed=0)
    before = net.state_dict()
    _, records = train_task_network(net, [data.A.train], SEG, tiny_cfg(0))
    assert records == []
    after = net.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_batch_size_one_rejected_with_batchnorm(data):
    with pytest.raises(ContractError):
        train_task_network(TaskNetwork(6), [data.A.train], SEG, TrainConfig(steps=1, batch_size=1))


def test_seed_determinism_and_loss_trend(data, tmp_path):
    runs = []
    for _ in range(2):
        net = TaskNetwork(1, seed=5)
        _, rec = train_task_network(net, [data.A.train, data.B.train], DEPTH, tiny_cfg(40, seed=9),
                                    val=data.B.val, checkpoint_dir=tmp_path / f"r{len(runs)}", tag="N1")
        runs.append(rec)
    assert [r.train_loss for r in runs[0]] == [r.train_loss for r in runs[1]]
    assert [r.step for r in runs[0]] == list(range(1, 41))
    losses = [r.train_loss for r in runs[0]]
    assert np.median(losses[-4:]) < np.median(losses[:4])
    assert runs[0][-1].val["abs_rel"] > 0
    assert (tmp_path / "r0" / "N1_step000040.ckpt").exists()
    write_records_csv(tmp_path / "curve.csv", runs[0])
    head = (tmp_path / "curve.csv").read_text().splitlines()[0]
    assert head.startswith("step,loss,abs_rel")


def test_nan_aborts_with_last_good_state(data, tmp_path):
    net = TaskNetwork(6, seed=0)
    train_task_network(net, [data.A.train], SEG, tiny_cfg(2), checkpoint_dir=tmp_path, tag="n")
    good = net.state_dict()
    bad = data.A.train
    poisoned = type(bad)(bad.images * np.nan, bad.depth, bad.labels, bad.valid, bad.seeds, bad.domain)
    with pytest.raises(TrainingAborted) as info:
        train_task_network(net, [poisoned], SEG, tiny_cfg(5), checkpoint_dir=tmp_path, tag="n")
    assert info.value.step == 1
    after = net.state_dict()
    assert all(np.array_equal(good[k], after[k]) for k in good)


def test_transfer_freezes_encoders(data):
    n1 = TaskNetwork(1, seed=1)
    n2 = TaskNetwork(6, seed=2)
    s1, s2 = n1.state_dict(), n2.state_dict()
    g = TransferNet(64, seed=3)
    train_transfer(g, n1, n2, data.A.train, tiny_cfg(10), level=4, val_a=data.A.val)
    for net, before in ((n1, s1), (n2, s2)):
        after = net.state_dict()
        assert all(np.array_equal(before[k], after[k]) for k in before)
        assert all(p.grad is None for p in net.parameters())


def test_transfer_reduces_held_out_loss(data):
    n1 = TaskNetwork(1, seed=1).eval()
    n2 = TaskNetwork(6, seed=2).eval()
    level = 3
    v1 = encode_all(n1, data.A.val.images, level)
    v2 = encode_all(n2, data.A.val.images, level)
    g = TransferNet(64, seed=4)
    initial = feature_loss(g, v1, v2)
    _, rec = train_transfer(g, n1, n2, data.A.train, tiny_cfg(150), level=level, val_a=data.A.val)
    assert rec[-1].val["transfer_loss"] < 0.5 * initial


def test_self_transfer_approaches_identity(data):
    n = TaskNetwork(6, seed=2).eval()
    level = 4
    v = encode_all(n, data.A.val.images, level)
    g = TransferNet(64, seed=4)
    initial = feature_loss(g, v, v)
    _, rec = train_transfer(g, n, n, data.A.train, tiny_cfg(300, lr=3e-3), level=level, val_a=data.A.val)
    assert rec[-1].val["transfer_loss"] < 0.05 * initial


def test_multitask_uses_only_a_for_second_task(data):
    net = MultiTaskNetwork(1, 6, seed=0)
    _, rec = train_multitask(net, [data.A.train, data.B.train], data.A.train, DEPTH, SEG, tiny_cfg(3))
    assert len(rec) == 3 and all(np.isfinite(r.train_loss) for r in rec)
    with pytest.raises(ContractError):
        train_multitask(net, [data.B.train, data.A.train], data.A.train, DEPTH, SEG, tiny_cfg(1))


def test_evaluate_keys(data):
    net = TaskNetwork(6, seed=0).eval()
    m = evaluate(SEG, net, data.A.test)
    assert {"miou", "acc", "iou_0", "iou_5"} <= set(m)
    d = evaluate(DEPTH, TaskNetwork(1, seed=0).eval(), data.A.test)
    assert set(d) == {"abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3"}
