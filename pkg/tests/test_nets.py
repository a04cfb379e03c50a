import numpy as np
import pytest

from atdt import checkpoint
from atdt.gradcheck import max_rel_error
from atdt.nets import (
    LEVELS,
    STAGE_STRIDES,
    STAGE_WIDTHS,
    MultiTaskNetwork,
    TaskNetwork,
    TransferNet,
    decode,
    encode,
    feature_shape,
    transfer,
)
from atdt.tensor import ContractError, Tensor, no_grad, square, sum_all


@pytest.fixture(scope="module")
def x():
    return Tensor(np.random.default_rng(0).uniform(size=(2, 3, 64, 64)))


@pytest.fixture(scope="module")
def seg_net():
    return TaskNetwork(6, seed=1, name="N2").eval()


@pytest.mark.parametrize("level", LEVELS)
def test_feature_shapes(seg_net, x, level):
    with no_grad():
        f = encode(seg_net, x, level)
    s = STAGE_STRIDES[level - 1]
    assert f.shape == (2, STAGE_WIDTHS[level - 1], 64 // s, 64 // s)
    assert f.shape == feature_shape(level, 2, 64, 64)


def test_documented_shapes(seg_net, x):
    with no_grad():
        assert encode(seg_net, x, 4).shape == (2, 64, 8, 8)
        assert encode(seg_net, x, 1).shape == (2, 16, 32, 32)
        assert decode(seg_net, Tensor(np.zeros((1, 64, 8, 8))), 4).shape == (1, 6, 64, 64)
        depth = TaskNetwork(1, seed=2).eval()
        assert decode(depth, Tensor(np.zeros((1, 64, 8, 8))), 4).shape == (1, 1, 64, 64)


@pytest.mark.parametrize("level", LEVELS)
def test_compose_equals_forward(seg_net, x, level):
    with no_grad():
        np.testing.assert_array_equal(decode(seg_net, encode(seg_net, x, level), level).data, seg_net(x).data)


def test_eval_is_deterministic(seg_net, x):
    with no_grad():
        np.testing.assert_array_equal(encode(seg_net, x, 3).data, encode(seg_net, x, 3).data)


def test_non_square_and_bad_sizes(seg_net):
    with no_grad():
        assert seg_net(Tensor(np.zeros((1, 3, 32, 48)))).shape == (1, 6, 32, 48)
        with pytest.raises(ContractError):
            seg_net(Tensor(np.zeros((1, 3, 60, 64))))
        with pytest.raises(ContractError):
            encode(seg_net, Tensor(np.zeros((1, 3, 64, 64))), 5)
        with pytest.raises(ContractError):
            decode(seg_net, Tensor(np.zeros((1, 32, 8, 8))), 4)


def test_tasks_differ_only_in_head():
    seg = TaskNetwork(6, seed=0, name="N").state_dict()
    dep = TaskNetwork(1, seed=0, name="N").state_dict()
    assert seg.keys() == dep.keys()
    differing = {k for k in seg if seg[k].shape != dep[k].shape}
    assert differing == {"dec.head.w", "dec.head.b"}


def test_parameter_budget_and_names():
    net = TaskNetwork(6, name="N1")
    assert net.num_parameters() < 500_000
    names = [p.name for p in net.parameters()]
    assert len(set(names)) == len(names)
    assert "N1.enc.stage2.block1.conv1.w" in names
    assert all(n.startswith("N1.") for n in names)


def test_batchnorm_switch_keeps_architecture():
    with_bn = TaskNetwork(6, seed=0, use_batchnorm=True).state_dict()
    without = TaskNetwork(6, seed=0, use_batchnorm=False).state_dict()
    bn_keys = {k for k in with_bn if any(t in k for t in ("gamma", "beta", "running_"))}
    assert set(without) == set(with_bn) - bn_keys
    for k in without:
        assert without[k].shape == with_bn[k].shape


def test_state_round_trip_through_checkpoint(tmp_path, x):
    a = TaskNetwork(1, seed=3).eval()
    b = TaskNetwork(1, seed=4).eval()
    checkpoint.save(tmp_path / "a.ckpt", a.state_dict())
    b.load_state_dict(checkpoint.load(tmp_path / "a.ckpt"))
    with no_grad():
        np.testing.assert_array_equal(a(x).data, b(x).data)


def test_load_rejects_wrong_state():
    net = TaskNetwork(6)
    state = net.state_dict()
    state.pop("dec.head.b")
    with pytest.raises(ContractError):
        net.load_state_dict(state)
    with pytest.raises(ContractError):
        net.load_state_dict(TaskNetwork(1).state_dict())


# ---------------------------------------------------------------- transfer
@pytest.mark.parametrize("level", LEVELS)
def test_transfer_shape(level):
    c = STAGE_WIDTHS[level - 1]
    g = TransferNet(c, seed=0).eval()
    shape = feature_shape(level, 2, 64, 64)
    with no_grad():
        f = Tensor(np.random.default_rng(level).normal(size=shape))
        assert transfer(g, f).shape == shape
        b = g.bottleneck(f)
    assert b.shape[2:] == (shape[2] // 4, shape[3] // 4)
    assert b.shape[1] == 2 * c


def test_transfer_bottleneck_is_2x2_at_level4():
    g = TransferNet(64).eval()
    with no_grad():
        assert g.bottleneck(Tensor(np.zeros((1, 64, 8, 8)))).shape == (1, 128, 2, 2)


def test_transfer_rejects_wrong_input():
    g = TransferNet(64)
    with pytest.raises(ContractError):
        g(Tensor(np.zeros((1, 32, 8, 8))))
    with pytest.raises(ContractError):
        g(Tensor(np.zeros((1, 64, 6, 6))))


@pytest.mark.parametrize("seed", range(3))
def test_transfer_input_gradient(seed):
    rng = np.random.default_rng(seed)
    g = TransferNet(4, seed=seed)
    g.train()
    f = Tensor(rng.normal(size=(2, 4, 8, 8)), requires_grad=True)
    t = Tensor(rng.normal(size=(2, 4, 8, 8)))
    err = max_rel_error(lambda: sum_all(square(g(f) - t)), [f], rng, samples=40)
    assert err < 1e-4


# --------------------------------------------------------------- multitask
def test_multitask_shares_deepest_features(x):
    m = MultiTaskNetwork(1, 6, seed=0).eval()
    with no_grad():
        out1, out2 = m(x)
        f = m.enc.run(x, 0, 4)
        np.testing.assert_array_equal(m.dec1(f).data, out1.data)
        np.testing.assert_array_equal(m.dec2(f).data, out2.data)
    assert out1.shape == (2, 1, 64, 64) and out2.shape == (2, 6, 64, 64)
