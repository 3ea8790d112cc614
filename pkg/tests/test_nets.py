import numpy as np
import pytest

from ocreg import autodiff as ad
from ocreg.autodiff import Parameter, Tensor
from ocreg.errors import ConfigError, ContractError, FormatError, ShapeError
from ocreg.nets import (
    SGD,
    Backbone,
    Model,
    PrototypeHead,
    head_init,
    load_checkpoint,
    mlp_init,
    read_checkpoint,
    save_checkpoint,
    sgd_step,
)


def test_mlp_init_deterministic_and_shaped():
    a, b = mlp_init([4, 8, 3], 1), mlp_init([4, 8, 3], 1)
    assert [w.shape for w, _ in a.layers] == [(8, 4), (3, 8)]
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert pa.data.tobytes() == pb.data.tobytes()
    assert all(np.all(bias.data == 0) for _, bias in a.layers)


def test_mlp_init_seed_changes_weights():
    a, b = mlp_init([4, 8, 3], 1), mlp_init([4, 8, 3], 2)
    assert any(not np.array_equal(pa.data, pb.data) for pa, pb in zip(a.parameters(), b.parameters()))


def test_mlp_init_rejects_bad_dims():
    with pytest.raises(ConfigError):
        mlp_init([4, 0, 3], 0)
    with pytest.raises(ConfigError):
        mlp_init([4], 0)


def test_backbone_zero_and_identity():
    net = mlp_init([3, 5, 2], 0)
    for p in net.parameters():
        p.data[...] = 0.0
    assert np.all(net(Tensor(np.ones((4, 3)))).data == 0)

    eye = Backbone([(Parameter(np.eye(3), "w"), Parameter(np.zeros(3), "b"))])
    x = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_array_equal(eye(Tensor(x)).data, x)


def test_backbone_matches_hand_composition():
    net = mlp_init([6, 10, 7, 4], 3)
    x = np.random.default_rng(1).normal(size=(5, 6))
    h = x
    for i, (w, b) in enumerate(net.layers):
        h = h @ w.data.T + b.data
        if i < len(net.layers) - 1:
            h = np.maximum(h, 0.0)
    np.testing.assert_allclose(net(Tensor(x)).data, h, rtol=1e-12, atol=1e-12)


def test_backbone_shape_error():
    with pytest.raises(ShapeError):
        mlp_init([3, 2], 0)(Tensor(np.ones((2, 4))))


def test_head_zero_and_basis():
    head = head_init(7, 5, 0)
    logits = head(Tensor(np.zeros((3, 5)))).data
    assert np.all(logits == 0)
    np.testing.assert_allclose(np.exp(ad.log_softmax(Tensor(logits)).data), 1 / 7)

    basis = PrototypeHead(Parameter(np.eye(4), "p"))
    np.testing.assert_array_equal(basis(Tensor(np.eye(4)[[2]])).data, [[0, 0, 1, 0]])


def test_head_linearity_random_draws():
    rng = np.random.default_rng(5)
    head = head_init(6, 8, 1)
    for _ in range(1000):
        z1, z2 = rng.normal(size=(2, 3, 8))
        lam = rng.uniform()
        lhs = head(Tensor(lam * z1 + (1 - lam) * z2)).data
        rhs = lam * head(Tensor(z1)).data + (1 - lam) * head(Tensor(z2)).data
        assert np.max(np.abs(lhs - rhs)) <= 1e-12


def test_head_shape_error():
    with pytest.raises(ShapeError):
        head_init(3, 4, 0)(Tensor(np.ones((2, 5))))


def test_sgd_examples():
    p = Parameter(np.array([0.0]), "p")
    p.grad = np.array([1.0])
    sgd_step(SGD([p], lr=0.1, momentum=0.0), [p])
    np.testing.assert_allclose(p.data, [-0.1])

    q = Parameter(np.array([0.0]), "q")
    opt = SGD([q], lr=0.1, momentum=0.9)
    q.grad = np.array([1.0])
    opt.step()
    first = q.data.copy()
    opt.step()
    np.testing.assert_allclose(first - q.data, 1.9 * 0.1 * 1.0)

    r = Parameter(np.array([3.0, -1.0]), "r")
    r.grad = np.array([5.0, 5.0])
    SGD([r], lr=0.0).step()
    np.testing.assert_array_equal(r.data, [3.0, -1.0])


def test_sgd_weight_decay_and_missing_grad():
    p = Parameter(np.array([2.0]), "p")
    p.grad = np.array([0.0])
    SGD([p], lr=0.5, momentum=0.0, weight_decay=0.1).step()
    np.testing.assert_allclose(p.data, [2.0 - 0.5 * 0.2])
    p.grad = None
    with pytest.raises(ContractError):
        SGD([p], lr=0.1).step()


def test_sgd_step_decreases_quadratic():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = Parameter(rng.normal(size=5), "x")
        before = 0.5 * float(x.data @ x.data)
        ad.backward(ad.scalar_mul(0.5, ad.tsum(ad.mul(x, x))))
        SGD([x], lr=1e-3, momentum=0.9).step()
        assert 0.5 * float(x.data @ x.data) < before


def test_level_names_and_errors():
    m = Model.create([12, 8, 6, 4], 3, 0)
    assert m.level_names() == ["input", "hidden1", "hidden2", "repr"]
    assert m.level_index("penultimate") == 3
    with pytest.raises(ConfigError, match="valid names"):
        m.level_index("conv5")


def test_logits_from_every_level_matches_forward():
    m = Model.create([12, 8, 6, 4], 3, 0)
    x = m.prepare(np.random.default_rng(0).uniform(size=(5, 3, 2, 2)))
    full = m(x).data
    for level in m.level_names():
        np.testing.assert_allclose(m.logits_from(m.features(x, level), level).data, full, atol=1e-12)


def test_checkpoint_round_trip(tmp_path):
    m = Model.create([12, 8, 4], 5, 3)
    path = tmp_path / "checkpoint.bin"
    save_checkpoint(m, path)
    assert path.read_bytes()[:8] == b"OCRCKPT1"
    back = load_checkpoint(path)
    for name, value in m.state_dict().items():
        assert back.state_dict()[name].tobytes() == value.tobytes()
    save_checkpoint(back, tmp_path / "again.bin")
    assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()


def test_checkpoint_malformed(tmp_path):
    m = Model.create([12, 8, 4], 5, 3)
    path = tmp_path / "c.bin"
    save_checkpoint(m, path)
    raw = path.read_bytes()
    (tmp_path / "trunc.bin").write_bytes(raw[:-3])
    with pytest.raises(FormatError, match="truncated") as exc:
        read_checkpoint(tmp_path / "trunc.bin")
    assert exc.value.offset is not None
    (tmp_path / "magic.bin").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(FormatError, match="OCRCKPT1"):
        read_checkpoint(tmp_path / "magic.bin")
    (tmp_path / "empty.bin").write_bytes(b"OCRCKPT1")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "empty.bin")
