import numpy as np
import pytest

from mtmdseg.losses import ce_loss, one_hot
from mtmdseg.network import (ANKLE, REFERENCE_ARCH, SHOULDER, ArchConfig, build_model, load_checkpoint,
                             save_checkpoint)
from mtmdseg.optim import Adam
from mtmdseg.tensor import ShapeError, Tensor

DOMAINS = [ANKLE, SHOULDER]
SMALL = ArchConfig(base_width=4, depth=2, input_size=16)


def rand_x(seed, n=2, size=16, loc=0.0):
    return Tensor(np.random.default_rng(seed).normal(loc, 1.0, size=(n, 1, size, size)).astype(np.float32))


@pytest.mark.parametrize("scheme", ["base", "joint", "dsl"])
def test_output_is_a_distribution_with_domain_channels(scheme):
    model = build_model(scheme, DOMAINS, SMALL, seed=0)
    for k, d in enumerate(DOMAINS):
        for train in (True, False):
            p = model.predict(rand_x(k).data, k) if not train else model.domain_probs(
                model.forward(rand_x(k), k, train=True).data, k)
            assert p.shape == (2, d.num_classes, 16, 16)
        full = model.forward(rand_x(k), k, train=True).data
        np.testing.assert_allclose(full.sum(axis=1), 1.0, atol=1e-5)


def test_dsbn_makes_domains_differ():
    model = build_model("dsl", DOMAINS, SMALL, seed=0)
    for _ in range(3):  # running statistics from shifted inputs
        model.forward(rand_x(1, 4, loc=0.0), 0, train=True)
        model.forward(rand_x(2, 4, loc=5.0), 1, train=True)
    x = rand_x(3)
    a = model.forward(x, 0, train=False).data[:, :3]
    b = model.forward(x, 1, train=False).data[:, :3]
    assert np.linalg.norm(a - b) > 0


def test_fresh_network_is_close_to_uniform():
    model = build_model("dsl", DOMAINS, ArchConfig(), seed=0)
    for k, d in enumerate(DOMAINS):
        p = model.forward(rand_x(k, 4, 64), k, train=True).data
        mean = p.mean(axis=(0, 2, 3))
        assert np.all(np.abs(mean - 1 / d.num_classes) < 0.2), mean


def test_embedding_lengths():
    assert ArchConfig(base_width=8).embedding_dim == 128
    model = build_model("dsl", DOMAINS, ArchConfig(), seed=0)
    assert model.embed(rand_x(0, 2, 64), 0).shape == (2, 128)
    ref = build_model("dsl", DOMAINS, REFERENCE_ARCH, seed=0)
    assert ref.embed(rand_x(0, 1, 256), 1).shape == (1, 512)


def test_constant_input_embedding_is_shift_invariant():
    model = build_model("dsl", DOMAINS, SMALL, seed=0)
    x = np.full((1, 1, 16, 16), 0.7, dtype=np.float32)
    a = model.embed(Tensor(x), 0).data
    b = model.embed(Tensor(np.roll(x, (3, 5), axis=(2, 3))), 0).data
    assert a.tobytes() == b.tobytes()


def test_parameter_count_audit():
    joint = build_model("joint", DOMAINS, SMALL)
    dsl = build_model("dsl", DOMAINS, SMALL)
    assert dsl.num_bn_parameters() == 2 * joint.num_bn_parameters()
    assert [w.shape[0] for w, _ in joint.nets[0].heads] == [1 + 3 + 2]
    assert [w.shape[0] for w, _ in dsl.nets[0].heads] == [4, 3]
    assert len(build_model("base", DOMAINS, SMALL).nets) == 2
    counts = {s: build_model(s, [ANKLE], SMALL).num_parameters() for s in ("base", "joint", "dsl")}
    assert len(set(counts.values())) == 1


def test_joint_routes_partition_the_union_head():
    joint = build_model("joint", DOMAINS, SMALL)
    assert joint.routes[0].channels == [0, 1, 2, 3]
    assert joint.routes[1].channels == [0, 4, 5]


def test_initialization():
    model = build_model("dsl", DOMAINS, SMALL, seed=0)
    net = model.nets[0]
    for name, t in net.shared.items():
        if name.endswith(".b"):
            assert not t.data.any()
        else:
            fan_in = np.prod(t.shape[1:]) if not name.startswith("up") else t.shape[0]
            assert np.abs(t.data).max() <= np.sqrt(6 / fan_in) + 1e-7


def test_shared_storage_and_domain_isolation():
    model = build_model("dsl", DOMAINS, SMALL, seed=0)
    net = model.nets[0]
    assert model.nets[model.routes[0].net] is model.nets[model.routes[1].net]
    theta_before = {k: t.data.copy() for k, t in net.shared.items()}
    own1 = [p.data.copy() for layer in net.bns.values() for p in layer.parameters(1)] + \
        [p.data.copy() for p in net.heads[1]]
    stats1 = [(l.running_mean[1].copy(), l.running_var[1].copy()) for l in net.bns.values()]

    opt = Adam(model.parameters(0), lr=1e-2)
    x = rand_x(0, 2)
    y = one_hot(np.random.default_rng(0).integers(0, 4, size=(2, 16, 16)), 4)
    ce_loss([model.forward(x, 0)], [y]).backward()
    opt.step()

    assert any(not np.array_equal(theta_before[k], t.data) for k, t in net.shared.items())
    after1 = [p.data for layer in net.bns.values() for p in layer.parameters(1)] + [p.data for p in net.heads[1]]
    for a, b in zip(own1, after1):
        assert a.tobytes() == b.tobytes()
    for (m, v), l in zip(stats1, net.bns.values()):
        assert m.tobytes() == l.running_mean[1].tobytes() and v.tobytes() == l.running_var[1].tobytes()


def test_embedding_depends_on_encoder_only():
    model = build_model("dsl", DOMAINS, SMALL, seed=0)
    x = rand_x(5)
    before = model.embed(x, 1).data.copy()
    net = model.nets[0]
    rng = np.random.default_rng(1)
    for name, t in net.shared.items():
        if name.startswith(("up", "dec")):
            t.data += rng.normal(size=t.shape).astype(t.dtype)
    for w, b in net.heads:
        w.data += 1.0
    for name, layer in net.bns.items():
        if name.startswith("dec"):
            layer.gamma[1].data *= 3
    assert model.embed(x, 1).data.tobytes() == before.tobytes()


def test_errors():
    model = build_model("dsl", DOMAINS, SMALL)
    with pytest.raises(ShapeError):
        model.forward(rand_x(0, 1, 32), 0)
    with pytest.raises(IndexError):
        model.forward(rand_x(0), 2)
    with pytest.raises(ValueError):
        build_model("dsl", [], SMALL)
    with pytest.raises(ValueError):
        build_model("shared", DOMAINS, SMALL)
    with pytest.raises(ValueError):
        ArchConfig(input_size=20, depth=4)


@pytest.mark.parametrize("scheme", ["base", "joint", "dsl"])
def test_checkpoint_round_trip(tmp_path, scheme):
    model = build_model(scheme, DOMAINS, SMALL, seed=3)
    model.forward(rand_x(0, 4), 0, train=True)  # non-default running statistics
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path, {"note": "x"})
    loaded = load_checkpoint(path)
    assert loaded.scheme == scheme and loaded.meta["note"] == "x"
    x = rand_x(9).data
    for k in range(2):
        assert model.predict(x, k).tobytes() == loaded.predict(x, k).tobytes()


def test_checkpoint_layout_and_corruption(tmp_path):
    import json
    import struct
    model = build_model("dsl", DOMAINS, SMALL)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    raw = path.read_bytes()
    (hlen,) = struct.unpack_from("<I", raw, 8)
    header = json.loads(raw[12:12 + hlen])
    n_floats = sum(int(np.prod(b["shape"])) for b in header["blocks"])
    assert len(raw) == 12 + hlen + 4 * n_floats
    assert header["arch"]["base_width"] == 4 and header["scheme"] == "dsl"
    first = header["blocks"][0]
    np.testing.assert_array_equal(
        np.frombuffer(raw, "<f4", int(np.prod(first["shape"])), 12 + hlen).reshape(first["shape"]),
        model.nets[0].shared["enc0.conv0.w"].data)
    path.write_bytes(raw[:-4])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(path)
    path.write_bytes(b"junk" + raw)
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_base_split_gives_independent_models():
    model = build_model("base", DOMAINS, SMALL, seed=0)
    a, b = model.split()
    assert a.nets[0] is not b.nets[0]
    assert not set(map(id, a.parameters())) & set(map(id, b.parameters()))
