import numpy as np
import pytest
from hypothesis import given, strategies as st

from coordemb import tensor as T
from coordemb.layers import (ConvSpec, CoordConvLayer, CoordEmbLayer, ModelSpec, build_model,
                             coord_conv_forward, coord_embed_forward, coord_grid, denormalize_coord,
                             normalize_coord)
from coordemb.tensor import ShapeError, Tensor
from coordemb.training import RMSpropState, TrainConfig, rmsprop_step


def small_spec(variant, h=8, w=8, c=3):
    return ModelSpec(variant, h, w, c, (ConvSpec(3, c, 4), ConvSpec(3, 4, 4, stride=2),
                                        ConvSpec(1, 4, 2, relu=False)))


def test_normalize_coord_examples():
    assert normalize_coord(0, 5) == -1.0
    assert normalize_coord(2, 5) == 0.0
    assert normalize_coord(3, 5) == 0.5
    assert normalize_coord(4, 5) == 1.0
    assert normalize_coord(0, 1) == 0.0
    for bad in (-1, 5):
        with pytest.raises(IndexError):
            normalize_coord(bad, 5)


@given(st.integers(1, 64))
def test_normalize_monotone_and_invertible(n):
    vals = [normalize_coord(i, n) for i in range(n)]
    assert all(-1.0 <= v <= 1.0 for v in vals)
    assert all(a < b for a, b in zip(vals, vals[1:]))
    assert np.allclose(denormalize_coord(np.array(vals), n), np.arange(n), rtol=0, atol=1e-12)


def test_coord_grid_examples():
    x, y = coord_grid(1, 3)
    assert x[..., 0].tolist() == [[-1.0, 0.0, 1.0]]
    assert y[..., 0].tolist() == [[0.0, 0.0, 0.0]]
    x, y = coord_grid(2, 2)
    assert x[..., 0].tolist() == [[-1.0, 1.0], [-1.0, 1.0]]
    assert y[..., 0].tolist() == [[-1.0, -1.0], [1.0, 1.0]]
    x, y = coord_grid(1, 1)
    assert x.tolist() == [[[0.0]]] and y.tolist() == [[[0.0]]]


@given(st.integers(1, 20), st.integers(1, 20))
def test_coordemb_init_invariants(h, w):
    layer = CoordEmbLayer(h, w)
    x, y = layer.x_embed.data, layer.y_embed.data
    assert x.shape == y.shape == (h, w, 1)
    assert np.all(np.abs(x) <= 1) and np.all(np.abs(y) <= 1)
    assert np.all(x == x[:1])  # constant down each column
    assert np.all(y == y[:, :1])  # constant along each row


def test_coord_embed_forward_examples():
    layer = CoordEmbLayer(3, 4)
    layer.x_embed = Tensor(np.zeros((3, 4, 1)), requires_grad=True)
    layer.y_embed = Tensor(np.zeros((3, 4, 1)), requires_grad=True)
    assert np.all(coord_embed_forward(layer, Tensor(np.zeros((3, 4, 2)))).data == 0)
    layer.x_embed = Tensor(np.ones((3, 4, 1)), requires_grad=True)
    layer.y_embed = Tensor(np.ones((3, 4, 1)), requires_grad=True)
    assert np.all(coord_embed_forward(layer, Tensor(np.ones((3, 4, 2)))).data == 1)


def test_coord_embed_hand_example():
    out = coord_embed_forward(CoordEmbLayer(2, 2), Tensor(np.zeros((2, 2, 1)))).data
    assert abs(out[0, 0, 0] - (-2 / 3)) <= 1e-15
    assert abs(out[1, 1, 0] - 2 / 3) <= 1e-15
    assert abs(out[0, 1, 0]) <= 1e-15 and abs(out[1, 0, 0]) <= 1e-15


def test_coord_embed_broadcasts_and_checks_shape():
    rng = np.random.default_rng(0)
    img = rng.uniform(-1, 1, size=(4, 5, 3))
    layer = CoordEmbLayer(4, 5)
    out = coord_embed_forward(layer, Tensor(img)).data
    x, y = coord_grid(4, 5)
    assert np.allclose(out, (img + x + y) / 3, rtol=0, atol=1e-15)
    assert np.all(np.abs(out) <= 1)
    with pytest.raises(ShapeError) as exc:
        coord_embed_forward(layer, Tensor(np.zeros((5, 4, 3))))
    assert "4x5" in str(exc.value)


def test_coord_embed_not_translation_equivariant():
    img = np.zeros((6, 6, 1))
    img[2, 2] = 1.0
    shifted = np.roll(img, 1, axis=1)
    layer = CoordEmbLayer(6, 6)
    a = coord_embed_forward(layer, Tensor(img)).data
    b = coord_embed_forward(layer, Tensor(shifted)).data
    assert not np.allclose(np.roll(a, 1, axis=1)[1:-1, 2:-1], b[1:-1, 2:-1])
    k = np.random.default_rng(0).normal(size=(3, 3, 1, 2))
    ca = T.conv2d(Tensor(img), Tensor(k)).data
    cb = T.conv2d(Tensor(shifted), Tensor(k)).data
    assert np.array_equal(np.roll(ca, 1, axis=1)[1:-1, 2:-1], cb[1:-1, 2:-1])


def test_coord_conv_examples():
    layer = CoordConvLayer(4, 5, np.zeros((3, 3, 5, 2)))
    x = Tensor(np.random.default_rng(0).normal(size=(4, 5, 3)))
    assert layer.in_channels == 3
    assert np.all(coord_conv_forward(layer, x).data == 0)
    k = np.zeros((1, 1, 5, 1))
    k[0, 0, 3, 0] = 1.0  # channel order: input (3), i, j
    out = coord_conv_forward(CoordConvLayer(4, 5, k), x).data
    assert np.array_equal(out, coord_grid(4, 5)[1])
    with pytest.raises(ShapeError):
        coord_conv_forward(layer, Tensor(np.zeros((5, 5, 3))))


def test_coord_conv_channels_never_train():
    model = build_model(small_spec("coordconv"), seed=1)
    before = [(l.i_channel.data.copy(), l.j_channel.data.copy()) for l in model.backbone]
    params = dict(model.named_parameters())
    state = RMSpropState.zeros_like(model)
    x = Tensor(np.random.default_rng(2).normal(size=(2, 8, 8, 3)))
    for _ in range(5):
        model.zero_grad()
        T.mean(T.square(model(x))).backward()
        rmsprop_step(params, {k: p.grad for k, p in params.items()}, state, TrainConfig())
    for layer, (i0, j0) in zip(model.backbone, before):
        assert layer.i_channel.data.tobytes() == i0.tobytes()
        assert layer.j_channel.data.tobytes() == j0.tobytes()
        assert not layer.i_channel.requires_grad
    assert all(not n.endswith("channel") for n in params)


def test_build_model_deterministic():
    a = build_model(small_spec("coordemb"), seed=4)
    b = build_model(small_spec("coordemb"), seed=4)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and pa.data.tobytes() == pb.data.tobytes()


def test_vanilla_and_coordemb_share_downstream_kernels():
    van = dict(build_model(small_spec("vanilla"), seed=9).named_parameters())
    emb = dict(build_model(small_spec("coordemb"), seed=9).named_parameters())
    assert set(emb) - set(van) == {"coordemb/x_embed", "coordemb/y_embed"}
    for name, p in van.items():
        assert emb[name].data.tobytes() == p.data.tobytes()
    assert list(emb)[:2] == ["coordemb/x_embed", "coordemb/y_embed"]


@pytest.mark.parametrize("hw", [8, 16, 32])
@pytest.mark.parametrize("c", [1, 3, 5])
def test_coordemb_adds_exactly_2hw_parameters(hw, c):
    extra = (build_model(small_spec("coordemb", hw, hw, c), 0).num_parameters()
             - build_model(small_spec("vanilla", hw, hw, c), 0).num_parameters())
    assert extra == 2 * hw * hw


def test_kernel_init_bounds():
    model = build_model(small_spec("vanilla"), seed=0)
    for cs, layer in zip(model.spec.backbone, model.backbone):
        bound = 1 / np.sqrt(cs.kernel * cs.kernel * cs.in_channels)
        assert np.all(np.abs(layer.kernel.data) <= bound)


def test_inconsistent_channels_rejected():
    spec = ModelSpec("vanilla", 8, 8, 3, (ConvSpec(3, 3, 4), ConvSpec(3, 5, 4)))
    with pytest.raises(ShapeError):
        build_model(spec, 0)


def test_embedding_receives_gradient():
    model = build_model(small_spec("coordemb"), seed=0)
    x = Tensor(np.random.default_rng(0).uniform(-1, 1, size=(2, 8, 8, 3)))
    T.mse(model(x), np.ones((2, 4, 4, 2))).backward()
    assert np.any(model.coord_emb.x_embed.grad != 0)
    assert np.any(model.coord_emb.y_embed.grad != 0)


@pytest.mark.parametrize("variant", ["vanilla", "coordemb", "coordconv"])
def test_spec_roundtrip(variant):
    spec = small_spec(variant)
    assert ModelSpec.from_dict(spec.to_dict()) == spec
