import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from fleetadapt import nn

from oracles import gradient_check, numpy_attention, numpy_layer_norm

GRAD_TOL = 1e-4


def _rand(gen, *shape):
    return torch.randn(*shape, generator=gen, dtype=nn.DTYPE)


def _tree_with(**arrays):
    t = nn.ParamTree()
    for k, v in arrays.items():
        t.add(k.replace("__", "."), v)
    return t


# -- ParamTree --------------------------------------------------------------

def _small_tree(seed=0):
    g = nn.global_seed_generator(seed)
    t = nn.ParamTree()
    nn.init_linear(t, "a", 3, 4, g)
    nn.init_norm(t, "bn", 4, running=True)
    t.add("z", torch.zeros(2, 2))
    return t


def test_flatten_round_trip():
    t = _small_tree()
    vec = t.flatten()
    assert vec.numel() == t.num_params()
    back = t.unflatten(vec)
    assert sorted(back) == t.names()
    for k in t.names():
        assert back[k].shape == t.params[k].shape
        assert torch.equal(back[k], t.params[k].detach())
    t2 = _small_tree(1)
    t2.load_flat(vec)
    assert torch.equal(t2.flatten(), vec)
    with pytest.raises(nn.ShapeError):
        t.unflatten(torch.zeros(3))


def test_save_load_round_trip(tmp_path):
    t = _small_tree(3)
    with torch.no_grad():
        t.buffers["bn.running_mean"].add_(0.25)
    t.save(tmp_path / "p.json")
    fresh = _small_tree(9).load(tmp_path / "p.json")
    assert torch.equal(fresh.flatten(), t.flatten())
    assert torch.equal(fresh["bn.running_mean"], t["bn.running_mean"])
    other = nn.ParamTree()
    other.add("a.weight", torch.zeros(4, 3))
    with pytest.raises(KeyError, match="missing"):
        other.load(tmp_path / "p.json")


def test_load_rejects_bad_shape(tmp_path):
    t = _small_tree()
    d = t.to_dict()
    d["params"]["z"]["shape"] = [4]
    with pytest.raises(nn.ShapeError):
        _small_tree().load_values(d)


def test_stack_select_round_trip():
    trees = [_small_tree(s) for s in range(3)]
    stacked = nn.ParamTree.stack(trees)
    assert stacked["a.weight"].shape == (3, 4, 3)
    for i, t in enumerate(trees):
        assert torch.equal(stacked.select(i).flatten(), t.flatten())


def test_check_structure_mismatch():
    with pytest.raises(nn.ShapeError, match="only-left"):
        nn.check_structure({"a": torch.zeros(1)}, {"b": torch.zeros(1)})
    with pytest.raises(nn.ShapeError):
        nn.check_structure({"a": torch.zeros(1)}, {"a": torch.zeros(2)})


def test_init_scheme():
    g = nn.global_seed_generator(0)
    t = nn.ParamTree()
    nn.init_linear(t, "l", 25, 7, g)
    nn.init_norm(t, "n", 7)
    assert t["l.weight"].abs().max() <= math.sqrt(1 / 25)
    assert torch.all(t["l.bias"] == 0)
    assert torch.all(t["n.weight"] == 1) and torch.all(t["n.bias"] == 0)


# -- layers -----------------------------------------------------------------

def test_linear_shape_error():
    p = {"weight": torch.zeros(2, 3, dtype=nn.DTYPE), "bias": torch.zeros(2, dtype=nn.DTYPE)}
    assert nn.linear(p, torch.zeros(5, 3, dtype=nn.DTYPE)).shape == (5, 2)
    with pytest.raises(nn.ShapeError, match="in-dim"):
        nn.linear(p, torch.zeros(5, 4, dtype=nn.DTYPE))


def test_layer_norm_constant_input_gives_bias():
    p = {"weight": torch.tensor([2.0, 3.0, 4.0], dtype=nn.DTYPE), "bias": torch.tensor([0.1, -0.2, 0.3], dtype=nn.DTYPE)}
    y = nn.layer_norm(p, torch.full((2, 3), 7.0, dtype=nn.DTYPE))
    assert torch.allclose(y, p["bias"].expand(2, 3))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(2, 9))
def test_layer_norm_matches_numpy(seed, rows, width):
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(rows, width)), rng.normal(size=width), rng.normal(size=width)
    y = nn.layer_norm({"weight": torch.tensor(w), "bias": torch.tensor(b)}, torch.tensor(x))
    np.testing.assert_allclose(y.numpy(), numpy_layer_norm(x, w, b), rtol=1e-12, atol=1e-12)


def test_batch_norm_modes():
    g = nn.global_seed_generator(1)
    t = nn.ParamTree()
    nn.init_norm(t, "bn", 3, running=True)
    p = t.scope("bn")
    x = _rand(g, 10, 3) * 2 + 5
    y = nn.batch_norm(p, x, nn.TRAIN)
    assert torch.allclose(y.mean(0), torch.zeros(3, dtype=nn.DTYPE), atol=1e-12)
    expect_mean = 0.1 * x.mean(0)
    assert torch.allclose(t["bn.running_mean"], expect_mean)
    assert torch.allclose(t["bn.running_var"], 0.9 + 0.1 * x.var(0, unbiased=True))
    before = t["bn.running_mean"].clone()
    nn.batch_norm(p, x, nn.TRAIN, update_running=False)
    assert torch.equal(before, t["bn.running_mean"])
    yi = nn.batch_norm(p, x, nn.INFER)
    ref = (x - t["bn.running_mean"]) / torch.sqrt(t["bn.running_var"] + nn.BN_EPS)
    assert torch.allclose(yi, ref)
    with pytest.raises(ValueError):
        nn.batch_norm(p, x, "train")


def test_dropout_modes():
    x = torch.arange(12, dtype=nn.DTYPE).reshape(3, 4)
    assert torch.equal(nn.dropout(x, 0.1, nn.INFER), x)
    g = nn.global_seed_generator(4)
    y = nn.dropout(x, 0.5, nn.TRAIN, generator=g)
    kept = y != 0
    assert torch.allclose(y[kept], 2 * x[kept])
    mask = torch.tensor([[0.0, 0.9, 0.9, 0.9]] * 3, dtype=nn.DTYPE)
    assert torch.equal(nn.dropout(x, 0.5, nn.TRAIN, mask=mask)[:, 0], torch.zeros(3, dtype=nn.DTYPE))


def test_single_token_identity_attention():
    d = 4
    eye = torch.eye(d, dtype=nn.DTYPE)
    p = {f"{n}.{k}": (eye if k == "weight" else torch.zeros(d, dtype=nn.DTYPE)) for n in "qkvo" for k in ("weight", "bias")}
    X = torch.tensor([[[0.3, -1.0, 2.0, 0.5]]], dtype=nn.DTYPE)
    assert torch.allclose(nn.attention(p, X, 1), X)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([(4, 1), (4, 2), (8, 4), (6, 3)]), st.integers(1, 5))
def test_attention_matches_numpy(seed, dh, T):
    d, heads = dh
    rng = np.random.default_rng(seed)
    arrs = {f"{n}.{k}": rng.normal(size=(d, d) if k == "weight" else d) for n in "qkvo" for k in ("weight", "bias")}
    X = rng.normal(size=(T, d))
    y = nn.attention({k: torch.tensor(v) for k, v in arrs.items()}, torch.tensor(X[None]), heads)[0]
    ref = numpy_attention(X, *(arrs[f"{n}.{k}"] for n in "qkvo" for k in ("weight", "bias")), heads)
    np.testing.assert_allclose(y.numpy(), ref, rtol=1e-10, atol=1e-10)


def test_attention_head_divisibility():
    with pytest.raises(nn.ShapeError):
        nn.attention({}, torch.zeros(1, 2, 6, dtype=nn.DTYPE), 4)


def test_positional_embedding_values():
    pe = nn.positional_embedding(5, 6).numpy()
    for pos in range(5):
        for i in range(3):
            w = 1.0 / 10000 ** (2 * i / 6)
            assert pe[pos, 2 * i] == pytest.approx(math.sin(pos * w), abs=1e-14)
            assert pe[pos, 2 * i + 1] == pytest.approx(math.cos(pos * w), abs=1e-14)


# -- backward / adam --------------------------------------------------------

def test_constant_loss_zero_gradients():
    t = _small_tree()
    g = nn.backward(torch.tensor(3.0, dtype=nn.DTYPE), t)
    assert all(torch.all(v == 0) for v in g.values())


def test_scalar_gradient_example():
    t = _tree_with(W=torch.tensor([[2.0]], dtype=nn.DTYPE))
    x = torch.tensor([[3.0]], dtype=nn.DTYPE)
    loss = 0.5 * (x @ t["W"].T).pow(2).sum()
    assert nn.backward(loss, t)["W"].item() == pytest.approx(18.0)


def test_backward_rejects_non_finite():
    t = _tree_with(W=torch.ones(1))
    with pytest.raises(nn.NonFiniteLossError):
        nn.backward(t["W"].sum() * float("nan"), t)
    with pytest.raises(nn.ShapeError):
        nn.backward(t["W"] * 2, t)


def test_adam_zero_gradient_keeps_params():
    t = _small_tree()
    before = t.flatten().clone()
    nn.adam_step(t, {k: torch.zeros_like(v) for k, v in t.params.items()}, 1e-3)
    assert torch.equal(t.flatten(), before)
    assert t.step == 1


def test_adam_first_step_magnitude():
    t = _tree_with(w=torch.tensor([0.5], dtype=nn.DTYPE))
    nn.adam_step(t, {"w": torch.ones(1, dtype=nn.DTYPE)}, 1e-3)
    assert 0.5 - t["w"].item() == pytest.approx(1e-3, rel=1e-6)


def test_adam_matches_reference_formula():
    rng = np.random.default_rng(0)
    w = rng.normal(size=5)
    t = _tree_with(w=torch.tensor(w))
    m = np.zeros(5)
    v = np.zeros(5)
    for step in range(1, 6):
        g = rng.normal(size=5)
        nn.adam_step(t, {"w": torch.tensor(g)}, 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.01 * (m / (1 - 0.9 ** step)) / (np.sqrt(v / (1 - 0.999 ** step)) + 1e-8)
    np.testing.assert_allclose(t["w"].detach().numpy(), w, rtol=1e-12)


def test_adam_order_invariance_and_structure():
    a, b = _small_tree(), _small_tree()
    g = {k: torch.full_like(v, 0.3) for k, v in a.params.items()}
    nn.adam_step(a, g, 1e-2)
    nn.adam_step(b, dict(reversed(list(g.items()))), 1e-2)
    assert torch.equal(a.flatten(), b.flatten())
    with pytest.raises(nn.ShapeError):
        nn.adam_step(a, {"a.weight": g["a.weight"]}, 1e-2)


# -- finite-difference oracle per layer -------------------------------------

def _layer_cases():
    g = nn.global_seed_generator(7)
    x = _rand(g, 5, 3)
    X = _rand(g, 2, 4, 6)
    tgt = _rand(g, 5, 4)

    def lin():
        t = nn.ParamTree()
        nn.init_linear(t, "l", 3, 4, g)
        return t, lambda t: ((nn.linear(t.scope("l"), x) - tgt) ** 2).sum()

    def ln():
        t = nn.ParamTree()
        t.add("n.weight", _rand(g, 3))
        t.add("n.bias", _rand(g, 3))
        return t, lambda t: (nn.layer_norm(t.scope("n"), x) * torch.arange(1.0, 4.0, dtype=nn.DTYPE)).pow(3).sum()

    def bn_train():
        t = nn.ParamTree()
        nn.init_norm(t, "n", 3, running=True)
        with torch.no_grad():
            t.params["n.weight"].copy_(_rand(g, 3))
        return t, lambda t: (nn.batch_norm(t.scope("n"), x, nn.TRAIN, update_running=False) ** 3).sum()

    def ff():
        t = nn.ParamTree()
        nn.init_linear(t, "f.0", 6, 12, g)
        nn.init_linear(t, "f.1", 12, 6, g)
        return t, lambda t: torch.tanh(nn.ffn(t.scope("f"), X)).sum()

    def attn():
        t = nn.ParamTree()
        for n in "qkvo":
            nn.init_linear(t, f"a.{n}", 6, 6, g)
        return t, lambda t: (nn.attention(t.scope("a"), X, 3) ** 2).sum()

    def drop():
        mask = torch.rand(5, 4, generator=g, dtype=nn.DTYPE)
        t = nn.ParamTree()
        nn.init_linear(t, "l", 3, 4, g)
        return t, lambda t: (nn.dropout(nn.linear(t.scope("l"), x), 0.3, nn.TRAIN, mask=mask) ** 2).sum()

    return {"linear": lin, "layer_norm": ln, "batch_norm": bn_train, "ffn": ff, "attention": attn, "dropout": drop}


@pytest.mark.parametrize("name", list(_layer_cases()))
def test_layer_gradients_match_finite_differences(name):
    tree, loss = _layer_cases()[name]()
    assert gradient_check(loss, tree) < GRAD_TOL


def test_batch_norm_input_gradient_finite_difference():
    g = nn.global_seed_generator(3)
    t = nn.ParamTree()
    nn.init_norm(t, "n", 3, running=True)
    t.add("x", _rand(g, 6, 3))
    assert gradient_check(lambda t: (nn.batch_norm(t.scope("n"), t["x"], nn.TRAIN, update_running=False) ** 3
                                     * torch.arange(1.0, 4.0, dtype=nn.DTYPE)).sum(), t) < GRAD_TOL
