import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from invae.numerics import (
    DTYPE, AdamState, MlpSpec, NonFiniteError, ParamStore, adam_step, grad, init_mlp, latent_grad_and_hessian_diag,
    latent_hessian_diag, mlp_forward,
)


def make_store(spec, seed=0, prefix="net"):
    store = ParamStore()
    init_mlp(store, spec, prefix, torch.Generator().manual_seed(seed))
    return store


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


# mlp_forward -------------------------------------------------------------------

def test_zero_weights_give_activation_of_bias():
    spec = MlpSpec(3, (4,), 2, activation="relu")
    store = ParamStore({
        "net.0.weight": torch.zeros(4, 3), "net.0.bias": torch.tensor([1.0, -1.0, 2.0, 0.5]),
        "net.1.weight": torch.zeros(2, 4), "net.1.bias": torch.tensor([-3.0, 4.0]),
    })
    out = mlp_forward(spec, store.view(), "net", torch.randn(5, 3, dtype=DTYPE))
    assert torch.equal(out, torch.tensor([[-3.0, 4.0]] * 5, dtype=DTYPE))


def test_single_linear_layer_hand_arithmetic():
    spec = MlpSpec(1, (), 1)
    store = ParamStore({"lin.0.weight": [[2.0]], "lin.0.bias": [1.0]})
    assert mlp_forward(spec, store.view(), "lin", torch.tensor([3.0], dtype=DTYPE)).item() == 7.0


def test_relu_net_matches_straight_line_numpy():
    spec = MlpSpec(4, (6,), 3)
    store = make_store(spec, seed=3)
    with torch.no_grad():
        store["net.0.bias"].normal_(generator=torch.Generator().manual_seed(1))
    x = np.random.default_rng(0).normal(size=(10, 4))
    w0, b0 = store["net.0.weight"].detach().numpy(), store["net.0.bias"].detach().numpy()
    w1, b1 = store["net.1.weight"].detach().numpy(), store["net.1.bias"].detach().numpy()
    expected = np.maximum(x @ w0.T + b0, 0.0) @ w1.T + b1
    got = mlp_forward(spec, store.view(), "net", torch.from_numpy(x)).detach().numpy()
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)


def test_final_activations():
    x = torch.randn(7, 2, dtype=DTYPE)
    sm = MlpSpec(2, (3,), 5, final_activation="softmax")
    out = mlp_forward(sm, make_store(sm).view(), "net", x)
    torch.testing.assert_close(out.sum(-1), torch.ones(7, dtype=DTYPE), rtol=0, atol=1e-12)
    sp = MlpSpec(2, (3,), 5, final_activation="softplus")
    assert bool((mlp_forward(sp, make_store(sp).view(), "net", x) > 0).all())


def test_mlp_errors():
    spec = MlpSpec(3, (4,), 2)
    store = make_store(spec)
    with pytest.raises(ValueError, match="input last dim"):
        mlp_forward(spec, store.view(), "net", torch.zeros(2, 5, dtype=DTYPE))
    with pytest.raises(KeyError, match="missing parameter"):
        mlp_forward(spec, store.view(), "other", torch.zeros(2, 3, dtype=DTYPE))
    with pytest.raises(ValueError):
        MlpSpec(0, (4,), 2)
    with pytest.raises(ValueError):
        MlpSpec(2, (4,), 2, activation="gelu")


def test_glorot_bounds_and_zero_bias():
    spec = MlpSpec(30, (20,), 10)
    store = make_store(spec)
    assert float(store["net.0.weight"].detach().abs().max()) <= np.sqrt(6 / 50)
    assert float(store["net.1.weight"].detach().abs().max()) <= np.sqrt(6 / 30)
    assert not bool(store["net.0.bias"].any())


def test_same_seed_same_init():
    spec = MlpSpec(5, (8, 8), 3)
    a, b = make_store(spec, seed=11), make_store(spec, seed=11)
    assert all(torch.equal(a[n], b[n]) for n in a.names())
    c = make_store(spec, seed=12)
    assert not torch.equal(a["net.0.weight"], c["net.0.weight"])


# grad -------------------------------------------------------------------------

def test_grad_of_sum_of_squares():
    z = torch.tensor([1.5, -2.0, 0.25], dtype=DTYPE)
    store = ParamStore({"z": z})
    g = grad(lambda p: (p["z"] ** 2).sum(), store, ["z"])
    torch.testing.assert_close(g["z"], 2 * z, rtol=0, atol=0)


def test_grad_of_constant_is_zero():
    store = ParamStore({"p": torch.ones(2, 3), "q": torch.ones(4)})
    g = grad(lambda v: v["q"].sum(), store, ["p"])
    assert torch.equal(g["p"], torch.zeros(2, 3, dtype=DTYPE))


def test_grad_matches_central_differences():
    spec = MlpSpec(3, (5,), 1, activation="tanh")
    store = make_store(spec, seed=2)
    x = torch.randn(8, 3, dtype=DTYPE, generator=torch.Generator().manual_seed(0))

    def f(view):
        return (mlp_forward(spec, view, "net", x) ** 2).sum()

    analytic = grad(f, store, store.names())
    h = 1e-5
    for name in store.names():
        base = store[name].detach().clone()
        fd = torch.zeros_like(base)
        for k in range(base.numel()):
            for sign in (1, -1):
                pert = base.clone().view(-1)
                pert[k] += sign * h
                store.load({name: pert.view_as(base)})
                fd.view(-1)[k] += sign * float(f(store.view()).detach()) / (2 * h)
            store.load({name: base})
        assert rel_err(analytic[name], fd) < 1e-4, name


def test_grad_errors():
    store = ParamStore({"p": torch.ones(2)})
    with pytest.raises(KeyError):
        grad(lambda v: v["p"].sum(), store, ["nope"])
    with pytest.raises(NonFiniteError):
        grad(lambda v: v["p"].sum() / 0.0, store, ["p"])


# latent second derivatives ----------------------------------------------------

def test_hessian_diag_of_weighted_squares():
    a = torch.tensor([0.5, -1.0, 3.0], dtype=DTYPE)
    z = torch.randn(4, 3, dtype=DTYPE)
    h = latent_hessian_diag(lambda u: (a * u ** 2).sum(-1), z)
    torch.testing.assert_close(h, (2 * a).expand(4, 3), rtol=0, atol=0)


def test_hessian_diag_of_standard_normal_log_density():
    z = torch.randn(6, 4, dtype=DTYPE)
    g, h = latent_grad_and_hessian_diag(lambda u: -0.5 * (u ** 2).sum(-1), z)
    assert torch.equal(h, -torch.ones(6, 4, dtype=DTYPE))
    torch.testing.assert_close(g, -z, rtol=0, atol=0)


def test_hessian_diag_matches_fd_of_exact_gradient():
    spec = MlpSpec(3, (7,), 1, activation="tanh")
    store = make_store(spec, seed=5)

    def logp(u):
        return mlp_forward(spec, store.view(), "net", u).squeeze(-1)

    z = torch.randn(5, 3, dtype=DTYPE, generator=torch.Generator().manual_seed(1))
    _, h = latent_grad_and_hessian_diag(logp, z)
    eps = 1e-5
    fd = torch.zeros_like(z)
    for j in range(3):
        e = torch.zeros(3, dtype=DTYPE)
        e[j] = eps
        gp, _ = latent_grad_and_hessian_diag(logp, z + e)
        gm, _ = latent_grad_and_hessian_diag(logp, z - e)
        fd[:, j] = (gp[:, j] - gm[:, j]) / (2 * eps)
    assert rel_err(h, fd) < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10_000))
def test_quadratic_form_hessian_is_twice_diagonal(k, seed):
    rng = np.random.default_rng(seed)
    A = torch.from_numpy(rng.normal(size=(k, k)))
    z = torch.from_numpy(rng.normal(size=(3, k)))
    h = latent_hessian_diag(lambda u: torch.einsum("ni,ij,nj->n", u, A, u), z)
    np.testing.assert_allclose(h.numpy(), np.broadcast_to(2 * np.diag(A.numpy()), (3, k)), rtol=0, atol=1e-10)


def test_hessian_keeps_parameter_graph():
    w = torch.tensor(2.0, dtype=DTYPE, requires_grad=True)
    _, h = latent_grad_and_hessian_diag(lambda u: -w * (u ** 2).sum(-1), torch.ones(1, 2, dtype=DTYPE),
                                        create_graph=True)
    (dw,) = torch.autograd.grad(h.sum(), w)
    assert float(dw) == -4.0


# adam -------------------------------------------------------------------------

def test_adam_zero_gradient_leaves_parameters():
    store = ParamStore({"p": torch.randn(3, 2)})
    before = store.snapshot()
    adam_step(AdamState(), store, {"p": torch.zeros(3, 2, dtype=DTYPE)})
    assert torch.equal(store["p"].detach(), before["p"])


def test_adam_first_step_is_signed_lr():
    g = torch.tensor([0.3, -2.0, 1e-3], dtype=DTYPE)
    store = ParamStore({"p": torch.zeros(3)})
    adam_step(AdamState(lr=0.01), store, {"p": g})
    # bias-corrected first moment is g, second is g**2
    expected = -0.01 * g / (g.abs() + 1e-8)
    torch.testing.assert_close(store["p"].detach(), expected, rtol=0, atol=1e-15)


def reference_adam(x0, grad_fn, steps, lr=0.01, b1=0.9, b2=0.999, eps=1e-8):
    x, m, v, trace = x0.copy(), np.zeros_like(x0), np.zeros_like(x0), []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g ** 2
        x = x - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        trace.append(x.copy())
    return trace


def test_adam_trace_matches_reference_on_quadratic():
    A = np.array([[3.0, 0.5], [0.5, 1.0]])
    x0 = np.array([1.0, -2.0])
    expected = reference_adam(x0, lambda x: 2 * A @ x, 10, lr=0.1)
    store, state = ParamStore({"x": x0}), AdamState(lr=0.1)
    At = torch.from_numpy(A)
    for k in range(10):
        g = grad(lambda v: v["x"] @ At @ v["x"], store, ["x"])
        adam_step(state, store, g)
        np.testing.assert_allclose(store["x"].detach().numpy(), expected[k], rtol=0, atol=1e-10)
    assert state.step["x"] == 10


def test_adam_skips_frozen_and_validates():
    store = ParamStore({"a": torch.ones(2), "b": torch.ones(2)})
    store.freeze(["b"])
    frozen = store["b"].detach().clone()
    adam_step(AdamState(), store, {"a": torch.ones(2, dtype=DTYPE)})
    assert torch.equal(store["b"].detach(), frozen)
    assert not torch.equal(store["a"].detach(), frozen)
    with pytest.raises(KeyError):
        adam_step(AdamState(), store, {})
    with pytest.raises(ValueError, match="shape"):
        adam_step(AdamState(), store, {"a": torch.ones(3, dtype=DTYPE)})


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.booleans(), min_size=3, max_size=3))
def test_frozen_tensors_bitwise_unchanged(seed, frozen_mask):
    rng = np.random.default_rng(seed)
    store = ParamStore({f"p{k}": rng.normal(size=(2, 3)) for k in range(3)})
    store.freeze([f"p{k}" for k, f in enumerate(frozen_mask) if f])
    before = store.snapshot()
    state = AdamState(lr=0.5)
    for _ in range(3):
        adam_step(state, store, {n: torch.from_numpy(rng.normal(size=(2, 3))) for n in store.trainable()})
    for k, f in enumerate(frozen_mask):
        assert torch.equal(store[f"p{k}"].detach(), before[f"p{k}"]) == f


def test_param_store_contract():
    store = ParamStore({"enc.0.weight": torch.ones(2), "enc.0.bias": torch.zeros(1), "dec.0.weight": torch.ones(1)})
    assert store.names("enc") == ["enc.0.weight", "enc.0.bias"]
    with pytest.raises(KeyError, match="duplicate"):
        store.add("enc.0.bias", [1.0])
    with pytest.raises(KeyError, match="missing"):
        store["nope"]
    view = store.view(detach=["enc.0.weight"])
    assert not view["enc.0.weight"].requires_grad and view["dec.0.weight"].requires_grad
    with pytest.raises(ValueError, match="shape"):
        store.load({"dec.0.weight": torch.ones(3)})
