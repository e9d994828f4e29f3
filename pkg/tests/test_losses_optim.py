import numpy as np
import pytest

from fedftn import autodiff as ad
from fedftn.autodiff import Tensor, check_gradients
from fedftn.errors import ContractError, ShapeError
from fedftn.losses import (LossWeights, combined_loss, fedprox_term, gwc_loss, objective_terms,
                           recon_loss)
from fedftn.optim import AdamState, adam_step
from fedftn.params import ParamTree
from fedftn.unet import DenoiserModel, UNetConfig, partition

TINY = UNetConfig(levels=2, base_channels=4)


def tree(**arrays):
    return ParamTree((k, Tensor(np.asarray(v, dtype=np.float64), requires_grad=True))
                     for k, v in arrays.items())


@pytest.fixture
def batch():
    rng = np.random.default_rng(0)
    return [(rng.uniform(0, 1, (8, 8, 8)).astype(np.float32),
             rng.uniform(0, 1, (8, 8, 8)).astype(np.float32), d) for d in (0.05, 0.1, 0.2)]


def trained_model(seed=0):
    model = DenoiserModel.init(TINY, seed=seed, zero_head=False)
    return model


def perturbed_anchor(model, rng):
    shared, _ = partition(model, "fedftn")
    anchor = shared.snapshot()
    for n in anchor:
        anchor[n].data[...] += rng.standard_normal(anchor[n].shape).astype(np.float32) * 0.01
    return anchor


# reconstruction --------------------------------------------------------

def test_recon_identity_model_zero_and_one():
    model = DenoiserModel.init(TINY)
    x = np.random.default_rng(1).uniform(0, 1, (8, 8, 8)).astype(np.float32)
    assert recon_loss(model, [(x, x, 0.1)]).item() == 0
    ones = np.ones((8, 8, 8), np.float32)
    assert recon_loss(model, [(ones, ones + 1, 0.1)]).item() == 1.0


def test_recon_matches_compositional_oracle(batch):
    model = trained_model()
    per_sample = [ad.mse(model.forward(x[None, None], d), Tensor(y[None, None])).item()
                  for x, y, d in batch]
    assert recon_loss(model, batch).item() == pytest.approx(np.mean(per_sample), rel=1e-6)


def test_recon_errors():
    model = DenoiserModel.init(TINY)
    with pytest.raises(ContractError):
        recon_loss(model, [])
    with pytest.raises(ShapeError):
        recon_loss(model, [(np.zeros((8, 8, 8)), np.zeros((8, 8, 16)), 0.1)])


# global weight constraint ----------------------------------------------

def test_gwc_values():
    a = tree(w=[1.0, 2.0])
    assert gwc_loss(a, a.snapshot()).item() == 0
    assert gwc_loss(a, tree(w=[0.0, 0.0])).item() == 2.5
    assert gwc_loss(a, tree(w=[0.0, 0.0]), normalize=False).item() == 5.0


def test_gwc_gradient_and_symmetry():
    rng = np.random.default_rng(2)
    a = tree(u=rng.standard_normal((3, 2)), v=rng.standard_normal(4))
    b = tree(u=rng.standard_normal((3, 2)), v=rng.standard_normal(4))
    errs = check_gradients(lambda: gwc_loss(a, b), dict(a.items()))
    assert max(errs.values()) <= 1e-6
    a.zero_grad()
    gwc_loss(a, b).backward()
    np.testing.assert_allclose(a["u"].grad, 2 * (a["u"].data - b["u"].data) / 10, atol=1e-15)
    assert b["u"].grad is None  # the anchor is a constant
    assert gwc_loss(a, b).item() == pytest.approx(gwc_loss(b, a).item(), abs=1e-15)


def test_gwc_incongruent():
    with pytest.raises(ShapeError):
        gwc_loss(tree(w=[1.0, 2.0]), tree(w=[1.0]))
    with pytest.raises(ShapeError):
        gwc_loss(tree(w=[1.0]), tree(v=[1.0]))


def test_gwc_step_pulls_toward_anchor():
    rng = np.random.default_rng(3)
    local = tree(w=rng.standard_normal(20))
    anchor = tree(w=rng.standard_normal(20))
    before = np.sum((local["w"].data - anchor["w"].data) ** 2)
    ad.scale(gwc_loss(local, anchor), 0.001).backward()
    local["w"].data -= 1e-3 * local["w"].grad
    assert np.sum((local["w"].data - anchor["w"].data) ** 2) < before


# combined loss ----------------------------------------------------------

@pytest.mark.parametrize("q", [1, 2])
def test_warmup_is_bit_identical(batch, q):
    rng = np.random.default_rng(4)
    m1, m2 = trained_model(7), trained_model(7)
    anchor = perturbed_anchor(m1, rng)
    a = combined_loss(m1, batch, anchor, LossWeights(), q)
    b = recon_loss(m2, batch)
    assert a.data.tobytes() == b.data.tobytes()
    a.backward()
    b.backward()
    for n in m1.trainable():
        assert m1.params[n].grad.tobytes() == m2.params[n].grad.tobytes(), n


def test_gwc_active_from_epoch_three(batch):
    rng = np.random.default_rng(5)
    model = trained_model(8)
    anchor = perturbed_anchor(model, rng)
    r = recon_loss(model, batch).data
    same = partition(model, "fedftn")[0].snapshot()
    assert combined_loss(model, batch, same, LossWeights(), 3).data.tobytes() == r.tobytes()

    terms = objective_terms(model, batch, anchor, LossWeights(), 3)
    names = [n for n in anchor if n.startswith("denoiser.")]
    g = sum(np.sum((model.params[n].data.astype(np.float64) - anchor[n].data) ** 2) for n in names)
    g /= sum(anchor[n].size for n in names)
    assert terms.penalty.item() == pytest.approx(g, rel=1e-5)
    assert terms.total.item() == terms.recon.data + np.float32(0.001) * terms.penalty.data
    assert terms.total.item() == pytest.approx(r + 0.001 * g, rel=1e-6)


def test_gwc_excludes_ftn_params(batch):
    rng = np.random.default_rng(6)
    model = trained_model(9)
    anchor = perturbed_anchor(model, rng)
    terms = objective_terms(model, batch, anchor, LossWeights(lambda_gwc=1.0), 4)
    terms.penalty.backward()
    assert all(model.params[n].grad is None for n in model.params if n.startswith("ftn."))
    assert model.params["denoiser.enc0.conv1.w"].grad is not None


def test_missing_anchor_after_warmup(batch):
    with pytest.raises(ContractError):
        combined_loss(trained_model(), batch, None, LossWeights(), 3)
    with pytest.raises(ContractError):
        combined_loss(trained_model(), batch, None, LossWeights(), 0)


def test_fedprox_term_values():
    a = tree(w=[1.0])
    assert fedprox_term(a, a.snapshot(), 0.01).item() == 0
    assert fedprox_term(a, tree(w=[0.0]), 0.0).item() == 0
    assert fedprox_term(a, tree(w=[0.0]), 2.0).item() == 1.0


def test_fedprox_has_no_warmup(batch):
    rng = np.random.default_rng(7)
    model = trained_model(10)
    shared = partition(model, "fedprox")[0]
    anchor = shared.snapshot()
    for n in anchor:
        anchor[n].data[...] += rng.standard_normal(anchor[n].shape).astype(np.float32) * 0.1
    terms = objective_terms(model, batch, anchor, LossWeights(), 1, "fedprox")
    assert terms.penalty.item() > 0


# Adam -------------------------------------------------------------------

def test_adam_first_step_closed_form():
    params = tree(w=[0.0])
    state = AdamState.create(params, lr=0.1)
    params["w"].grad = np.array([1.0])
    adam_step(params, state)
    assert params["w"].data[0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)
    assert state.step_count == 1 and params["w"].grad is None


def test_adam_zero_gradient_keeps_params_and_moments():
    params = tree(w=[1.0, -2.0])
    state = AdamState.create(params)
    params["w"].grad = np.zeros(2)
    adam_step(params, state)
    assert params["w"].data.tolist() == [1.0, -2.0]
    assert state.m["w"].tolist() == [0, 0] and state.v["w"].tolist() == [0, 0]
    assert state.step_count == 1


def test_adam_lr_zero_is_invariant():
    rng = np.random.default_rng(8)
    params = tree(w=rng.standard_normal(5))
    before = params["w"].data.copy()
    state = AdamState.create(params, lr=0.0)
    for _ in range(3):
        params["w"].grad = rng.standard_normal(5)
        adam_step(params, state)
    assert params["w"].data.tobytes() == before.tobytes()


def test_adam_determinism():
    rng = np.random.default_rng(9)
    grads = [rng.standard_normal(4) for _ in range(2)]
    results = []
    for _ in range(2):
        params = tree(w=np.arange(4.0))
        state = AdamState.create(params, lr=0.01)
        for g in grads:
            params["w"].grad = g.copy()
            adam_step(params, state)
        results.append((params["w"].data.tobytes(), state.m["w"].tobytes(), state.v["w"].tobytes()))
    assert results[0] == results[1]


def test_adam_contract_errors():
    params = tree(w=[1.0], v=[2.0])
    state = AdamState.create(params)
    params["w"].grad = np.ones(1)
    with pytest.raises(ContractError):
        adam_step(params, state)
    with pytest.raises(ShapeError):
        adam_step(tree(w=[1.0, 2.0]), state)


def test_adam_matches_reference_update():
    rng = np.random.default_rng(10)
    w = rng.standard_normal(3)
    params = tree(w=w.copy())
    state = AdamState.create(params, lr=1e-3)
    m = v = np.zeros(3)
    for t in range(1, 4):
        g = rng.standard_normal(3)
        params["w"].grad = g
        adam_step(params, state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 1e-3 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(params["w"].data, w, rtol=1e-12)
