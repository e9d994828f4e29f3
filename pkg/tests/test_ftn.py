import math

import numpy as np
import pytest

from fedftn.autodiff import Tensor, check_gradients
from fedftn import autodiff as ad
from fedftn.errors import DomainError, ShapeError
from fedftn.ftn import FtnParams, ftn_components, ftn_excitation, ftn_forward


def params_from(**arrays):
    return FtnParams(**{k: Tensor(np.asarray(v, dtype=np.float64), requires_grad=True)
                        for k, v in arrays.items()})


def zero_params(C):
    return params_from(w_R=np.zeros((C, C)), w_1=np.zeros((C // 2, 1)), w_2=np.zeros((C, C // 2)),
                       w_3=np.zeros((C, C)), w_fuse=np.zeros((C, C)))


def random_params(C, rng):
    return FtnParams.init(C, rng, dtype=np.float64)


def scalar_ftn(F, d, p):
    """Step-by-step scalar evaluation using plain Python loops and math."""
    C = len(F)
    relu = lambda z: z if z > 0 else 0.0
    sig = lambda z: 1.0 / (1.0 + math.exp(-z))
    v = [sum(float(t) for t in np.ravel(F[c])) / np.size(F[c]) for c in range(C)]
    v_r = [sum(p["w_R"][i][j] * v[j] for j in range(C)) for i in range(C)]
    h1 = [relu(p["w_1"][i][0] * d) for i in range(C // 2)]
    h2 = [relu(sum(p["w_2"][i][j] * h1[j] for j in range(C // 2))) for i in range(C)]
    v_d = [sum(p["w_3"][i][j] * h2[j] for j in range(C)) for i in range(C)]
    v_fuse = [sig(v_d[i]) * v_r[i] + v_d[i] for i in range(C)]
    v_hat = [sum(p["w_fuse"][i][j] * v_fuse[j] for j in range(C)) for i in range(C)]
    return v, v_r, v_d, v_fuse, v_hat


HAND = dict(w_R=[[1, -1], [2, 1]], w_1=[[2]], w_2=[[1], [-1]], w_3=[[1, 2], [0, 3]],
            w_fuse=[[1, 1], [-1, 2]])


def test_zero_weights_annihilate():
    F = Tensor(np.random.default_rng(0).standard_normal((2, 2, 3, 3, 3)))
    out = ftn_forward(F, 0.3, zero_params(2))
    assert np.all(out.data == 0)
    assert np.all(ftn_excitation(F, 0.3, zero_params(2)).data == 0)


def test_unit_excitation_is_identity():
    # w_3 = 0 gives v_d = 0 and sigmoid(0) = 0.5; channel means 2 and 4 give v_fuse = (1, 2).
    F = np.empty((1, 2, 2, 2, 2))
    F[0, 0], F[0, 1] = 2.0, 4.0
    F[0, 0, 0, 0, 0], F[0, 0, 1, 1, 1] = 1.0, 3.0
    p = dict(w_R=np.eye(2), w_1=[[1.0]], w_2=[[1.0], [1.0]], w_3=np.zeros((2, 2)), w_fuse=None)
    v_fuse = scalar_ftn(F[0], 0.5, {**p, "w_fuse": np.eye(2)})[3]
    assert v_fuse == [1.0, 2.0]
    p["w_fuse"] = np.diag([1.0 / v for v in v_fuse])
    out = ftn_forward(Tensor(F), 0.5, params_from(**p))
    assert np.array_equal(out.data, F)


def test_unit_excitation_general_solve():
    rng = np.random.default_rng(3)
    F = rng.uniform(0.5, 2.0, size=(1, 2, 3, 3, 3))
    p = {k: v.data for k, v in vars(random_params(2, rng)).items()}
    v_fuse = np.array(scalar_ftn(F[0], 0.2, p)[3])
    # Solve w_fuse @ v_fuse = (1, 1) with a diagonal w_fuse.
    p["w_fuse"] = np.diag(np.linalg.solve(np.diag(v_fuse), np.ones(2)))
    v_hat = ftn_excitation(Tensor(F), 0.2, params_from(**p)).data
    np.testing.assert_allclose(v_hat, [[1.0, 1.0]], atol=1e-14)


def test_hand_case_matches_scalar_oracle():
    F = np.empty((1, 2, 2, 2, 2))
    F[0, 0], F[0, 1] = 1.0, 2.0
    params = params_from(**HAND)
    comps = ftn_components(Tensor(F), 0.5, params)
    v, v_r, v_d, v_fuse, v_hat = scalar_ftn(F[0], 0.5, HAND)
    assert v == [1.0, 2.0] and v_r == [-1.0, 4.0]
    for got, want in zip(comps, (v, v_r, v_d, v_fuse, v_hat)):
        np.testing.assert_allclose(got.data[0], want, atol=1e-10, rtol=0)
    out = ftn_forward(Tensor(F), 0.5, params).data
    for c in range(2):
        assert np.all(np.abs(out[0, c] - F[0, c] * v_hat[c]) <= 1e-10)


def test_scaling_features_scales_squeeze_path_only():
    rng = np.random.default_rng(4)
    F = rng.standard_normal((2, 4, 3, 3, 3))
    params = random_params(4, rng)
    base = ftn_components(Tensor(F), 0.1, params)
    scaled = ftn_components(Tensor(3 * F), 0.1, params)
    np.testing.assert_allclose(scaled.v_r.data, 3 * base.v_r.data, atol=1e-12, rtol=0)
    assert np.array_equal(scaled.v_d.data, base.v_d.data)


def test_dose_path_independent_of_features():
    rng = np.random.default_rng(5)
    params = random_params(6, rng)
    F = rng.standard_normal((1, 6, 2, 2, 2))
    a = ftn_components(Tensor(F), 0.05, params).v_d.data
    b = ftn_components(Tensor(F + rng.standard_normal(F.shape)), 0.05, params).v_d.data
    assert np.array_equal(a, b)


def test_distinct_count_levels_give_distinct_excitation():
    rng = np.random.default_rng(6)
    params = random_params(4, rng)
    # Make the dose path active regardless of the random sign pattern.
    params.w_1.data[:] = np.abs(params.w_1.data)
    params.w_2.data[:] = np.abs(params.w_2.data)
    F = Tensor(rng.standard_normal((1, 4, 2, 2, 2)))
    assert not np.allclose(ftn_excitation(F, 0.05, params).data, ftn_excitation(F, 0.2, params).data)


def test_channelwise_semantics():
    rng = np.random.default_rng(7)
    params = random_params(4, rng)
    F = rng.standard_normal((2, 4, 3, 4, 5))
    d = [0.05, 0.5]
    out = ftn_forward(Tensor(F), d, params).data
    v_hat = ftn_excitation(Tensor(F), d, params).data
    for _ in range(50):
        b, c, i, j, k = (rng.integers(n) for n in F.shape)
        assert out[b, c, i, j, k] == F[b, c, i, j, k] * v_hat[b, c]


def test_batch_elements_use_their_own_count_level():
    rng = np.random.default_rng(8)
    params = random_params(2, rng)
    F = rng.standard_normal((1, 2, 2, 2, 2))
    both = ftn_excitation(Tensor(np.concatenate([F, F])), [0.1, 0.4], params).data
    np.testing.assert_array_equal(both[0], ftn_excitation(Tensor(F), 0.1, params).data[0])
    np.testing.assert_array_equal(both[1], ftn_excitation(Tensor(F), 0.4, params).data[0])


def test_gradients_all_ftn_params():
    rng = np.random.default_rng(9)
    params = random_params(4, rng)
    F = Tensor(rng.standard_normal((2, 4, 3, 3, 3)), requires_grad=True)
    weights = Tensor(rng.standard_normal((2, 4, 3, 3, 3)))
    named = {k: getattr(params, k) for k in ("w_R", "w_1", "w_2", "w_3", "w_fuse")}
    named["F"] = F
    errs = check_gradients(lambda: ad.total(ad.mul(ftn_forward(F, [0.3, 0.7], params), weights)), named)
    assert max(errs.values()) <= 1e-4, errs


def test_errors():
    rng = np.random.default_rng(10)
    params = random_params(2, rng)
    with pytest.raises(ShapeError):
        ftn_forward(Tensor(np.zeros((1, 4, 2, 2, 2))), 0.5, params)
    for bad in (0.0, -0.1, 1.5):
        with pytest.raises(DomainError):
            ftn_forward(Tensor(np.zeros((1, 2, 2, 2, 2))), bad, params)
    with pytest.raises(ShapeError):
        FtnParams.init(3, rng)
    with pytest.raises(ShapeError):
        params_from(w_R=np.zeros((2, 2)), w_1=np.zeros((2, 1)), w_2=np.zeros((2, 1)),
                    w_3=np.zeros((2, 2)), w_fuse=np.zeros((2, 2)))


def test_init_bounds():
    p = FtnParams.init(8, np.random.default_rng(0))
    assert np.abs(p.w_R.data).max() <= 1 / np.sqrt(8)
    assert np.abs(p.w_1.data).max() <= 1.0
    assert np.abs(p.w_2.data).max() <= 1 / np.sqrt(4)
