import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from q2n import linalg
from q2n import nullspace as ns
from q2n import quantizer as qz
from q2n.errors import ArgumentError, DimensionError, NumericalError

from .conftest import random_orthonormal


def brute_force_psr(values, t, excluded_top):
    """Direct loop over every candidate index, sums recomputed from scratch."""
    m = len(values)
    for k in range(excluded_top + 1, m + 1):
        prefix = sum(values[excluded_top:k])
        suffix = sum(values[k:])
        if prefix > 0 and suffix / prefix <= t:
            return k
    return m


def lstsq_alpha(w, wq, delta, lam):
    """Per-row ridge solve through an augmented least-squares system."""
    h = w - (w - wq) @ delta
    out = []
    for i in range(w.shape[0]):
        a = np.concatenate([wq[i], [np.sqrt(lam)]])[:, None]
        b = np.concatenate([h[i], [np.sqrt(lam)]])
        out.append(np.linalg.lstsq(a, b, rcond=None)[0][0])
    return np.array(out)


def random_instance(seed, n=6, m=8, k=None):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((n, m))
    wq = qz.rtn_quantize(w, qz.QuantConfig(2, qz.PER_ROW)).w_q
    u = random_orthonormal(rng, m)
    delta = linalg.projector_from_basis(u, m // 2 if k is None else k)
    return w, wq, delta


# -- selectors --------------------------------------------------------------


def test_psr_worked_example():
    sel = ns.select_rank_index([100, 10, 1, 0.5, 0.01], t=0.1, excluded_top=1)
    assert sel.k == 3
    assert sel.ratio_at_k == pytest.approx(0.51 / 11)
    assert sel.ratio_at_k <= sel.threshold_t


def test_psr_rejects_first_candidate():
    # With only {10} in the prefix the ratio is 1.51 / 10 > 0.1.
    assert brute_force_psr([100, 10, 1, 0.5, 0.01], 0.151, 1) == 2
    assert ns.select_rank_index([100, 10, 1, 0.5, 0.01], t=0.151).k == 2


def test_psr_all_zero():
    sel = ns.select_rank_index(np.zeros(6))
    assert sel.k == 6


def test_psr_exact_zeros():
    assert ns.select_rank_index([5, 1, 0, 0], t=0.1, excluded_top=1).k == 2


def test_psr_defaults():
    assert ns.DEFAULT_T == 0.1 and ns.DEFAULT_EXCLUDED_TOP == 1 and ns.DEFAULT_LAMBDA == 0.2
    sel = ns.select_rank_index([100, 10, 1, 0.5, 0.01])
    assert (sel.threshold_t, sel.excluded_top) == (0.1, 1)


@pytest.mark.parametrize("t", [0.0, -1.0])
def test_psr_bad_threshold(t):
    with pytest.raises(ArgumentError):
        ns.select_rank_index([3, 2, 1], t=t)


def test_psr_bad_exclusion():
    with pytest.raises(ArgumentError):
        ns.select_rank_index([3, 2, 1], excluded_top=3)


@settings(max_examples=200, deadline=None)
@given(
    values=st.lists(st.floats(0, 1e6, allow_subnormal=False), min_size=1, max_size=30),
    t=st.floats(1e-4, 2.0),
    data=st.data(),
)
def test_psr_matches_brute_force(values, t, data):
    values = sorted(values, reverse=True)
    e = data.draw(st.integers(0, len(values) - 1))
    sel = ns.select_rank_index(values, t, e)
    ref = brute_force_psr(values, t, e)
    if sel.k != ref:
        # Only acceptable when the ratio sits on the threshold up to rounding.
        kk = min(sel.k, ref)
        prefix, suffix = sum(values[e:kk]), sum(values[kk:])
        assert abs(suffix / prefix - t) <= 1e-12 * max(1.0, t)
    assert sel.k >= e + 1 or sel.k == len(values)
    if sel.k < len(values):
        assert sel.ratio_at_k <= t


def test_torch_style_examples():
    assert ns.select_rank_torch_style([4, 2, 1e-18]).k == 2
    assert ns.select_rank_torch_style([3, 3, 3, 3]).k == 4
    assert ns.select_rank_torch_style([1, 1e-3, 1e-9], rel_cutoff=1e-6).k == 2


def test_nscl_style_examples():
    assert ns.select_rank_nscl_style([100, 60, 1]).k == 2
    assert ns.select_rank_nscl_style([100, 100]).k == 1
    assert ns.select_rank_nscl_style([100, 40, 1], factor=50).k == 1


def test_nscl_zero_minimum_falls_back():
    assert ns.select_rank_nscl_style([4, 2, 0.0]).k == 2


def test_select_dispatch():
    v = [100, 10, 1, 0.5, 0.01]
    assert ns.select(v, "psr").k == 3
    assert ns.select(v, "torch").method == "torch"
    with pytest.raises(ArgumentError):
        ns.select(v, "svd")


@settings(max_examples=60, deadline=None)
@given(r=st.integers(2, 6), m=st.integers(7, 40), seed=st.integers(0, 2**31))
def test_selector_ordering_clean_gap(r, m, seed):
    rng = np.random.default_rng(seed)
    signal = np.sort(rng.uniform(1.0, 2.0, r))[::-1] * 1e3
    tail = np.sort(rng.uniform(0, 1e-14, m - r))[::-1]
    values = np.concatenate([signal, tail])
    k_torch = ns.select_rank_torch_style(values).k
    k_psr = ns.select_rank_index(values, 0.1).k
    assert k_torch <= k_psr <= m


# -- projection ---------------------------------------------------------------


def test_projection_empty():
    basis = linalg.sym_eig(np.diag([3.0, 2.0, 1.0]))
    proj = ns.build_projection(basis, ns.RatioSelection(3, 0.0, 1, 0.1))
    np.testing.assert_array_equal(proj.delta.matrix, np.zeros((3, 3)))
    assert proj.delta.trace == 0


def test_projection_single_coordinate():
    basis = linalg.EigenBasis(np.array([3.0, 2.0, 1.0]), np.eye(3))
    proj = ns.build_projection(basis, ns.RatioSelection(2, 0.0, 1, 0.1))
    expected = np.zeros((3, 3))
    expected[2, 2] = 1.0
    np.testing.assert_array_equal(proj.delta.matrix, expected)


def test_projection_repeated_rows():
    rng = np.random.default_rng(21)
    r1, r2 = rng.standard_normal(8), rng.standard_normal(8)
    x = np.stack([r1, r2, r1, r2])
    basis = linalg.sym_eig(linalg.gram(x))
    sel = ns.select_rank_index(basis.values)
    assert sel.k == 2
    proj = ns.build_projection(basis, sel)
    assert abs(proj.delta.trace - 2) <= 0.5
    assert np.linalg.norm(proj.delta.matrix @ x) <= 1e-6 * np.linalg.norm(x)


def test_projection_bad_k():
    basis = linalg.sym_eig(np.eye(2))
    with pytest.raises(ArgumentError):
        ns.build_projection(basis, ns.RatioSelection(3, 0.0, 1, 0.1))


# -- alpha --------------------------------------------------------------------


def test_alpha_no_perturbation(rng):
    w = rng.standard_normal((4, 5))
    delta = linalg.projector_from_basis(random_orthonormal(rng, 5), 2)
    a = ns.solve_alpha(w, w.copy(), delta, 0.2)
    np.testing.assert_array_equal(a.values, np.ones(4))


def test_alpha_zero_row(rng):
    w = rng.standard_normal((3, 5))
    wq = qz.rtn_quantize(w, qz.QuantConfig(2, qz.PER_ROW)).w_q.copy()
    wq[1] = 0.0
    delta = linalg.projector_from_basis(random_orthonormal(rng, 5), 2)
    a = ns.solve_alpha(w, wq, delta, 0.2)
    assert a.values[1] == 1.0


def test_alpha_seed9_matches_oracles():
    w, wq, delta = random_instance(9)
    closed = ns.solve_alpha(w, wq, delta, 0.2)
    np.testing.assert_allclose(closed.values, lstsq_alpha(w, wq, delta.matrix, 0.2), rtol=0, atol=1e-12)
    curvature = np.max(np.sum(wq * wq, axis=1)) + 0.2
    gd = ns.bp_oracle(w, wq, delta, 0.2, epochs=5000, lr=0.5 / curvature)
    assert not gd.diverged
    np.testing.assert_allclose(closed.values, gd.values, rtol=0, atol=1e-6)


def test_alpha_matches_formula_directly():
    w, wq, delta = random_instance(4)
    h = w - (w - wq) @ delta.matrix
    expected = [(wq[i] @ h[i] + 0.2) / (wq[i] @ wq[i] + 0.2) for i in range(w.shape[0])]
    np.testing.assert_allclose(ns.solve_alpha(w, wq, delta).values, expected, rtol=1e-14)


def test_alpha_opt_out():
    wq = np.array([[1.0, 2.0], [1.0, -1.0]])
    w = np.array([[-3.0, -6.0], [1.2, -0.9]])
    a = ns.solve_alpha(w, wq, np.zeros((2, 2)), 0.2)
    assert a.opted_out.tolist() == [True, False]
    assert a.values[0] == 1.0 and a.n_opted_out == 1


def test_alpha_bad_lambda():
    w, wq, delta = random_instance(1)
    with pytest.raises(ArgumentError):
        ns.solve_alpha(w, wq, delta, 0.0)


def test_alpha_shape_checks():
    with pytest.raises(DimensionError):
        ns.solve_alpha(np.ones((2, 3)), np.ones((2, 4)), np.eye(3))
    with pytest.raises(DimensionError):
        ns.solve_alpha(np.ones((2, 3)), np.ones((2, 3)), np.eye(4))


def test_alpha_non_finite_target():
    with pytest.raises(NumericalError):
        ns.solve_alpha(np.array([[np.inf, 1.0]]), np.ones((1, 2)), np.eye(2))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), lam=st.floats(1e-3, 50), k=st.integers(0, 8))
def test_closed_form_is_optimal(seed, lam, k):
    w, wq, delta = random_instance(seed, k=k)
    closed = ns.solve_alpha(w, wq, delta, lam)
    assume(not closed.opted_out.any())
    f_closed = ns.objective(w, wq, delta, closed, lam)
    assert f_closed <= ns.objective(w, wq, delta, np.ones(6), lam) + 1e-9
    probe = closed.values + np.random.default_rng(seed).normal(0, 0.05, 6)
    assert f_closed <= ns.objective(w, wq, delta, probe, lam) + 1e-9
    for epochs in (1, 7):
        gd = ns.bp_oracle(w, wq, delta, lam, epochs=epochs, lr=1e-2)
        assert f_closed <= ns.objective(w, wq, delta, gd, lam) + 1e-9


def test_objective_by_hand():
    w = np.array([[1.0, 2.0]])
    wq = np.array([[1.0, 1.0]])
    delta = np.array([[0.0, 0.0], [0.0, 1.0]])
    # (W - Wq) Delta = [0, 1]; W - 2 Wq = [-1, 0]; residual [1, 1]; penalty 0.5 * 1.
    assert ns.objective(w, wq, delta, [2.0], 0.5) == pytest.approx(2.5)


@pytest.mark.parametrize("seed", range(5))
def test_regularizer_pulls_to_one(seed):
    w, wq, delta = random_instance(seed)
    devs = [np.max(np.abs(ns.solve_alpha(w, wq, delta, lam).values - 1)) for lam in (0.2, 2, 20, 200)]
    assert all(a >= b for a, b in zip(devs, devs[1:]))


def test_exact_null_space_limit():
    rng = np.random.default_rng(2)
    m, r = 16, 5
    x = rng.standard_normal((m, r)) @ rng.standard_normal((r, 40))
    w = rng.standard_normal((6, m))
    wq = qz.rtn_quantize(w, qz.QuantConfig(2, qz.PER_ROW)).w_q
    basis = linalg.sym_eig(linalg.gram(x))
    sel = ns.select_rank_index(basis.values, t=1e-8)
    assert sel.k == r
    delta = ns.build_projection(basis, sel).delta.matrix
    resid = np.linalg.norm((w - wq) @ delta @ x)
    assert resid <= 1e-6 * np.linalg.norm(w - wq) * np.linalg.norm(x)


# -- gradient-descent oracle ----------------------------------------------------


def test_bp_presets():
    assert ns.BP_EPOCHS == (20, 50, 100)
    assert ns.BP_LEARNING_RATES == (5e-4, 1e-3, 2e-3)


def test_bp_one_variable_converges():
    w = np.array([[2.0]])
    wq = np.array([[1.5]])
    delta = np.zeros((1, 1))
    closed = ns.solve_alpha(w, wq, delta, 0.2).values[0]
    # Curvature 2 * (2.25 + 0.2) = 4.9; lr 0.1 contracts by 0.51 per step.
    gd = ns.bp_oracle(w, wq, delta, 0.2, epochs=200, lr=0.1).values[0]
    assert gd == pytest.approx(closed, abs=1e-6)
    assert closed == pytest.approx((1.5 * 2.0 + 0.2) / (2.25 + 0.2))


@pytest.mark.parametrize("epochs", [0, -3])
def test_bp_rejects_bad_epochs(epochs):
    w, wq, delta = random_instance(0)
    with pytest.raises(ArgumentError):
        ns.bp_oracle(w, wq, delta, epochs=epochs)


def test_bp_divergence_reported(caplog):
    w, wq, delta = random_instance(0)
    gd = ns.bp_oracle(w, wq, delta, 0.2, epochs=100, lr=10.0)
    assert gd.diverged


def test_bp_keeps_zero_rows_at_one():
    w, wq, delta = random_instance(3)
    wq = wq.copy()
    wq[2] = 0
    gd = ns.bp_oracle(w, wq, delta, 0.2, epochs=20, lr=1e-3)
    assert gd.values[2] == 1.0


# -- apply_alpha ----------------------------------------------------------------


def test_apply_alpha_identity(rng):
    q = qz.rtn_quantize(rng.standard_normal((3, 8)), qz.QuantConfig(2, 4))
    out = ns.apply_alpha(q, ns.AlphaVector(np.ones(3), 0.2))
    np.testing.assert_array_equal(out.w_q, q.w_q)
    np.testing.assert_array_equal(out.scales, q.scales)


def test_apply_alpha_doubles():
    q = qz.rtn_quantize(np.array([[0.0, 1.0, 3.0]]), qz.QuantConfig(2, qz.PER_ROW))
    out = ns.apply_alpha(q, ns.AlphaVector(np.array([2.0]), 0.2))
    np.testing.assert_array_equal(out.w_q, 2.0 * q.w_q)


def test_apply_alpha_preserves_codes(rng):
    w = rng.standard_normal((5, 16))
    q = qz.rtn_quantize(w, qz.QuantConfig(3, 8))
    alpha = rng.uniform(0.5, 1.5, 5)
    out = ns.apply_alpha(q, alpha)
    assert out.codes.tobytes() == q.codes.tobytes()
    assert out.zeros.tobytes() == q.zeros.tobytes()
    np.testing.assert_allclose(out.w_q, alpha[:, None] * q.w_q, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(out.scales, q.scales * alpha[:, None])


def test_apply_alpha_rejects_non_positive(rng):
    q = qz.rtn_quantize(rng.standard_normal((2, 4)), qz.QuantConfig(2, qz.PER_ROW))
    with pytest.raises(NumericalError):
        ns.apply_alpha(q, np.array([1.0, 0.0]))
    with pytest.raises(DimensionError):
        ns.apply_alpha(q, np.ones(3))


def test_apply_alpha_reduces_layer_error():
    from q2n import calibgen

    x = calibgen.gen_activations(calibgen.SpectrumSpec(8, 64, "decay", seed=9, rate=0.6))
    w = calibgen.gen_weights(6, 8, 9)
    q = qz.rtn_quantize(w, qz.QuantConfig(2, qz.PER_ROW))
    basis = linalg.sym_eig(linalg.gram(x))
    proj = ns.build_projection(basis, ns.select_rank_index(basis.values))
    out = ns.apply_alpha(q, ns.solve_alpha(w, q.w_q, proj.delta))
    assert np.linalg.norm((w - out.w_q) @ x) <= np.linalg.norm((w - q.w_q) @ x)
