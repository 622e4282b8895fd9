from __future__ import annotations

import numpy as np
import pytest

from curve_equiv.constrain import feasibility_tol, fit_constrained, select_null_params
from curve_equiv.data import GroupSample, simulate_sample
from curve_equiv.errors import ConstraintInfeasible
from curve_equiv.fitting import fit_ols, pair_fits
from curve_equiv.metrics import Distance, dist_l2sq, dist_sup, gauss_legendre, l2sq_params, sup_params
from curve_equiv.models import CONSTANT, EMAX, EXPONENTIAL, LINEAR, QUADRATIC

DOSES = np.array([0.0, 1.0, 2.0, 3.0, 4.0])


def constant_samples(m1=0.4, m2=0.0):
    s1 = GroupSample(np.array([0.5]), (np.array([m1 - 0.1, m1 + 0.1]),), (0.0, 1.0))
    s2 = GroupSample(np.array([0.5]), (np.array([m2 - 0.1, m2 + 0.1]),), (0.0, 1.0))
    return s1, s2


def pooled_ssr(spec1, b1, s1, spec2, b2, s2):
    return sum(((r - spec.values(d, b)) ** 2).sum()
               for spec, b, s in ((spec1, b1, s1), (spec2, b2, s2))
               for d, r in zip(s.doses, s.responses))


def test_constant_lagrange_closed_form():
    s1, s2 = constant_samples()
    cf = fit_constrained(CONSTANT, CONSTANT, s1, s2, 1.0, "l2sq")
    assert cf.beta1_tilde[0] == pytest.approx(0.7, abs=1e-6)
    assert cf.beta2_tilde[0] == pytest.approx(-0.3, abs=1e-6)
    assert cf.constraint_residual <= 1e-6
    assert cf.used_constrained and cf.converged


def test_constant_sup_closed_form():
    # the same split applies to the maximal deviation |b - c| = 1
    s1, s2 = constant_samples()
    cf = fit_constrained(CONSTANT, CONSTANT, s1, s2, 1.0, "sup")
    assert cf.beta1_tilde[0] == pytest.approx(0.7, abs=1e-5)
    assert cf.beta2_tilde[0] == pytest.approx(-0.3, abs=1e-5)


def test_negative_branch_is_chosen_when_nearer():
    s1, s2 = constant_samples(-0.4, 0.0)
    cf = fit_constrained(CONSTANT, CONSTANT, s1, s2, 1.0, "l2sq")
    assert cf.beta1_tilde[0] == pytest.approx(-0.7, abs=1e-6)
    assert cf.beta2_tilde[0] == pytest.approx(0.3, abs=1e-6)


def exact_emax_samples(delta):
    mk = lambda b: GroupSample(DOSES, tuple(np.full(4, v) for v in EMAX.values(DOSES, b)), (0.0, 4.0))
    return mk([delta, 5.0, 1.0]), mk([0.0, 5.0, 1.0])


def test_zero_noise_on_manifold_recovers_generating_parameters():
    s1, s2 = exact_emax_samples(0.5)     # difference 0.5 everywhere: d2 = 1
    cf = fit_constrained(EMAX, EMAX, s1, s2, 1.0, "l2sq")
    assert cf.constraint_residual <= 1e-8
    np.testing.assert_allclose(EMAX.values(DOSES, cf.beta1_tilde), EMAX.values(DOSES, [0.5, 5, 1]),
                               atol=1e-6)
    np.testing.assert_allclose(EMAX.values(DOSES, cf.beta2_tilde), EMAX.values(DOSES, [0, 5, 1]),
                               atol=1e-6)
    assert cf.objective <= 1e-10


def test_infeasible_threshold():
    s1, s2 = constant_samples()
    with pytest.raises(ConstraintInfeasible):
        fit_constrained(CONSTANT, CONSTANT, s1, s2, 1e12, "l2sq")
    with pytest.raises(ConstraintInfeasible):
        fit_constrained(CONSTANT, CONSTANT, s1, s2, -1.0, "l2sq")


def _instances():
    rng = np.random.default_rng(2718)
    pairs = [(EMAX, [0.0, 5.0, 1.0], EMAX, [0.2, 5.0, 1.0]),
             (EMAX, [1.0, 2.0, 1.0], EXPONENTIAL, [0.75, 2.2, 8.0]),
             (QUADRATIC, [0.5, -1.5, 1.5], LINEAR, [0.5, 0.5]),
             (LINEAR, [0.0, 0.1], LINEAR, [0.1, 0.1])]
    out = []
    for i in range(50):
        spec1, b1, spec2, b2 = pairs[i % len(pairs)]
        s1 = simulate_sample(spec1, b1, DOSES, [10] * 5, 0.25, rng)
        s2 = simulate_sample(spec2, b2, DOSES, [10] * 5, 0.25, rng)
        distance = Distance.L2SQ if i % 2 == 0 else Distance.SUP
        eps = float(rng.uniform(0.5, 2.0))
        out.append((spec1, spec2, s1, s2, distance, eps))
    return out


def test_feasibility_and_dominance_on_random_instances():
    for spec1, spec2, s1, s2, distance, eps in _instances():
        f1, f2 = fit_ols(spec1, s1), fit_ols(spec2, s2)
        cf = fit_constrained(spec1, spec2, s1, s2, eps, distance, fits=(f1, f2))
        if distance is Distance.L2SQ:
            d = float(l2sq_params(spec1, cf.beta1_tilde, spec2, cf.beta2_tilde,
                                  gauss_legendre((0.0, 4.0))))
        else:
            d = sup_params(spec1, cf.beta1_tilde, spec2, cf.beta2_tilde, (0.0, 4.0)).value
        assert abs(d - eps) <= feasibility_tol(eps)
        assert cf.constraint_residual <= 1e-6 * max(1.0, eps)
        obj = pooled_ssr(spec1, cf.beta1_tilde, s1, spec2, cf.beta2_tilde, s2)
        assert obj == pytest.approx(cf.objective, rel=1e-9, abs=1e-12)
        # a constrained minimum can never beat the unconstrained one
        assert obj >= f1.ssr + f2.ssr - 1e-9


def test_objective_not_above_extra_feasible_start():
    rng = np.random.default_rng(8)
    s1 = simulate_sample(EMAX, [0.0, 5.0, 1.0], DOSES, [10] * 5, 0.25, rng)
    s2 = simulate_sample(EMAX, [0.1, 5.0, 1.0], DOSES, [10] * 5, 0.25, rng)
    # exactly feasible: a pure intercept shift of 0.5 gives d2 = 1
    f2 = fit_ols(EMAX, s2)
    start = (f2.beta_hat + [0.5, 0.0, 0.0], f2.beta_hat)
    cf = fit_constrained(EMAX, EMAX, s1, s2, 1.0, "l2sq", starts=[start])
    assert cf.objective <= pooled_ssr(EMAX, start[0], s1, EMAX, start[1], s2) + 1e-12


def test_local_optimality_for_l2_constraint():
    rng = np.random.default_rng(99)
    s1 = simulate_sample(EMAX, [0.2, 5.0, 1.0], DOSES, [10] * 5, 0.25, rng)
    s2 = simulate_sample(QUADRATIC, [-0.2, 1.5, 0.3], DOSES, [10] * 5, 0.25, rng)
    cf = fit_constrained(EMAX, QUADRATIC, s1, s2, 1.0, "l2sq")
    b1, b2 = cf.beta1_tilde, cf.beta2_tilde
    # inactive box bounds are required for a stationarity check
    for spec, b in ((EMAX, b1), (QUADRATIC, b2)):
        assert np.all(b > spec.lower) and np.all(b < spec.upper)
    grad = []
    for spec, b, s in ((EMAX, b1, s1), (QUADRATIC, b2, s2)):
        r = s.means - spec.values(s.doses, b)
        grad.append(-2.0 * (s.counts * r) @ spec.gradients(s.doses, b))
    grad = np.concatenate(grad)
    q = gauss_legendre((0.0, 4.0))
    delta = EMAX.values(q.nodes, b1) - QUADRATIC.values(q.nodes, b2)
    cgrad = np.concatenate([2.0 * (q.weights * delta) @ EMAX.gradients(q.nodes, b1),
                            -2.0 * (q.weights * delta) @ QUADRATIC.gradients(q.nodes, b2)])
    u = cgrad / np.linalg.norm(cgrad)
    tangent = grad - (grad @ u) * u
    assert np.linalg.norm(tangent) <= 1e-4 * max(1.0, np.linalg.norm(grad))


def test_select_null_params_cases():
    rng = np.random.default_rng(3)
    s1 = simulate_sample(EMAX, [1.0, 5.0, 1.0], DOSES, [10] * 5, 0.01, rng)
    s2 = simulate_sample(EMAX, [0.0, 5.0, 1.0], DOSES, [10] * 5, 0.01, rng)
    f1, f2 = fit_ols(EMAX, s1), fit_ols(EMAX, s2)
    pf = pair_fits(f1, f2)
    d_hat = dist_l2sq(pf)
    assert d_hat == pytest.approx(4.0, rel=0.05)
    b1, b2 = select_null_params(pf, 1.0, "l2sq", None)
    assert b1 is pf.beta1 and b2 is pf.beta2

    s1b = simulate_sample(EMAX, [0.0, 5.0, 1.0], DOSES, [10] * 5, 0.01, rng)
    f1b = fit_ols(EMAX, s1b)
    pf0 = pair_fits(f1b, f2)
    assert dist_l2sq(pf0) < 0.01
    cf = fit_constrained(EMAX, EMAX, s1b, s2, 1.0, "l2sq", fits=(f1b, f2))
    b1, b2 = select_null_params(pf0, 1.0, "l2sq", cf)
    assert b1 is cf.beta1_tilde
    assert float(l2sq_params(EMAX, b1, EMAX, b2, gauss_legendre((0.0, 4.0)))) == pytest.approx(
        1.0, abs=1e-6)
    with pytest.raises(ValueError):
        select_null_params(pf0, 1.0, "l2sq", None)


def test_select_null_params_plateau_for_sup():
    rng = np.random.default_rng(4)
    s1 = simulate_sample(EMAX, [0.3, 5.0, 1.0], DOSES, [10] * 5, 0.25, rng)
    s2 = simulate_sample(EMAX, [0.0, 5.0, 1.0], DOSES, [10] * 5, 0.25, rng)
    pf = pair_fits(fit_ols(EMAX, s1), fit_ols(EMAX, s2))
    d_hat = dist_sup(pf).value
    for eps in (0.25 * d_hat, 0.5 * d_hat, d_hat):
        b1, b2 = select_null_params(pf, eps, "sup", None)
        assert b1 is pf.beta1 and b2 is pf.beta2
