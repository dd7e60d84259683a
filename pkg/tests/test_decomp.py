import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sbheom.bath import BathSpec, correlation_series, ohmic_imag_closed_form
from sbheom.decomp import (COS, DECAY, LINEAR, SIN, BasisFunction, BasisTemplate, CorrelationFit,
                           ExtrapolationWarning, FitConfig, _Projection, build_closure,
                           closure_residual, evaluate_fit, fit_correlation, fit_error_report,
                           fit_part)
from sbheom.errors import FitError, GridMismatchError, StructureError

GRID = np.linspace(0.0, 50.0, 1000)


def test_closure_single_decay():
    assert build_closure([BasisFunction(DECAY, 2.0)]).tolist() == [[-2.0]]


def test_closure_oscillatory_pair():
    eta = build_closure([BasisFunction(COS, 1.0, 3.0), BasisFunction(SIN, 1.0, 3.0)])
    assert eta.tolist() == [[-1.0, -3.0], [3.0, -1.0]]


def test_closure_linear_pair():
    eta = build_closure([BasisFunction(LINEAR, 1.0), BasisFunction(DECAY, 1.0)])
    assert eta.tolist() == [[-1.0, 1.0], [0.0, -1.0]]


def test_unpaired_sine_is_structural_error():
    with pytest.raises(StructureError):
        build_closure([BasisFunction(SIN, 1.0, 2.0)])
    with pytest.raises(StructureError):
        build_closure([BasisFunction(SIN, 1.0, 2.0), BasisFunction(COS, 1.0, 2.5)])


def test_orphan_linear_is_structural_error():
    with pytest.raises(StructureError):
        build_closure([BasisFunction(LINEAR, 1.0), BasisFunction(DECAY, 2.0)])


def test_nonpositive_rate_rejected():
    with pytest.raises(StructureError):
        BasisFunction(DECAY, 0.0)


rates = st.floats(1e-3, 10.0)


@st.composite
def bases(draw):
    out = []
    for _ in range(draw(st.integers(0, 3))):
        out.append(BasisFunction(DECAY, draw(rates)))
    for _ in range(draw(st.integers(0, 2))):
        g, w = draw(rates), draw(st.floats(0.01, 10.0))
        out += [BasisFunction(COS, g, w), BasisFunction(SIN, g, w)]
    for _ in range(draw(st.integers(0, 2))):
        g = draw(rates)
        out += [BasisFunction(LINEAR, g), BasisFunction(DECAY, g)]
    order = draw(st.permutations(range(len(out))))
    return [out[i] for i in order]


@settings(max_examples=60, deadline=None)
@given(bases())
def test_closure_identity_holds_to_machine_precision(basis):
    assert closure_residual(basis, GRID) < 1e-12


def test_exactly_realizable_target():
    t = np.linspace(0, 400, 1500)
    y = 3 * np.exp(-0.5 * t) - np.exp(-0.01 * t)
    fit = fit_part(t, y, BasisTemplate(2, 0, 0))
    order = np.argsort([b.rate for b in fit.basis])
    assert [fit.basis[i].rate for i in order] == pytest.approx([0.01, 0.5], rel=1e-8)
    assert [fit.coeffs[i] for i in order] == pytest.approx([-1.0, 3.0], rel=1e-8)
    assert fit.max_error < 1e-10
    cf = CorrelationFit(fit.basis, [BasisFunction(DECAY, 1.0)], fit.coeffs, [0.0], 400.0)
    assert evaluate_fit(cf, 0.0) == pytest.approx(2.0, abs=1e-10)


def test_projection_never_worse_than_fixed_coefficients():
    t = np.linspace(0, 100, 400)
    y = np.exp(-0.3 * t) * (1 + 0.1 * np.sin(t))
    proj = _Projection(t, y, BasisTemplate(3, 0, 0))
    p = np.log([0.05, 0.3, 2.0])
    r_opt = np.linalg.norm(proj.residual(p))
    phi = np.array([np.exp(-g * t) for g in np.exp(p)]).T
    rng = np.random.default_rng(1)
    for _ in range(20):
        a = proj.coefficients(p) + rng.normal(0, 1e-3, 3)
        assert np.linalg.norm(phi @ a - y) >= r_opt - 1e-14


def test_nan_target_rejected():
    t = np.linspace(0, 10, 50)
    y = np.exp(-t)
    y[3] = np.nan
    with pytest.raises(FitError):
        fit_correlation((t, y, y), FitConfig(n_R=2, n_I=2, linear_R=0, linear_I=0))


def test_zero_basis_rejected():
    t = np.linspace(0, 10, 50)
    with pytest.raises(FitError):
        fit_correlation((t, np.exp(-t), np.exp(-t)), FitConfig(n_R=0, n_I=1, linear_R=0, linear_I=0))


def test_report_grid_mismatch():
    t = np.linspace(0, 10, 50)
    fit = CorrelationFit.zero([BasisFunction(DECAY, 1.0)], [BasisFunction(DECAY, 1.0)], 10.0)
    with pytest.raises(GridMismatchError):
        fit_error_report(fit, (t, np.zeros(50), np.zeros(49)))


def test_perfect_fit_reports_zero_errors():
    t = np.linspace(0, 10, 50)
    fit = CorrelationFit([BasisFunction(DECAY, 1.0)], [BasisFunction(DECAY, 2.0)], [1.5], [-0.5], 10.0)
    d_r, d_i, summary = fit_error_report(fit, (t, 1.5 * np.exp(-t), -0.5 * np.exp(-2 * t)))
    assert not d_r.any() and not d_i.any()
    assert summary["max_R"] == 0.0 and summary["max_I"] == 0.0


def test_extrapolation_is_flagged():
    fit = CorrelationFit([BasisFunction(DECAY, 1.0)], [BasisFunction(DECAY, 1.0)], [1.0], [0.0], 10.0)
    with pytest.warns(ExtrapolationWarning):
        evaluate_fit(fit, 11.0)


@pytest.fixture(scope="module")
def ohmic_fit():
    target = correlation_series(500.0, 1500, BathSpec(1.0, 0.5))
    return target, fit_correlation(target, FitConfig(n_R=9, n_I=2))


def test_ohmic_imaginary_fit_is_exact_linear_pair(ohmic_fit):
    _, fit = ohmic_fit
    kinds = {b.kind: (b, a) for b, a in zip(fit.basis_I, fit.a_I)}
    lin, a_lin = kinds[LINEAR]
    assert lin.rate == pytest.approx(1.0, rel=1e-8)
    assert a_lin == pytest.approx(-math.pi / 8 * 0.5, rel=1e-6)


def test_fit_residual_bounded_by_summary(ohmic_fit):
    target, fit = ohmic_fit
    assert fit.quality_ok
    d_r, d_i, _ = fit_error_report(fit, target)
    assert np.abs(d_r).max() <= fit.residual["max_R"]
    assert np.abs(d_i).max() <= fit.residual["max_I"]
    t = np.linspace(0, 500, 777)
    vals = evaluate_fit(fit, t)
    assert np.abs(vals.imag - ohmic_imag_closed_form(t, BathSpec(1.0, 0.5))).max() < 5e-5


def test_fit_value_at_zero_is_coefficient_sum(ohmic_fit):
    _, fit = ohmic_fit
    c0 = evaluate_fit(fit, 0.0)
    assert c0.real == pytest.approx(float(np.dot(fit.a_R, fit.phi0_R)), rel=1e-14)
    assert c0.imag == pytest.approx(float(np.dot(fit.a_I, fit.phi0_I)), abs=1e-15)


def test_serialization_round_trip_is_exact(ohmic_fit):
    _, fit = ohmic_fit
    back = CorrelationFit.loads(fit.dumps())
    assert back.dumps() == fit.dumps()
    assert back.hash == fit.hash
    assert np.array_equal(back.a_R, fit.a_R) and np.array_equal(back.eta_I, fit.eta_I)


def test_fit_is_deterministic_for_seed():
    target = correlation_series(100.0, 300, BathSpec(0.5, 0.5))
    cfg = FitConfig(n_R=4, n_I=4, multistart=4, seed=7)
    assert fit_correlation(target, cfg).dumps() == fit_correlation(target, cfg).dumps()


def test_scaling_is_linear(ohmic_fit):
    _, fit = ohmic_fit
    t = np.linspace(0, 50, 30)
    assert np.allclose(fit.scaled(0.2).evaluate(t), 0.2 * fit.evaluate(t), rtol=1e-13, atol=1e-16)


# Reference parameter sets for s = 0.1, alpha = 0.5, t_max = 2400.
REFERENCE_RATES_R = [3.953, 1.059, 1.001, 0.34, 0.112, 3.66e-2, 1.149e-2, 3.2e-3, 5.4e-4]
REFERENCE_PAIR_I = (2.108, 0.793)


@pytest.fixture(scope="module")
def deep_subohmic_target():
    return correlation_series(2400.0, 2000, BathSpec(0.1, 0.5))


def test_reference_real_rates_form_a_valid_decomposition(deep_subohmic_target):
    tgt = deep_subohmic_target
    proj = _Projection(tgt.t, tgt.real, BasisTemplate(9, 0, 0))
    assert np.abs(proj.residual(np.log(REFERENCE_RATES_R))).max() < 5e-5


def test_deep_subohmic_real_fit_quality(deep_subohmic_target):
    fit = fit_part(deep_subohmic_target.t, deep_subohmic_target.real, BasisTemplate.for_size(9, 0, 1))
    assert fit.max_error < 5e-5


def _matches(found, wanted, rel):
    found = sorted(found, reverse=True)
    wanted = sorted(wanted, reverse=True)
    return len(found) == len(wanted) and all(abs(f - w) <= rel * w for f, w in zip(found, wanted))


@pytest.mark.xfail(strict=True, reason="fits are non-unique; the least-squares optimum has a "
                                       "different short-time rate set (see decisions ledger)")
def test_deep_subohmic_real_rates_near_reference(deep_subohmic_target):
    fit = fit_part(deep_subohmic_target.t, deep_subohmic_target.real, BasisTemplate(9, 0, 0))
    assert _matches([b.rate for b in fit.basis], REFERENCE_RATES_R, 0.2)


@pytest.mark.xfail(strict=True, reason="the reference oscillatory pair is not a least-squares "
                                       "optimum for this target (see decisions ledger)")
def test_deep_subohmic_imag_pair_near_reference(deep_subohmic_target):
    fit = fit_part(deep_subohmic_target.t, deep_subohmic_target.imag, BasisTemplate(8, 1, 0))
    cos = [b for b in fit.basis if b.kind == COS][0]
    assert cos.freq == pytest.approx(REFERENCE_PAIR_I[0], rel=0.2)
    assert cos.rate == pytest.approx(REFERENCE_PAIR_I[1], rel=0.2)
