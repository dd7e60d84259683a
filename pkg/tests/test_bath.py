import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, optimize, special

from sbheom.bath import (BathSpec, correlation_at_zero, correlation_series, correlation_value,
                         hybrid_grid, ohmic_imag_closed_form, spectral_density, tail_exponent)
from sbheom.errors import DomainError, QuadratureError
from sbheom.series import TimeSeries


def test_bath_spec_validation():
    with pytest.raises(DomainError):
        BathSpec(s=0.0, alpha=0.1)
    with pytest.raises(DomainError):
        BathSpec(s=0.5, alpha=-0.1)
    with pytest.raises(DomainError):
        BathSpec(s=0.5, alpha=0.1, omega_c=0.0)
    with pytest.raises(DomainError):
        BathSpec(s=0.5, alpha=0.1, cutoff="exponential")
    assert BathSpec(0.5, 0.1).zero_temperature
    assert not BathSpec(0.5, 0.1, temperature=0.1).zero_temperature


def test_spectral_density_values():
    spec = BathSpec(1.0, 0.5, omega_c=2.0)
    assert spectral_density(2.0, spec) == pytest.approx(math.pi * 2.0 / 16, rel=1e-15)
    assert spectral_density(0.0, BathSpec(0.3, 0.5)) == 0.0
    with pytest.raises(DomainError):
        spectral_density(-1.0, spec)


def test_spectral_density_maximum_for_ohmic():
    spec = BathSpec(1.0, 0.5)
    res = optimize.minimize_scalar(lambda w: -spectral_density(w, spec), bounds=(0.01, 5),
                                   method="bounded", options={"xatol": 1e-10})
    assert res.x == pytest.approx(1 / math.sqrt(3), abs=1e-6)


@pytest.mark.parametrize("s", [0.1, 0.5, 0.7, 1.0])
def test_value_at_zero_matches_beta_function(s):
    spec = BathSpec(s, 0.5)
    c0 = correlation_value(0.0, spec)
    assert c0.imag == 0.0
    assert c0.real == pytest.approx(0.125 * special.beta((s + 1) / 2, (3 - s) / 2), rel=1e-9)
    assert correlation_at_zero(spec) == pytest.approx(c0.real, rel=1e-9)


def test_value_at_zero_ohmic_is_one_eighth():
    assert correlation_value(0.0, BathSpec(1.0, 0.5)).real == pytest.approx(0.125, rel=1e-12)


@pytest.mark.parametrize("t", [0.3, 2.0, 17.0])
def test_imaginary_part_matches_direct_real_axis_integral(t):
    # brute-force oracle: -(1/pi) int J sin(w t) dw on a fine finite-interval quadrature
    spec = BathSpec(0.5, 0.5)
    f = lambda w: -spectral_density(w, spec) * math.sin(w * t) / math.pi
    edges = np.linspace(0, 2000, int(2000 * t / math.pi) + 400)
    direct = sum(integrate.quad(f, a, b, epsabs=1e-14, epsrel=1e-12, limit=200)[0]
                 for a, b in zip(edges[:-1], edges[1:]))
    # J(w > 2000) ~ w^-3.5, so the truncated tail is below 1e-9
    assert correlation_value(t, spec).imag == pytest.approx(direct, abs=2e-7)


@pytest.mark.parametrize("t", [0.0, 0.5, 3.0, 12.0, 60.0, 250.0])
@pytest.mark.parametrize("s", [0.1, 0.5, 1.0])
def test_contour_and_real_axis_routes_agree(s, t):
    spec = BathSpec(s, 0.5)
    a = correlation_value(t, spec, method="contour")
    b = correlation_value(t, spec, method="real-axis")
    assert abs(a - b) <= 1e-8 * max(abs(a), 1e-6)


def test_ohmic_closed_form_everywhere_on_series():
    spec = BathSpec(1.0, 0.5)
    ser = correlation_series(50.0, 200, spec)
    assert np.abs(ser.imag - ohmic_imag_closed_form(ser.t, spec)).max() < 1e-8


@pytest.mark.parametrize("s", [0.1, 0.5, 0.7, 1.0])
def test_imaginary_part_never_positive(s):
    ser = correlation_series(300.0, 120, BathSpec(s, 0.5))
    # for s = 1 the exact value underflows (t e^{-t}); allow roundoff-level noise
    assert np.all(ser.imag <= 1e-18)
    assert np.all(ser.imag[(ser.t > 0) & (ser.t < 20)] < 0) and ser.imag[0] == 0.0


def test_deep_subohmic_real_part_changes_sign_once():
    ser = correlation_series(2400.0, 300, BathSpec(0.1, 0.5))
    signs = np.sign(ser.real)
    assert signs[0] > 0 and signs[-1] < 0
    assert np.count_nonzero(np.diff(signs)) == 1


def test_two_sample_series_has_endpoints_only():
    ser = correlation_series(10.0, 2, BathSpec(0.5, 0.5))
    assert ser.t.tolist() == [0.0, 10.0]


def test_hybrid_grid_shape():
    t = hybrid_grid(500.0, 2000)
    assert t.size == 2000 and t[0] == 0.0 and t[-1] == 500.0
    assert np.all(np.diff(t) > 0)
    assert np.count_nonzero(t <= 10.0) > 400


def test_refinement_is_within_error_estimate():
    spec = BathSpec(0.5, 0.5)
    for t in [1.0, 40.0, 900.0]:
        loose = correlation_value(t, spec, tol=1e-8)
        tight = correlation_value(t, spec, tol=1e-11)
        assert abs(loose - tight) <= 1e-8 * abs(tight)


def test_unreachable_tolerance_raises_with_estimate():
    with pytest.raises(QuadratureError) as info:
        correlation_value(700.0, BathSpec(0.5, 0.5), tol=1e-17, method="real-axis")
    assert info.value.estimate > 0


def test_negative_time_rejected():
    with pytest.raises(DomainError):
        correlation_value(-1.0, BathSpec(0.5, 0.5))


def test_tail_exponent_exact_power_law():
    t = np.linspace(10, 1000, 500)
    ser = TimeSeries(10.0, t[1] - t[0], 3.0 * t**-1.1, {})
    assert tail_exponent(ser, (20.0, 900.0)) == pytest.approx(-1.1, abs=1e-6)


def test_tail_exponent_rejects_sign_change():
    t = np.linspace(0, 10, 101)
    ser = TimeSeries(0.0, 0.1, np.cos(t), {})
    with pytest.raises(DomainError):
        tail_exponent(ser, (0.5, 9.0))


def test_tail_exponent_window_outside_series():
    ser = TimeSeries(1.0, 1.0, np.ones(10), {})
    with pytest.raises(DomainError):
        tail_exponent(ser, (2.0, 50.0))


def test_real_part_tail_half_ohmic():
    spec = BathSpec(0.5, 0.5)
    t = np.linspace(200, 2000, 40)
    ser = SimpleNamespace(t=t, values=np.array([correlation_value(x, spec).real for x in t]))
    assert tail_exponent(ser, (200.0, 2000.0)) == pytest.approx(-1.5, abs=0.05)


@settings(max_examples=25, deadline=None)
@given(s=st.floats(0.05, 1.0), alpha=st.floats(0.0, 2.0), t=st.floats(0.0, 50.0))
def test_linear_in_alpha(s, alpha, t):
    one = correlation_value(t, BathSpec(s, 1.0))
    assert correlation_value(t, BathSpec(s, alpha)) == pytest.approx(alpha * one, rel=1e-12, abs=1e-300)


@settings(max_examples=20, deadline=None)
@given(w=st.floats(0.0, 100.0), s=st.floats(0.05, 1.5))
def test_spectral_density_nonnegative(w, s):
    assert spectral_density(w, BathSpec(s, 0.3)) >= 0.0
