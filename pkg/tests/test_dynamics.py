import math

import numpy as np
import pytest
from scipy import stats

from trapnet.dynamics import (
    IntegrationError,
    IonState,
    UnstableTrajectory,
    charge_to_mass_for_q,
    gradient_scale,
    integrate,
    mathieu_q,
    mathieu_secular_frequency,
    micromotion_amplitude,
    pseudo_force,
    pseudopotential_per_mass,
    secular_average,
    secular_compare,
)
from trapnet.intersection import theta_x
from trapnet.multipole import MultipoleField, field

from oracles import mathieu_beta, quartic_period

OMEGA = 2 * math.pi
GUIDE = MultipoleField(quadrupole=np.diag([1.0, -1.0, 0.0]))


def run_guide(q, omega=OMEGA, steps=100, start=(0.05, 0, 0), periods=None):
    kappa = charge_to_mass_for_q(q, gradient_scale(GUIDE), omega)
    t_rf = 2 * math.pi / omega
    if periods is None:
        periods = math.ceil(4 * 2 * math.sqrt(2) / q)
    rec = integrate(GUIDE, omega, kappa, IonState(start), periods * t_rf, t_rf / steps)
    return rec, secular_compare(rec, GUIDE)


def test_mathieu_q_round_trip():
    assert gradient_scale(GUIDE) == pytest.approx(1.0)
    k = charge_to_mass_for_q(0.1, 1.0, OMEGA)
    assert mathieu_q(k, 1.0, OMEGA) == pytest.approx(0.1)
    with pytest.raises(ValueError):
        charge_to_mass_for_q(0.1, 0.0, OMEGA)


def test_quadrupole_guide_secular_frequency():
    rec, rep = run_guide(0.1)
    predicted = 2 * math.pi / mathieu_secular_frequency(0.1, OMEGA)
    assert rep.status == "confined"
    assert rep.observed_period == pytest.approx(predicted, rel=0.02)
    # the lowest-order relation agrees with the exact Mathieu exponent at this q
    beta = mathieu_beta(0.1)
    assert beta * OMEGA / 2 == pytest.approx(mathieu_secular_frequency(0.1, OMEGA), rel=0.01)
    assert rep.relative_error < 0.02
    assert np.max(np.abs(rec.positions)) < 0.1


def test_free_flight():
    rec = integrate(MultipoleField(), OMEGA, 1.0, IonState([0.1, 0, 0], [0.01, -0.02, 0.03]), 3.0, 0.01)
    expected = rec.positions[0] + np.outer(rec.times, [0.01, -0.02, 0.03])
    np.testing.assert_allclose(rec.positions, expected, atol=1e-14)


def test_motion_along_zero_line_has_no_transverse_growth():
    th = math.pi / 6
    d = np.array([math.cos(th), math.sin(th), 0.0])
    rec = integrate(theta_x(th), OMEGA, 2.0, IonState(0.2 * d, 0.01 * d), 100, 1 / 100, sample_every=10)
    p = rec.positions
    transverse = np.linalg.norm(p - np.outer(p @ d, d), axis=1)
    assert transverse.max() < 1e-6
    assert p[-1] @ d == pytest.approx(0.2 + 0.01 * 100)


def test_step_validation():
    with pytest.raises(IntegrationError):
        integrate(GUIDE, OMEGA, 1.0, IonState([0.1, 0, 0]), 1.0, 1 / 40)
    with pytest.raises(IntegrationError):
        integrate(GUIDE, OMEGA, 1.0, IonState([0.1, 0, 0]), 1.005, 1 / 100)
    with pytest.raises(ValueError):
        IonState([np.nan, 0, 0])


def test_quartic_well_period():
    th, kappa, amp = math.pi / 6, 2.0, 0.3
    f = theta_x(th)
    rec = integrate(f, OMEGA, kappa, IonState([0, amp, 0]), 200, 1 / 64)
    rep = secular_compare(rec, f)
    # per-mass pseudopotential on the y axis: kappa^2 / (4 omega^2) * 9 alpha^2 cos^4 theta * y^4
    k4 = kappa**2 / (4 * OMEGA**2) * 9 * math.cos(th) ** 4
    oracle = quartic_period(k4, amp)
    assert rep.status == "confined"
    assert rep.observed_period == pytest.approx(oracle, rel=0.05)
    assert rep.predicted_period == pytest.approx(oracle, rel=0.02)


def test_pseudopotential_on_axis_matches_quartic():
    th, kappa = math.pi / 6, 2.0
    k4 = kappa**2 / (4 * OMEGA**2) * 9 * math.cos(th) ** 4
    u = pseudopotential_per_mass(theta_x(th), [0, 0.3, 0], kappa, OMEGA)
    assert u == pytest.approx(k4 * 0.3**4, rel=1e-12)
    g = pseudo_force(theta_x(th), [0, 0.3, 0], kappa, OMEGA)[0]
    np.testing.assert_allclose(g, [0, -4 * k4 * 0.3**3, 0], atol=1e-14)
    # finite-difference path for non-multipole sources
    fd = pseudo_force(lambda r: field(theta_x(th), r), [0, 0.3, 0], kappa, OMEGA)[0]
    np.testing.assert_allclose(fd, g, atol=1e-9)


def test_theta_pi_over_4_is_unconfined_along_z():
    f = theta_x(math.pi / 4)
    rec = integrate(f, OMEGA, 2.0, IonState([0, 0, 0.05], [0, 0, 0.01]), 30, 1 / 64)
    rep = secular_compare(rec, f)
    assert rep.status == "unconfined" and not rep.confined


def test_unstable_parameters_detected():
    with pytest.raises(UnstableTrajectory):
        run_guide(1.2, periods=40)


def test_csv_header(tmp_path):
    rec = integrate(GUIDE, OMEGA, 1.0, IonState([0.1, 0, 0]), 1.0, 0.01, sample_every=5)
    rec.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "t,x,y,z,vx,vy,vz"
    assert len(lines) == 1 + 21
    data = np.loadtxt(tmp_path / "t.csv", delimiter=",", skiprows=1)
    np.testing.assert_allclose(np.diff(data[:, 0]), 0.05)


def test_secular_average_of_pure_micromotion():
    rec = integrate(MultipoleField(dipole=[1.0, 0, 0]), OMEGA, 1.0, IonState([0, 0, 0]), 4.0, 1 / 100)
    # x'' = cos(2 pi t): x = (1 - cos 2 pi t) / (2 pi)^2, whose period average is constant
    _, sec = secular_average(rec)
    np.testing.assert_allclose(sec[:, 0], 1 / OMEGA**2, atol=1e-6)


# properties


@pytest.mark.property
def test_integrator_convergence_order():
    f, kappa = theta_x(math.pi / 6), 2.0
    start = IonState([0.3, 0.1, 0.05], [0.01, 0, 0])
    ref = integrate(f, OMEGA, kappa, start, 5, 1 / 800).positions[-1]
    e1 = np.linalg.norm(integrate(f, OMEGA, kappa, start, 5, 1 / 50).positions[-1] - ref)
    e2 = np.linalg.norm(integrate(f, OMEGA, kappa, start, 5, 1 / 100).positions[-1] - ref)
    assert e1 / e2 >= 8


@pytest.mark.property
@pytest.mark.slow
def test_adiabatic_error_shrinks_as_drive_frequency_doubles():
    kappa = charge_to_mass_for_q(0.4, 1.0, OMEGA)
    errors = []
    for k in range(4):
        omega = OMEGA * 2**k
        q = mathieu_q(kappa, 1.0, omega)
        _, rep = run_guide(q, omega=omega, steps=64)
        errors.append(rep.relative_error)
    assert all(b <= a for a, b in zip(errors, errors[1:])), errors


@pytest.mark.property
def test_micromotion_tracks_field_magnitude():
    th, kappa, x0 = math.pi / 6, 2.0, 0.5
    f = theta_x(th)
    offsets = np.array([0.0, 0.02, 0.04, 0.06, 0.08])
    pts = np.column_stack([np.full(5, x0), x0 * math.tan(th) + offsets, np.zeros(5)])
    rec = integrate(f, OMEGA, kappa, IonState(pts), 3, 1 / 200)
    amp = micromotion_amplitude(rec)
    emag = np.linalg.norm(field(f, pts), axis=1)
    assert amp[0] < 1e-9
    fit = stats.linregress(emag, amp)
    assert fit.rvalue**2 > 0.99
