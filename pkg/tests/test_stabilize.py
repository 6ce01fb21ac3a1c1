import math

import numpy as np
import pytest
import scipy.linalg

from strider.stabilize import (
    CapturePointFeedback,
    CompliantLipm,
    compliant_step,
    czmp,
    damping_feedback,
    foot_weight_distribution,
)


def lightly_damped(zeta=0.05):
    m, k = 40.0, 2000.0
    return CompliantLipm(mass=m, stiffness=k, damping=2 * zeta * math.sqrt(k * m))


class TestCompliantStep:
    def test_equilibrium_is_fixed(self):
        model = CompliantLipm(state=[0.02, 0.0])
        for _ in range(100):
            state, y_zmp = compliant_step(model, 0.02, 0.002)
        np.testing.assert_allclose(state, [0.02, 0.0], atol=1e-12)
        assert y_zmp == pytest.approx(0.02, abs=1e-12)

    def test_undamped_oscillation_frequency_and_amplitude(self):
        m, k = 40.0, 2000.0
        model = CompliantLipm(mass=m, stiffness=k, damping=0.0, state=[0.05, 0.0])
        wn = model.omega_n
        period = 2 * math.pi / wn
        dt = 0.002
        xs = []
        n = int(10 * period / dt)
        for _ in range(n):
            s, _ = compliant_step(model, 0.0, dt)
            xs.append(s[0])
        xs = np.array(xs)
        last_period = xs[-int(period / dt):]
        assert abs(last_period.max() - 0.05) < 0.0005  # amplitude within 1%
        # measured frequency from zero crossings
        signs = np.sign(xs)
        crossings = np.nonzero(np.diff(signs) != 0)[0]
        measured_period = 2 * np.mean(np.diff(crossings)) * dt
        assert abs(measured_period - period) / period < 0.01

    def test_energy_decays_with_damping(self):
        model = CompliantLipm(damping=60.0, state=[0.05, 0.0])
        initial = model.energy(0.0)
        prev = initial
        for _ in range(3000):
            compliant_step(model, 0.0, 0.002)
            e = model.energy(0.0)
            assert e <= prev + 1e-12
            prev = e
        assert prev < 0.01 * initial

    def test_bad_dt_rejected(self):
        with pytest.raises(ValueError):
            compliant_step(CompliantLipm(), 0.0, 0.0)


class TestDampingFeedback:
    def test_open_loop_targets_give_zero_gains(self):
        model = lightly_damped()
        ctl = damping_feedback(model, model.omega_n, model.zeta)
        assert abs(ctl.k1) < 1e-12
        assert abs(ctl.k2) < 1e-12

    def test_poles_placed_exactly(self):
        model = lightly_damped()
        wd, zd = model.omega_n, 0.7
        ctl = damping_feedback(model, wd, zd)
        eig = np.sort_complex(np.linalg.eigvals(ctl.closed_loop_matrix(model)))
        target = np.sort_complex(np.roots([1.0, 2 * zd * wd, wd * wd]))
        np.testing.assert_allclose(eig, target, atol=1e-6)

    def test_settling_time_reduced_5x(self):
        model = lightly_damped(zeta=0.05)
        ctl = damping_feedback(model, model.omega_n, 0.7)

        def settling(a_mat):
            dt, t_max = 0.002, 30.0
            ad = scipy.linalg.expm(a_mat * dt)
            x = np.array([0.0, 1.0])
            traj = [x[0]]
            for _ in range(int(t_max / dt)):
                x = ad @ x
                traj.append(x[0])
            traj = np.abs(np.array(traj))
            band = 0.02 * traj.max()
            above = np.nonzero(traj > band)[0]
            return (above[-1] + 1) * dt

        a_open, _ = model.continuous_matrices()
        t_open = settling(a_open)
        t_closed = settling(ctl.closed_loop_matrix(model))
        assert t_open / t_closed >= 5.0

    def test_invalid_targets_rejected(self):
        model = lightly_damped()
        with pytest.raises(ValueError):
            damping_feedback(model, model.omega_n, 0.0)
        with pytest.raises(ValueError):
            damping_feedback(model, -1.0, 0.7)


class TestCapturePoint:
    def fb(self):
        return CapturePointFeedback(gain=3.0, omega=math.sqrt(9.81 / 0.7))

    def test_zero_error_returns_reference(self):
        out = czmp((0.1, 0.0), (0.1, 0.0), (0.05, -0.02), self.fb())
        assert out == (0.05, -0.02)

    def test_linear_law(self):
        out = czmp((0.0, 0.0), (0.02, 0.0), (0.1, 0.0), self.fb())
        assert out[0] == pytest.approx(0.16)
        assert out[1] == 0.0

    def test_closed_loop_contracts_capture_point_error(self):
        # pendulum cp dynamics: cp' = omega (cp - p); p = ref + gain * err
        fb = self.fb()
        w = fb.omega
        dt = 0.002
        x, v = 0.05, 0.0  # com offset; reference at origin
        for _ in range(int(3.0 / dt)):
            cp = x + v / w
            p = czmp((0.0, 0.0), (cp, 0.0), (0.0, 0.0), fb)[0]
            acc = w * w * (x - p)
            x += v * dt
            v += acc * dt
        assert abs(x + v / w) < 1e-4


class TestWeightDistribution:
    LEFT = (0.0, 0.1)
    RIGHT = (0.0, -0.1)

    def test_at_left_foot(self):
        assert foot_weight_distribution(self.LEFT, self.LEFT, self.RIGHT) == (1.0, 0.0)

    def test_at_midpoint(self):
        w = foot_weight_distribution((0.0, 0.0), self.LEFT, self.RIGHT)
        assert w == (0.5, 0.5)

    def test_clamped_beyond_right(self):
        assert foot_weight_distribution((0.0, -0.5), self.LEFT, self.RIGHT) == (0.0, 1.0)

    def test_simplex_property(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            c = tuple(rng.uniform(-1, 1, 2))
            left = tuple(rng.uniform(-1, 1, 2))
            right = tuple(rng.uniform(-1, 1, 2))
            if np.hypot(left[0] - right[0], left[1] - right[1]) < 1e-6:
                continue
            wl, wr = foot_weight_distribution(c, left, right)
            assert 0.0 <= wl <= 1.0
            assert 0.0 <= wr <= 1.0
            assert wl + wr == pytest.approx(1.0, abs=1e-12)

    def test_coincident_feet_rejected(self):
        with pytest.raises(ValueError):
            foot_weight_distribution((0, 0), (0.1, 0.1), (0.1, 0.1))
