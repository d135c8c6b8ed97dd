import math

import numpy as np
import pytest
from scipy.special import expit

from config import ActivitySection
from windstorm.activity import (ACTIVATION, TERMINATION, ActivePhasePlan, ActivityModel, activity_observations,
                                fit_gam, plan_activity, predict_activity, smooth_effect)
from windstorm.errors import FitError
from windstorm.extract import WindstormRecord


class ScriptedRng:
    """Sustituto de Generator que devuelve una secuencia fija de uniformes"""

    def __init__(self, values, default=0.99):
        self.values = list(values)
        self.default = default

    def random(self):
        return self.values.pop(0) if self.values else self.default


def test_null_model_probability():
    model = ActivityModel.constant(ACTIVATION, 0.5)
    assert model.probability((1.0, 0.0, 50.0)) == pytest.approx(0.5)


def test_linear_logit_value():
    model = ActivityModel(ACTIVATION, ("vorticity", "lon", "lat"), 2.0)
    assert model.probability((0.3, 0.0, 0.0)) == pytest.approx(1 / (1 + math.exp(-2)))


def test_constant_probability_bounds():
    assert ActivityModel.constant(TERMINATION, 1.0).probability((1.0, 1.0)) == 1.0
    assert ActivityModel.constant(TERMINATION, 0.0).probability((1.0, 1.0)) == 0.0
    with pytest.raises(ValueError):
        ActivityModel.constant(TERMINATION, 1.5)


def test_always_active_plan_covers_the_track(straight_track, rng):
    plan = plan_activity(straight_track, ActivityModel.constant(ACTIVATION, 1.0),
                         ActivityModel.constant(TERMINATION, 0.0), rng)
    assert plan.phases == ((1, straight_track.duration),)
    assert plan.t_a == plan.t_omega == 5
    assert plan.active_steps() == list(range(1, 9))


def test_never_active_plan_is_empty(straight_track, rng):
    plan = plan_activity(straight_track, ActivityModel.constant(ACTIVATION, 0.0),
                         ActivityModel.constant(TERMINATION, 0.0), rng)
    assert plan.t_a is None
    assert plan.phases == ()


def test_scripted_search_order(straight_track):
    # t=5 y t=6 fallan, t=7 se activa y termina enseguida; el resto de sorteos no activa
    rng = ScriptedRng([0.9, 0.9, 0.1, 0.1])
    plan = plan_activity(straight_track, ActivityModel.constant(ACTIVATION, 0.5),
                         ActivityModel.constant(TERMINATION, 0.5), rng)
    assert plan.t_omega == 5
    assert plan.t_a == 7
    assert plan.phases == ((7, 7),)


def test_backward_search_extends_towards_start(straight_track):
    # Hacia delante nada se activa (t=5..8); hacia atrás t=4 se activa y la fase crece hasta t=2
    rng = ScriptedRng([0.9, 0.9, 0.9, 0.9, 0.1, 0.9, 0.9, 0.1])
    plan = plan_activity(straight_track, ActivityModel.constant(ACTIVATION, 0.5),
                         ActivityModel.constant(TERMINATION, 0.5), rng)
    assert plan.t_a == 4
    assert plan.phases == ((2, 4),)


def test_reactivation_adds_a_later_phase(straight_track):
    # t=5 activa y termina; t=6 queda como hueco; t=7 se reactiva y termina
    rng = ScriptedRng([0.1, 0.1, 0.1, 0.1, 0.1])
    plan = plan_activity(straight_track, ActivityModel.constant(ACTIVATION, 0.5),
                         ActivityModel.constant(TERMINATION, 0.5), rng)
    assert plan.phases[0] == (5, 5)
    assert plan.phases[1] == (7, 7)
    assert plan.inits[:2] == (5, 7)


def test_footprint_covariates_feed_termination(straight_track, rng):
    seen = []

    def covariates(t_init, t):
        seen.append((t_init, t))
        return 10.0, 3.0

    plan = plan_activity(straight_track, ActivityModel.constant(ACTIVATION, 1.0),
                         ActivityModel.constant(TERMINATION, 1.0), rng, footprint_covariates=covariates)
    assert seen == [(5, 5), (5, 5), (7, 7), (3, 3)]
    assert plan.phases == ((1, 1), (3, 3), (5, 5), (7, 7))


def test_plan_validation():
    with pytest.raises(ValueError):
        ActivePhasePlan(3, 3, 5, phases=((3, 4), (4, 5)), inits=(3, 4))
    with pytest.raises(ValueError):
        ActivePhasePlan(1, 3, 5, phases=((3, 4),), inits=(3,))


def test_gam_recovers_planted_logistic_effect():
    rng = np.random.default_rng(2)
    nu = rng.uniform(-3, 3, size=5000)
    events = (rng.random(5000) < expit(0.8 * nu)).astype(float)
    model = fit_gam(nu[:, None], events, ("nu",), ActivitySection())
    grid = np.linspace(np.quantile(nu, 0.05), np.quantile(nu, 0.95), 50)
    fitted, _ = predict_activity(model, grid[:, None])
    np.testing.assert_allclose(fitted, expit(0.8 * grid), atol=0.1)


def test_gam_constant_covariate_gives_event_rate():
    events = np.r_[np.ones(70), np.zeros(230)]
    model = fit_gam(np.ones((300, 1)), events, ("nu",), ActivitySection())
    assert model.probability((1.0,)) == pytest.approx(70 / 300, abs=1e-6)


def test_gam_monotone_planted_effect():
    rng = np.random.default_rng(4)
    vorticity = rng.uniform(0.1, 1.5, size=3000)
    events = (rng.random(3000) < expit(-3 + 4 * vorticity)).astype(float)
    model = fit_gam(vorticity[:, None], events, ("vorticity",), ActivitySection())
    grid = np.linspace(vorticity.min(), vorticity.max(), 40)
    fitted, _ = predict_activity(model, grid[:, None])
    assert np.all(np.diff(fitted) > -0.02)
    assert fitted[-1] > fitted[0] + 0.5


def test_gam_needs_enough_observations():
    with pytest.raises(FitError):
        fit_gam(np.ones((10, 1)), np.zeros(10), ("nu",), ActivitySection())


def test_out_of_range_covariates_are_clamped():
    rng = np.random.default_rng(6)
    nu = rng.uniform(0, 1, size=500)
    events = (rng.random(500) < expit(nu)).astype(float)
    model = fit_gam(nu[:, None], events, ("nu",), ActivitySection())
    probabilities, clamped = predict_activity(model, np.array([[0.5], [3.0]]))
    assert clamped.tolist() == [False, True]
    assert probabilities[1] == pytest.approx(predict_activity(model, np.array([[nu.max()]]))[0][0])


def test_smooth_effect_band_contains_effect():
    rng = np.random.default_rng(8)
    nu = rng.uniform(-2, 2, size=1000)
    events = (rng.random(1000) < expit(nu)).astype(float)
    model = fit_gam(nu[:, None], events, ("nu",), ActivitySection())
    effect, lower, upper = smooth_effect(model, "nu", np.linspace(-1.5, 1.5, 9))
    assert np.all(lower <= effect) and np.all(effect <= upper)
    with pytest.raises(KeyError):
        smooth_effect(model, "otra", np.zeros(2))


def test_termination_observations_use_neighbours(straight_track):
    from windstorm.ellipse import Ellipse, ellipse_to_features
    from windstorm.extract import Footprint

    ellipse = Ellipse(np.array([5.0, 5.0]), np.eye(2) / 4.0)
    footprints = {t: Footprint(ellipse, ellipse_to_features(ellipse, (5.0, 6.0), (5.0, 5.0), 3.0, t))
                  for t in (3, 4)}
    record = WindstormRecord(straight_track.id, straight_track.duration, footprints)
    covariates, events = activity_observations([record], [straight_track], TERMINATION)
    assert covariates.shape == (4, 2)
    assert events.tolist() == [0.0, 1.0, 1.0, 0.0]
    assert covariates[0, 0] == pytest.approx(2.0)
    activation, active = activity_observations([record], [straight_track], ACTIVATION)
    assert activation.shape == (8, 3)
    assert active.sum() == 2
