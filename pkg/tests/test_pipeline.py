"""The navigation flow of the acceptance gate, run on synthetic stand-in data."""

import pytest

from conformal_monitor.synthetic import wall_following_like

from pipelines import navigation_pipeline


@pytest.mark.slow
@pytest.mark.parametrize("noise", [0.6, 1.2])
def test_navigation_pipeline_on_stand_in(noise):
    data = wall_following_like(seed=1, noise=noise)
    a = navigation_pipeline(data, seed=0)
    assert a.hidden == 20
    assert a.test_accuracy > 0.5
    assert 0 < a.epsilon < 1
    assert 0 <= a.test_error <= 1
    assert a.seconds < 300
    b = navigation_pipeline(data, seed=0)
    assert (a.hidden, a.test_accuracy, a.epsilon, a.test_error) == \
        (b.hidden, b.test_accuracy, b.epsilon, b.test_error)
