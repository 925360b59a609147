import math

import numpy as np
import pytest

from invdistill.metrics import MetricsLog, empirical_distribution, format_value, mean_entropy, sequence_entropy


def test_entropy_examples():
    assert sequence_entropy([[3, 3, 3, 3]])[0] == 0.0
    assert sequence_entropy([[0, 1, 2, 3, 4]])[0] == pytest.approx(math.log(5))
    rng = np.random.default_rng(0)
    assert abs(mean_entropy(rng.integers(0, 4, size=(200, 2000))) - math.log(4)) < 0.05
    assert math.isnan(mean_entropy(np.zeros((0, 3))))


def test_empirical_distribution_order():
    assert np.array_equal(empirical_distribution([[1, 0], [1, 0], [0, 1], [1, 1]], 2), [0, 0.25, 0.5, 0.25])


def test_format_round_trips():
    x = 0.1 + 0.2
    assert float(format_value(x)) == x
    assert format_value(3) == "3" and format_value("abc") == "abc"


def test_metrics_log(tmp_path):
    path = tmp_path / "m.csv"
    log = MetricsLog(str(path), ("step", "loss"))
    log.append({"step": 1, "loss": 0.5})
    log.append({"step": 2})
    log.flush()
    assert path.read_text() == "step,loss\n1,0.5\n2,\n"
    with pytest.raises(KeyError):
        log.append({"other": 1})
    again = MetricsLog(str(path), ("step", "loss"))
    again.load()
    assert again.rows == [{"step": 1, "loss": 0.5}, {"step": 2}]
