import io

import numpy as np
import pytest

from tokenwalk.data import synthesize_regression
from tokenwalk.metrics import (
    CSV_HEADER,
    MetricError,
    TraceRecord,
    accuracy,
    consensus_gap,
    first_reaching,
    nmse,
    parameter_nmse,
    read_trace_csv,
    trace_to_csv,
    write_extras_csv,
)


def test_nmse_definition():
    rng = np.random.default_rng(0)
    A, z = rng.standard_normal((20, 3)), rng.standard_normal(3)
    y = A @ z
    assert nmse(z, A, y) == 0.0
    assert nmse(np.zeros(3), A, y + 1.0) == 1.0
    with pytest.raises(MetricError):
        nmse(z, A, np.zeros(20))


def test_nmse_of_noiseless_oracle():
    ds, _ = synthesize_regression(200, 6, 0.0, seed=1)
    w = np.linalg.lstsq(ds.features, ds.labels, rcond=None)[0]
    assert nmse(w, ds.features, ds.labels) < 1e-10


def test_parameter_nmse():
    assert parameter_nmse([1.0, 1.0], [1.0, 0.0]) == 1.0
    with pytest.raises(MetricError):
        parameter_nmse([1.0], [0.0])


def test_accuracy_rules():
    A = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]])
    y = np.array([1.0, -1.0, 1.0])
    assert accuracy(np.array([1.0, 1.0]), A, y) == 1.0
    assert accuracy(np.zeros(2), A, y) == 0.0  # ties count as wrong
    assert accuracy(np.array([1.0, 0.0]), A, y) == pytest.approx(2 / 3)


def test_accuracy_matches_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(20):
        A, y, z = rng.standard_normal((15, 3)), np.sign(rng.standard_normal(15)), rng.standard_normal(3)
        count = sum(1 for a, t in zip(A, y) if (1 if a @ z > 0 else -1 if a @ z < 0 else 0) == t)
        acc = accuracy(z, A, y)
        assert acc == count / 15 and 0 <= acc <= 1


def test_consensus_gap():
    x = np.ones((3, 2))
    assert consensus_gap(x, np.ones((2, 2))) == 0.0
    assert consensus_gap(np.array([[3.0, 4.0]]), np.zeros((1, 2))) == 5.0
    assert consensus_gap(np.array([[0.0], [2.0]]), np.array([[1.0], [-1.0]])) == 3.0


def records():
    return [
        TraceRecord(1, 0.5, 1, 0, 2, 3.25, 0.4, 0.5, extras={"a": 1.0}),
        TraceRecord(2, 0.75, 2, 1, 0, 1.0 / 3.0, 0.2, 0.1),
    ]


def test_csv_round_trip():
    text = trace_to_csv(records())
    assert text.splitlines()[0] == ",".join(CSV_HEADER)
    back = read_trace_csv(io.StringIO(text))
    assert [r.objective for r in back] == [3.25, 1.0 / 3.0]
    assert back[1].event == 2 and back[1].sim_time_s == 0.75


def test_extras_csv():
    buf = io.StringIO()
    write_extras_csv(records(), buf)
    assert buf.getvalue().splitlines() == ["event,consensus_gap,a", "1,nan,1.0", "2,nan,nan"]


def test_first_reaching():
    rs = records()
    assert first_reaching(rs, 0.2).event == 2
    assert first_reaching(rs, 0.5).event == 1
    assert first_reaching(rs, 0.6, higher_is_better=True) is None
