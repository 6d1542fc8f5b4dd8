import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from thermoda.verification import (
    ContingencyTable,
    SkillReport,
    as_percent,
    categorical_scores,
    rps,
    rps_skill,
    scaled_rmse,
    skill_table,
)

# published contingency tables and the skill percentages reported for them
TABLES = {
    "lead": ((4472, 744, 13, 170363), ("86", "14", ">99")),
    "bv": ((4383, 3203, 102, 121258), ("57", "42", "98")),
    "corr": ((3540, 239, 945, 170201), ("75", "6", "79")),
}


@pytest.mark.parametrize("name", list(TABLES))
def test_published_tables_reproduce_percentages(name):
    counts, expected = TABLES[name]
    ts, far, pod = categorical_scores(ContingencyTable(*counts))
    assert (as_percent(ts), as_percent(far), as_percent(pod, detect_upper=True)) == expected


def test_lead_fractions():
    ts, far, pod = categorical_scores(ContingencyTable(4472, 744, 13, 170363))
    assert ts == pytest.approx(4472 / 5229)
    assert round(ts, 3) == 0.855 and round(far, 3) == 0.143 and round(pod, 3) == 0.997


def test_perfect_predictor():
    assert categorical_scores(ContingencyTable(10, 0, 0, 90)) == (1.0, 0.0, 1.0)


def test_zero_denominators_are_absent():
    ts, far, pod = categorical_scores(ContingencyTable(0, 0, 0, 50))
    assert ts is None and far is None and pod is None
    assert as_percent(None) == "--"


def test_table_validation():
    with pytest.raises(ValueError):
        ContingencyTable(-1, 0, 0, 0)
    with pytest.raises(ValueError):
        ContingencyTable(1.5, 0, 0, 0)
    assert ContingencyTable(1, 2, 3, 4).to_dict()["n"] == 10


@given(st.integers(0, 1000), st.integers(0, 1000), st.integers(0, 1000), st.integers(0, 1000))
def test_ts_never_exceeds_pod(a, b, c, d):
    ts, far, pod = categorical_scores(ContingencyTable(a, b, c, d))
    if ts is not None and pod is not None:
        assert ts <= pod + 1e-15
        assert 0 <= ts <= 1 and 0 <= pod <= 1
    if far is not None:
        assert 0 <= far <= 1


def test_rounding_half_up():
    assert as_percent(0.125) == "13"
    assert as_percent(0.135) == "14"
    assert as_percent(0.9949, detect_upper=True) == "99"
    assert as_percent(0.996, detect_upper=True) == ">99"
    assert as_percent(1.0, detect_upper=True) == "100"


class TestRps:
    def test_point_mass_correct(self):
        assert rps([0, 1, 0, 0, 0, 0], 2) == 0.0

    def test_uniform(self):
        assert rps(np.full(6, 1 / 6), 1) == pytest.approx(55 / 36, rel=1e-14)

    def test_half_half(self):
        assert rps([0.5, 0.5, 0, 0, 0, 0], 1) == pytest.approx(0.25)

    @given(st.lists(st.floats(0.01, 1), min_size=6, max_size=6), st.integers(1, 6))
    def test_padding_categories(self, w, obs):
        p = np.array(w) / np.sum(w)
        assert rps(p, obs, n_categories=9) == pytest.approx(rps(p, obs), abs=1e-12)
        assert rps(p, obs) >= 0

    def test_bad_category(self):
        with pytest.raises(ValueError):
            rps(np.full(6, 1 / 6), 7)


class TestRpsSkill:
    def test_climatology_gives_zero(self):
        clim = np.array([0.1, 0.3, 0.3, 0.2, 0.1, 0.0])
        obs = [1, 2, 3, 3, 5]
        s = [rps(clim, o) for o in obs]
        assert rps_skill(s, s, "mean") == 0.0
        assert rps_skill(s, s, "median") == 0.0

    def test_perfect_is_one(self):
        assert rps_skill([0, 0, 0], [0.2, 0.5, 0.1]) == 1.0

    def test_zero_climatology_absent(self):
        assert rps_skill([0.1], [0.0]) is None

    def test_five_event_fixture(self):
        # hand aggregates: mean f = 0.3, mean c = 0.6, median f = 0.2, median c = 0.5
        f = [0.1, 0.2, 0.2, 0.4, 0.6]
        c = [0.5, 0.5, 0.4, 0.8, 0.8]
        assert rps_skill(f, c, "mean") == pytest.approx(1 - 0.3 / 0.6)
        assert rps_skill(f, c, "median") == pytest.approx(1 - 0.2 / 0.5)

    def test_mismatched(self):
        with pytest.raises(ValueError):
            rps_skill([0.1], [0.1, 0.2])


class TestScaledRmse:
    def test_values(self):
        assert scaled_rmse([0, 0, 0], 2.0) == 0.0
        assert scaled_rmse([2.0, -2.0], 2.0) == pytest.approx(1.0)
        assert scaled_rmse([3.0, 4.0], 5.0) == pytest.approx(np.sqrt(12.5) / 5)
        assert scaled_rmse([3.0, 4.0], 5.0) == pytest.approx(0.7071, abs=1e-4)

    def test_bad_climatology(self):
        with pytest.raises(ValueError):
            scaled_rmse([1.0], 0.0)


def test_skill_table_renders_rows():
    text = skill_table({"lead": SkillReport(*categorical_scores(ContingencyTable(4472, 744, 13, 170363)),
                                            rps_avg=0.25, rps_med=None)})
    line = text.splitlines()[-1]
    assert "86" in line and "14" in line and ">99" in line and "25" in line and "--" in line
