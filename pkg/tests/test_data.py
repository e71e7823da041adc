import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ambigam.data import (ColumnSchema, Dataset, DegenerateFactor, EmptyDataset, MissingColumn,
                          NotNumeric, ParseError, center, dichotomize, from_arrays, load_csv,
                          schema_for, write_csv)


@pytest.fixture
def small_csv(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("y,x,z\n1.0,0.5,0.2\n2.0,-0.5,0.1\n")
    return p


def test_load_numeric(small_csv):
    ds = load_csv(small_csv, schema_for(["x", "z"], response="y"))
    assert ds.n == 2
    assert ds.response_name == "y"
    np.testing.assert_array_equal(ds["x"], [0.5, -0.5])


def test_missing_column(small_csv):
    with pytest.raises(MissingColumn) as err:
        load_csv(small_csv, [ColumnSchema("w")])
    assert "w" in str(err.value)


def test_parse_error_names_row_and_column(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("y,x\n1,2\nabc,3\n")
    with pytest.raises(ParseError) as err:
        load_csv(p, schema_for(["x"], response="y"))
    assert err.value.column == "y"
    assert err.value.row == 3


def test_missing_tokens_drop_rows(tmp_path):
    p = tmp_path / "na.csv"
    p.write_text("y,x,g\n1,2,a\nNA,3,b\n2,,a\n4,5,b\n")
    ds = load_csv(p, schema_for(["x"], ["g"], response="y"))
    assert ds.n == 2
    assert ds.meta["dropped_rows"] == 2
    assert ds.levels["g"] == ("a", "b")


def test_empty_after_drop(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("y\nNA\n")
    with pytest.raises(EmptyDataset):
        load_csv(p, [ColumnSchema("y")])


def test_columns_are_read_only(small_csv):
    ds = load_csv(small_csv, schema_for(["x"], response="y"))
    with pytest.raises(ValueError):
        ds["x"][0] = 3.0


def test_rejects_non_finite():
    with pytest.raises(ValueError):
        from_arrays(x=np.array([1.0, np.inf]))


def test_rejects_ragged_columns():
    with pytest.raises(ValueError):
        Dataset({"a": np.zeros(2), "b": np.zeros(3)})


def test_numeric_on_factor():
    ds = from_arrays(g=np.array(["a", "b"], dtype=object))
    with pytest.raises(NotNumeric):
        ds.numeric("g")


@pytest.mark.parametrize("values, expected, mean", [
    ([1, 2, 3], [-1, 0, 1], 2.0),
    ([-1, 1], [-1, 1], 0.0),
    ([5, 5, 5], [0, 0, 0], 5.0),
])
def test_center(values, expected, mean):
    ds = center(from_arrays(x=np.array(values, float)), ["x"])
    np.testing.assert_allclose(ds["x"], expected)
    assert ds.meta["means"]["x"] == pytest.approx(mean)


def test_dichotomize_threshold_is_inclusive_above():
    ds = dichotomize(from_arrays(x=np.array([-0.5, 0.3, 0.0])), "x")
    assert list(ds["x_f"]) == ["neg", "pos", "pos"]
    assert ds.levels["x_f"] == ("neg", "pos")


def test_dichotomize_one_sided():
    with pytest.raises(DegenerateFactor):
        dichotomize(from_arrays(x=np.array([1.0, 2.0, 3.0])), "x")


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=30))
def test_csv_round_trip_is_exact(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("rt") / "rt.csv"
    ds = from_arrays(x=np.array(values))
    write_csv(ds, path)
    back = load_csv(path, [ColumnSchema("x")])
    np.testing.assert_array_equal(back["x"], ds["x"])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=2, max_size=30))
def test_center_gives_zero_mean(values):
    ds = center(from_arrays(x=np.array(values)), ["x"])
    assert abs(ds["x"].mean()) <= 1e-9 * max(1.0, np.abs(values).max())
