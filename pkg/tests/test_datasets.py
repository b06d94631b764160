"""Tests for table ingestion and the bundled datasets."""

from __future__ import annotations

import numpy as np
import pandas as pd
import pytest

from glmm_rvb.datasets import (
    ColumnMap,
    Intercept,
    dataset_from_frame,
    load_epilepsy,
    load_preset,
    load_seeds,
)
from glmm_rvb.exceptions import ConfigError, DataError, InvalidResponse, MissingColumn, ParseError
from glmm_rvb.family import BINOMIAL, POISSON


def _frame() -> pd.DataFrame:
    return pd.DataFrame(
        {
            "subject": ["b", "a", "b", "c", "a"],
            "y": [1, 0, 3, 2, 5],
            "x": [0.1, 0.2, 0.3, 0.4, 0.5],
            "m": [5, 5, 5, 5, 5],
        }
    )


def test_epilepsy_model_one() -> None:
    data = load_epilepsy(1)
    assert (data.n, data.p, data.r) == (59, 6, 1)
    assert set(data.sizes) == {4}
    assert data.fixed_names == ("intercept", "lbase4", "trt", "lbase4_trt", "lage", "v4")
    assert data.family is POISSON


def test_epilepsy_model_two() -> None:
    data = load_epilepsy(2)
    assert (data.n, data.p, data.r) == (59, 6, 2)
    assert data.random_names == ("intercept", "visit_code")
    np.testing.assert_allclose(data.z[0, :, 1], [-0.3, -0.1, 0.1, 0.3])


def test_epilepsy_rejects_unknown_model() -> None:
    with pytest.raises(ConfigError):
        load_epilepsy(3)


def test_seeds() -> None:
    data = load_seeds()
    assert (data.n, data.p, data.r) == (21, 3, 1)
    assert set(data.sizes) == {1}
    assert data.family is BINOMIAL
    assert float(data.trials[0, 0]) == 39.0
    assert float(data.y[0, 0]) == 10.0


def test_presets_match_loaders() -> None:
    np.testing.assert_array_equal(load_preset("seeds").y, load_seeds().y)
    with pytest.raises(ConfigError, match="unknown preset"):
        load_preset("hers")


def test_subjects_in_first_appearance_order() -> None:
    data = dataset_from_frame(_frame(), POISSON, ColumnMap(fixed=("x",)))
    assert data.subject_ids == ("b", "a", "c")
    assert data.sizes == (2, 2, 1)
    np.testing.assert_array_equal(data.y[0, :2], [1.0, 3.0])
    np.testing.assert_array_equal(data.x[1, :2, 1], [0.2, 0.5])


@pytest.mark.parametrize(
    ("intercept", "random", "p", "r"),
    [(Intercept.BOTH, (), 2, 1), (Intercept.X, ("x",), 2, 1), (Intercept.Z, ("x",), 1, 2)],
)
def test_intercept_placement(intercept: Intercept, random: tuple[str, ...], p: int, r: int) -> None:
    data = dataset_from_frame(_frame(), POISSON, ColumnMap(fixed=("x",), random=random, intercept=intercept))
    assert (data.p, data.r) == (p, r)


def test_design_without_columns() -> None:
    with pytest.raises(ConfigError, match="no columns"):
        dataset_from_frame(_frame(), POISSON, ColumnMap(fixed=("x",), intercept=Intercept.X))


def test_invalid_response_reports_line() -> None:
    frame = _frame()
    frame.loc[2, "y"] = -1
    with pytest.raises(InvalidResponse, match="line 4") as err:
        dataset_from_frame(frame, POISSON, ColumnMap(fixed=("x",)))
    assert err.value.line == 4


def test_missing_column() -> None:
    with pytest.raises(MissingColumn, match="age") as err:
        dataset_from_frame(_frame(), POISSON, ColumnMap(fixed=("age",)))
    assert err.value.column == "age"


def test_binomial_needs_trials() -> None:
    with pytest.raises(ConfigError, match="trials"):
        dataset_from_frame(_frame(), BINOMIAL, ColumnMap(fixed=("x",)))


def test_binomial_with_trials() -> None:
    data = dataset_from_frame(_frame(), BINOMIAL, ColumnMap(fixed=("x",), trials="m"))
    assert float(data.trials[0, 0]) == 5.0


def test_non_numeric_value() -> None:
    frame = _frame().astype({"x": object})
    frame.loc[1, "x"] = "high"
    with pytest.raises(ParseError, match="high") as err:
        dataset_from_frame(frame, POISSON, ColumnMap(fixed=("x",)))
    assert err.value.line == 3


def test_missing_group() -> None:
    frame = _frame().astype({"subject": object})
    frame.loc[3, "subject"] = None
    with pytest.raises(ParseError) as err:
        dataset_from_frame(frame, POISSON, ColumnMap(fixed=("x",)))
    assert err.value.line == 5


def test_empty_table() -> None:
    with pytest.raises(DataError, match="no observations"):
        dataset_from_frame(_frame().iloc[:0], POISSON, ColumnMap(fixed=("x",)))
