"""Long-format tables to datasets, and the bundled example data."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from enum import StrEnum
from importlib import resources

import numpy as np
import pandas as pd

from .const import LOGGER
from .exceptions import ConfigError, DataError, InvalidResponse, MissingColumn, ParseError
from .family import BINOMIAL, POISSON, Family, FamilyKind
from .matcalc import FloatArray
from .model import Dataset

INTERCEPT_NAME = "intercept"
HEADER_LINES = 1


class Intercept(StrEnum):
    """Where an all-ones column is injected."""

    X = "x"
    Z = "z"
    BOTH = "both"
    NONE = "none"

    @property
    def fixed(self) -> bool:
        return self in (Intercept.X, Intercept.BOTH)

    @property
    def random(self) -> bool:
        return self in (Intercept.Z, Intercept.BOTH)


@dataclass(frozen=True)
class ColumnMap:
    """Which table columns make up the model."""

    response: str = "y"
    group: str = "subject"
    fixed: tuple[str, ...] = ()
    random: tuple[str, ...] = ()
    trials: str | None = None
    intercept: Intercept = Intercept.BOTH

    @property
    def used(self) -> tuple[str, ...]:
        columns = (self.group, self.response, *self.fixed, *self.random)
        return columns + ((self.trials,) if self.trials else ())


def _line(position: int) -> int:
    """File line of the row at 0-based table position."""
    return position + HEADER_LINES + 1


def _numeric(frame: pd.DataFrame, column: str) -> FloatArray:
    raw = frame[column]
    values = pd.to_numeric(raw, errors="coerce")
    bad = values.isna().to_numpy()
    if bad.any():
        position = int(np.flatnonzero(bad)[0])
        raise ParseError(f"non-numeric value {raw.iloc[position]!r} in column {column}", _line(position))
    return values.to_numpy(dtype=np.float64)


def _design(frame: pd.DataFrame, columns: Sequence[str], intercept: bool) -> tuple[FloatArray, tuple[str, ...]]:
    parts = [_numeric(frame, c) for c in columns]
    names = tuple(columns)
    if intercept:
        parts.insert(0, np.ones(len(frame)))
        names = (INTERCEPT_NAME, *names)
    if not parts:
        raise ConfigError("design has no columns")
    return np.column_stack(parts), names


def dataset_from_frame(frame: pd.DataFrame, family: Family, columns: ColumnMap) -> Dataset:
    """Group rows by subject (first appearance order, rows kept in file order) and validate."""
    for column in columns.used:
        if column not in frame.columns:
            raise MissingColumn(column)
    if frame.empty:
        raise DataError("input has no observations")
    if family.kind is FamilyKind.BINOMIAL and columns.trials is None:
        raise ConfigError("the binomial family needs a trials column")
    frame = frame.reset_index(drop=True)
    missing_group = frame[columns.group].isna().to_numpy()
    if missing_group.any():
        raise ParseError(f"empty {columns.group} value", _line(int(np.flatnonzero(missing_group)[0])))
    y = _numeric(frame, columns.response)
    trials = _numeric(frame, columns.trials) if columns.trials else np.ones(len(frame))
    bad = family.invalid_responses(y, trials)
    if bad.any():
        position = int(np.flatnonzero(bad)[0])
        raise InvalidResponse(family.name, _line(position), f"y={y[position]:g}")
    x, fixed_names = _design(frame, columns.fixed, columns.intercept.fixed)
    z, random_names = _design(frame, columns.random, columns.intercept.random)
    codes, subject_ids = pd.factorize(frame[columns.group].astype(str))
    rows = [np.flatnonzero(codes == k) for k in range(len(subject_ids))]
    LOGGER.debug("Grouped %d rows into %d subjects", len(frame), len(rows))
    return Dataset.from_groups(
        family,
        [y[idx] for idx in rows],
        [x[idx] for idx in rows],
        [z[idx] for idx in rows],
        trials=[trials[idx] for idx in rows],
        subject_ids=[str(s) for s in subject_ids],
        fixed_names=fixed_names,
        random_names=random_names,
    )


def _bundled(name: str) -> pd.DataFrame:
    with resources.files("glmm_rvb").joinpath("data", name).open(encoding="utf-8") as handle:
        return pd.read_csv(handle)


EPILEPSY_FIXED = ("lbase4", "trt", "lbase4_trt", "lage")


def epilepsy_columns(model: int) -> ColumnMap:
    """Model 1: visit-4 indicator and a random intercept; model 2: centred visit with a random slope."""
    match model:
        case 1:
            return ColumnMap(response="y", group="subject", fixed=(*EPILEPSY_FIXED, "v4"))
        case 2:
            return ColumnMap(
                response="y", group="subject", fixed=(*EPILEPSY_FIXED, "visit_code"), random=("visit_code",)
            )
    raise ConfigError(f"epilepsy model must be 1 or 2, got {model}")


def load_epilepsy(model: int = 1) -> Dataset:
    """Seizure counts of 59 patients over four visits."""
    return dataset_from_frame(_bundled("epilepsy.csv"), POISSON, epilepsy_columns(model))


SEEDS_COLUMNS = ColumnMap(response="y", group="plate", fixed=("seed", "extract"), trials="m")


def load_seeds() -> Dataset:
    """Germinated seeds out of m on 21 plates."""
    return dataset_from_frame(_bundled("seeds.csv"), BINOMIAL, SEEDS_COLUMNS)


PRESETS = {
    "epilepsy1": ("epilepsy.csv", POISSON, epilepsy_columns(1)),
    "epilepsy2": ("epilepsy.csv", POISSON, epilepsy_columns(2)),
    "seeds": ("seeds.csv", BINOMIAL, SEEDS_COLUMNS),
}


def load_preset(name: str) -> Dataset:
    try:
        file_name, family, columns = PRESETS[name]
    except KeyError as err:
        raise ConfigError(f"unknown preset {name!r}") from err
    return dataset_from_frame(_bundled(file_name), family, columns)
