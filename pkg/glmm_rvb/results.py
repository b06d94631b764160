"""Plain-text result files: summaries, lower-bound traces, states and per-subject tables.

Every file starts with `# key=value` header lines followed by a CSV payload.
Numbers are written with fixed significant digits and a '.' decimal point;
state files use 17 digits so (μ, C) survive a round trip bit for bit.
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
import io
from pathlib import Path

import numpy as np
import pandas as pd

from .const import FORMAT_VERSION, LOGGER, SUMMARY_DIGITS
from .engine import FitResult, VariationalState
from .exceptions import ParseError
from .matcalc import FloatArray
from .posterior import PosteriorSummary

SUMMARY_FORMAT = f"%.{SUMMARY_DIGITS}g"
STATE_FORMAT = "%.17g"
STATE_COLUMNS = ("block", "subject", "row", "col", "value")
SUBJECT_COLUMNS = ("subject", "component", "b_tilde_mean", "b_tilde_sd", "b_mean", "b_sd")


def format_number(value: float) -> str:
    return SUMMARY_FORMAT % value


def _header(fields: Mapping[str, object]) -> str:
    lines = [f"# format_version={FORMAT_VERSION}"]
    lines.extend(f"# {key}={_header_value(value)}" for key, value in fields.items())
    return "\n".join(lines) + "\n"


def _header_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format_number(value)
    if isinstance(value, tuple | list):
        return ";".join(str(v) for v in value)
    return str(value)


def _write(path: Path, fields: Mapping[str, object], frame: pd.DataFrame, float_format: str) -> None:
    buffer = io.StringIO()
    buffer.write(_header(fields))
    frame.to_csv(buffer, index=False, float_format=float_format, lineterminator="\n")
    path.write_text(buffer.getvalue(), encoding="utf-8")
    LOGGER.info("Wrote %s", path)


def read_header(path: Path) -> tuple[dict[str, str], int]:
    """Return the `# key=value` fields and the number of header lines."""
    fields: dict[str, str] = {}
    count = 0
    with path.open(encoding="utf-8") as handle:
        for line in handle:
            if not line.startswith("#"):
                break
            count += 1
            key, sep, value = line[1:].strip().partition("=")
            if not sep:
                raise ParseError(f"malformed header in {path}", count)
            fields[key.strip()] = value
    if fields.get("format_version") != str(FORMAT_VERSION):
        raise ParseError(f"{path} has unsupported format version {fields.get('format_version')!r}", 1)
    return fields, count


def _read_table(path: Path, columns: Iterable[str]) -> tuple[dict[str, str], pd.DataFrame]:
    fields, skip = read_header(path)
    try:
        frame = pd.read_csv(path, skiprows=skip, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as err:
        raise ParseError(f"{path}: {err}") from err
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise ParseError(f"{path} lacks columns {missing}", skip + 1)
    return fields, frame


def summary_fields(
    fit: FitResult, summary: PosteriorSummary, extra: Mapping[str, object] | None = None
) -> dict[str, object]:
    fields: dict[str, object] = {
        "method": fit.method.value,
        "estimator": fit.config.estimator.value,
        "seed": fit.config.seed,
        "iterations": fit.iterations,
        "converged": fit.converged,
        "elbo": fit.elbo,
        "elbo_sd": fit.elbo_sd,
        "posterior_draws": summary.draws,
        "rejected_draws": summary.rejected,
    }
    fields.update(extra or {})
    return fields


def write_summary(path: Path, summary: PosteriorSummary, fields: Mapping[str, object]) -> None:
    """Per-parameter posterior mean and sd in the summary's parameter order."""
    frame = pd.DataFrame(
        {"parameter": list(summary.names), "mean": summary.means, "sd": summary.sds},
    )
    _write(path, fields, frame, SUMMARY_FORMAT)


def read_summary(path: Path) -> tuple[dict[str, str], pd.DataFrame]:
    return _read_table(path, ("parameter", "mean", "sd"))


def write_trace(path: Path, trace: Iterable[float], window: int) -> None:
    means = np.asarray(list(trace), dtype=np.float64)
    frame = pd.DataFrame({"window": np.arange(1, means.size + 1), "mean_elbo": means})
    _write(path, {"window_size": window}, frame, SUMMARY_FORMAT)


def read_trace(path: Path) -> FloatArray:
    _, frame = _read_table(path, ("window", "mean_elbo"))
    return np.asarray(frame["mean_elbo"].to_numpy(dtype=np.float64))


@dataclass(frozen=True, eq=False)
class StateFile:
    """A variational state with the metadata needed to interpret its global block."""

    state: VariationalState
    p: int
    family: str
    method: str
    fixed_names: tuple[str, ...]
    random_names: tuple[str, ...]
    fields: Mapping[str, str]


def _state_frame(state: VariationalState) -> pd.DataFrame:
    blocks: list[pd.DataFrame] = [
        pd.DataFrame({"block": "mu", "subject": -1, "row": np.arange(state.d), "col": 0, "value": state.mu})
    ]
    rows, cols = np.tril_indices(state.r)
    subjects = np.repeat(np.arange(state.n), rows.size)
    blocks.append(
        pd.DataFrame(
            {
                "block": "local",
                "subject": subjects,
                "row": np.tile(rows, state.n),
                "col": np.tile(cols, state.n),
                "value": state.c_local[:, rows, cols].reshape(-1),
            }
        )
    )
    g_rows, g_cols = np.tril_indices(state.g)
    blocks.append(
        pd.DataFrame(
            {"block": "global", "subject": -1, "row": g_rows, "col": g_cols, "value": state.c_global[g_rows, g_cols]}
        )
    )
    return pd.concat(blocks, ignore_index=True)


def write_state(
    path: Path,
    fit: FitResult | VariationalState,
    *,
    p: int,
    family: str,
    method: str,
    fixed_names: tuple[str, ...],
    random_names: tuple[str, ...],
    extra: Mapping[str, object] | None = None,
) -> None:
    """μ and the lower triangles of every C block, with a dimension header."""
    state = fit.state if isinstance(fit, FitResult) else fit
    fields: dict[str, object] = {
        "kind": "state",
        "n": state.n,
        "r": state.r,
        "g": state.g,
        "p": p,
        "family": family,
        "method": method,
        "fixed_names": fixed_names,
        "random_names": random_names,
    }
    fields.update(extra or {})
    _write(path, fields, _state_frame(state), STATE_FORMAT)


def _header_int(fields: Mapping[str, str], key: str, path: Path) -> int:
    try:
        return int(fields[key])
    except (KeyError, ValueError) as err:
        raise ParseError(f"{path} header lacks an integer {key!r}", 1) from err


def read_state(path: Path) -> StateFile:
    fields, frame = _read_table(path, STATE_COLUMNS)
    if fields.get("kind") != "state":
        raise ParseError(f"{path} is not a state file", 1)
    n, r, g, p = (_header_int(fields, key, path) for key in ("n", "r", "g", "p"))
    mu = np.zeros(n * r + g)
    c_local = np.zeros((n, r, r))
    c_global = np.zeros((g, g))
    try:
        for block, part in frame.groupby("block", sort=False):
            values = part["value"].to_numpy(dtype=np.float64)
            rows = part["row"].to_numpy(dtype=np.intp)
            cols = part["col"].to_numpy(dtype=np.intp)
            match block:
                case "mu":
                    mu[rows] = values
                case "local":
                    c_local[part["subject"].to_numpy(dtype=np.intp), rows, cols] = values
                case "global":
                    c_global[rows, cols] = values
                case _:
                    raise ParseError(f"{path} has unknown block {block!r}")
    except IndexError as err:
        raise ParseError(f"{path} has entries outside its declared dimensions") from err
    names = tuple(name for name in fields.get("fixed_names", "").split(";") if name)
    random = tuple(name for name in fields.get("random_names", "").split(";") if name)
    return StateFile(
        state=VariationalState(mu=mu, c_local=c_local, c_global=c_global),
        p=p,
        family=fields.get("family", ""),
        method=fields.get("method", ""),
        fixed_names=names,
        random_names=random,
        fields=fields,
    )


def _subject_frame(
    summary: PosteriorSummary, subject_ids: tuple[str, ...], random_names: tuple[str, ...]
) -> pd.DataFrame:
    n, r = summary.b_mean.shape
    return pd.DataFrame(
        {
            "subject": np.repeat(np.asarray(subject_ids, dtype=object), r),
            "component": np.tile(np.asarray(random_names, dtype=object), n),
            "b_tilde_mean": summary.b_tilde_mean.reshape(-1),
            "b_tilde_sd": summary.b_tilde_sd.reshape(-1),
            "b_mean": summary.b_mean.reshape(-1),
            "b_sd": summary.b_sd.reshape(-1),
        }
    )


def write_subjects(
    path: Path,
    parts: Sequence[tuple[PosteriorSummary, tuple[str, ...]]],
    random_names: tuple[str, ...],
    fields: Mapping[str, object] | None = None,
) -> None:
    """Posterior mean and sd of b̃ᵢ and bᵢ per subject and random-effect component.

    `parts` pairs each posterior summary with its subject ids; sharded runs pass one per shard.
    """
    frame = pd.concat([_subject_frame(summary, ids, random_names) for summary, ids in parts], ignore_index=True)
    _write(path, fields or {}, frame, SUMMARY_FORMAT)


def read_subjects(path: Path) -> pd.DataFrame:
    _, frame = _read_table(path, ("subject", "component", "b_mean", "b_sd"))
    frame["subject"] = frame["subject"].astype(str)
    return frame


def write_timing(path: Path, timings: Mapping[str, float]) -> None:
    path.write_text("".join(f"{key}={value:.3f}\n" for key, value in timings.items()), encoding="utf-8")
