"""Study tables: covariate schemas, CSV IO, harmonization, and stacking.

A study table holds one side of an analysis (trial or target) or the
stacked pair. Rows are units; columns are a unit id, a study indicator,
covariates declared by a schema, and, on the trial side only, treatment
and outcome columns named ``t`` and ``y``. Treatment and outcome are
structurally absent for target units, which is different from being
missing: only covariate cells participate in missingness handling.

Generalizability convention: the target file represents the full target
population, which contains the trial members (unlinked; no
deduplication is attempted). For transportability the two files are
disjoint populations. Either way the sampling model downstream is fit
on the stacked table.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .errors import (
    DataError,
    DroppedCovariateWarning,
    HarmonizeError,
    ParseError,
    RoleError,
    SchemaError,
)

KINDS = ("continuous", "binary", "categorical")
SIDES = ("trial", "target", "stacked")
RESERVED_COLUMNS = ("unit_id", "s", "t", "y")
MISSING_MARKERS = frozenset({"", "na", "nan"})


def is_missing_marker(text: str) -> bool:
    return text.strip().lower() in MISSING_MARKERS


@dataclass(frozen=True)
class CovariateSchema:
    """Declaration of one covariate.

    Parameters
    ----------
    name : str
        Column name; must not collide with reserved columns.
    kind : {"continuous", "binary", "categorical"}
        Value kind. Binary cells must parse to 0 or 1 after recoding.
    levels : tuple of str, optional
        Declared level set for categorical covariates. The first level
        is the reference for design-matrix coding.
    is_effect_modifier_candidate : bool
        Whether the covariate is audited as a potential effect modifier.
    in_ps_model : bool
        Whether the covariate enters the sampling model by default.
    in_outcome_model : bool
        Whether the covariate enters the outcome models by default.
    recode_map : dict, optional
        Source-code to harmonized-code map applied before parsing.
        Values must land in the declared level set (or {0, 1} for
        binary covariates).
    """

    name: str
    kind: str
    levels: tuple[str, ...] | None = None
    is_effect_modifier_candidate: bool = False
    in_ps_model: bool = True
    in_outcome_model: bool = True
    recode_map: dict[str, str] | None = None

    def __post_init__(self):
        if not self.name or not isinstance(self.name, str):
            raise SchemaError("covariate name must be a non-empty string")
        if self.name in RESERVED_COLUMNS:
            raise SchemaError(f"covariate name {self.name!r} is reserved")
        if self.kind not in KINDS:
            raise SchemaError(
                f"covariate {self.name!r}: unknown kind {self.kind!r}; "
                f"expected one of {KINDS}"
            )
        if self.kind == "categorical":
            if not self.levels:
                raise SchemaError(
                    f"categorical covariate {self.name!r} declares no levels"
                )
            object.__setattr__(self, "levels", tuple(str(v) for v in self.levels))
            if len(set(self.levels)) != len(self.levels):
                raise SchemaError(
                    f"covariate {self.name!r}: duplicate levels in {self.levels}"
                )
            for lev in self.levels:
                if is_missing_marker(lev):
                    raise SchemaError(
                        f"covariate {self.name!r}: level {lev!r} collides with "
                        "a missing-value marker"
                    )
        elif self.levels is not None:
            raise SchemaError(
                f"covariate {self.name!r}: levels only apply to categorical kind"
            )
        if self.recode_map is not None:
            allowed = (
                set(self.levels)
                if self.kind == "categorical"
                else {"0", "1"}
                if self.kind == "binary"
                else None
            )
            if allowed is None:
                raise SchemaError(
                    f"covariate {self.name!r}: recode_map applies to binary or "
                    "categorical covariates only"
                )
            for src, dst in self.recode_map.items():
                if str(dst) not in allowed:
                    raise SchemaError(
                        f"covariate {self.name!r}: recode target {dst!r} is not "
                        f"in the declared level set {sorted(allowed)}"
                    )

    def to_dict(self) -> dict:
        out = {"name": self.name, "kind": self.kind}
        if self.levels is not None:
            out["levels"] = list(self.levels)
        out["roles"] = {
            "effect_modifier": self.is_effect_modifier_candidate,
            "ps": self.in_ps_model,
            "outcome": self.in_outcome_model,
        }
        if self.recode_map:
            out["recode_map"] = dict(self.recode_map)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "CovariateSchema":
        roles = d.get("roles", {})
        return cls(
            name=d["name"],
            kind=d["kind"],
            levels=tuple(d["levels"]) if d.get("levels") else None,
            is_effect_modifier_candidate=bool(roles.get("effect_modifier", False)),
            in_ps_model=bool(roles.get("ps", True)),
            in_outcome_model=bool(roles.get("outcome", True)),
            recode_map={str(k): str(v) for k, v in d["recode_map"].items()}
            if d.get("recode_map")
            else None,
        )


def validate_schema(schema: list[CovariateSchema]) -> None:
    """Check schema-level constraints: unique names, a non-empty PS set."""
    names = [c.name for c in schema]
    if len(set(names)) != len(names):
        raise SchemaError(f"duplicate covariate names in schema: {names}")
    if not schema:
        raise SchemaError("schema declares no covariates")
    if not any(c.in_ps_model for c in schema):
        raise SchemaError("schema marks no covariate for the sampling model")


@dataclass
class StudyTable:
    """One side of a study (or the stacked pair) plus its schema.

    ``data`` columns are ``unit_id``, ``s`` (1 = trial), covariates in
    schema order, and for trial/stacked tables ``t`` and ``y``. Missing
    covariate cells are NaN; ``t``/``y`` are NaN exactly on target rows
    of a stacked table (structural absence) and may be NaN on trial
    rows only when the source file lacked them (those units are
    excluded from analysis with a reported count).
    """

    data: pd.DataFrame
    schema: list[CovariateSchema]
    side: str
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    # -- basic accessors -------------------------------------------------

    @property
    def n(self) -> int:
        return len(self.data)

    @property
    def n_trial(self) -> int:
        return int((self.data["s"] == 1).sum())

    @property
    def n_target(self) -> int:
        return int((self.data["s"] == 0).sum())

    @property
    def covariate_names(self) -> list[str]:
        return [c.name for c in self.schema]

    @property
    def has_outcomes(self) -> bool:
        return "t" in self.data.columns

    @property
    def unit_ids(self) -> np.ndarray:
        return self.data["unit_id"].to_numpy()

    @property
    def s(self) -> np.ndarray:
        return self.data["s"].to_numpy()

    def schema_for(self, name: str) -> CovariateSchema:
        for c in self.schema:
            if c.name == name:
                return c
        raise SchemaError(f"unknown covariate {name!r}")

    def covariate(self, name: str) -> np.ndarray:
        self.schema_for(name)
        return self.data[name].to_numpy()

    def covariate_missing_mask(self) -> np.ndarray:
        """Boolean (n, p) mask of missing covariate cells, schema order."""
        cols = []
        for c in self.schema:
            col = self.data[c.name]
            cols.append(col.isna().to_numpy())
        return np.column_stack(cols) if cols else np.zeros((self.n, 0), bool)

    # -- subsetting ------------------------------------------------------

    def _subframe(self, mask_or_idx) -> pd.DataFrame:
        if isinstance(mask_or_idx, np.ndarray) and mask_or_idx.dtype == bool:
            return self.data.loc[mask_or_idx].reset_index(drop=True)
        return self.data.iloc[np.asarray(mask_or_idx)].reset_index(drop=True)

    def trial_rows(self) -> "StudyTable":
        df = self._subframe(self.data["s"].to_numpy() == 1)
        return StudyTable(df, self.schema, "trial", dict(self.provenance))

    def target_rows(self) -> "StudyTable":
        df = self._subframe(self.data["s"].to_numpy() == 0).drop(
            columns=[c for c in ("t", "y") if c in self.data.columns]
        )
        return StudyTable(df, self.schema, "target", dict(self.provenance))

    def take(self, indices) -> "StudyTable":
        """Row subset/resample; repeated unit ids get occurrence suffixes."""
        df = self._subframe(indices)
        ids = df["unit_id"].to_numpy(dtype=object).copy()
        seen: dict[str, int] = {}
        for i, uid in enumerate(ids):
            k = seen.get(uid, 0)
            seen[uid] = k + 1
            if k:
                ids[i] = f"{uid}#{k}"
        df = df.copy()
        df["unit_id"] = ids
        return StudyTable(df, self.schema, self.side, dict(self.provenance))

    # -- validation ------------------------------------------------------

    def validate(self) -> None:
        if self.side not in SIDES:
            raise DataError(f"unknown side {self.side!r}")
        validate_schema(self.schema)
        df = self.data
        expected = ["unit_id", "s"] + self.covariate_names
        if self.side != "target":
            expected += ["t", "y"]
        if list(df.columns) != expected:
            missing = set(expected) - set(df.columns)
            extra = set(df.columns) - set(expected)
            raise DataError(
                f"table columns do not match schema (missing={sorted(missing)}, "
                f"extra={sorted(extra)})"
            )
        ids = df["unit_id"]
        if ids.isna().any() or (ids.astype(str).str.len() == 0).any():
            raise DataError("unit ids must be non-empty")
        if ids.duplicated().any():
            dup = ids[ids.duplicated()].iloc[0]
            raise DataError(f"duplicate unit id {dup!r}")
        s = df["s"].to_numpy()
        if not np.isin(s, (0, 1)).all():
            raise DataError("study indicator must be 0 or 1")
        if self.side == "trial" and not (s == 1).all():
            raise DataError("trial table contains target rows")
        if self.side == "target" and not (s == 0).all():
            raise DataError("target table contains trial rows")
        if self.side != "target":
            t = df["t"].to_numpy()
            y = df["y"].to_numpy()
            tgt = s == 0
            if np.isfinite(t[tgt]).any() or np.isfinite(y[tgt]).any():
                raise DataError(
                    "treatment/outcome values present on target rows; these "
                    "columns are structurally absent outside the trial"
                )
            obs_t = t[~np.isnan(t)]
            if not np.isin(obs_t, (0.0, 1.0)).all():
                raise DataError("treatment values must be 0 or 1")
        for c in self.schema:
            col = df[c.name]
            if c.kind == "categorical":
                vals = col.dropna()
                bad = ~vals.isin(c.levels)
                if bad.any():
                    raise SchemaError(
                        f"covariate {c.name!r}: value {vals[bad].iloc[0]!r} is "
                        f"not in declared levels {list(c.levels)}"
                    )
            elif c.kind == "binary":
                vals = col.to_numpy(dtype=float)
                obs = vals[~np.isnan(vals)]
                if not np.isin(obs, (0.0, 1.0)).all():
                    raise SchemaError(
                        f"covariate {c.name!r}: binary values must be 0 or 1"
                    )

    def equals(self, other: "StudyTable") -> bool:
        if self.side != other.side or self.schema != other.schema:
            return False
        if list(self.data.columns) != list(other.data.columns):
            return False
        if self.n != other.n:
            return False
        for col in self.data.columns:
            a, b = self.data[col], other.data[col]
            if a.dtype.kind == "f" or b.dtype.kind == "f":
                an, bn = a.to_numpy(dtype=float), b.to_numpy(dtype=float)
                same = (an == bn) | (np.isnan(an) & np.isnan(bn))
                if not same.all():
                    return False
            else:
                if not (a.fillna("\x00").astype(str) == b.fillna("\x00").astype(str)).all():
                    return False
        return True


def _empty_frame(schema: list[CovariateSchema], with_outcomes: bool) -> dict:
    cols: dict[str, list] = {"unit_id": [], "s": []}
    for c in schema:
        cols[c.name] = []
    if with_outcomes:
        cols["t"] = []
        cols["y"] = []
    return cols


def _coerce_frame(df: pd.DataFrame, schema: list[CovariateSchema]) -> pd.DataFrame:
    df = df.copy()
    df["unit_id"] = df["unit_id"].astype(object)
    df["s"] = df["s"].astype(np.int64)
    for c in schema:
        if c.kind == "categorical":
            df[c.name] = df[c.name].astype(object)
        else:
            df[c.name] = pd.to_numeric(df[c.name], errors="coerce").astype(np.float64)
    for col in ("t", "y"):
        if col in df.columns:
            df[col] = pd.to_numeric(df[col], errors="coerce").astype(np.float64)
    return df


def make_table(
    unit_ids,
    schema: list[CovariateSchema],
    covariates: dict[str, np.ndarray],
    side: str,
    t=None,
    y=None,
    provenance: dict | None = None,
) -> StudyTable:
    """Assemble a StudyTable from arrays (the programmatic constructor)."""
    n = len(unit_ids)
    df = pd.DataFrame({"unit_id": [str(u) for u in unit_ids]})
    df["s"] = np.full(n, 1 if side == "trial" else 0, dtype=np.int64)
    for c in schema:
        if c.name not in covariates:
            raise SchemaError(f"missing covariate array for {c.name!r}")
        df[c.name] = covariates[c.name]
    if side != "target":
        df["t"] = np.full(n, np.nan) if t is None else np.asarray(t, dtype=float)
        df["y"] = np.full(n, np.nan) if y is None else np.asarray(y, dtype=float)
    df = _coerce_frame(df, schema)
    return StudyTable(df, list(schema), side, provenance or {})


# -- CSV IO ----------------------------------------------------------------


def _parse_cell(text: str, cov: CovariateSchema, row_num: int):
    raw = text.strip()
    if is_missing_marker(raw):
        return np.nan
    if cov.recode_map and raw in cov.recode_map:
        raw = str(cov.recode_map[raw])
    if cov.kind == "categorical":
        if raw not in cov.levels:
            raise SchemaError(
                f"row {row_num}, column {cov.name!r}: value {raw!r} not in "
                f"declared levels {list(cov.levels)}"
            )
        return raw
    try:
        val = float(raw)
    except ValueError as exc:
        raise ParseError(
            f"row {row_num}, column {cov.name!r}: cannot parse {raw!r} as "
            f"{cov.kind}"
        ) from exc
    if cov.kind == "binary" and val not in (0.0, 1.0):
        raise ParseError(
            f"row {row_num}, column {cov.name!r}: binary value must be 0 or 1, "
            f"got {raw!r}"
        )
    return val


def load_study(path, schema: list[CovariateSchema], side: str) -> StudyTable:
    """Load one side's CSV into a validated StudyTable.

    The first header column must be ``unit_id``; the remaining columns
    must be exactly the schema's covariates, plus ``t`` and ``y`` for
    the trial side. A ``t`` or ``y`` column in a target file is a role
    error. Empty cells and the markers ``NA``/``NaN`` (any case) are
    missing. Recode maps are applied before parsing, so the loaded
    table is already harmonized to the declared levels.
    """
    if side not in ("trial", "target"):
        raise DataError(f"side must be 'trial' or 'target', got {side!r}")
    validate_schema(schema)
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        if not header or header[0] != "unit_id":
            raise SchemaError(
                f"{path}: first column must be 'unit_id', got "
                f"{header[0] if header else 'nothing'!r}"
            )
        names = {c.name for c in schema}
        body = set(header[1:])
        if side == "target":
            for col in ("t", "y"):
                if col in body:
                    raise RoleError(
                        f"{path}: target file contains trial-only column "
                        f"{col!r}; treatment and outcome exist only for trial "
                        "units"
                    )
            expected = names
        else:
            expected = names | {"t", "y"}
        if body != expected:
            missing = expected - body
            extra = body - expected
            raise SchemaError(
                f"{path}: header does not match schema "
                f"(missing={sorted(missing)}, unexpected={sorted(extra)})"
            )
        col_of = {name: i for i, name in enumerate(header)}
        by_schema = [(c, col_of[c.name]) for c in schema]
        t_idx = col_of.get("t")
        y_idx = col_of.get("y")

        cols = _empty_frame(schema, with_outcomes=(side == "trial"))
        n_missing_ty = 0
        for row_num, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"{path}: row {row_num} has {len(row)} cells, expected "
                    f"{len(header)}"
                )
            uid = row[0].strip()
            if not uid:
                raise DataError(f"{path}: row {row_num} has an empty unit id")
            cols["unit_id"].append(uid)
            cols["s"].append(1 if side == "trial" else 0)
            for cov, idx in by_schema:
                cols[cov.name].append(_parse_cell(row[idx], cov, row_num))
            if side == "trial":
                t_raw = row[t_idx].strip()
                y_raw = row[y_idx].strip()
                if is_missing_marker(t_raw):
                    t_val = np.nan
                else:
                    try:
                        t_val = float(t_raw)
                    except ValueError as exc:
                        raise ParseError(
                            f"{path}: row {row_num}: cannot parse treatment "
                            f"{t_raw!r}"
                        ) from exc
                    if t_val not in (0.0, 1.0):
                        raise ParseError(
                            f"{path}: row {row_num}: treatment must be 0 or 1, "
                            f"got {t_raw!r}"
                        )
                if is_missing_marker(y_raw):
                    y_val = np.nan
                else:
                    try:
                        y_val = float(y_raw)
                    except ValueError as exc:
                        raise ParseError(
                            f"{path}: row {row_num}: cannot parse outcome "
                            f"{y_raw!r}"
                        ) from exc
                if math.isnan(t_val) or math.isnan(y_val):
                    n_missing_ty += 1
                cols["t"].append(t_val)
                cols["y"].append(y_val)
    df = _coerce_frame(pd.DataFrame(cols), schema)
    prov = {"source": str(path), "n_rows": len(df)}
    if side == "trial":
        prov["n_trial_missing_ty"] = n_missing_ty
    return StudyTable(df, list(schema), side, prov)


def _format_float(x: float) -> str:
    if math.isnan(x):
        return ""
    if x == int(x) and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def save_study(table: StudyTable, path) -> None:
    """Write a trial or target table back to CSV; inverse of load_study.

    Floats use the shortest round-trip representation, so loading the
    written file reproduces the table exactly. Stacked tables are an
    in-memory construct and cannot be saved.
    """
    if table.side == "stacked":
        raise DataError("stacked tables cannot be saved; save each side")
    cols = ["unit_id"] + table.covariate_names
    if table.side == "trial":
        cols += ["t", "y"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        kinds = {c.name: c.kind for c in table.schema}
        for _, row in table.data.iterrows():
            out = [row["unit_id"]]
            for name in table.covariate_names:
                val = row[name]
                if kinds[name] == "categorical":
                    out.append("" if pd.isna(val) else str(val))
                else:
                    out.append(_format_float(float(val)))
            if table.side == "trial":
                out.append(_format_float(float(row["t"])))
                out.append(_format_float(float(row["y"])))
            writer.writerow(out)


# -- harmonization -----------------------------------------------------------


def harmonize(trial: StudyTable, target: StudyTable) -> tuple[StudyTable, StudyTable]:
    """Reconcile the two sides onto their shared covariate set.

    Covariates present on only one side are dropped with a warning and
    recorded under ``provenance['dropped_covariates']``. Shared
    covariates must agree on kind and level set. Role flags are merged
    by union. Harmonization fails only when nothing usable remains: no
    shared covariates at all, or none of the survivors marked for the
    sampling model. Idempotent: harmonizing harmonized tables is a
    no-op.
    """
    if trial.side != "trial" or target.side != "target":
        raise DataError("harmonize expects (trial, target) tables")
    t_names = {c.name for c in trial.schema}
    g_names = {c.name for c in target.schema}
    shared = t_names & g_names
    dropped = sorted((t_names | g_names) - shared)
    if dropped:
        warnings.warn(
            f"covariates dropped during harmonization (present on one side "
            f"only): {dropped}",
            DroppedCovariateWarning,
            stacklevel=2,
        )
    if not shared:
        raise HarmonizeError("the sides share no covariates")
    g_by_name = {c.name: c for c in target.schema}
    merged: list[CovariateSchema] = []
    for c in trial.schema:
        if c.name not in shared:
            continue
        other = g_by_name[c.name]
        if c.kind != other.kind or c.levels != other.levels:
            raise HarmonizeError(
                f"covariate {c.name!r} disagrees between sides: "
                f"{c.kind}/{c.levels} vs {other.kind}/{other.levels}"
            )
        merged.append(
            replace(
                c,
                is_effect_modifier_candidate=(
                    c.is_effect_modifier_candidate
                    or other.is_effect_modifier_candidate
                ),
                in_ps_model=c.in_ps_model or other.in_ps_model,
                in_outcome_model=c.in_outcome_model or other.in_outcome_model,
                recode_map=None,
            )
        )
    if not any(c.in_ps_model for c in merged):
        raise HarmonizeError(
            "no shared covariate is marked for the sampling model "
            f"(dropped: {dropped})"
        )
    names = [c.name for c in merged]

    def _cut(tab: StudyTable, side: str) -> StudyTable:
        keep = ["unit_id", "s"] + names + (
            ["t", "y"] if side == "trial" else []
        )
        df = tab.data[keep].copy()
        prov = dict(tab.provenance)
        prov["dropped_covariates"] = sorted(
            set(prov.get("dropped_covariates", [])) | set(dropped)
        )
        return StudyTable(df, merged, side, prov)

    return _cut(trial, "trial"), _cut(target, "target")


# -- missingness -------------------------------------------------------------


@dataclass
class MissingnessReport:
    """Covariate missingness fractions, overall and by study side."""

    n: int
    per_variable: dict[str, float]
    any_missing: float
    per_side: dict[str, dict]

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "per_variable": dict(self.per_variable),
            "any_missing": self.any_missing,
            "per_side": {k: dict(v) for k, v in self.per_side.items()},
        }


def _profile_frame(df: pd.DataFrame, names: list[str]) -> tuple[dict, float]:
    n = len(df)
    per = {}
    if n == 0:
        return {name: 0.0 for name in names}, 0.0
    any_mask = np.zeros(n, dtype=bool)
    for name in names:
        miss = df[name].isna().to_numpy()
        per[name] = float(miss.mean())
        any_mask |= miss
    return per, float(any_mask.mean())


def missingness_profile(table: StudyTable) -> MissingnessReport:
    """Fractions of missing covariate cells, with a by-side cross-tab."""
    names = table.covariate_names
    per, any_frac = _profile_frame(table.data, names)
    per_side: dict[str, dict] = {}
    for label, flag in (("trial", 1), ("target", 0)):
        sub = table.data[table.data["s"] == flag]
        if len(sub) == 0:
            continue
        side_per, side_any = _profile_frame(sub, names)
        per_side[label] = {
            "n": int(len(sub)),
            "per_variable": side_per,
            "any_missing": side_any,
        }
    return MissingnessReport(table.n, per, any_frac, per_side)


# -- stacking ----------------------------------------------------------------


def stack(trial: StudyTable, target: StudyTable) -> StudyTable:
    """Concatenate the two sides into one table with a study indicator.

    Unit ids are prefixed by side so ids reused across files never
    collide. Schemas must already be identical (run harmonize first).
    """
    if trial.side != "trial" or target.side != "target":
        raise DataError("stack expects (trial, target) tables")
    if trial.schema != target.schema:
        raise SchemaError(
            "schemas differ between sides; harmonize before stacking"
        )
    if trial.n == 0:
        raise DataError("trial table is empty")
    if target.n == 0:
        raise DataError("target table is empty")
    tdf = trial.data.copy()
    gdf = target.data.copy()
    tdf["unit_id"] = "trial:" + tdf["unit_id"].astype(str)
    gdf["unit_id"] = "target:" + gdf["unit_id"].astype(str)
    gdf["t"] = np.nan
    gdf["y"] = np.nan
    cols = ["unit_id", "s"] + trial.covariate_names + ["t", "y"]
    df = pd.concat([tdf[cols], gdf[cols]], ignore_index=True)
    prov = {
        "trial": dict(trial.provenance),
        "target": dict(target.provenance),
    }
    return StudyTable(df, list(trial.schema), "stacked", prov)


def schema_from_json(obj) -> list[CovariateSchema]:
    """Parse a schema JSON document (a list of covariate declarations)."""
    if isinstance(obj, dict) and "covariates" in obj:
        obj = obj["covariates"]
    if not isinstance(obj, list):
        raise SchemaError("schema JSON must be a list of covariate objects")
    schema = [CovariateSchema.from_dict(d) for d in obj]
    validate_schema(schema)
    return schema
