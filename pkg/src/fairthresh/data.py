"""German Credit / COMPAS ingestion, score model and score pools.

The end product is an *environment pack*: a JSON file holding the trained
logistic model, the standardization stats, per-group high/low score pools and
the SHA-256 of the source file. Environments load packs, never raw CSVs.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd

from .envs import GroupPools

PACK_FORMAT = "fairthresh.envpack/1"


class IngestionError(ValueError):
    pass


class EncodingError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class ProvenanceError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSchema:
    name: str
    categorical: tuple[str, ...]
    numeric: tuple[str, ...]
    label: str
    label_map: dict
    sensitive: str
    sensitive_map: dict
    names: tuple[str, ...] | None = None  # header for files without one
    sep: str = ","
    row_filter: Callable[[pd.DataFrame], pd.Series] | None = field(default=None, compare=False)
    filter_doc: str = ""

    @property
    def required(self) -> tuple[str, ...]:
        return self.categorical + self.numeric + (self.label, self.sensitive)


GERMAN_COLUMNS = (
    "status", "duration", "credit_history", "purpose", "credit_amount", "savings",
    "present_employment", "installment_rate", "status_sex", "other_debtors",
    "residence_since", "property", "age", "installment_plans", "housing",
    "existing_credits", "job", "people_liable", "telephone", "foreign_worker", "credit",
)

GERMAN = DatasetSchema(
    name="german",
    categorical=(
        "status", "credit_history", "purpose", "savings", "present_employment",
        "other_debtors", "property", "installment_plans", "housing", "job",
        "telephone", "foreign_worker",
    ),
    numeric=(
        "duration", "credit_amount", "installment_rate", "residence_since", "age",
        "existing_credits", "people_liable",
    ),
    label="credit",
    label_map={"1": 1, "2": 0},  # 1 = good credit
    sensitive="status_sex",
    sensitive_map={"A91": 0, "A93": 0, "A94": 0, "A92": 1, "A95": 1},  # 1 = female
    names=GERMAN_COLUMNS,
    sep=r"\s+",
)


def _propublica_filter(df: pd.DataFrame) -> pd.Series:
    days = pd.to_numeric(df["days_b_screening_arrest"], errors="coerce")
    return (
        days.between(-30, 30)
        & (df["is_recid"] != "-1")
        & (df["c_charge_degree"] != "O")
        & (df["score_text"] != "N/A")
    )


COMPAS = DatasetSchema(
    name="compas",
    categorical=("age_cat", "race", "c_charge_degree"),
    numeric=("age", "priors_count", "juv_fel_count", "juv_misd_count", "juv_other_count"),
    label="two_year_recid",
    label_map={"0": 1, "1": 0},  # 1 = no recidivism within two years
    sensitive="sex",
    sensitive_map={"Male": 0, "Female": 1},
    row_filter=_propublica_filter,
    filter_doc=(
        "-30 <= days_b_screening_arrest <= 30, is_recid != -1, "
        "c_charge_degree != 'O', score_text != 'N/A'"
    ),
)

SCHEMAS = {"german": GERMAN, "compas": COMPAS}
DEFAULT_FILES = {"german": "german.data", "compas": "compas-scores-two-years.csv"}


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_table(path, schema: DatasetSchema) -> pd.DataFrame:
    """Read a dataset file into typed columns.

    Returns a frame with the schema's feature columns plus integer ``label``
    and ``group`` columns. ``attrs`` records raw and filtered row counts.
    """
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"{path}: file not found")
    if path.stat().st_size == 0:
        raise IngestionError(f"{path}: empty file")
    read_kw = dict(dtype=str, keep_default_na=False, sep=schema.sep)
    if schema.names is not None:
        read_kw.update(header=None, names=list(schema.names))
    try:
        raw = pd.read_csv(path, **read_kw)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise IngestionError(f"{path}: cannot parse: {exc}") from exc
    if raw.empty:
        raise IngestionError(f"{path}: no data rows")
    missing = [c for c in schema.required if c not in raw.columns]
    if missing:
        raise IngestionError(f"{path}: missing column(s) {missing}")

    rows_raw = len(raw)
    if schema.row_filter is not None:
        raw = raw[schema.row_filter(raw)].reset_index(drop=True)

    out = pd.DataFrame(index=raw.index)
    for col in schema.categorical:
        out[col] = raw[col].str.strip()
    for col in schema.numeric:
        vals = pd.to_numeric(raw[col].str.strip(), errors="coerce")
        bad = vals.isna()
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise IngestionError(f"{path}: unparseable numeric cell at row {row}, column {col!r}: {raw[col].iloc[row]!r}")
        out[col] = vals.astype(float)
    for target, col, mapping in (
        ("label", schema.label, schema.label_map),
        ("group", schema.sensitive, schema.sensitive_map),
    ):
        mapped = raw[col].str.strip().map(mapping)
        bad = mapped.isna()
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise IngestionError(f"{path}: unexpected value at row {row}, column {col!r}: {raw[col].iloc[row]!r}")
        out[target] = mapped.astype(np.int8)
    out.attrs.update(rows_raw=rows_raw, rows=len(out))
    return out


@dataclass
class FeatureMatrix:
    values: np.ndarray
    columns: list[tuple[str, str | None]]  # (source column, category or None)
    categories: dict[str, list[str]]
    means: dict[str, float]
    stds: dict[str, float]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def stats(self) -> dict:
        return {"categories": self.categories, "means": self.means, "stds": self.stds}


def encode_features(table: pd.DataFrame, schema: DatasetSchema, stats: dict | None = None) -> FeatureMatrix:
    """One-hot categoricals (lexicographic levels) then standardized numerics.

    With ``stats`` given, reuse fitted levels and moments instead of fitting.
    """
    fit = stats is None
    categories = {} if fit else stats["categories"]
    means = {} if fit else stats["means"]
    stds = {} if fit else stats["stds"]
    blocks, columns = [], []
    for col in schema.categorical:
        vals = table[col].to_numpy(dtype=str)
        if fit:
            categories[col] = sorted(set(vals.tolist()))
        levels = categories[col]
        unseen = sorted(set(vals.tolist()) - set(levels))
        if unseen:
            raise EncodingError(f"column {col!r}: unseen categories {unseen}")
        blocks.append((vals[:, None] == np.asarray(levels)[None, :]).astype(float))
        columns.extend((col, level) for level in levels)
    for col in schema.numeric:
        x = table[col].to_numpy(dtype=float)
        if fit:
            means[col] = float(x.mean())
            stds[col] = float(x.std())
        if stds[col] == 0.0:
            warnings.warn(f"numeric column {col!r} is constant; encoded as zeros", stacklevel=2)
            blocks.append(np.zeros((len(x), 1)))
        else:
            blocks.append(((x - means[col]) / stds[col])[:, None])
        columns.append((col, None))
    values = np.hstack(blocks) if blocks else np.zeros((len(table), 0))
    return FeatureMatrix(values, columns, categories, means, stds)


@dataclass
class ScoreModel:
    weights: np.ndarray
    intercept: float
    l2: float
    iterations: int
    final_loss: float
    loss_checkpoints: list[float] = field(default_factory=list)


def logistic_loss_grad(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, l2: float):
    """Mean logistic loss + (l2/2)|w|^2 and its gradient in (w, b)."""
    z = X @ w + b
    # log(1 + e^z) - y z, computed stably
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * (w @ w))
    resid = 1.0 / (1.0 + np.exp(-z)) - y
    grad_w = X.T @ resid / len(y) + l2 * w
    grad_b = float(resid.mean())
    return loss, grad_w, grad_b


def train_score_model(
    X,
    y,
    l2: float = 1e-3,
    step: float = 0.1,
    iterations: int = 2000,
    checkpoint_every: int = 100,
) -> ScoreModel:
    """Full-batch gradient descent from zero with a fixed step."""
    if l2 < 0:
        raise ValueError("l2 must be >= 0")
    X = X.values if isinstance(X, FeatureMatrix) else np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w, b = np.zeros(X.shape[1]), 0.0
    checkpoints = []
    loss = math.nan
    for it in range(iterations + 1):
        loss, gw, gb = logistic_loss_grad(w, b, X, y, l2)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss at iteration {it}")
        if it % checkpoint_every == 0 or it == iterations:
            checkpoints.append(loss)
        if it == iterations:
            break
        w = w - step * gw
        b = b - step * gb
    return ScoreModel(w, b, l2, iterations, loss, checkpoints)


def score_rows(model: ScoreModel, X) -> np.ndarray:
    X = X.values if isinstance(X, FeatureMatrix) else np.asarray(X, dtype=float)
    if X.shape[1] != len(model.weights):
        raise ValueError(f"feature count {X.shape[1]} != model weights {len(model.weights)}")
    return X @ model.weights + model.intercept


def build_pools(scores, labels, groups, q: float = 0.5) -> GroupPools:
    """Split each group at its q-quantile; ties go to the high pool."""
    if not 0.0 < q < 1.0:
        raise ValueError("q must lie in (0, 1)")
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=np.int8)
    groups = np.asarray(groups)
    parts = {}
    for g in (0, 1):
        mask = groups == g
        if mask.sum() < 2:
            raise ValueError(f"group {g} has fewer than 2 rows")
        s, y = scores[mask], labels[mask]
        cut = np.quantile(s, q)
        high = s >= cut
        parts[g] = (s[high], y[high], s[~high], y[~high])
    return GroupPools(
        high_scores=(parts[0][0], parts[1][0]),
        high_labels=(parts[0][1], parts[1][1]),
        low_scores=(parts[0][2], parts[1][2]),
        low_labels=(parts[0][3], parts[1][3]),
        quantile=q,
        group_share=float(np.mean(groups == 1)),
    )


@dataclass(frozen=True)
class TrainSettings:
    l2: float = 1e-3
    step: float = 0.1
    iterations: int = 2000
    quantile: float = 0.5


def build_env_pack(dataset: str, csv_path, out_path=None, settings: TrainSettings = TrainSettings()) -> dict:
    """Run ingestion, encoding, training and pool construction end to end."""
    schema = SCHEMAS[dataset]
    table = load_table(csv_path, schema)
    X = encode_features(table, schema)
    y = table["label"].to_numpy()
    model = train_score_model(X, y, l2=settings.l2, step=settings.step, iterations=settings.iterations)
    scores = score_rows(model, X)
    pools = build_pools(scores, y, table["group"].to_numpy(), settings.quantile)

    def pool_rows(s, lab):
        return [[float(a), int(b)] for a, b in zip(s, lab)]

    pack = {
        "format": PACK_FORMAT,
        "dataset": dataset,
        "provenance": {
            "source_file": Path(csv_path).name,
            "sha256": file_sha256(csv_path),
            "rows_raw": table.attrs["rows_raw"],
            "rows": table.attrs["rows"],
            "row_filter": schema.filter_doc,
        },
        "settings": {"l2": settings.l2, "step": settings.step, "iterations": settings.iterations, "quantile": settings.quantile},
        "features": {"columns": [[c, lvl] for c, lvl in X.columns], **X.stats()},
        "model": {
            "weights": model.weights.tolist(),
            "intercept": model.intercept,
            "final_loss": model.final_loss,
            "loss_checkpoints": model.loss_checkpoints,
        },
        "logit_range": [float(scores.min()), float(scores.max())],
        "group_share": pools.group_share,
        "base_rates": {
            "label": float(y.mean()),
            "label_by_group": [float(y[table["group"] == g].mean()) for g in (0, 1)],
        },
        "pools": {
            str(g): {
                "high": pool_rows(pools.high_scores[g], pools.high_labels[g]),
                "low": pool_rows(pools.low_scores[g], pools.low_labels[g]),
            }
            for g in (0, 1)
        },
    }
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(dump_pack(pack), encoding="utf-8")
    return pack


def dump_pack(pack: dict) -> str:
    return json.dumps(pack, sort_keys=True, separators=(",", ":")) + "\n"


def load_env_pack(path, source_csv=None) -> dict:
    """Load a pack; when ``source_csv`` is given its hash must match."""
    pack = json.loads(Path(path).read_text(encoding="utf-8"))
    if pack.get("format") != PACK_FORMAT:
        raise ProvenanceError(f"{path}: not an environment pack ({pack.get('format')!r})")
    if source_csv is not None:
        actual = file_sha256(source_csv)
        expected = pack["provenance"]["sha256"]
        if actual != expected:
            raise ProvenanceError(
                f"{source_csv} does not match pack {path}: sha256 {actual} != recorded {expected}"
            )
    return pack


def pools_from_pack(pack: dict) -> GroupPools:
    arrays = {}
    for g in (0, 1):
        for stratum in ("high", "low"):
            rows = np.asarray(pack["pools"][str(g)][stratum], dtype=float).reshape(-1, 2)
            arrays[(g, stratum)] = (rows[:, 0].copy(), rows[:, 1].astype(np.int8))
    return GroupPools(
        high_scores=(arrays[(0, "high")][0], arrays[(1, "high")][0]),
        high_labels=(arrays[(0, "high")][1], arrays[(1, "high")][1]),
        low_scores=(arrays[(0, "low")][0], arrays[(1, "low")][0]),
        low_labels=(arrays[(0, "low")][1], arrays[(1, "low")][1]),
        quantile=pack["settings"]["quantile"],
        group_share=pack["group_share"],
    )
