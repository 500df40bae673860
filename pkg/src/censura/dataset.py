"""Censored datasets: CSV ingestion, duplicate aggregation, control-compound
extraction and date-ordered five-fold temporal splits.

A row's relation token encodes the censoring mask: ``=`` is an observed
label (mask 0), ``<`` a left-censored threshold (mask -1, true value below
the stored label) and ``>`` a right-censored one (mask +1).
"""

import csv
import hashlib
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import DataLoadError, SplitError
from .losses import BatchTargets

_RELATION_TO_MASK = {"<": -1, "=": 0, ">": 1}
_MASK_TO_RELATION = {-1: "<", 0: "=", 1: ">"}

#: Label transforms applied at load time. ``neg_log10_molar`` maps a molar
#: concentration to a p-scale value; because it is decreasing, it flips the
#: censoring direction (a "< z" concentration becomes "> -log10 z").
LABEL_TRANSFORMS = ("none", "log10", "neg_log10_molar")


@dataclass
class CensoredDataset:
    """Feature matrix, labels, censoring masks, dates and record ids."""

    features: np.ndarray
    labels: np.ndarray
    masks: np.ndarray
    dates: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-d matrix")
        self.labels = np.asarray(self.labels, dtype=np.float64)
        self.masks = np.asarray(self.masks, dtype=np.int64)
        self.dates = np.asarray(self.dates, dtype="datetime64[D]")
        self.ids = np.asarray(self.ids)
        n = self.features.shape[0]
        for name, arr in [
            ("labels", self.labels),
            ("masks", self.masks),
            ("dates", self.dates),
            ("ids", self.ids),
        ]:
            if arr.shape != (n,):
                raise ValueError(f"{name} must have {n} entries, got {arr.shape}")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite entries")
        if not np.all(np.isfinite(self.labels)):
            raise ValueError("labels contain non-finite entries")
        if not np.all(np.isin(self.masks, (-1, 0, 1))):
            raise ValueError("masks must take values in {-1, 0, +1}")

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    @property
    def n_observed(self):
        return int(np.count_nonzero(self.masks == 0))

    @property
    def n_censored(self):
        return int(np.count_nonzero(self.masks != 0))

    @property
    def targets(self):
        return BatchTargets(labels=self.labels, masks=self.masks)

    def take(self, indices):
        """Row subset (copy), preserving order of ``indices``."""
        idx = np.asarray(indices, dtype=np.int64)
        return CensoredDataset(
            features=self.features[idx],
            labels=self.labels[idx],
            masks=self.masks[idx],
            dates=self.dates[idx],
            ids=self.ids[idx],
        )


@dataclass
class ColumnSchema:
    """Maps CSV columns onto dataset fields.

    Either ``feature_columns`` (dense) or ``sparse_column`` plus
    ``sparse_dim`` (space-separated ``index:value`` pairs) must be given.
    """

    id_column: str = "id"
    date_column: str = "date"
    value_column: str = "value"
    relation_column: str = "relation"
    feature_columns: list = None
    sparse_column: str = None
    sparse_dim: int = None
    transform: str = "none"

    def __post_init__(self):
        if self.transform not in LABEL_TRANSFORMS:
            raise ValueError(f"unknown transform {self.transform!r}")
        if (self.feature_columns is None) == (self.sparse_column is None):
            raise ValueError("give exactly one of feature_columns or sparse_column")
        if self.sparse_column is not None and not self.sparse_dim:
            raise ValueError("sparse_column requires sparse_dim")


def schema_from_header(header, transform="none"):
    """Infer a ColumnSchema from the canonical header layout:
    id, date, value, relation, then f0..f{d-1} or a single 'sparse' column.
    """
    required = ["id", "date", "value", "relation"]
    if header[: len(required)] != required:
        raise DataLoadError(
            f"header must start with {','.join(required)}, got {header[:4]}"
        )
    rest = header[len(required) :]
    if rest == ["sparse"]:
        raise DataLoadError("sparse header needs an explicit schema with sparse_dim")
    if not rest:
        raise DataLoadError("no feature columns in header")
    return ColumnSchema(feature_columns=rest, transform=transform)


def _parse_date(text, line_no):
    try:
        date = np.datetime64(text.strip(), "D")
    except ValueError:
        raise DataLoadError(f"line {line_no}: unparseable date {text!r}") from None
    if np.isnat(date):
        raise DataLoadError(f"line {line_no}: unparseable date {text!r}")
    return date


def _parse_float(text, line_no, what):
    try:
        v = float(text)
    except (TypeError, ValueError):
        raise DataLoadError(f"line {line_no}: unparseable {what} {text!r}") from None
    if not math.isfinite(v):
        raise DataLoadError(f"line {line_no}: non-finite {what} {text!r}")
    return v


def _apply_transform(value, mask, transform, line_no):
    if transform == "none":
        return value, mask
    if value <= 0:
        raise DataLoadError(
            f"line {line_no}: value {value!r} not positive, cannot apply {transform}"
        )
    if transform == "log10":
        return math.log10(value), mask
    # neg_log10_molar is decreasing, so censoring directions flip
    return -math.log10(value), -mask


def load_csv(path, schema):
    """Read a censored-regression CSV into a CensoredDataset.

    Row order is preserved. Any unknown relation token, unparseable number
    or date, or ragged row raises DataLoadError naming the offending line.
    """
    ids, dates, labels, masks, rows = [], [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataLoadError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        col_index = {name: i for i, name in enumerate(header)}
        fixed = [
            schema.id_column,
            schema.date_column,
            schema.value_column,
            schema.relation_column,
        ]
        feature_cols = (
            schema.feature_columns
            if schema.feature_columns is not None
            else [schema.sparse_column]
        )
        for name in fixed + list(feature_cols):
            if name not in col_index:
                raise DataLoadError(f"{path}: missing column {name!r}")

        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataLoadError(
                    f"line {line_no}: expected {len(header)} fields, got {len(row)}"
                )
            relation = row[col_index[schema.relation_column]].strip()
            if relation not in _RELATION_TO_MASK:
                raise DataLoadError(f"line {line_no}: unknown relation {relation!r}")
            value = _parse_float(row[col_index[schema.value_column]], line_no, "value")
            label, mask = _apply_transform(
                value, _RELATION_TO_MASK[relation], schema.transform, line_no
            )
            ids.append(row[col_index[schema.id_column]].strip())
            dates.append(_parse_date(row[col_index[schema.date_column]], line_no))
            labels.append(label)
            masks.append(mask)

            if schema.feature_columns is not None:
                rows.append(
                    [
                        _parse_float(row[col_index[c]], line_no, f"feature {c!r}")
                        for c in schema.feature_columns
                    ]
                )
            else:
                vec = np.zeros(schema.sparse_dim)
                text = row[col_index[schema.sparse_column]].strip()
                for pair in text.split():
                    try:
                        idx_s, val_s = pair.split(":", 1)
                        idx = int(idx_s)
                    except ValueError:
                        raise DataLoadError(
                            f"line {line_no}: bad sparse entry {pair!r}"
                        ) from None
                    if not 0 <= idx < schema.sparse_dim:
                        raise DataLoadError(
                            f"line {line_no}: sparse index {idx} out of range"
                        )
                    vec[idx] = _parse_float(val_s, line_no, "sparse value")
                rows.append(vec)

    if not ids:
        raise DataLoadError(f"{path}: no data rows")
    return CensoredDataset(
        features=np.asarray(rows, dtype=np.float64),
        labels=np.asarray(labels),
        masks=np.asarray(masks),
        dates=np.asarray(dates, dtype="datetime64[D]"),
        ids=np.asarray(ids),
    )


def save_csv(ds, path):
    """Write a dataset in the canonical dense CSV layout (lossless floats)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["id", "date", "value", "relation"] + [f"f{i}" for i in range(ds.dim)]
        )
        for i in range(len(ds)):
            writer.writerow(
                [
                    str(ds.ids[i]),
                    str(ds.dates[i]),
                    repr(float(ds.labels[i])),
                    _MASK_TO_RELATION[int(ds.masks[i])],
                ]
                + [repr(float(v)) for v in ds.features[i]]
            )


@dataclass
class DuplicateStats:
    """Bookkeeping from duplicate aggregation.

    ``observed_std`` holds the per-id sample standard deviation for groups
    with at least three observed measurements and nonzero spread (the
    experimental-error reference for the aleatoric case study);
    ``tie_flagged`` lists ids whose censored threshold mode was ambiguous.
    """

    observed_std: dict = field(default_factory=dict)
    tie_flagged: list = field(default_factory=list)
    n_input_rows: int = 0
    n_output_rows: int = 0


def _modal_threshold(labels, masks):
    """Most common (threshold, mask) pair; ties resolve to the least
    informative candidate (largest '<' threshold, else smallest '>')."""
    counts = Counter(zip(labels.tolist(), masks.tolist()))
    top = max(counts.values())
    tied = [pair for pair, c in counts.items() if c == top]
    if len(tied) == 1:
        return tied[0], False
    left = [v for v, m in tied if m == -1]
    if left:
        return (max(left), -1), True
    return (min(v for v, m in tied), 1), True


def aggregate_duplicates(ds):
    """Collapse repeated measurements of one id into a single row.

    Observed labels always win over censored ones: their median becomes the
    label. A group with only censored rows keeps its most common threshold.
    Every group keeps the earliest date across all of its measurements.
    """
    order = {}
    for i, rid in enumerate(ds.ids.tolist()):
        order.setdefault(rid, []).append(i)

    stats = DuplicateStats(n_input_rows=len(ds))
    feats, labels, masks, dates, ids = [], [], [], [], []
    for rid, idx in order.items():
        idx = np.asarray(idx)
        g_labels = ds.labels[idx]
        g_masks = ds.masks[idx]
        observed = g_labels[g_masks == 0]
        if observed.size:
            label, mask = float(np.median(observed)), 0
            if observed.size >= 3:
                std = float(np.std(observed, ddof=1))
                if std > 0:
                    stats.observed_std[rid] = std
        else:
            (label, mask), tie = _modal_threshold(g_labels, g_masks)
            if tie:
                stats.tie_flagged.append(rid)
        feats.append(ds.features[idx[0]])
        labels.append(label)
        masks.append(mask)
        dates.append(ds.dates[idx].min())
        ids.append(rid)

    stats.n_output_rows = len(ids)
    out = CensoredDataset(
        features=np.asarray(feats),
        labels=np.asarray(labels),
        masks=np.asarray(masks),
        dates=np.asarray(dates, dtype="datetime64[D]"),
        ids=np.asarray(ids),
    )
    return out, stats


def extract_control(ds, control_id):
    """Remove every row of the control compound; return the remaining
    dataset and the sample standard deviation of the control's observed
    measurements (the assay's general experimental error).
    """
    is_control = ds.ids == np.asarray(control_id)
    if not np.any(is_control):
        raise KeyError(f"control id {control_id!r} not present")
    observed = ds.labels[is_control & (ds.masks == 0)]
    if observed.size < 2:
        raise ValueError(
            f"control id {control_id!r} needs >= 2 observed measurements, "
            f"got {observed.size}"
        )
    std = float(np.std(observed, ddof=1))
    return ds.take(np.flatnonzero(~is_control)), std


def observed_subset(ds):
    """Rows with mask 0 only, order preserved."""
    return ds.take(np.flatnonzero(ds.masks == 0))


#: The three train/validation/test triples over the five date-ordered folds.
SETTINGS = (((1,), 2, 3), ((1, 2), 3, 4), ((1, 2, 3), 4, 5))


@dataclass
class TemporalSettings:
    """Five date-ordered folds and the three evaluation settings over them.

    ``folds[k]`` holds original row indices; within and across folds the
    rows are date-ordered, and rows sharing a date never straddle a fold
    boundary.
    """

    folds: list

    def fold_indices(self, fold_numbers):
        """Row indices of one or more 1-based folds, concatenated."""
        if np.isscalar(fold_numbers):
            fold_numbers = (fold_numbers,)
        return np.concatenate([self.folds[f - 1] for f in fold_numbers])

    def setting(self, number):
        """(train_indices, validation_indices, test_indices) for setting
        1, 2 or 3."""
        train_folds, val_fold, test_fold = SETTINGS[number - 1]
        return (
            self.fold_indices(train_folds),
            self.fold_indices(val_fold),
            self.fold_indices(test_fold),
        )


def temporal_split(ds):
    """Partition rows into five folds by date with roughly equal numbers of
    observed labels per fold.

    Rows are stably sorted by date; fold boundaries land on date changes
    nearest to the ideal cumulative observed counts, so same-date rows stay
    together and censored rows follow their date.
    """
    n_obs = ds.n_observed
    if n_obs < 5:
        raise SplitError(f"need at least 5 observed labels, got {n_obs}")
    order = np.argsort(ds.dates, kind="stable")
    sorted_dates = ds.dates[order]
    if np.unique(sorted_dates).size < 5:
        raise SplitError("need at least 5 distinct dates to form five folds")

    # runs of equal dates: candidate boundaries exist only between runs
    change = np.flatnonzero(sorted_dates[1:] != sorted_dates[:-1]) + 1
    run_edges = np.concatenate([[0], change, [len(ds)]])
    n_runs = run_edges.size - 1
    obs_sorted = (ds.masks[order] == 0).astype(np.int64)
    cum_obs = np.concatenate([[0], np.cumsum(obs_sorted)])[run_edges]  # per run end

    boundaries = []  # run index r: fold ends after run r-1
    prev = 0
    for k in range(1, 5):
        ideal = k * n_obs / 5.0
        lo, hi = prev + 1, n_runs - (4 - k)
        candidates = np.arange(lo, hi + 1)
        gaps = np.abs(cum_obs[candidates] - ideal)
        r = int(candidates[np.argmin(gaps)])
        boundaries.append(r)
        prev = r

    edges = [0] + [run_edges[b] for b in boundaries] + [len(ds)]
    folds = [order[edges[i] : edges[i + 1]] for i in range(5)]
    return TemporalSettings(folds=folds)


def split_manifest(ts, ds):
    """JSON-ready manifest: fold index lists plus per-fold label counts."""
    folds = []
    for k, idx in enumerate(ts.folds, start=1):
        m = ds.masks[idx]
        folds.append(
            {
                "fold": k,
                "indices": [int(i) for i in idx],
                "n_observed": int(np.count_nonzero(m == 0)),
                "n_censored": int(np.count_nonzero(m != 0)),
            }
        )
    settings = [
        {"setting": i + 1, "train_folds": list(tr), "validation_fold": v, "test_fold": te}
        for i, (tr, v, te) in enumerate(SETTINGS)
    ]
    return {"folds": folds, "settings": settings}


def hash_featurize(token_strings, dim):
    """Deterministic demo featurizer: character 2- and 3-grams hashed into
    ``dim`` binary buckets. A stand-in for real molecular fingerprints.
    """
    if dim < 8:
        raise ValueError("dim must be >= 8")
    out = np.zeros((len(token_strings), dim))
    for row, text in enumerate(token_strings):
        if not text:
            warnings.warn(f"empty token string at row {row}; emitting zero vector")
            continue
        for n in (2, 3):
            for start in range(len(text) - n + 1):
                gram = text[start : start + n].encode("utf-8")
                bucket = int.from_bytes(
                    hashlib.blake2b(gram, digest_size=8).digest(), "big"
                )
                out[row, bucket % dim] = 1.0
    return out
