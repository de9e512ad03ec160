"""Min-max normalization and tie-aware Kendall tau between metrics and performance."""
from __future__ import annotations

import csv
import io
import json
import math
import operator
import re
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DegenerateScaleWarning,
    InvalidInputError,
    SchemaError,
    UndefinedCorrelationError,
)

# evaluation columns paired with each downstream task
TASK_COLUMNS = {
    "acc": ("la_inst", "lu_inst"),
    "ap": ("la_dense", "lu_dense"),
}
CSV_COLUMNS = ("id", "batch", "lr", "w_a", "w_u", "w_c", "tau_temp",
               "la_inst", "lu_inst", "acc", "la_dense", "lu_dense", "ap")
TAG_COLUMNS = ("batch", "lr", "w_a", "w_u", "w_c", "tau_temp")

FIXTURES = {
    "coco_instance": "coco_instance.csv",
    "coco_dense": "coco_dense.csv",
}


@dataclass(frozen=True)
class ModelRecord:
    id: str
    l_a: float
    l_u: float
    performance: dict
    tags: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.performance:
            raise InvalidInputError(f"record {self.id!r} has no performance entry")
        values = [self.l_a, self.l_u, *self.performance.values()]
        if not all(math.isfinite(v) for v in values):
            raise InvalidInputError(f"record {self.id!r} has a non-finite metric")


@dataclass(frozen=True, eq=False)
class CorrelationReport:
    tau: float
    concordant: int
    discordant: int
    ties_x: int
    ties_y: int
    n: int
    task: str = ""
    normalized_x: Optional[np.ndarray] = None
    normalized_y: Optional[np.ndarray] = None
    ids: tuple = ()
    degenerate: tuple = ()

    def to_dict(self) -> dict:
        out = {
            "tau": self.tau,
            "P": self.concordant,
            "Q": self.discordant,
            "T": self.ties_x,
            "U": self.ties_y,
            "n": self.n,
            "task": self.task,
        }
        if self.normalized_x is not None:
            ids = self.ids or tuple(str(i) for i in range(self.n))
            out["points"] = [
                {"x": float(x), "y": float(y), "id": rid}
                for x, y, rid in zip(self.normalized_x, self.normalized_y, ids)
            ]
        if self.degenerate:
            out["degenerate_scale"] = list(self.degenerate)
        return out


def min_max_normalize(values, warn: bool = True) -> np.ndarray:
    """Affine map onto [0, 1]. A constant vector maps to zeros with a warning."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size < 1:
        raise InvalidInputError("min_max_normalize needs a non-empty 1-D vector")
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("min_max_normalize needs finite values")
    lo, hi = v.min(), v.max()
    if hi == lo:
        if warn:
            warnings.warn("constant input: min-max scale is degenerate", DegenerateScaleWarning, stacklevel=2)
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def _tied_pairs(sorted_vals: np.ndarray) -> int:
    """Number of tied pairs in an already sorted vector."""
    _, counts = np.unique(sorted_vals, return_counts=True)
    return int(np.sum(counts * (counts - 1) // 2))


def _count_inversions(seq: list) -> int:
    """Strict inversions (i < j, seq[i] > seq[j]) by bottom-up merge sort."""
    arr = list(seq)
    n = len(arr)
    buf = [None] * n
    swaps = 0
    width = 1
    while width < n:
        for lo in range(0, n, 2 * width):
            mid = min(lo + width, n)
            hi = min(lo + 2 * width, n)
            i, j, k = lo, mid, lo
            while i < mid and j < hi:
                if arr[j] < arr[i]:
                    buf[k] = arr[j]
                    swaps += mid - i
                    j += 1
                else:
                    buf[k] = arr[i]
                    i += 1
                k += 1
            buf[k:hi] = arr[i:mid] + arr[j:hi]
        arr, buf = buf, arr
        width *= 2
    return swaps


def kendall_tau_b(x, y) -> CorrelationReport:
    """Kendall tau-b with counts ``P - Q / sqrt((P+Q+T)(P+Q+U))``.

    T counts pairs tied in x only and U pairs tied in y only; pairs tied in
    both appear in none of P, Q, T, U. Knight's sort-based counting.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise InvalidInputError(f"x and y must be equal-length vectors, got {x.shape} and {y.shape}")
    n = x.size
    if n < 2:
        raise InvalidInputError("Kendall tau needs at least 2 observations")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise InvalidInputError("Kendall tau needs finite values")

    order = np.lexsort((y, x))
    xs, ys = x[order], y[order]
    total = n * (n - 1) // 2
    tied_x = _tied_pairs(xs)
    # pairs tied in both: runs of equal (x, y) in the lexicographic order
    keys = np.stack([xs, ys], axis=1)
    _, both_counts = np.unique(keys, axis=0, return_counts=True)
    tied_both = int(np.sum(both_counts * (both_counts - 1) // 2))
    discordant = _count_inversions(ys.tolist())
    tied_y = _tied_pairs(np.sort(ys))
    concordant = total - tied_x - tied_y + tied_both - discordant

    only_x = tied_x - tied_both
    only_y = tied_y - tied_both
    denom = (concordant + discordant + only_x) * (concordant + discordant + only_y)
    if denom == 0:
        raise UndefinedCorrelationError("every pair is tied in x or in y; tau is undefined")
    tau = (concordant - discordant) / math.sqrt(denom)
    return CorrelationReport(float(tau), concordant, discordant, only_x, only_y, n)


def correlate_models(records: Sequence[ModelRecord], task: str) -> CorrelationReport:
    """Kendall tau between ``r(L_a) + r(L_u)`` and ``r(performance[task])``."""
    if len(records) < 2:
        raise InvalidInputError("need at least 2 model records")
    for rec in records:
        if task not in rec.performance:
            raise SchemaError(f"record {rec.id!r} has no {task!r} metric (has {sorted(rec.performance)})")
    degenerate = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DegenerateScaleWarning)
        for name, vals in (("l_a", [r.l_a for r in records]), ("l_u", [r.l_u for r in records]),
                           (task, [r.performance[task] for r in records])):
            before = len(caught)
            norm = min_max_normalize(vals)
            if len(caught) > before:
                degenerate.append(name)
            if name == "l_a":
                ra = norm
            elif name == "l_u":
                ru = norm
            else:
                rp = norm
    x = ra + ru
    base = kendall_tau_b(x, rp)
    return CorrelationReport(
        base.tau, base.concordant, base.discordant, base.ties_x, base.ties_y, base.n,
        task=task, normalized_x=x, normalized_y=rp,
        ids=tuple(r.id for r in records), degenerate=tuple(degenerate),
    )


# ---------------------------------------------------------------------------
# record ingestion

_FILTER_CLAUSE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*(==|!=|<=|>=|=|<|>)\s*(\S+)\s*$")
_OPS = {"==": operator.eq, "=": operator.eq, "!=": operator.ne,
        "<": operator.lt, "<=": operator.le, ">": operator.gt, ">=": operator.ge}


def parse_filter(expr: str):
    """Compile ``"w_c = 0"``-style clauses joined by ``,`` or ``and`` into a predicate on tags."""
    clauses = []
    for part in re.split(r"\s*,\s*|\s+and\s+", expr.strip()):
        if not part:
            continue
        m = _FILTER_CLAUSE.match(part)
        if not m:
            raise InvalidInputError(f"cannot parse filter clause {part!r}")
        key, op, raw = m.groups()
        try:
            value = float(raw)
        except ValueError:
            value = raw
        clauses.append((key, _OPS[op], value))
    if not clauses:
        raise InvalidInputError("empty filter expression")

    def predicate(rec: ModelRecord) -> bool:
        for key, op, value in clauses:
            if key not in rec.tags:
                raise SchemaError(f"filter key {key!r} is not a tag of record {rec.id!r} (tags: {sorted(rec.tags)})")
            have = rec.tags[key]
            if isinstance(value, float) and not isinstance(have, float):
                try:
                    have = float(have)
                except (TypeError, ValueError):
                    return False
            if not op(have, value):
                return False
        return True

    return predicate


def _rows_to_records(rows: list, task: str, source: str) -> list:
    if task not in TASK_COLUMNS:
        available = sorted(TASK_COLUMNS)
        raise SchemaError(f"unknown task {task!r}; available tasks: {available}")
    la_key, lu_key = TASK_COLUMNS[task]
    records = []
    for lineno, row in rows:
        missing = [k for k in ("id", la_key, lu_key, task) if row.get(k) in (None, "")]
        if missing:
            rid = row.get("id", f"line {lineno}")
            raise SchemaError(f"{source}:{lineno}: record {rid!r} lacks {missing}")
        perf = {k: float(row[k]) for k in TASK_COLUMNS if row.get(k) not in (None, "")}
        tags = {}
        for k in TAG_COLUMNS:
            if row.get(k) not in (None, ""):
                tags[k] = float(row[k])
        records.append(ModelRecord(str(row["id"]), float(row[la_key]), float(row[lu_key]), perf, tags))
    return records


def parse_records_csv(text: str, task: str, source: str = "<csv>") -> list:
    lines = [(i + 1, line) for i, line in enumerate(text.splitlines()) if line.strip() and not line.lstrip().startswith("#")]
    if not lines:
        raise SchemaError(f"{source}: no header row")
    reader = csv.DictReader(io.StringIO("\n".join(line for _, line in lines)))
    rows = list(zip((n for n, _ in lines[1:]), reader))
    return _rows_to_records(rows, task, source)


def parse_records_json(text: str, task: str, source: str = "<json>") -> list:
    """JSON records: either table-layout rows (CSV keys) or ``{id, l_a, l_u, performance, tags}``."""
    data = json.loads(text)
    if isinstance(data, dict) and "records" in data:
        data = data["records"]
    if not isinstance(data, list):
        raise SchemaError(f"{source}: expected a list of records")
    if data and "performance" in data[0]:
        records = []
        for i, item in enumerate(data):
            perf = {k: float(v) for k, v in item["performance"].items()}
            if task not in perf:
                raise SchemaError(f"{source}: record {item.get('id', i)!r} has no {task!r} metric (has {sorted(perf)})")
            records.append(ModelRecord(str(item["id"]), float(item["l_a"]), float(item["l_u"]), perf,
                                       dict(item.get("tags", {}))))
        return records
    return _rows_to_records([(i + 1, row) for i, row in enumerate(data)], task, source)


def load_records(path, task: str) -> list:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".json":
        return parse_records_json(text, task, str(path))
    return parse_records_csv(text, task, str(path))


def fixture_path(name: str) -> Path:
    """Path of a bundled record table (``coco_instance`` or ``coco_dense``)."""
    if name not in FIXTURES:
        raise InvalidInputError(f"unknown fixture {name!r}; available: {sorted(FIXTURES)}")
    return Path(str(resources.files("contrastive_geometry") / "data" / FIXTURES[name]))


def load_fixture(name: str, task: str) -> list:
    return load_records(fixture_path(name), task)
