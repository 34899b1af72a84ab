"""Dataset ingestion, study configuration files and report serialization.

Floats are written in shortest round-trip form (``repr``) in both JSON and
CSV, and nan becomes JSON ``null`` / an empty CSV field. Reports carry the
invocation that produced them, so a file can be regenerated from its own
header.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import __version__
from .dataset import Dataset
from .errors import AllRowsDropped, InvalidParameter, MissingColumn, ParseError
from .genius import NieEstimate
from .simulation import ReplicateRecord, ReportRow, SimulationReport, StudyConfig

MISSING_TOKENS = frozenset({"", "na", "nan", "null", "none", "."})


@dataclass
class ColumnSpec:
    outcome: str
    mediator: str
    exposure: str
    covariates: tuple = ()
    latent_u: Optional[str] = None
    latent_w: Optional[str] = None
    true_m: Optional[str] = None

    def __post_init__(self):
        self.covariates = tuple(self.covariates)
        names = self.names()
        if len(set(names)) != len(names):
            raise InvalidParameter(f"column names must be distinct, got {names}")

    def names(self) -> list:
        out = [self.outcome, self.mediator, self.exposure, *self.covariates]
        out += [x for x in (self.latent_u, self.latent_w, self.true_m) if x]
        return out


def _parse_float(token: str, row: int, col: str) -> float:
    if token.strip().lower() in MISSING_TOKENS:
        return math.nan
    try:
        val = float(token)
    except ValueError:
        raise ParseError(f"row {row}, column {col!r}: cannot parse {token!r} as a number") from None
    if math.isinf(val):
        raise ParseError(f"row {row}, column {col!r}: infinite value")
    return val


def load_csv(path, spec: ColumnSpec):
    """Read the columns named in ``spec`` from a headed CSV file.

    Rows with a missing value (empty, ``NA``, ``NaN``, ``null``, ``.``) in
    any selected column are dropped. Any other non-numeric entry raises
    :class:`ParseError` naming the row and column.

    Returns
    -------
    (Dataset, int)
        The data and the number of dropped rows.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file, header row required") from None
        for name in spec.names():
            if name not in header:
                raise MissingColumn(f"column {name!r} not found in header of {path}")
        pos = {name: header.index(name) for name in spec.names()}
        rows, dropped = [], 0
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not x.strip() for x in rec):
                continue
            if len(rec) != len(header):
                raise ParseError(f"row {lineno}: expected {len(header)} fields, found {len(rec)}")
            vals = [_parse_float(rec[pos[name]], lineno, name) for name in spec.names()]
            if any(math.isnan(v) for v in vals):
                dropped += 1
                continue
            rows.append(vals)
    if not rows:
        raise AllRowsDropped(f"{path}: no complete rows in the selected columns ({dropped} dropped)")
    arr = np.array(rows, dtype=float)
    col = {name: arr[:, j] for j, name in enumerate(spec.names())}
    k = len(spec.covariates)
    c = np.column_stack([col[x] for x in spec.covariates]) if k else None
    data = Dataset(
        y=col[spec.outcome],
        m=col[spec.mediator],
        a=col[spec.exposure],
        c=c,
        latent_u=col.get(spec.latent_u) if spec.latent_u else None,
        latent_w=col.get(spec.latent_w) if spec.latent_w else None,
        true_m=col.get(spec.true_m) if spec.true_m else None,
    )
    return data, dropped


def write_dataset_csv(path, data: Dataset) -> None:
    """Write a Dataset with columns y, m, a, c0.., and any latent columns."""
    cols = {"y": data.y, "m": data.m, "a": data.a}
    for j in range(data.k):
        cols[f"c{j}"] = data.c[:, j]
    for name in ("latent_u", "latent_w", "true_m"):
        val = getattr(data, name)
        if val is not None:
            cols[name] = val
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for i in range(data.n):
            w.writerow(fmt(v[i]) for v in cols.values())


def load_rr_table(path, y="y", m="m", a="a", c="c", count="count"):
    """Long-format ``(y, m, a, c, count)`` CSV into a DiscreteMediationTable.

    Level labels are kept as strings except that integer-looking labels
    become ints.
    """
    from .mediation_formula import DiscreteMediationTable

    def label(tok):
        tok = tok.strip()
        try:
            return int(tok)
        except ValueError:
            return tok

    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for name in (y, m, a, c, count):
            if reader.fieldnames is None or name not in reader.fieldnames:
                raise MissingColumn(f"column {name!r} not found in header of {path}")
        for lineno, rec in enumerate(reader, start=2):
            try:
                yv = int(rec[y])
                cnt = int(rec[count])
            except ValueError:
                raise ParseError(f"row {lineno}: outcome and count must be integers") from None
            records.append((yv, label(rec[m]), label(rec[a]), label(rec[c]), cnt))
    return DiscreteMediationTable.from_records(records)


# ---------------------------------------------------------------------------
# Number formatting
# ---------------------------------------------------------------------------


def fmt(x) -> str:
    """Shortest round-trip text for a number; nan/None become ''."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "" if math.isnan(x) else repr(x)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return None if math.isnan(obj) else float(obj)
    return obj


def dumps_json(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, allow_nan=False) + "\n"


def invocation(argv=None, **extra) -> dict:
    out = {"program": "genius-nie", "version": __version__}
    if argv is not None:
        out["argv"] = list(argv)
    out.update(extra)
    return out


# ---------------------------------------------------------------------------
# Estimate reports
# ---------------------------------------------------------------------------


@dataclass
class EstimateReport:
    method: str
    contrast: tuple
    nie: Optional[float]
    theta_m: Optional[float]
    beta_a: Optional[float]
    se_delta: Optional[float]
    ci_delta: tuple
    n: int
    n_dropped: int = 0
    theta_mc: Optional[list] = None
    se_theta: Optional[float] = None
    se_beta: Optional[float] = None
    weak_id: bool = False
    bootstrap: Optional[dict] = None
    het_test: Optional[dict] = None
    warnings: list = field(default_factory=list)
    invocation: dict = field(default_factory=dict)

    @classmethod
    def from_estimate(cls, est: NieEstimate, n_dropped=0, invocation=None):
        boot = None
        if est.bootstrap is not None:
            b = est.bootstrap
            boot = {"B": b.B, "seed": b.seed, "se": b.se, "ci": list(b.ci),
                    "ci_method": b.ci_method, "failures": b.n_failed}
        het = None
        gfit = est.genius_fit
        if gfit is not None and gfit.het_test is not None:
            het = het_dict(gfit.het_test)
        return cls(
            method=est.method,
            contrast=tuple(est.contrast),
            nie=est.nie,
            theta_m=est.theta_m,
            beta_a=est.beta_a,
            se_delta=est.se_delta,
            ci_delta=tuple(est.ci_delta),
            n=est.n,
            n_dropped=n_dropped,
            theta_mc=None if est.theta_mc is None else [float(v) for v in est.theta_mc],
            se_theta=est.se_theta,
            se_beta=est.se_beta,
            weak_id=False,
            bootstrap=boot,
            het_test=het,
            warnings=list(est.warnings),
            invocation=dict(invocation or {}),
        )

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def to_json(self) -> str:
        return dumps_json(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "EstimateReport":
        kw = {f.name: d.get(f.name) for f in fields(cls) if f.name in d}
        for key in ("contrast", "ci_delta"):
            kw[key] = tuple(_nan(v) for v in kw[key])
        for key in ("nie", "theta_m", "beta_a", "se_delta", "se_theta", "se_beta"):
            if key in kw:
                kw[key] = _nan(kw[key])
        return cls(**kw)

    @classmethod
    def from_json(cls, text: str) -> "EstimateReport":
        return cls.from_dict(json.loads(text))

    def flat(self) -> dict:
        """One-level mapping used for the CSV layout."""
        row = {
            "method": self.method,
            "a": self.contrast[0],
            "a_star": self.contrast[1],
            "nie": self.nie,
            "theta_m": self.theta_m,
            "beta_a": self.beta_a,
            "se_theta": self.se_theta,
            "se_beta": self.se_beta,
            "se_delta": self.se_delta,
            "ci_delta_lo": self.ci_delta[0],
            "ci_delta_hi": self.ci_delta[1],
            "n": self.n,
            "n_dropped": self.n_dropped,
            "weak_id": self.weak_id,
        }
        for j, v in enumerate(self.theta_mc or []):
            row[f"theta_mc_{j}"] = v
        if self.bootstrap:
            b = self.bootstrap
            row.update({"boot_B": b["B"], "boot_seed": b["seed"], "boot_se": b["se"],
                        "boot_ci_lo": b["ci"][0], "boot_ci_hi": b["ci"][1],
                        "boot_failures": b["failures"]})
        if self.het_test:
            h = self.het_test
            row.update({"het_statistic": h["statistic"], "het_df": h["df"], "het_p_value": h["p_value"]})
        return row

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("# invocation: " + json.dumps(_jsonable(self.invocation), sort_keys=True) + "\n")
        row = self.flat()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(row)
        w.writerow(v if isinstance(v, str) else fmt(v) for v in row.values())
        return buf.getvalue()


def _nan(v):
    return math.nan if v is None else v


def het_dict(h) -> dict:
    return {
        "statistic": h.statistic,
        "df": h.df,
        "p_value": h.p_value,
        "variance_by_level": {fmt(k): v for k, v in h.variance_by_level.items()},
        "n": h.n,
    }


# ---------------------------------------------------------------------------
# Simulation reports and configs
# ---------------------------------------------------------------------------

REPORT_COLUMNS = [f.name for f in fields(ReportRow)]
REPLICATE_COLUMNS = [f.name for f in fields(ReplicateRecord)]


def report_to_csv(report: SimulationReport, inv: Optional[dict] = None) -> str:
    """Summary table: one row per (dag, method)."""
    buf = io.StringIO()
    header = {"config": report.config.to_dict(), **(inv or {})}
    buf.write("# invocation: " + json.dumps(_jsonable(header), sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for row in report.rows:
        w.writerow(v if isinstance(v, str) else fmt(v) for v in asdict(row).values())
    return buf.getvalue()


def report_to_json(report: SimulationReport, inv: Optional[dict] = None) -> str:
    return dumps_json({
        "invocation": {"config": report.config.to_dict(), **(inv or {})},
        "true_nie": report.config.true_nie,
        "rows": [asdict(r) for r in report.rows],
    })


def replicates_to_csv(report: SimulationReport) -> str:
    """Per-replicate dump, one line per (dag, method, replicate); boxplot-ready."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPLICATE_COLUMNS)
    for rec in report.replicates:
        w.writerow(v if isinstance(v, str) else fmt(v) for v in asdict(rec).values())
    return buf.getvalue()


def read_report_csv(text: str) -> list:
    """Parse a report CSV back into dicts of floats (for checks and tooling)."""
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    out = []
    for rec in csv.DictReader(lines):
        row = {}
        for k, v in rec.items():
            if k in ("dag", "method"):
                row[k] = v
            elif v in ("true", "false"):
                row[k] = v == "true"
            else:
                row[k] = math.nan if v == "" else float(v)
        out.append(row)
    return out


_CONFIG_KEYS = {f.name for f in fields(StudyConfig)}


def load_study_config(path, **overrides) -> StudyConfig:
    """StudyConfig from a JSON or YAML file; keys are StudyConfig field names."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".json":
        raw = json.loads(text)
    else:
        raw = yaml.safe_load(text)
    if not isinstance(raw, dict):
        raise InvalidParameter(f"{path}: config must be a mapping")
    unknown = set(raw) - _CONFIG_KEYS
    if unknown:
        raise InvalidParameter(f"{path}: unknown config keys {sorted(unknown)}")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return StudyConfig(**raw)
