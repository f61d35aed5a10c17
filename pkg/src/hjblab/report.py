"""Diagnostic report records and their serialization.

Every numerical audit in the package returns a DiagnosticReport. Reports are
plain records: the verdict is derived mechanically from the measured
quantities and the stated tolerance, never adjusted by hand. The witness
field stores whatever is needed to replay the worst observed case, seeds
included.
"""

import csv
import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DiagnosticReport",
    "all_pass",
    "write_reports_json",
    "format_report_lines",
    "write_csv",
]

PASS = "pass"
FAIL = "fail"
INCONCLUSIVE = "inconclusive"

_VERDICTS = (PASS, FAIL, INCONCLUSIVE)


@dataclass
class DiagnosticReport:
    """Outcome of one numerical audit.

    name: which check ran.
    verdict: "pass", "fail", or "inconclusive" (measurement below noise).
    samples_used: Monte Carlo samples or probes consumed.
    constants: estimated constants, e.g. {"lipschitz": 3.2}.
    witness: inputs reproducing the worst observed case (seeds included).
    tolerance: the threshold the verdict was judged against.
    notes: free-form context; never affects the verdict.
    """

    name: str
    verdict: str
    samples_used: int = 0
    constants: dict = field(default_factory=dict)
    witness: dict | None = None
    tolerance: float | None = None
    notes: str = ""

    def __post_init__(self):
        if self.verdict not in _VERDICTS:
            raise ValueError(f"verdict must be one of {_VERDICTS}, got {self.verdict!r}")

    @property
    def passed(self) -> bool:
        return self.verdict == PASS

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


def all_pass(reports) -> bool:
    return all(r.verdict == PASS for r in reports)


def _plain(obj):
    # json-safe copy: numpy scalars to python, arrays to lists
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def write_reports_json(path, reports) -> None:
    payload = [r.to_dict() for r in reports]
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def format_report_lines(reports) -> str:
    """Aligned one-line-per-report text table."""
    if not reports:
        return "(no reports)\n"
    width = max(len(r.name) for r in reports)
    lines = []
    for r in reports:
        consts = " ".join(f"{k}={_fmt(v)}" for k, v in sorted(r.constants.items()))
        tol = "" if r.tolerance is None else f" tol={_fmt(r.tolerance)}"
        note = f"  # {r.notes}" if r.notes else ""
        lines.append(
            f"{r.name:<{width}}  {r.verdict.upper():<12} n={r.samples_used}{tol}  {consts}{note}"
        )
    return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{v:.6g}"
    return str(v)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt_csv(v) for v in row])


def _fmt_csv(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v
