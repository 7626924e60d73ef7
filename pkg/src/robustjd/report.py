"""Uniform pass/fail records for inequality and identity checks.

Every statistical check in the package reduces to comparing a left-hand side
against a right-hand side within a tolerance. Inequality checks pass when
``lhs <= rhs + tolerance``; identity checks when ``|lhs - rhs| <= tolerance``.
The tolerance is normally 3 combined standard errors, with an absolute floor
of 1e-10 for identities.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

IDENTITY_FLOOR = 1e-10


@dataclass
class CheckRecord:
    check: str
    lhs: float
    rhs: float
    stderr: float
    tolerance: float
    passed: bool
    kind: str = "inequality"  # or "identity"
    detail: str = ""

    def to_json(self) -> str:
        return json.dumps(
            {
                "check": self.check,
                "lhs": self.lhs,
                "rhs": self.rhs,
                "stderr": self.stderr,
                "tolerance": self.tolerance,
                "pass": self.passed,
            }
        )

    def csv_row(self):
        return [self.check, repr(self.lhs), repr(self.rhs), repr(self.stderr),
                repr(self.tolerance), str(self.passed)]


CSV_HEADER = ["check", "lhs", "rhs", "stderr", "tolerance", "pass"]


def inequality_check(name, lhs, rhs, stderr, n_sigma=3.0, detail="") -> CheckRecord:
    """lhs <= rhs within ``n_sigma`` combined standard errors."""
    tol = n_sigma * stderr
    ok = bool(lhs <= rhs + tol) and math.isfinite(lhs) and math.isfinite(rhs)
    return CheckRecord(name, float(lhs), float(rhs), float(stderr), float(tol),
                       ok, "inequality", detail)


def identity_check(name, lhs, rhs, stderr, n_sigma=3.0, floor=IDENTITY_FLOOR,
                   detail="") -> CheckRecord:
    """|lhs - rhs| within max(n_sigma * stderr, floor)."""
    tol = max(n_sigma * stderr, floor)
    ok = bool(abs(lhs - rhs) <= tol) and math.isfinite(lhs) and math.isfinite(rhs)
    return CheckRecord(name, float(lhs), float(rhs), float(stderr), float(tol),
                       ok, "identity", detail)


@dataclass
class Report:
    name: str
    records: list[CheckRecord] = field(default_factory=list)

    def add(self, record: CheckRecord):
        self.records.append(record)

    def extend(self, records):
        self.records.extend(records)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.records)

    def worst_margin(self) -> float:
        """Most negative slack rhs + tol - lhs over inequality records."""
        margins = [r.rhs + r.tolerance - r.lhs for r in self.records
                   if r.kind == "inequality"]
        return min(margins) if margins else float("inf")

    def failures(self):
        return [r for r in self.records if not r.passed]

    def to_json_lines(self) -> str:
        return "\n".join(r.to_json() for r in self.records)

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)
