"""Structured pass/fail reports for the verification suite."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .errors import ParameterError


@dataclass(frozen=True)
class CheckReport:
    """Outcome of one verification: measured numbers against tolerances.

    ``passed`` is derived, never hand-set: every tolerance key must have a
    measured value, and the check passes iff each measurement is at most
    its tolerance.  Monte-Carlo checks also carry trial and violation
    counts; free-form context (exact flags, skipped counts, bound variants)
    goes in ``notes``.
    """

    name: str
    measured: dict
    tolerances: dict
    seed: int | None = None
    trials: int | None = None
    violations: int | None = None
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        for key in self.tolerances:
            if key not in self.measured:
                raise ParameterError(f"tolerance {key!r} has no measured value")

    @property
    def passed(self) -> bool:
        for key, tol in self.tolerances.items():
            value = self.measured[key]
            if math.isnan(value) or value > tol:
                return False
        return True

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "measured": dict(self.measured),
            "tolerances": dict(self.tolerances),
            "seed": self.seed,
            "trials": self.trials,
            "violations": self.violations,
            "notes": dict(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def save_report(report: CheckReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
        fh.write("\n")
