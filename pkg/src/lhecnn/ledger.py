"""Per-level operation accounting and cost estimation.

Every homomorphic primitive invocation is recorded under a (kind, level) key,
attributed to the phase label active at the time (e.g. "CL1", "FL1-Square").
Reports group the counts by phase, by level, as totals, or amortized per
input, and a cost table prices a ledger in microseconds.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator

from .errors import MissingCostError, ValidationError

OP_KINDS = ("add", "mul", "rot", "cmult", "enc", "dec")

# Homomorphic op kinds that a cost table prices; enc/dec are counted but
# never charged.
COSTED_KINDS = ("add", "mul", "rot", "cmult")


class OpLedger:
    """Counts of primitive invocations keyed by (phase, kind, level).

    Phase labels form a stack; nested phases are joined with "/". Counts only
    ever increase, and two ledgers merge by entrywise sum, so independent
    workers can record into private ledgers that are merged at a join.
    """

    def __init__(self) -> None:
        self._counts: dict[tuple[str, str, int], int] = {}
        self._phase_stack: list[str] = []
        self._phase_order: list[str] = []

    @contextmanager
    def phase(self, label: str) -> Iterator[None]:
        self._phase_stack.append(label)
        try:
            yield
        finally:
            self._phase_stack.pop()

    @property
    def current_phase(self) -> str:
        return "/".join(self._phase_stack)

    def record(self, kind: str, level: int) -> None:
        if kind not in OP_KINDS:
            raise ValidationError(f"unknown op kind {kind!r}")
        if level < 0:
            raise ValidationError(f"negative level {level} for {kind}")
        phase = self.current_phase
        key = (phase, kind, level)
        if key not in self._counts and phase not in self._phase_order:
            self._phase_order.append(phase)
        self._counts[key] = self._counts.get(key, 0) + 1

    def absorb(self, other: "OpLedger") -> None:
        """Entrywise-add another ledger into this one."""
        for (phase, kind, level), c in other._counts.items():
            key = (phase, kind, level)
            if key not in self._counts and phase not in self._phase_order:
                self._phase_order.append(phase)
            self._counts[key] = self._counts.get(key, 0) + c

    def merge(self, other: "OpLedger") -> "OpLedger":
        out = OpLedger()
        out.absorb(self)
        out.absorb(other)
        return out

    def spawn(self) -> "OpLedger":
        """Fresh ledger inheriting the current phase stack, for a worker whose
        counts are absorbed back at the join."""
        child = OpLedger()
        child._phase_stack = list(self._phase_stack)
        return child

    # -- queries ----------------------------------------------------------

    def count(self, kind: str | None = None, level: int | None = None,
              phase: str | None = None) -> int:
        total = 0
        for (p, k, lv), c in self._counts.items():
            if kind is not None and k != kind:
                continue
            if level is not None and lv != level:
                continue
            if phase is not None and p != phase:
                continue
            total += c
        return total

    def totals(self) -> dict[str, int]:
        out = {k: 0 for k in OP_KINDS}
        for (_, k, _), c in self._counts.items():
            out[k] += c
        return out

    def by_phase(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for phase in self._phase_order:
            out[phase] = {k: 0 for k in OP_KINDS}
        for (p, k, _), c in self._counts.items():
            out[p][k] += c
        return out

    def by_level(self) -> dict[int, dict[str, int]]:
        levels = sorted({lv for (_, _, lv) in self._counts}, reverse=True)
        out = {lv: {k: 0 for k in OP_KINDS} for lv in levels}
        for (_, k, lv), c in self._counts.items():
            out[lv][k] += c
        return out

    def by_kind_level(self) -> dict[tuple[str, int], int]:
        out: dict[tuple[str, int], int] = {}
        for (_, k, lv), c in self._counts.items():
            out[(k, lv)] = out.get((k, lv), 0) + c
        return out

    def amortized(self, n: int) -> dict[str, Fraction]:
        """Totals divided by the input count, kept as exact rationals."""
        if n < 1:
            raise ValidationError("amortization requires n >= 1")
        return {k: Fraction(v, n) for k, v in self.totals().items()}

    def phases(self) -> list[str]:
        return list(self._phase_order)

    def is_empty(self) -> bool:
        return not self._counts


# -- cost model ------------------------------------------------------------

# Measured per-op execution times in microseconds, by encryption level
# (levels 2..11), for add / ciphertext-multiply / rotate / plaintext-multiply.
_MEASURED_COSTS_US = {
    "add":   (93, 127, 172, 209, 253, 298, 345, 397, 443, 498),
    "mul":   (6434, 10106, 14466, 19757, 25931, 33139, 39953, 49835, 57791, 68374),
    "rot":   (4542, 7311, 10719, 14995, 20057, 25916, 31722, 40167, 47144, 56366),
    "cmult": (1645, 2467, 3273, 4137, 5018, 5935, 6741, 7942, 8731, 9895),
}


@dataclass
class CostTable:
    """Microsecond cost per (op kind, level) for the four homomorphic ops."""

    cost_us: dict[tuple[str, int], float] = field(default_factory=dict)

    @classmethod
    def default(cls) -> "CostTable":
        costs: dict[tuple[str, int], float] = {}
        for kind, row in _MEASURED_COSTS_US.items():
            for level, us in zip(range(2, 12), row):
                costs[(kind, level)] = float(us)
            # The measurements start at level 2 but pipelines reach level 1;
            # costs grow linearly with level, so extrapolate one step down.
            costs[(kind, 1)] = float(2 * row[0] - row[1])
        return cls(costs)

    def cost(self, kind: str, level: int) -> float:
        try:
            return self.cost_us[(kind, level)]
        except KeyError:
            raise MissingCostError(f"no cost entry for op {kind!r} at level {level}")

    def to_json(self) -> str:
        levels = sorted({lv for (_, lv) in self.cost_us})
        table = {
            str(lv): {k: self.cost_us[(k, lv)] for k in COSTED_KINDS
                      if (k, lv) in self.cost_us}
            for lv in levels
        }
        return json.dumps(table, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CostTable":
        raw = json.loads(text)
        costs: dict[tuple[str, int], float] = {}
        for lv_str, row in raw.items():
            level = int(lv_str)
            for kind, us in row.items():
                if kind not in COSTED_KINDS:
                    raise ValidationError(f"cost table has unknown op kind {kind!r}")
                costs[(kind, level)] = float(us)
        return cls(costs)

    @classmethod
    def load(cls, path) -> "CostTable":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def estimate_time_us(ledger: OpLedger, costs: CostTable) -> float:
    """Sum of count(kind, level) * cost(kind, level) over the costed ops."""
    total = 0.0
    for (kind, level), c in sorted(ledger.by_kind_level().items()):
        if kind not in COSTED_KINDS:
            continue
        total += c * costs.cost(kind, level)
    return total


def estimate_breakdown_us(ledger: OpLedger, costs: CostTable):
    """Per-phase and per-level cost, in microseconds."""
    by_phase: dict[str, float] = {}
    by_level: dict[int, float] = {}
    for (phase, kind, level), c in ledger._counts.items():
        if kind not in COSTED_KINDS:
            continue
        us = c * costs.cost(kind, level)
        by_phase[phase] = by_phase.get(phase, 0.0) + us
        by_level[level] = by_level.get(level, 0.0) + us
    ordered = {p: by_phase[p] for p in ledger.phases() if p in by_phase}
    return ordered, dict(sorted(by_level.items(), reverse=True))


# -- report rendering -------------------------------------------------------

CSV_HEADER = "phase/level,add,mul,rot,cmult,enc,dec"


def _fmt_amortized(value: Fraction) -> str:
    text = f"{float(value):.1f}"
    return text.rstrip("0").rstrip(".") if "." in text else text


def _rows(ledger: OpLedger, grouping: str, n: int | None):
    if grouping == "by_phase":
        return [(p, row) for p, row in ledger.by_phase().items()]
    if grouping == "by_level":
        return [(str(lv), row) for lv, row in ledger.by_level().items()]
    if grouping == "totals":
        return [("total", ledger.totals())]
    if grouping == "amortized":
        if n is None:
            raise ValidationError("amortized grouping requires n")
        amort = ledger.amortized(n)
        return [(f"amortized(n={n})", {k: _fmt_amortized(v) for k, v in amort.items()})]
    raise ValidationError(f"unknown grouping {grouping!r}")


def render_csv(ledger: OpLedger, grouping: str = "by_phase", n: int | None = None) -> str:
    lines = [CSV_HEADER]
    for label, row in _rows(ledger, grouping, n):
        cells = [str(row[k]) for k in OP_KINDS]
        lines.append(",".join([label] + cells))
    return "\n".join(lines) + "\n"


def parse_csv(text: str) -> dict[str, dict[str, str]]:
    """Inverse of render_csv: rows keyed by label, cells kept as strings."""
    lines = [ln for ln in text.strip().splitlines() if ln]
    if not lines or lines[0] != CSV_HEADER:
        raise ValidationError("unrecognized report CSV header")
    out: dict[str, dict[str, str]] = {}
    for ln in lines[1:]:
        cells = ln.split(",")
        if len(cells) != 1 + len(OP_KINDS):
            raise ValidationError(f"malformed report CSV row: {ln!r}")
        out[cells[0]] = dict(zip(OP_KINDS, cells[1:]))
    return out


def render_text(ledger: OpLedger, grouping: str = "by_phase", n: int | None = None) -> str:
    rows = _rows(ledger, grouping, n)
    labels = [label for label, _ in rows]
    width = max([len("phase/level")] + [len(s) for s in labels]) + 2
    head = "phase/level".ljust(width) + "".join(k.rjust(9) for k in OP_KINDS)
    lines = [head, "-" * len(head)]
    for label, row in rows:
        cells = "".join(str(row[k]).rjust(9) for k in OP_KINDS)
        lines.append(label.ljust(width) + cells)
    return "\n".join(lines) + "\n"
