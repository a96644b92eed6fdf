"""Result records, aggregation, and the aligned-text / CSV report."""
from __future__ import annotations

import csv
import io
import json
import math
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..autodiff import ContractError

Z95 = 1.96

FOOTER = "half_width = 1.96 * population std (divisor N) over per-seed test accuracy; delta = mean - baseline mean"


def aggregate(metrics) -> tuple[float, float]:
    """Mean and 1.96 times the population standard deviation."""
    values = [float(m) for m in metrics]
    if not values:
        raise ContractError("cannot aggregate an empty list of metrics")
    # both are exactly rounded, hence independent of the input order
    return statistics.mean(values), Z95 * statistics.pstdev(values)


@dataclass
class RunResult:
    procedure: str
    student: str
    teacher: str
    synthetic: bool
    per_seed: list[tuple[str, float]] = field(default_factory=list)
    mean: float = math.nan
    half_width: float = math.nan
    wall_time: float = 0.0
    lr: float | None = None
    weight_decay: float | None = None
    counters: dict[str, int] = field(default_factory=dict)
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None

    @property
    def metrics(self) -> list[float]:
        return [m for _, m in self.per_seed]

    def finalize(self) -> "RunResult":
        if not self.failed:
            self.mean, self.half_width = aggregate(self.metrics)
        return self

    @property
    def key(self) -> tuple[str, str, bool]:
        return (self.student, self.teacher, self.synthetic)


@dataclass
class ReportTable:
    title: str
    rows: list[RunResult]
    baseline: str | None = "finetune-student"
    columns: tuple[str, ...] = ()

    def row(self, procedure: str) -> RunResult:
        for r in self.rows:
            if r.procedure == procedure:
                return r
        raise KeyError(procedure)

    def delta(self, procedure: str) -> float | None:
        if self.baseline is None:
            return None
        try:
            base = self.row(self.baseline)
        except KeyError:
            return None
        row = self.row(procedure)
        if base.failed or row.failed:
            return None
        return row.mean - base.mean

    # -- rendering ---------------------------------------------------------

    def _cells(self) -> list[list[str]]:
        out = []
        for r in self.rows:
            d = self.delta(r.procedure)
            cells = [
                r.procedure,
                r.student,
                r.teacher,
                "yes" if r.synthetic else "no",
                "failed" if r.failed else f"{100 * r.mean:.2f}",
                "-" if r.failed else f"{100 * r.half_width:.2f}",
                "-" if d is None else f"{100 * d:+.2f}",
                str(len(r.per_seed)),
                "-" if r.lr is None else f"{r.lr:g}",
                "-" if r.weight_decay is None else f"{r.weight_decay:g}",
            ]
            cells += [str(r.counters.get(c, 0)) for c in self.columns]
            out.append(cells)
        return out

    def header(self) -> list[str]:
        return [
            "procedure",
            "student",
            "teacher",
            "synthetic",
            "acc%",
            "+-95%",
            "delta",
            "n",
            "lr",
            "wd",
            *self.columns,
        ]

    def to_text(self) -> str:
        head = self.header()
        body = self._cells()
        widths = [max(len(x) for x in col) for col in zip(head, *body)]
        fmt = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()  # noqa: E731
        lines = [self.title, fmt(head), fmt(["-" * w for w in widths])]
        lines += [fmt(c) for c in body]
        failures = [r for r in self.rows if r.failed]
        for r in failures:
            lines.append(f"failed {r.procedure}: {r.error}")
        if self.baseline:
            lines.append(f"baseline: {self.baseline}")
        lines.append(FOOTER)
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(
            ["procedure", "student", "teacher", "synthetic", "mean", "half_width", "delta", "lr", "weight_decay"]
            + list(self.columns)
            + ["error", "per_seed"]
        )
        for r in self.rows:
            d = self.delta(r.procedure)
            w.writerow(
                [
                    r.procedure,
                    r.student,
                    r.teacher,
                    int(r.synthetic),
                    "" if r.failed else repr(r.mean),
                    "" if r.failed else repr(r.half_width),
                    "" if d is None else repr(d),
                    "" if r.lr is None else repr(r.lr),
                    "" if r.weight_decay is None else repr(r.weight_decay),
                ]
                + [r.counters.get(c, 0) for c in self.columns]
                + [r.error or "", ";".join(f"{k}={m!r}" for k, m in r.per_seed)]
            )
        return buf.getvalue()

    def to_json(self) -> str:
        payload = {
            "title": self.title,
            "baseline": self.baseline,
            "columns": list(self.columns),
            "rows": [_row_record(r) for r in self.rows],
        }
        return json.dumps(payload, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ReportTable":
        payload = json.loads(text)
        rows = []
        for raw in payload["rows"]:
            raw["per_seed"] = [tuple(p) for p in raw["per_seed"]]
            for k in ("mean", "half_width"):
                if raw[k] is None:
                    raw[k] = math.nan
            rows.append(RunResult(**raw))
        return cls(payload["title"], rows, payload["baseline"], tuple(payload["columns"]))

    def write(self, out_dir: str | Path, stem: str) -> list[Path]:
        """Write ``<stem>.txt``, ``<stem>.csv`` and ``<stem>.json``; wall times stay out of all three."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for suffix, text in ((".txt", self.to_text()), (".csv", self.to_csv()), (".json", self.to_json())):
            p = out / f"{stem}{suffix}"
            p.write_text(text)
            paths.append(p)
        return paths


def _row_record(r: RunResult) -> dict:
    rec = asdict(r)
    rec.pop("wall_time")
    for k in ("mean", "half_width"):
        if math.isnan(rec[k]):
            rec[k] = None
    return rec
