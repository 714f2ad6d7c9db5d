"""Per-epoch / per-step loss tables persisted as CSV."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class LossHistory:
    columns: list[str]
    rows: list[list[float]] = field(default_factory=list)

    def append(self, *values) -> None:
        if len(values) != len(self.columns):
            raise ValueError(f"expected {len(self.columns)} values, got {len(values)}")
        self.rows.append(list(values))

    def column(self, name: str) -> list[float]:
        k = self.columns.index(name)
        return [r[k] for r in self.rows]

    def __len__(self):
        return len(self.rows)

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for r in self.rows:
                # repr keeps full float precision for rerun comparisons
                w.writerow([v if isinstance(v, int) else repr(float(v)) for v in r])
        return path

    @classmethod
    def from_csv(cls, path: str | Path) -> "LossHistory":
        path = Path(path)
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise ValueError(f"{path}: empty CSV (no header)") from None
            hist = cls(header)
            for n, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(header):
                    raise ValueError(f"{path}:{n}: expected {len(header)} fields, got {len(row)}")
                try:
                    hist.rows.append([float(v) for v in row])
                except ValueError as exc:
                    raise ValueError(f"{path}:{n}: non-numeric field ({exc})") from None
        return hist
