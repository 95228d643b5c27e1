from __future__ import annotations
from collections import Counter
from pathlib import Path
from typing import Dict, List, Tuple
import csv
import math


class TrainingLog:
    """Scalar rows (step, name, value) collected during a run and dumped as CSV."""

    def __init__(self) -> None:
        self.rows: List[Tuple[int, str, float]] = []
        self.counters: Counter[str] = Counter()

    def add(self, step: int, name: str, value: float) -> None:
        self.rows.append((step, name, float(value)))

    def extend(self, step: int, values: Dict[str, float]) -> None:
        for name, value in values.items():
            self.add(step, name, value)

    def count(self, name: str, n: int = 1) -> None:
        self.counters[name] += n

    def series(self, name: str) -> list[float]:
        return [v for _, n, v in self.rows if n == name]

    def last(self, name: str) -> float:
        s = self.series(name)
        if not s:
            raise KeyError(name)
        return s[-1]

    def all_finite(self) -> bool:
        return all(math.isfinite(v) for _, _, v in self.rows)

    def dump(self) -> list[Tuple[int, str, float]]:
        return list(self.rows)

    def write_csv(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "name", "value"])
            for step, name, value in self.rows:
                w.writerow([step, name, repr(value)])
