"""Append-only CSV writers with fixed headers.

Floats are written with 17 significant digits so reruns produce identical
bytes; ``None`` becomes an empty field.
"""
import csv
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

METRIC_COLUMNS = ['step', 'fnr', 'pos_mean', 'neg_mean', 'margin', 'loss_pxl', 'loss_sup', 'loss_semi', 'ap', 'ap50']


def format_value(value: Any) -> str:
    if value is None:
        return ''
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return format(value, '.17g')
    return str(value)


class CsvWriter:
    """Single-owner CSV writer; use as a context manager."""

    def __init__(self, path: str, columns: Sequence[str]):
        self.path = Path(path)
        self.columns = list(columns)
        self._file = None
        self._writer = None

    def __enter__(self) -> 'CsvWriter':
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = self.path.open('w', newline='')
        self._writer = csv.writer(self._file, lineterminator='\n')
        self._writer.writerow(self.columns)
        return self

    def __exit__(self, *exc):
        self.close()

    def write_row(self, row: Dict[str, Any]):
        unknown = set(row) - set(self.columns)
        if unknown:
            raise KeyError(f'unknown CSV columns: {sorted(unknown)}')
        self._writer.writerow([format_value(row.get(c)) for c in self.columns])
        self._file.flush()

    def close(self):
        if self._file is not None:
            self._file.close()
            self._file = None


def write_csv(path: str, columns: Sequence[str], rows: Iterable[Dict[str, Any]]) -> str:
    with CsvWriter(path, columns) as writer:
        for row in rows:
            writer.write_row(row)
    return str(path)


def read_csv(path: str) -> List[Dict[str, Optional[str]]]:
    with Path(path).open(newline='') as f:
        return [{k: (v if v != '' else None) for k, v in row.items()} for row in csv.DictReader(f)]
