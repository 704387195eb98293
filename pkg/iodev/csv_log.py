import csv
import os
from typing import Sequence


class CsvLog:
    """
    Append-only CSV writer with a fixed header.
    Rows are dicts; missing keys are written empty and unknown keys are rejected.
    Every row is flushed so a crashed run still leaves a readable log.
    """
    def __init__(self, path: str, fieldnames: Sequence[str]):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self.path = path
        self.fieldnames = list(fieldnames)
        self._f = open(path, "w", newline="", encoding="utf-8")
        self._w = csv.DictWriter(self._f, fieldnames=self.fieldnames, extrasaction="raise")
        self._w.writeheader()
        self._f.flush()

    def write(self, row: dict):
        self._w.writerow(row)
        self._f.flush()

    def close(self):
        if not self._f.closed:
            self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_csv(path: str) -> list:
    """All rows as dicts of strings."""
    with open(path, "r", newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))
