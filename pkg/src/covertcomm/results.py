"""Row tables that serialize to CSV with stable formatting."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


@dataclass
class SweepResult:
    columns: tuple
    rows: list = field(default_factory=list)

    def add(self, **values):
        missing = set(self.columns) - set(values)
        extra = set(values) - set(self.columns)
        if missing or extra:
            raise KeyError(f"row keys mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        self.rows.append(tuple(values[c] for c in self.columns))

    def extend(self, other):
        if tuple(other.columns) != tuple(self.columns):
            raise KeyError("column mismatch")
        self.rows.extend(other.rows)

    def column(self, name):
        i = self.columns.index(name)
        return [r[i] for r in self.rows]

    def where(self, **match):
        idx = {self.columns.index(k): v for k, v in match.items()}
        out = SweepResult(self.columns)
        out.rows = [r for r in self.rows if all(r[i] == v for i, v in idx.items())]
        return out

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_fmt(v) for v in r])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    @classmethod
    def from_csv(cls, path_or_text, types=None):
        """Parse a CSV written by :meth:`to_csv`; ``types`` maps column -> callable."""
        p = Path(path_or_text) if "\n" not in str(path_or_text) else None
        text = p.read_text(encoding="utf-8") if p is not None else path_or_text
        reader = csv.reader(io.StringIO(text))
        columns = tuple(next(reader))
        types = types or {}
        res = cls(columns)
        for raw in reader:
            res.rows.append(tuple(types.get(c, str)(v) for c, v in zip(columns, raw)))
        return res


BLER_COLUMNS = ("snr_db", "user_id", "blocks", "errors", "bler")
AE_CURVE_COLUMNS = ("epoch", "loss", "accuracy")
COVERT_SWEEP_COLUMNS = ("snr_db", "bob_bler", "user_bler_covert", "user_bler_clean", "willie_acc")
COVERT_CURVE_COLUMNS = (
    "epoch", "snr_db", "loss_w", "loss_b", "loss_u", "loss_a", "acc_user", "acc_bob", "acc_willie",
)
BASELINE_COLUMNS = ("snr_db", "snr_per_bit_db", "scheme", "channel", "ber", "bler", "trials")
CONSTELLATION_COLUMNS = ("use_index", "kind", "re", "im", "snr_db")
AUDIT_COLUMNS = ("snr_db", "audit_acc")
