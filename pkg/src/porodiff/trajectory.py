"""Time-series recording shared by the macroscopic and microscopic solvers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Trajectory:
    """Per-step norms, bounds, masses, snapshots, and monitor events.

    The CSV layout is ``t`` followed by ``norm_*``, ``min_*``, ``max_*``,
    ``mass_*`` for every field, in field order.
    """

    field_names: tuple
    times: list = field(default_factory=list)
    series: dict = field(default_factory=dict)
    snapshots: list = field(default_factory=list)
    events: list = field(default_factory=list)

    def __post_init__(self):
        for name in self.field_names:
            for kind in ("norm", "min", "max", "mass"):
                self.series.setdefault(f"{kind}_{name}", [])

    def record(self, t, fields, mass_matrix, mass_weights, snapshot=False):
        self.times.append(float(t))
        for name, u in fields.items():
            self.series[f"norm_{name}"].append(
                float(np.sqrt(max(u @ (mass_matrix @ u), 0.0))))
            self.series[f"min_{name}"].append(float(u.min()))
            self.series[f"max_{name}"].append(float(u.max()))
            self.series[f"mass_{name}"].append(float(mass_weights @ u))
        if snapshot:
            self.snapshots.append(
                (float(t), {k: v.copy() for k, v in fields.items()}))

    def add_event(self, **event):
        self.events.append(event)

    @property
    def columns(self):
        cols = ["t"]
        for kind in ("norm", "min", "max", "mass"):
            cols.extend(f"{kind}_{name}" for name in self.field_names)
        return cols

    def csv_text(self):
        cols = self.columns
        lines = [",".join(cols)]
        for k, t in enumerate(self.times):
            row = [repr(float(t))]
            row.extend(repr(float(self.series[c][k])) for c in cols[1:])
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    def write_csv(self, path):
        with open(path, "w") as f:
            f.write(self.csv_text())

    def integral_of_square(self, key):
        """Trapezoid-rule time integral of series[key]**2."""
        vals = np.asarray(self.series[key], dtype=float)
        return float(np.trapezoid(vals ** 2, np.asarray(self.times)))

    def min_over_run(self, name):
        return min(self.series[f"min_{name}"])

    def max_over_run(self, name):
        return max(self.series[f"max_{name}"])
