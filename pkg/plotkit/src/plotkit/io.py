"""CSV readers for the documented artifact schemas.

Tidy samples: header ``source,parameter,value`` with an optional ``run``
column; one row per posterior draw. ESS tables: header
``x,source,ess_per_second`` with one row per (experiment size, source,
run) measurement.
"""

import csv
from collections import defaultdict

import numpy as np


class TidySamples:
    """Posterior draws grouped by (source, run) and parameter.

    Within one (source, run) every parameter must carry the same number
    of draws; parameters keep their order of first appearance.
    """

    def __init__(self, groups, parameters):
        self.groups = groups            # (source, run) -> {param: array}
        self.parameters = parameters    # ordered list of names

    @property
    def sources(self):
        seen = []
        for source, _ in self.groups:
            if source not in seen:
                seen.append(source)
        return seen

    def runs(self, source):
        return [r for s, r in self.groups if s == source]


def read_tidy_samples(path):
    by_group = defaultdict(lambda: defaultdict(list))
    parameters = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {
            "source", "parameter", "value"
        }.issubset(reader.fieldnames):
            raise ValueError(
                f"{path}: expected columns source,parameter,value"
                " (optional run)"
            )
        has_run = "run" in reader.fieldnames
        for row in reader:
            run = row["run"] if has_run else "0"
            par = row["parameter"]
            by_group[(row["source"], run)][par].append(float(row["value"]))
            if par not in parameters:
                parameters.append(par)
    if not by_group:
        raise ValueError(f"{path}: no sample rows")
    groups = {}
    for key, pars in by_group.items():
        counts = {p: len(v) for p, v in pars.items()}
        if len(set(counts.values())) != 1 or set(pars) != set(parameters):
            raise ValueError(
                f"{path}: group {key} has unequal draw counts {counts}"
            )
        groups[key] = {p: np.asarray(v) for p, v in pars.items()}
    return TidySamples(groups, parameters)


def read_ess_table(paths):
    rows = []
    for path in paths:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {
                "x", "source", "ess_per_second"
            }.issubset(reader.fieldnames):
                raise ValueError(
                    f"{path}: expected columns x,source,ess_per_second"
                )
            for row in reader:
                value = float(row["ess_per_second"])
                if value <= 0:
                    raise ValueError(
                        f"{path}: nonpositive ESS/s {value} for x={row['x']}"
                    )
                rows.append((float(row["x"]), row["source"], value))
    if not rows:
        raise ValueError("no ESS rows found")
    return rows
