"""Result bundles: CSV tables, declarative plot specs and run metadata.

Plot spec schema (one JSON file per figure, ``plot_<name>.json``)::

    {"schema": "coevo-plot/1",
     "title": str,
     "data": "<csv file name in the same directory>",
     "x": {"column": str, "label": str, "log": bool},
     "y": {"column": str, "label": str, "log": bool},
     "series": [{"filter": {column: value} | {}, "label": str,
                 "error_column": str | null, "y_column": str (optional, default y.column)}],
     "reference_lines": [{"kind": "power", "slope": float,
                          "anchor": [x, y], "label": str}]}

``reference_lines`` of kind ``power`` draw y = anchor_y * (x / anchor_x) ** slope.
"""

import csv
import datetime as _dt
import io
import json
import os
import platform
from dataclasses import dataclass, field

from ..errors import CoevoError

PLOT_SCHEMA = "coevo-plot/1"


@dataclass
class Table:
    name: str
    columns: list
    rows: list = field(default_factory=list)

    def add(self, **row):
        self.rows.append(row)


@dataclass
class ResultBundle:
    """Everything an experiment produced; ``emit_outputs`` writes it to disk."""

    kind: str
    seed: int
    config_hash: str
    tables: list = field(default_factory=list)
    plots: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    fits: dict = field(default_factory=dict)

    def table(self, name):
        for t in self.tables:
            if t.name == name:
                return t
        raise KeyError(name)


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render_csv(table, seed, chash):
    cols = list(table.columns) + ["seed", "config_hash"]
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(cols)
    for row in table.rows:
        full = dict(row)
        full.setdefault("seed", seed)
        full.setdefault("config_hash", chash)
        missing = [c for c in cols if c not in full]
        if missing:
            raise CoevoError(f"table {table.name}: row lacks columns {missing}")
        wr.writerow([_fmt(full[c]) for c in cols])
    return buf.getvalue()


def plot_spec(name, title, data, x, y, *, xlabel=None, ylabel=None, logx=True, logy=True,
              series=None, reference_lines=()):
    return {
        "name": name,
        "spec": {
            "schema": PLOT_SCHEMA,
            "title": title,
            "data": data,
            "x": {"column": x, "label": xlabel or x, "log": logx},
            "y": {"column": y, "label": ylabel or y, "log": logy},
            "series": series or [{"filter": {}, "label": y, "error_column": None}],
            "reference_lines": list(reference_lines),
        },
    }


def versions():
    import numpy
    import scipy

    out = {"python": platform.python_version(), "numpy": numpy.__version__,
           "scipy": scipy.__version__}
    try:
        import numba

        out["numba"] = numba.__version__
    except ImportError:
        pass
    try:
        from importlib.metadata import version

        out["artifact"] = version("artifact")
    except Exception:
        out["artifact"] = "unknown"
    return out


def _write(path, text):
    try:
        with open(path, "w") as fh:
            fh.write(text)
    except OSError as exc:
        raise CoevoError(f"cannot write {path}: {exc}") from exc


def emit_outputs(bundle, out_dir):
    """Write the bundle; returns the list of written paths.

    Table files are deterministic functions of the bundle. Timestamps and
    library versions go to ``metadata.json`` only.
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise CoevoError(f"cannot create output directory {out_dir}: {exc}") from exc
    written = []
    for t in bundle.tables:
        path = os.path.join(out_dir, f"{t.name}.csv")
        _write(path, render_csv(t, bundle.seed, bundle.config_hash))
        written.append(path)
    for p in bundle.plots:
        path = os.path.join(out_dir, f"plot_{p['name']}.json")
        _write(path, json.dumps(p["spec"], indent=2, sort_keys=True) + "\n")
        written.append(path)
    meta = {
        "kind": bundle.kind,
        "seed": bundle.seed,
        "config_hash": bundle.config_hash,
        "versions": versions(),
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "files": [os.path.basename(p) for p in written],
        "fits": bundle.fits,
    }
    meta.update(bundle.metadata)
    path = os.path.join(out_dir, "metadata.json")
    _write(path, json.dumps(meta, indent=2, sort_keys=True, default=_json_default) + "\n")
    written.append(path)
    return written


def _json_default(o):
    import numpy as np

    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)
