"""Readers and writers for the plain-text formats used by the command line."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .infer import FitResult, PanelDataset, SelectionTable
from .mesh import TriangleMesh, _lattice_triangles
from .model import ModelSpec, ParamVector, param_names
from .preprocess import PointCloud


class FormatError(ValueError):
    pass


def _num(v) -> str:
    return repr(float(v))


def _strip(line: str) -> str:
    return line.split("#", 1)[0].strip()


# model config -------------------------------------------------------------


def parse_model_config(text: str, source="<config>"):
    """Parse ``key = value`` lines into (spec, params or None).

    ``operator`` and ``noise`` are required; ``n_panels`` defaults to 1.  Any
    other key is a natural-scale parameter value; unspecified parameters take
    their defaults.  ``params`` is None when no parameter is given.
    """
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip(raw)
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key in entries:
            raise FormatError(f"{source}:{lineno}: duplicate key {key!r}")
        entries[key] = (value, lineno)
    for key in ("operator", "noise"):
        if key not in entries:
            raise FormatError(f"{source}: missing {key!r}")
    try:
        spec = ModelSpec(
            entries.pop("operator")[0],
            entries.pop("noise")[0],
            int(entries.pop("n_panels", ("1", 0))[0]),
        )
    except ValueError as exc:
        raise FormatError(f"{source}: {exc}") from None
    if not entries:
        return spec, None
    names = set(param_names(spec))
    values = {}
    for key, (value, lineno) in entries.items():
        if key not in names:
            raise FormatError(f"{source}:{lineno}: {key!r} is not a parameter of {spec.label}")
        try:
            values[key] = float(value)
        except ValueError:
            raise FormatError(f"{source}:{lineno}: bad number {value!r}") from None
    return spec, ParamVector.from_natural(spec, values)


def load_model_config(path):
    path = Path(path)
    return parse_model_config(path.read_text(), path)


def format_model_config(spec: ModelSpec, params: ParamVector | None = None) -> str:
    lines = [f"operator = {spec.operator}", f"noise = {spec.noise}", f"n_panels = {spec.n_panels}"]
    if params is not None:
        lines += [f"{k} = {_num(v)}" for k, v in params.natural().items()]
    return "\n".join(lines) + "\n"


def save_model_config(path, spec, params=None):
    Path(path).write_text(format_model_config(spec, params))


def load_model_list(paths):
    """Resolve ``--models`` arguments: config files, list files, or ``all``."""
    from .model import all_specs

    out = []
    for p in paths:
        if p == "all":
            out += [(s, None) for s in all_specs(1)]
            continue
        path = Path(p)
        lines = [_strip(l) for l in path.read_text().splitlines()]
        lines = [l for l in lines if l]
        if lines and all("=" not in l for l in lines):
            out += load_model_list([str(path.parent / l) if l != "all" else l for l in lines])
        else:
            out.append(load_model_config(path))
    return out


# panel datasets -----------------------------------------------------------

PANEL_COLUMNS = ["i", "j", "x", "y", "z", "u1", "u2"]


def write_panel_csv(path, dataset: PanelDataset, settings: dict | None = None):
    mesh = dataset.mesh
    if mesh.grid_shape is None:
        raise FormatError("panel CSV needs a gridded mesh")
    ny, nx = mesh.grid_shape
    n = mesh.n_vertices
    with open(path, "w", newline="") as fh:
        fh.write("# spdesurf panel v1\n")
        fh.write(f"# panel_id = {dataset.panel_id}\n")
        fh.write(f"# grid = {nx} {ny}\n")
        for k, v in (settings or {}).items():
            fh.write(f"# {k} = {json.dumps(v)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PANEL_COLUMNS)
        for idx in range(n):
            x, y, z = mesh.vertices[idx]
            w.writerow([idx % nx, idx // nx, _num(x), _num(y), _num(z), _num(dataset.y[idx]), _num(dataset.y[n + idx])])


def read_panel_csv(path, panel_id: int | None = None):
    """Return (PanelDataset, header dict)."""
    header = {}
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if line.startswith("#"):
                body = line[1:].strip()
                if "=" in body:
                    k, v = (p.strip() for p in body.split("=", 1))
                    header[k] = v
                continue
            if not line.strip():
                continue
            if not rows and line.strip().split(",")[0] == "i":
                if line.strip().split(",") != PANEL_COLUMNS:
                    raise FormatError(f"{path}:{lineno}: expected columns {','.join(PANEL_COLUMNS)}")
                rows.append(None)
                continue
            try:
                rows.append([float(v) for v in line.strip().split(",")])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric entry") from None
            if len(rows[-1]) != 7:
                raise FormatError(f"{path}:{lineno}: expected 7 columns")
    data = np.array([r for r in rows if r is not None], dtype=float)
    if data.size == 0:
        raise FormatError(f"{path}: no data rows")
    i, j = data[:, 0].astype(int), data[:, 1].astype(int)
    nx, ny = i.max() + 1, j.max() + 1
    if len(data) != nx * ny or len(set(zip(i, j))) != nx * ny:
        raise FormatError(f"{path}: rows do not form a complete {nx}x{ny} grid")
    order = np.argsort(j * nx + i, kind="stable")
    data = data[order]
    mesh = TriangleMesh(data[:, 2:5], _lattice_triangles(nx, ny, periodic=False), grid_shape=(ny, nx))
    pid = panel_id if panel_id is not None else int(header.get("panel_id", 0))
    return PanelDataset(mesh, np.concatenate([data[:, 5], data[:, 6]]), pid), header


def read_panel_dir(directory):
    """All ``*.csv`` panels in a directory, sorted by name, renumbered 0..k-1."""
    files = sorted(Path(directory).glob("*.csv"))
    if not files:
        raise FormatError(f"no panel CSV files in {directory}")
    return [read_panel_csv(f, panel_id=k)[0] for k, f in enumerate(files)], files


# point clouds -------------------------------------------------------------


def read_point_cloud(path) -> PointCloud:
    """CSV ``x,y,z[,side]`` with an optional header row."""
    pts, sides = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or row[0].startswith("#"):
                continue
            if not pts and row[0].strip().lower() == "x":
                continue
            if len(row) not in (3, 4):
                raise FormatError(f"{path}:{lineno}: expected x,y,z[,side]")
            try:
                pts.append([float(v) for v in row[:3]])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric coordinate") from None
            sides.append(row[3].strip().lower() if len(row) == 4 else None)
    labelled = [s is not None for s in sides]
    if any(labelled) and not all(labelled):
        raise FormatError(f"{path}: side labels must be given for all points or none")
    return PointCloud(np.array(pts), np.array(sides) if all(labelled) and sides else None)


# fits ---------------------------------------------------------------------


def fit_to_dict(fit: FitResult) -> dict:
    p = fit.params
    return {
        "format": "spdesurf-fit-v1",
        "operator": p.spec.operator,
        "noise": p.spec.noise,
        "n_panels": p.spec.n_panels,
        "names": list(p.names),
        "flat": p.flat.tolist(),
        "natural": p.natural(),
        "exact_loglik": fit.exact_loglik,
        "surrogate_loglik": fit.surrogate_loglik,
        "iterations": fit.iterations,
        "converged": fit.converged,
        "trace": list(map(float, fit.trace)),
        "flags": list(fit.flags),
    }


def fit_from_dict(d: dict) -> FitResult:
    if d.get("format") != "spdesurf-fit-v1":
        raise FormatError("not a spdesurf fit file")
    spec = ModelSpec(d["operator"], d["noise"], int(d["n_panels"]))
    params = ParamVector(spec, np.array(d["flat"], dtype=float))
    if list(params.names) != list(d["names"]):
        raise FormatError("parameter names do not match the model")
    return FitResult(
        params=params,
        trace=d.get("trace", []),
        iterations=d.get("iterations", 0),
        converged=d.get("converged", False),
        exact_loglik=d.get("exact_loglik"),
        surrogate_loglik=d.get("surrogate_loglik"),
        flags=d.get("flags", []),
    )


def save_fit(path, fit: FitResult):
    Path(path).write_text(json.dumps(fit_to_dict(fit), indent=2) + "\n")


def load_fit(path) -> FitResult:
    try:
        return fit_from_dict(json.loads(Path(path).read_text()))
    except (KeyError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: {exc}") from None


# tables -------------------------------------------------------------------


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return _num(v)
    return str(v)


def write_selection_csv(path, table: SelectionTable):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(SelectionTable.COLUMNS) + ["winner"])
        for k, rec in enumerate(table.as_records()):
            w.writerow([_cell(rec[c]) for c in SelectionTable.COLUMNS] + [int(k == table.winner)])


SAMPLE_COLUMNS = ["vertex_index", "x", "y", "z", "u1", "u2", "thickness"]


def write_sample_csv(path, mesh: TriangleMesh, u1, u2, thickness, vertices=None):
    idx = np.arange(mesh.n_vertices) if vertices is None else np.asarray(vertices)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SAMPLE_COLUMNS)
        for v in idx:
            x, y, z = mesh.vertices[v]
            w.writerow([int(v), _num(x), _num(y), _num(z), _num(u1[v]), _num(u2[v]), _num(thickness[v])])


def write_histogram_csv(path, centres, counts):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["thickness", "count"])
        for c, n in zip(centres, counts):
            w.writerow([f"{c:.6f}", int(n)])
