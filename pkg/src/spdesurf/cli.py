"""Command-line entry point: ``spdesurf <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import io as sio
from .fem import assemble
from .infer import FitOptions, fit_model, model_selection
from .mesh import cylinder_mesh, grid_panel_mesh, load_mesh, save_mesh
from .model import ParamVector
from .pipeline import RunManifest, end_to_end, simulate_panels, transfer
from .preprocess import preprocess_cloud

log = logging.getLogger("spdesurf")


def _common_flags(suppress: bool) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--seed", type=int, default=d(0), help="top-level random seed")
    p.add_argument("--threads", type=int, default=d(1), help="worker threads for per-panel work")
    p.add_argument("--manifest-out", default=d(None), help="where to write the run manifest")
    p.add_argument("-v", "--verbose", action="count", default=d(0))
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spdesurf", parents=[_common_flags(False)], description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    common = [_common_flags(True)]

    p = sub.add_parser("mesh", parents=common, help="generate a panel or cylinder mesh")
    p.add_argument("kind", choices=["panel", "cylinder"])
    p.add_argument("--nx", type=int, default=50)
    p.add_argument("--ny", type=int, default=50)
    p.add_argument("--spacing", type=float, default=1.0)
    p.add_argument("--radius", type=float, default=50.0)
    p.add_argument("--length", type=float, default=100.0)
    p.add_argument("--n-theta", "--ntheta", dest="n_theta", type=int, default=64)
    p.add_argument("--n-z", "--nz", dest="n_z", type=int, default=21)
    p.add_argument("--pad", type=float, default=0.25, help="padding as a fraction of the length")
    p.add_argument("--dump-fem", metavar="DIR", help="also write C, C_lumped and G as 'i j value' lists")
    p.add_argument("--out", required=True)

    p = sub.add_parser("preprocess", parents=common, help="point cloud to gridded panel CSV")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--res", type=int, nargs="+", default=[300], help="cells per axis (one or two values)")
    p.add_argument("--cutoff", type=float, default=0.5, help="low-pass cutoff as a fraction of Nyquist")
    p.add_argument("--window", type=float, nargs=4, metavar=("S0", "S1", "T0", "T1"))
    p.add_argument("--rotation", type=float, default=0.0, help="in-plane rotation in degrees")
    p.add_argument("--panel-id", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("simulate", parents=common, help="simulate panel datasets from a model config")
    p.add_argument("--model", required=True)
    p.add_argument("--nx", type=int, default=30)
    p.add_argument("--ny", type=int, default=30)
    p.add_argument("--spacing", type=float, default=1.0)
    p.add_argument("--n-panels", type=int, default=1)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("fit", parents=common, help="fit one model to a directory of panels")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--surrogate-side", type=int)
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--out", required=True)

    p = sub.add_parser("select", parents=common, help="fit several models and rank them by AIC")
    p.add_argument("--models", nargs="+", default=["all"], help="config files, list files, or 'all'")
    p.add_argument("--data", required=True)
    p.add_argument("--surrogate-side", type=int)
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--fits-dir", help="also write each fit as JSON here")
    p.add_argument("--out", required=True)

    p = sub.add_parser("sample", parents=common, help="draw fields from a model on a mesh")
    p.add_argument("--model", required=True, help="model config or fit JSON")
    p.add_argument("--mesh", required=True)
    p.add_argument("--n-samples", type=int, default=1)
    p.add_argument("--notional", type=float, default=3.5)
    p.add_argument("--panel", type=int)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("transfer", parents=common, help="sample a fitted model on a target mesh")
    p.add_argument("--fit", required=True)
    p.add_argument("--mesh", required=True)
    p.add_argument("--n-samples", type=int, default=1)
    p.add_argument("--notional", type=float, default=3.5)
    p.add_argument("--panel", type=int, help="use this panel's effects (nonstationary fits)")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("run", parents=common, help="run a JSON-configured pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    return parser


def dump_fem(fem, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, M in (("C", fem.C), ("C_lumped", fem.C_lumped), ("G", fem.G)):
        coo = M.tocoo()
        order = np.lexsort((coo.col, coo.row))
        path = d / f"{name}.txt"
        path.write_text("".join(f"{i} {j} {v!r}\n" for i, j, v in zip(coo.row[order].tolist(), coo.col[order].tolist(), coo.data[order].tolist())))
        paths.append(path)
    return paths


def _load_params(path):
    if str(path).endswith(".json"):
        return sio.load_fit(path).params
    spec, params = sio.load_model_config(path)
    return params if params is not None else ParamVector.default(spec)


def _run(args, manifest: RunManifest):
    opts = FitOptions(threads=args.threads, max_iter=getattr(args, "max_iter", 200))
    cmd = args.command
    if cmd == "mesh":
        if args.kind == "panel":
            mesh = grid_panel_mesh(args.nx, args.ny, args.spacing)
        else:
            mesh, _ = cylinder_mesh(args.radius, args.length, args.n_theta, args.n_z, args.pad)
        save_mesh(mesh, args.out)
        manifest.add_outputs(args.out)
        if args.dump_fem:
            manifest.add_outputs(*dump_fem(assemble(mesh), args.dump_fem))
    elif cmd == "preprocess":
        manifest.add_inputs(args.input)
        grid = preprocess_cloud(sio.read_point_cloud(args.input), args.res, args.cutoff, args.window, args.rotation)
        sio.write_panel_csv(args.out, grid.to_dataset(args.panel_id), grid.settings)
        manifest.add_outputs(args.out)
    elif cmd == "simulate":
        manifest.add_inputs(args.model)
        spec, params = sio.load_model_config(args.model)
        params = params if params is not None else ParamVector.default(spec)
        mesh = grid_panel_mesh(args.nx, args.ny, args.spacing)
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for ds in simulate_panels(spec, params, mesh, args.n_panels, args.seed):
            sio.write_panel_csv(out / f"panel_{ds.panel_id:02d}.csv", ds, {"simulated_from": spec.label})
        manifest.add_outputs(out)
    elif cmd == "fit":
        manifest.add_inputs(args.model, args.data)
        spec, theta0 = sio.load_model_config(args.model)
        datasets, _ = sio.read_panel_dir(args.data)
        fit = fit_model(spec, datasets, opts, args.surrogate_side, theta0=theta0)
        sio.save_fit(args.out, fit)
        manifest.add_outputs(args.out)
        log.info("%s: exact loglik %.6f after %d steps", spec.label, fit.exact_loglik, fit.iterations)
    elif cmd == "select":
        manifest.add_inputs(*[m for m in args.models if m != "all"], args.data)
        models = sio.load_model_list(args.models)
        datasets, _ = sio.read_panel_dir(args.data)
        table = model_selection([s for s, _ in models], datasets, opts, args.surrogate_side)
        sio.write_selection_csv(args.out, table)
        manifest.add_outputs(args.out)
        if args.fits_dir:
            d = Path(args.fits_dir)
            d.mkdir(parents=True, exist_ok=True)
            for k, row in enumerate(table.rows):
                if row["fit"] is not None:
                    sio.save_fit(d / f"fit_{k:02d}.json", row["fit"])
            manifest.add_outputs(d)
        if table.winner is None:
            raise RuntimeError("every model fit failed")
        print(f"winner: {table.rows[table.winner]['spec'].label}")
    elif cmd in ("sample", "transfer"):
        src = args.model if cmd == "sample" else args.fit
        manifest.add_inputs(src, args.mesh)
        params = _load_params(src) if cmd == "sample" else sio.load_fit(src).params
        written = transfer(params, load_mesh(args.mesh), args.n_samples, args.seed, args.notional, args.out_dir, args.panel)
        manifest.add_outputs(*written)
    elif cmd == "run":
        manifest.add_inputs(args.config)
        config = json.loads(Path(args.config).read_text())
        return end_to_end(config, args.out_dir, args.seed, args.threads, Path(args.config).parent)
    return 0


def _default_manifest_path(args):
    if getattr(args, "out_dir", None):
        return Path(args.out_dir) / "manifest.json"
    return Path(str(args.out) + ".manifest.json")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    config = {k: v for k, v in vars(args).items() if k not in ("manifest_out", "verbose")}
    manifest = RunManifest(args.command, list(sys.argv[1:] if argv is None else argv), config, args.seed,
                           started=time.strftime("%Y-%m-%dT%H:%M:%S"))
    t0 = time.perf_counter()
    try:
        code = _run(args, manifest)
    except Exception as exc:  # noqa: BLE001 - surfaced as exit status
        log.error("%s failed: %s", args.command, exc)
        manifest.status = f"failed: {exc}"
        code = 1
    if args.command == "run" and args.manifest_out is None:
        return code  # end_to_end already wrote out_dir/manifest.json
    manifest.wall_clock_s = time.perf_counter() - t0
    path = Path(args.manifest_out) if args.manifest_out else _default_manifest_path(args)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest.write(path)
    return code


if __name__ == "__main__":
    sys.exit(main())
