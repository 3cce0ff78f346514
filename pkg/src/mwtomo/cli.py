"""Command-line interface: ``forward``, ``invert``, ``phantom``, ``selftest``, ``config``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure. Every command ends with one line
``status=<ok|error> command=<name> exit=<code> ...``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .adaptivity import (RefinementConfig, adaptive_reconstruct, level_summary,
                         relative_time)
from .data_pipeline import add_noise, generate_observations, smooth
from .fem_assembly import CoefficientPair
from .inverse import CGMConfig
from .mesh import IN, Box, HybridMesh, RefinementError, build_hybrid, cfl_timestep, time_grid
from .phantom_io import (PhantomFormatError, VoxelPhantom, builtin_table, load_media_table,
                         load_phantom, subsample, weight_media)
from .scenarios import box_indicator, region_centroid
from .solver import InstabilityError, SourceSpec, load_observations, observation_nodes, \
    run_forward, save_observations

logger = logging.getLogger("mwtomo")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# shared set-up -------------------------------------------------------------

def _load_config(args) -> cfgmod.Config:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.defaults()
    for item in args.set or []:
        if "=" not in item:
            raise cfgmod.ConfigError(f"--set {item!r}: expected key=value")
        extra = cfgmod.parse_text(item, "--set")
        key = item.split("=", 1)[0].strip()
        cfg[key] = extra[key]
    if cfg["run.threads"] < 1:
        raise cfgmod.ConfigError("run.threads must be at least 1")
    return cfg


def _out_dir(cfg) -> Path:
    out = Path(cfg["output.dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data_path(cfg) -> Path:
    p = Path(cfg["data.file"])
    return p if p.is_absolute() else Path(cfg["output.dir"]) / p


def build_mesh(cfg) -> HybridMesh:
    lo, hi = cfg.box("domain.omega")
    flo, fhi = cfg.box("domain.fem")
    inner = cfg.box("domain.inner")
    return build_hybrid(Box(lo, hi), Box(flo, fhi), cfg.spacing(),
                        in_box=Box(*inner) if inner else None,
                        out_layers=cfg["mesh.out_layers"])


def _table(cfg):
    name = cfg["phantom.table"]
    table = builtin_table(name.split(":", 1)[1]) if name.startswith("builtin:") \
        else load_media_table(name)
    if cfg["phantom.weight"] != 1.0:
        table = weight_media(table, cfg["phantom.weight"])
    return table


def load_truth_phantom(cfg, mesh: HybridMesh) -> tuple[VoxelPhantom, object]:
    if not cfg["phantom.media"]:
        raise DataError("truth.kind = phantom needs phantom.media")
    phantom, table = load_phantom(cfg["phantom.media"], _table(cfg))
    phantom = subsample(phantom, cfg["phantom.stride"])
    if cfg["phantom.fit"]:
        # nodes of the raster onto the FE box, each element takes its nearest node
        flo, fhi = mesh.fe.vertices.min(axis=0), mesh.fe.vertices.max(axis=0)
        dims = np.array(phantom.dims)
        step = (fhi - flo) / np.maximum(dims - 1, 1)
        phantom = VoxelPhantom(phantom.dims, tuple(step), tuple(flo - 0.5 * step),
                               phantom.codes, phantom.index)
    return phantom, table


def truth_functions(cfg, mesh: HybridMesh):
    """``(eps_fn, sigma_fn)`` of the configured true medium, or None for ``none``."""
    kind = cfg["truth.kind"]
    if kind == "none":
        return None
    if kind == "uniform":
        return (lambda x: np.ones(len(x))), (lambda x: np.zeros(len(x)))
    if kind == "inclusion":
        lo, hi = cfg.box("truth.inclusion")
        return (box_indicator(lo, hi, cfg["truth.contrast"]),
                box_indicator(lo, hi, cfg["truth.sigma"], 0.0))
    phantom, table = load_truth_phantom(cfg, mesh)
    return (lambda x: phantom.sample(table, x)[0]), (lambda x: phantom.sample(table, x)[1])


def _source(cfg) -> SourceSpec:
    return SourceSpec(omega=cfg["source.omega"], amplitude=cfg["source.amplitude"])


def _tau(cfg, mesh) -> tuple[int, float]:
    tau = cfg["time.tau"]
    limit = cfl_timestep(mesh, 1.0)
    if tau is None:
        return time_grid(cfg["time.T"], cfl_timestep(mesh, cfg["time.cfl_safety"]))
    if tau > limit:
        logger.warning("time.tau = %g exceeds the CFL bound %g", tau, limit)
    return time_grid(cfg["time.T"], tau)


def _timing_line(t: float, n_t: int, n: int) -> str:
    return f"timing t={t:.3f} n_t={n_t} n={n} T_r={relative_time(t, max(n_t, 1), n):.3e}"


def _fmt(v) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: Path, rows: list, columns: list) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in columns])


# commands ------------------------------------------------------------------

def cmd_forward(args) -> dict:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    mesh = build_mesh(cfg)
    fns = truth_functions(cfg, mesh)
    if fns is None:
        raise UsageError("forward needs a truth medium (truth.kind != none)")
    eps_fn, sig_fn = fns
    n_t, tau = _tau(cfg, mesh)
    src = _source(cfg)
    t0 = time.perf_counter()
    obs = generate_observations(eps_fn, mesh, cfg["data.refine"], src, n_t * tau, tau,
                                sigma=sig_fn, substeps=cfg["data.substeps"])
    seconds = time.perf_counter() - t0
    obs = add_noise(obs, cfg["data.delta"], cfg["run.seed"])
    if cfg["data.delta"] > 0 and cfg["data.smooth"]:
        obs = smooth(obs, cfg["data.window"], cfg["data.radius"])
    path = _data_path(cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_observations(path, obs)

    truth = CoefficientPair.from_function(mesh.fe, eps_fn, sig_fn)
    if cfg["output.vtk"]:
        from .vtk import write_unstructured, write_structured
        write_unstructured(out / "truth.vtk", mesh.fe,
                           {"eps": truth.eps_p0, "sigma": truth.sigma_p0}, title="true medium")
        steps = tuple(s for s in cfg["output.snapshots"] if 0 < s <= n_t)
        if steps:
            fwd = run_forward(mesh, truth, src, n_t * tau, tau, snapshot_steps=steps)
            for k, (U, u) in sorted(fwd.snapshots.items()):
                write_structured(out / f"snapshot_fd_{k:05d}.vtk", mesh.fd,
                                 {"E": U, "absE": np.linalg.norm(U, axis=1)}, title=f"step {k}")
                write_unstructured(out / f"snapshot_fe_{k:05d}.vtk", mesh.fe,
                                   point_data={"E": u, "absE": np.linalg.norm(u, axis=1)},
                                   title=f"step {k}")
    if cfg["output.figures"]:
        from .plotting import plot_eps_slice, plot_traces
        plot_traces(obs, out / "observations.png")
        plot_eps_slice(mesh, truth.eps_p0, out / "truth_slice.png")
    timing = _timing_line(seconds, n_t, mesh.n_nodes)
    print(f"observations {path} nodes={len(obs.nodes)} rows={obs.n_steps + 1}")
    print(timing)
    return {"steps": n_t, "tau": f"{tau:.6g}", "file": str(path)}


def cmd_invert(args) -> dict:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    mesh = build_mesh(cfg)
    obs = load_observations(_data_path(cfg))
    expected = observation_nodes(mesh.fd)
    if not np.array_equal(np.sort(obs.nodes), np.sort(expected)):
        raise DataError("observation nodes do not match the configured grid")
    fns = truth_functions(cfg, mesh)
    sigma = np.zeros(mesh.fe.n_elements)
    truth_eps = truth_max = None
    if fns is not None:
        truth = CoefficientPair.from_function(mesh.fe, *fns)
        sigma = truth.sigma_p0
        truth_eps = truth.eps_p0
        truth_max = float(np.max(truth_eps[mesh.fe.region == IN]))
    cgm = CGMConfig(max_iter=cfg["inverse.max_iter"], theta=cfg["inverse.theta"],
                    norm_tol=cfg["inverse.norm_tol"], alpha=cfg["inverse.alpha"],
                    restart=cfg["inverse.restart"])
    rcfg = RefinementConfig(indicator=cfg["adapt.indicator"], beta=cfg["adapt.beta"],
                            tol1=cfg["adapt.tol1"], tol2=cfg["adapt.tol2"],
                            max_levels=cfg["adapt.max_levels"],
                            max_marks=cfg["adapt.max_marks"],
                            level_iterations=cfg["adapt.level_iterations"],
                            cfl_safety=cfg["adapt.cfl_safety"])

    def progress(row):
        logger.info("level %d iteration %d J=%.6e |g|=%.3e max_eps=%.4f", row["level"],
                    row["iteration"], row["J"], row["grad_norm"], row["max_eps"])

    res = adaptive_reconstruct(mesh, obs, sigma, _source(cfg), rcfg, cgm,
                               eps0=cfg["inverse.eps0"], gamma=cfg["inverse.gamma"],
                               truth_max=truth_max, callback=progress)
    _write_csv(out / "convergence.csv", res.history,
               ["level", "iteration", "J", "grad_norm", "alpha", "beta", "max_eps", "rel_error"])
    summary = level_summary(res)
    _write_csv(out / "levels.csv", summary,
               ["level", "nodes", "elements", "steps", "iterations", "max_eps", "rel_error",
                "marked", "status"])
    for lv in res.levels:
        if cfg["output.vtk"]:
            from .vtk import write_unstructured
            cells = {"eps": lv.eps_p0}
            if lv.indicator is not None:
                cells["indicator"] = lv.indicator
            write_unstructured(out / f"reconstruction_level{lv.level}.vtk", lv.mesh.fe, cells,
                               title=f"reconstruction level {lv.level}")
    if cfg["output.figures"]:
        from .plotting import plot_convergence, plot_eps_slice
        plot_convergence(res.history, out / "convergence.png")
        final_truth = None
        if truth_eps is not None:
            final_truth = CoefficientPair.from_function(res.mesh.fe, *fns).eps_p0
        plot_eps_slice(res.mesh, res.eps_p0, out / "reconstruction_slice.png",
                       truth=final_truth)
    for row in summary:
        print(f"level {row['level']}: nodes={row['nodes']} iterations={row['iterations']} "
              f"max_eps={row['max_eps']:.4f} rel_error={_fmt(row['rel_error'])} "
              f"status={row['status']!r}")
        print("  " + _timing_line(row["seconds"], row["steps"], row["nodes"]))
    c = region_centroid(res.mesh, res.eps_p0, 1.0 + 0.5 * (max(res.levels[-1].max_eps, 1.0) - 1))
    final = res.levels[-1]
    return {"levels": len(res.levels), "max_eps": f"{final.max_eps:.6g}",
            "rel_error": _fmt(None if final.rel_error is None else round(final.rel_error, 6)),
            "centroid": "n/a" if c is None else ",".join(f"{v:.4f}" for v in c),
            "result": res.status.replace(" ", "_").replace(":", "")}


def cmd_phantom(args) -> dict:
    table = builtin_table(args.table.split(":", 1)[1]) if args.table.startswith("builtin:") \
        else load_media_table(args.table)
    if args.weight != 1.0:
        table = weight_media(table, args.weight)
    phantom, table = load_phantom(args.media, table)
    sampled = subsample(phantom, args.stride)
    if args.out:
        from .phantom_io import save_phantom
        save_phantom(args.out, sampled)
    counts = np.bincount(sampled.index.ravel(), minlength=len(sampled.codes))
    print(f"input dims={phantom.dims} voxels={phantom.n_voxels}")
    print(f"sampled dims={sampled.dims} nodes={sampled.n_voxels} spacing={sampled.spacing}")
    for code, n in zip(sampled.codes, counts):
        if n:
            m = table[code]
            print(f"  media {code:>5} eps_r={m.eps_r:g} sigma={m.sigma:g} count={n} {m.label}")
    return {"nodes": sampled.n_voxels}


def cmd_selftest(args) -> dict:
    from . import selftest
    if args.cfl_factor is not None:
        res = selftest.check_energy(cfl_factor=args.cfl_factor)
        print(res.line())
        if not res.passed:
            raise InstabilityError("energy increased after the pulse")
        return {"checks": 1, "failed": 0}
    results = selftest.run_all(quick=args.quick)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise InstabilityError("failed checks: " + ",".join(failed))
    return {"checks": len(results), "failed": 0}


def cmd_config(args) -> dict:
    cfg = _load_config(args)
    sys.stdout.write(cfgmod.dump(cfg))
    return {"keys": len(cfgmod.KEYS)}


# entry point ---------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mwtomo", description="Permittivity reconstruction from "
                                "time-domain boundary data of the electric field.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("-c", "--config", help="configuration file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a configuration key")
        return sp

    with_config(sub.add_parser("forward", help="synthetic observations from a true medium"))
    with_config(sub.add_parser("invert", help="adaptive reconstruction from observations"))
    with_config(sub.add_parser("config", help="print every key with its current value"))
    ph = sub.add_parser("phantom", help="subsample a phantom and report its media")
    ph.add_argument("--media", required=True, help="phantom raster file")
    ph.add_argument("--table", default="builtin:test1", help="media table or builtin:test1/2")
    ph.add_argument("--stride", type=int, default=8)
    ph.add_argument("--weight", type=float, default=1.0)
    ph.add_argument("--out", help="write the sampled raster here")
    st = sub.add_parser("selftest", help="run the numerical invariant checks")
    st.add_argument("--quick", action="store_true", help="fewer duality pairs and gradient samples")
    st.add_argument("--cfl-factor", type=float, default=None,
                    help="only run the energy check at this multiple of the CFL step")
    return p


COMMANDS = {"forward": cmd_forward, "invert": cmd_invert, "phantom": cmd_phantom,
            "selftest": cmd_selftest, "config": cmd_config}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = EXIT_OK if exc.code == 0 else EXIT_USAGE
        if code:
            print(f"status=error command=? exit={code} reason=usage")
        return code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    t0 = time.perf_counter()
    try:
        info = COMMANDS[args.command](args)
        code, status = EXIT_OK, "ok"
    except (cfgmod.ConfigError, UsageError) as exc:
        code, status, info = EXIT_USAGE, "error", {"reason": str(exc)}
    except (FileNotFoundError, PhantomFormatError, DataError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        code, status, info = EXIT_DATA, "error", {"reason": msg}
    except (InstabilityError, RefinementError, FloatingPointError) as exc:
        code, status, info = EXIT_NUMERIC, "error", {"reason": str(exc)}
    except ValueError as exc:
        code, status, info = EXIT_DATA, "error", {"reason": str(exc)}
    if status == "error":
        print(f"error: {info['reason']}", file=sys.stderr)
    fields = " ".join(f"{k}={_quote(v)}" for k, v in info.items())
    print(f"status={status} command={args.command} exit={code} "
          f"elapsed={time.perf_counter() - t0:.2f}s {fields}".rstrip())
    return code


def _quote(v) -> str:
    s = str(v)
    return f'"{s}"' if (" " in s or not s) else s


if __name__ == "__main__":
    sys.exit(main())
