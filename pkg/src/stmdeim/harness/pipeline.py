"""Offline and online pipelines behind the command line.

Artifacts in ``config.out``::

    snapshots/            hypermatrix binaries + manifest.json
    models/<METHOD>_<eps>/ one reduced model per (method, eps)
    offline.json          stage timings, allocation peaks, dimensions
    report.csv            one row per (method, eps, test parameter)
    online.json           flags raised during the online stage
    summary.csv           per-(method, eps) means written by ``report``
"""
from __future__ import annotations

import csv
import json
import logging
import time
import tracemalloc
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from ..estimators import bound_terms, coercivity_estimate, fit_functional_constant, residual_estimator
from ..fem import heat_data, heat_mesh, stokes_data, stokes_mesh
from ..hypermatrix import spacetime_norm
from ..strb import RomModel, StrbError, build_state_basis, enrich_supremizers, galerkin_compress, \
    build_hyper_reduction, online_solve
from ..timeloop import HeatFOM, SnapshotSet, StokesFOM, generate_snapshots
from .config import RunConfig, sample_disjoint, sample_parameters

log = logging.getLogger(__name__)

CSV_COLUMNS = ("method", "eps", "mu_index", "mu_values", "E_u", "E_p", "residual_estimate", "bound_total",
               "beta_certified", "fom_ms", "rom_online_ms", "speedup", "n_s", "n_t", "n_s_a", "n_t_a",
               "entries_sampled")
TIMING_COLUMNS = ("fom_ms", "rom_online_ms", "speedup")
_BETA_CAP = 512
_CHECK_PARAMS = 5


class PipelineError(RuntimeError):
    pass


def make_system(cfg: RunConfig):
    if cfg.problem == "heat":
        return HeatFOM(heat_mesh(cfg.divisions, cfg.lengths), heat_data(cfg.T, cfg.n_steps))
    return StokesFOM(stokes_mesh(cfg.divisions, cfg.lengths), stokes_data(cfg.T, cfg.n_steps))


def model_dir(cfg: RunConfig, method: str, eps: float) -> Path:
    return cfg.out_dir / "models" / f"{method}_{eps:.0e}"


def training_parameters(cfg: RunConfig) -> np.ndarray:
    return sample_parameters(cfg.bounds, cfg.n_mu_train, cfg.seed)


def online_parameters(cfg: RunConfig, train=None) -> np.ndarray:
    train = training_parameters(cfg) if train is None else train
    return sample_disjoint(cfg.bounds, cfg.n_on, cfg.seed, exclude=train)


@contextmanager
def _stage(record: dict, name: str):
    """Time a stage and record its allocation high-water mark (tracemalloc)."""
    tracemalloc.reset_peak()
    start = time.perf_counter()
    yield
    _, peak = tracemalloc.get_traced_memory()
    record[name] = {"ms": 1e3 * (time.perf_counter() - start), "peak_bytes": int(peak)}


def _needs_operator(cfg: RunConfig) -> bool:
    return any(m in ("STD", "ST") for m in cfg.methods)


def run_fom(cfg: RunConfig, system=None) -> SnapshotSet:
    """Solve the FOM on the training parameters and write the snapshots."""
    system = make_system(cfg) if system is None else system
    snaps = generate_snapshots(system, training_parameters(cfg), n_operator=cfg.n_mu_mdeim,
                               keep_operator=_needs_operator(cfg))
    snaps.save(cfg.out_dir / "snapshots")
    return snaps


def _load_or_generate(cfg: RunConfig, system) -> SnapshotSet:
    directory = cfg.out_dir / "snapshots"
    train = training_parameters(cfg)
    if (directory / "manifest.json").exists():
        try:
            snaps = SnapshotSet.load(directory, expected_hash=system.config_hash())
        except Exception as exc:  # stale or foreign snapshots are regenerated
            log.info("regenerating snapshots: %s", exc)
        else:
            same = snaps.parameters.shape == train.shape and np.array_equal(snaps.parameters, train) \
                and snaps.rhs.extent("m") == min(cfg.n_mu_mdeim, cfg.n_mu_train) \
                and (snaps.operator is not None or not _needs_operator(cfg))
            if same:
                return snaps
    return run_fom(cfg, system)


def run_offline(cfg: RunConfig, system=None) -> dict:
    """Snapshots, state bases, interpolants and reduced models for every (method, eps)."""
    system = make_system(cfg) if system is None else system
    stokes = isinstance(system, StokesFOM)
    stages: dict = {}
    manifest = {"config_digest": cfg.digest(), "config_hash": system.config_hash(), "problem": cfg.problem,
                "n_space": system.n_space, "n_time": system.n_time, "n_nonzeros": system.n_nonzeros,
                "n_quadrature": system.n_quadrature, "stages": stages, "models": {}, "failures": []}
    started = not tracemalloc.is_tracing()
    if started:
        tracemalloc.start()
    try:
        with _stage(stages, "snapshots"):
            snaps = _load_or_generate(cfg, system)
        manifest["snapshot_failures"] = snaps.failures
        check = snaps.parameters[:_CHECK_PARAMS]
        for eps in cfg.eps:
            with _stage(stages, f"bases_{eps:.0e}"):
                u_basis = build_state_basis(snaps.states, eps, system.norm)
                p_basis = None
                if stokes:
                    p_basis = build_state_basis(snaps.pressure, eps, system.pressure_norm)
                    u_basis = enrich_supremizers(u_basis, p_basis, system.divergence, system.norm)
            for method in cfg.methods:
                name = f"{method}_{eps:.0e}"
                try:
                    with _stage(stages, f"hyper_{name}"):
                        op, rhs, rhs_p = build_hyper_reduction(system, snaps, method, eps)
                    with _stage(stages, f"compress_{name}"):
                        model = galerkin_compress(system, u_basis, op, rhs, method, eps, p_basis, rhs_p, check)
                except (StrbError, ValueError) as exc:
                    manifest["failures"].append({"model": name, "error": str(exc)})
                    raise PipelineError(f"offline stage {name} failed: {exc}") from exc
                model.meta["config_digest"] = cfg.digest()
                model.save(model_dir(cfg, method, eps))
                manifest["models"][name] = {
                    "method": method, "eps": eps, "n_s": u_basis.n_s, "n_t": u_basis.n_t,
                    "n_s_a": op.n_space, "n_t_a": op.n_time, "chi": op.chi,
                    "tpod_rows": int(op.fields.field_space_basis.shape[0]) if op.fields is not None
                    else int(op.space_basis.shape[0]),
                }
    finally:
        if started:
            tracemalloc.stop()
    _fun_vs_std(manifest)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    (cfg.out_dir / "offline.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def _fun_vs_std(manifest: dict) -> None:
    """Offline cost of the field-first build relative to the algebraic one (reported, not asserted)."""
    st = manifest["stages"]
    ratios = {}
    for key in st:
        if key.startswith("hyper_FUN_"):
            other = key.replace("hyper_FUN_", "hyper_STD_")
            if other in st and st[key]["ms"] > 0:
                ratios[key[len("hyper_FUN_"):]] = st[other]["ms"] / st[key]["ms"]
    manifest["std_over_fun_offline_time"] = ratios


# -- online ---------------------------------------------------------------------------------------


def _relative(err: float, ref: float, flags: list, what: str) -> float:
    if ref == 0.0:
        flags.append(what)
        return 0.0 if err == 0.0 else float("inf")
    return err / ref


def _fmt(v) -> str:
    if v is None:
        return "nan"
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def run_online(cfg: RunConfig, system=None) -> Path:
    """Solve FOM and ROM at the test parameters and write ``report.csv``."""
    system = make_system(cfg) if system is None else system
    stokes = isinstance(system, StokesFOM)
    off_path = cfg.out_dir / "offline.json"
    if not off_path.exists():
        raise PipelineError(f"missing offline artifacts in {cfg.out_dir}")
    offline = json.loads(off_path.read_text())
    if offline["config_hash"] != system.config_hash() or offline["config_digest"] != cfg.digest():
        raise PipelineError("offline artifacts were built for a different configuration")
    train = training_parameters(cfg)
    test = online_parameters(cfg, train)
    models = {}
    for eps in cfg.eps:
        for method in cfg.methods:
            path = model_dir(cfg, method, eps)
            if not (path / "manifest.json").exists():
                raise PipelineError(f"missing model {path}")
            models[(method, eps)] = RomModel.load(path, expected_hash=system.config_hash())

    certify = not stokes and system.n_space * system.n_time <= _BETA_CAP
    constants = {}
    if certify:
        fit_on = train[:min(_CHECK_PARAMS, cfg.n_mu_mdeim)]
        for key, m in models.items():
            if m.method in ("FUN", "STFUN"):
                # frozen before any test parameter is seen
                constants[key] = fit_functional_constant(m.op, system, fit_on)

    flags: list = []
    rows = []
    for k, mu in enumerate(test):
        start = time.perf_counter()
        ref = system.solve(mu)
        fom_ms = 1e3 * (time.perf_counter() - start)
        U, P = (ref if stokes else (ref, None))
        nU = spacetime_norm(U, system.norm, system.delta)
        nP = spacetime_norm(P, system.pressure_norm, system.delta) if stokes else None
        beta = coercivity_estimate(system, mu) if certify else None
        for (method, eps), model in models.items():
            res = online_solve(model, system, mu)
            E_u = _relative(spacetime_norm(U - res.U, system.norm, system.delta), nU, flags, f"E_u mu {k}")
            E_p = None
            if stokes:
                E_p = _relative(spacetime_norm(P - res.P, system.pressure_norm, system.delta), nP, flags,
                                f"E_p mu {k}")
            bound = None
            if certify:
                rep = bound_terms(system, model, mu, res, beta=beta, functional_constant=constants.get((method, eps)))
                resid, bound = rep.residual_term, rep.bound_total
            else:
                resid = residual_estimator(system, model, mu, res)
            rows.append({
                "method": method, "eps": eps, "mu_index": k, "mu_values": ";".join(repr(float(v)) for v in mu),
                "E_u": E_u, "E_p": E_p, "residual_estimate": resid, "bound_total": bound,
                "beta_certified": bool(certify), "fom_ms": fom_ms, "rom_online_ms": res.elapsed_ms,
                "speedup": fom_ms / res.elapsed_ms if res.elapsed_ms > 0 else None,
                "n_s": model.u.n_s, "n_t": model.u.n_t, "n_s_a": model.op.n_space, "n_t_a": model.op.n_time,
                "entries_sampled": res.counters["entries_sampled"],
            })
    rows.sort(key=lambda r: (cfg.methods.index(r["method"]), -r["eps"], r["mu_index"]))
    out = cfg.out_dir / "report.csv"
    write_report(out, rows)
    (cfg.out_dir / "online.json").write_text(json.dumps({"zero_reference": flags, "n_test": len(test),
                                                         "certified": certify}, indent=1))
    return out


def write_report(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([r["method"] if c == "method" else r["mu_values"] if c == "mu_values" else _fmt(r[c])
                        for c in CSV_COLUMNS])


def read_report(path) -> list[dict]:
    """Parse ``report.csv`` back into typed rows."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise PipelineError(f"unexpected report header {reader.fieldnames}")
        rows = []
        for r in reader:
            row = {}
            for c in CSV_COLUMNS:
                v = r[c]
                if c == "method":
                    row[c] = v
                elif c == "mu_values":
                    row[c] = [float(x) for x in v.split(";")]
                elif c in ("mu_index", "n_s", "n_t", "n_s_a", "n_t_a", "entries_sampled"):
                    row[c] = int(v)
                elif c == "beta_certified":
                    row[c] = bool(int(v))
                else:
                    row[c] = float(v)
            rows.append(row)
    return rows


def summarize(paths, out=None) -> list[dict]:
    """Per-(method, eps) means of one or more reports (layout of the accuracy/speedup tables)."""
    groups: dict = {}
    for p in paths:
        for r in read_report(p):
            groups.setdefault((r["method"], r["eps"]), []).append(r)
    table = []
    for (method, eps), rs in groups.items():
        E_u = float(np.mean([r["E_u"] for r in rs]))
        E_p = np.array([r["E_p"] for r in rs])
        table.append({"method": f"{method}-STRB", "eps": eps, "E_u": E_u, "E_u_over_eps": E_u / eps,
                      "E_p": float(np.mean(E_p)) if not np.all(np.isnan(E_p)) else float("nan"),
                      "speedup": float(np.mean([r["speedup"] for r in rs])),
                      "entries_sampled": float(np.mean([r["entries_sampled"] for r in rs])), "n_rows": len(rs)})
    order = {f"{m}-STRB": i for i, m in enumerate(("STD", "ST", "FUN", "STFUN"))}
    table.sort(key=lambda r: (order[r["method"]], -r["eps"]))
    if out is not None:
        with open(out, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(table[0]) if table else ["method"])
            w.writeheader()
            w.writerows(table)
    return table


def format_table(table) -> str:
    head = f"{'method':<12}{'eps':>8}{'E_u':>12}{'E_u/eps':>10}{'E_p':>12}{'speedup':>10}{'entries':>10}"
    lines = [head, "-" * len(head)]
    for r in table:
        lines.append(f"{r['method']:<12}{r['eps']:>8.0e}{r['E_u']:>12.3e}{r['E_u_over_eps']:>10.2f}"
                     f"{r['E_p']:>12.3e}{r['speedup']:>10.2f}{r['entries_sampled']:>10.0f}")
    return "\n".join(lines)
