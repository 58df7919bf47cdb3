"""Command-line front end: ``compute``, ``verify``, ``sweep`` and ``list``."""

from __future__ import annotations

import csv
import io
import json
import math
import sys
import time
from pathlib import Path
from typing import Any

import click
import numpy as np

from . import __version__
from .errors import AmbientLabError, CapabilityError, InputError, UsageError

SCHEMA = "ambientlab/1"
QUANTITIES = {
    "vk": "renormalized volume coefficients v_1..v_k at the point",
    "g_coeff": "k-th rho-derivative of g_rho at rho = 0",
    "omega": "k-th extended obstruction tensor",
    "L": "linearization tensor L^{ij}_(k)",
    "obstruction": "obstruction tensor and trace record (n even)",
}


# ----- request parsing --------------------------------------------------------------------


def parse_quantities(text: str) -> list[tuple[str, int | None]]:
    out = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        name, _, arg = item.partition(":")
        if name not in QUANTITIES:
            raise UsageError(f"unknown quantity {name!r}; known: {', '.join(QUANTITIES)}")
        if name == "obstruction":
            if arg:
                raise UsageError("obstruction takes no argument")
            out.append((name, None))
            continue
        try:
            k = int(arg)
        except ValueError:
            raise UsageError(f"quantity {name!r} needs an integer argument, e.g. {name}:2") from None
        if k < 1:
            raise UsageError(f"quantity {item!r}: k must be at least 1")
        out.append((name, k))
    if not out:
        raise UsageError("no quantities requested")
    return out


def capability_gate(quantities: list[tuple[str, int | None]], n: int) -> None:
    """Reject out-of-range requests before anything is computed."""
    even = n % 2 == 0
    if n < 3:
        raise CapabilityError(f"dimension n={n} is below 3")
    for name, k in quantities:
        if name in ("vk", "L", "g_coeff") and even and k > n // 2:
            raise CapabilityError(f"k exceeds n/2 for {name}:{k} (n={n})")
        if name == "omega" and even and n <= 2 * (k + 1):
            raise CapabilityError(f"omega:{k} needs n odd or n > {2 * (k + 1)} (n={n})")
        if name == "obstruction" and not even:
            raise CapabilityError(f"the obstruction tensor needs even n (n={n})")


def required_order(quantities: list[tuple[str, int | None]], n: int) -> int:
    need = 2
    for name, k in quantities:
        if name in ("vk", "L", "g_coeff"):
            need = max(need, 2 * k)
        elif name == "omega":
            need = max(need, 2 * (k + 1))
        elif name == "obstruction":
            need = max(need, n + 2)
    return need


def parse_point(text: str | None, n: int) -> list[float]:
    if not text:
        return [0.0] * n
    try:
        pt = [float(v) for v in text.split(",")]
    except ValueError:
        raise InputError(f"cannot parse point {text!r}") from None
    if len(pt) != n:
        raise InputError(f"point has {len(pt)} coordinates, expected {n}")
    return pt


def parse_params(items: tuple[str, ...]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for item in items:
        key, sep, val = item.partition("=")
        if not sep:
            raise UsageError(f"parameter {item!r} is not of the form key=value")
        out[key.strip()] = val.strip()
    return out


def parse_tolerances(items: tuple[str, ...]) -> dict[str, float]:
    out = {}
    for item in items:
        key, sep, val = item.rpartition("=")
        try:
            out[key if sep else "*"] = float(val)
        except ValueError:
            raise UsageError(f"bad tolerance {item!r}") from None
    return out


def resolve_metric(source: str, dim: int | None, point: str | None, order: int, params: dict, seed: int):
    from .metric_zoo import ALIASES, BUILTINS, builtin_metric, instantiate_jets, parse_metric_spec

    path = Path(source)
    if source.endswith(".json") or path.exists():
        if not path.exists():
            raise InputError(f"metric spec file {source!r} not found")
        spec = parse_metric_spec(path)
        if dim is not None and dim != spec.dimension:
            raise InputError(f"--dim {dim} disagrees with the metric file dimension {spec.dimension}")
        return lambda: instantiate_jets(spec, parse_point(point, spec.dimension), order), spec.dimension
    name = ALIASES.get(source, source)
    if name not in BUILTINS:
        raise InputError(f"unknown metric {source!r}; known: {', '.join(BUILTINS)} or a JSON spec path")
    if dim is None:
        raise UsageError("--dim is required for builtin metrics")
    params = dict(params)
    params.setdefault("seed", seed)
    pt = parse_point(point, dim)
    return lambda: builtin_metric(name, params, pt, order, dim), dim


# ----- output --------------------------------------------------------------------------------


def _finite(v):
    if isinstance(v, float) and not math.isfinite(v):
        raise ArithmeticError("non-finite value in report")
    if isinstance(v, list):
        for x in v:
            _finite(x)
    return v


def emit(doc: dict, fmt: str, rows: list[list] | None = None) -> None:
    if fmt == "csv" and rows is not None:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(rows)
        click.echo(buf.getvalue(), nl=False)
    else:
        click.echo(json.dumps(doc, indent=2))


def fail(exc: BaseException, request: dict) -> None:
    if isinstance(exc, AmbientLabError):
        code, kind = exc.exit_code, exc.kind
    else:
        code, kind = 1, "internal"
    reason = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
    click.echo(json.dumps({"schema": SCHEMA, "version": __version__, "request": request, "status": "error",
                           "error": {"kind": kind, "reason": reason, "exit_code": code}}, indent=2))
    click.echo(f"error: {kind}: {reason}", err=True)
    sys.exit(code)


def _tensor(a) -> Any:
    arr = np.asarray(a, dtype=np.float64)
    return _finite(arr.tolist() if arr.ndim else float(arr))


# ----- commands --------------------------------------------------------------------------------


@click.group()
@click.version_option(__version__, prog_name="ambientlab")
def main():
    """Ambient-metric expansions, conformal curvature and renormalized volume coefficients."""


@main.command()
@click.option("--metric", "metric", required=True, help="builtin name or path to a JSON metric spec")
@click.option("--dim", type=int, default=None, help="dimension for builtin metrics")
@click.option("--point", default=None, help="base point, comma separated (default: origin)")
@click.option("--order", type=int, default=None, help="jet order (default: the least sufficient)")
@click.option("--quantities", default="vk:1", show_default=True, help="e.g. vk:3,omega:2,g_coeff:2,L:2,obstruction")
@click.option("--param", "params", multiple=True, help="builtin metric parameter key=value (repeatable)")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default="json", show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="also write CSV rows here")
def compute(metric, dim, point, order, quantities, params, seed, fmt, out):
    """Compute quantities of a metric at a point."""
    request = {"command": "compute", "metric": metric, "dim": dim, "point": point, "order": order,
               "quantities": quantities, "params": list(params), "seed": seed}
    t0 = time.perf_counter()
    try:
        qs = parse_quantities(quantities)
        build, n = resolve_metric(metric, dim, point, order or 0, parse_params(params), seed)
        capability_gate(qs, n)
        need = required_order(qs, n)
        if order is None:
            order = need
            build, n = resolve_metric(metric, dim, point, order, parse_params(params), seed)
        elif order < need:
            from .errors import InsufficientOrderError

            raise InsufficientOrderError(f"requested quantities need --order >= {need}, got {order}")
        results, rows = _compute(build(), qs)
        if out:
            _write_csv(out, [["quantity", "index", "value"]] + rows)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a report
        fail(exc, request)
        return
    doc = {"schema": SCHEMA, "version": __version__, "request": request, "status": "ok", "n": n, "order": order,
           "results": results, "wall_time": time.perf_counter() - t0}
    emit(doc, fmt, [["quantity", "index", "value"]] + rows)


def _compute(g, qs):
    from .ambient_curvature import conformal_curvature_set
    from .fg_expansion import obstruction_residual, solve_expansion
    from .volume_coeffs import linearization_coefficients, volume_coefficients

    n = g.n
    K = max([k for name, k in qs if name in ("vk", "L", "g_coeff")] or [0])
    series = solve_expansion(g, K, top_order=0) if K else None
    vol = volume_coefficients(series, K) if any(name in ("vk", "L") for name, _ in qs) else None
    k_omega = max([k for name, k in qs if name == "omega"] or [0])
    cs = conformal_curvature_set(g, k_omega) if k_omega else None
    results: dict[str, Any] = {}
    rows: list[list] = []

    def put(key, value):
        results[key] = _tensor(value)
        arr = np.asarray(value, dtype=np.float64)
        for idx in np.ndindex(arr.shape):
            rows.append([key, ":".join(str(i) for i in idx), repr(float(arr[idx]))])

    for name, k in qs:
        if name == "vk":
            put(f"vk:{k}", [float(vol.v[j].value) for j in range(1, k + 1)])
        elif name == "g_coeff":
            put(f"g_coeff:{k}", series.coefficient(k).value)
        elif name == "L":
            put(f"L:{k}", linearization_coefficients(vol, k).value)
        elif name == "omega":
            put(f"omega:{k}", cs.Omega(k).value)
        elif name == "obstruction":
            rep = obstruction_residual(g)
            s = solve_expansion(g, n // 2, top_order=0)
            put("obstruction", rep.residual.value)
            put("obstruction_trace_record", s.even_trace.value)
            if rep.bach_proportionality is not None:
                results["obstruction_bach_factor"] = float(rep.bach_proportionality)
    return results, rows


def _write_csv(path: str, rows: list[list]) -> None:
    try:
        with open(path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(rows)
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc.strerror}") from exc


@main.command()
@click.option("--suite", "suites", multiple=True, default=("all",), show_default=True,
              help="suite name (repeatable or comma separated) or 'all'")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--tol", "tols", multiple=True, help="tolerance override: a number for all checks or name=value")
@click.option("--grid", type=int, default=16, show_default=True, help="torus grid points per axis")
@click.option("--jobs", type=int, default=None, help="worker processes for torus grids (env AMBIENTLAB_JOBS)")
@click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default="json", show_default=True)
def verify(suites, seed, tols, grid, jobs, fmt):
    """Run named verification suites."""
    from .conformal_lab import default_jobs
    from .suites import RunContext, run_checks, select

    names = [s for item in suites for s in item.split(",") if s]
    request = {"command": "verify", "suites": names, "seed": seed, "tol": list(tols), "grid": grid}
    t0 = time.perf_counter()
    try:
        checks = select(names)
        ctx = RunContext(seed, grid, jobs or default_jobs(), parse_tolerances(tols))
    except Exception as exc:  # noqa: BLE001
        fail(exc, request)
        return
    entries = []
    for c in checks:
        try:
            [(_, rep, dt)] = run_checks([c], ctx)
            entry = rep.to_dict()
            entry.update(suite=c.suite, instance=c.orders, seconds=round(dt, 3))
        except Exception as exc:  # noqa: BLE001 - a crashing check is a failed check
            kind = exc.kind if isinstance(exc, AmbientLabError) else "internal"
            entry = {"name": c.name, "suite": c.suite, "passed": False, "error": f"{kind}: {exc}"}
        entries.append(entry)
    failed = [e["name"] for e in entries if not e["passed"]]
    doc = {"schema": SCHEMA, "version": __version__, "request": request, "status": "ok" if not failed else "failed",
           "checks": entries, "summary": {"total": len(entries), "passed": len(entries) - len(failed),
                                          "failed": len(failed), "failures": failed},
           "wall_time": time.perf_counter() - t0}
    rows = [["name", "suite", "passed", "rel_err", "tol"]] + [
        [e["name"], e["suite"], e["passed"], e.get("rel_err", ""), e.get("tol", "")] for e in entries]
    emit(doc, fmt, rows)
    sys.exit(1 if failed else 0)


@main.command()
@click.option("--metric", "metric", default="torus_perturbed", show_default=True,
              help="torus_perturbed, flat or a JSON spec path (must be 2 pi periodic)")
@click.option("--dim", type=int, default=3, show_default=True)
@click.option("--omega", default="0", show_default=True, help="conformal factor expression")
@click.option("--quantity", default="vk:1", show_default=True, help="vk:K or dvk:K (variation along omega)")
@click.option("--grid", type=int, default=8, show_default=True)
@click.option("--param", "params", multiple=True, help="metric parameter key=value")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--jobs", type=int, default=None)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="CSV output path")
@click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default="json", show_default=True)
def sweep(metric, dim, omega, quantity, grid, params, seed, jobs, out, fmt):
    """Evaluate a quantity at every node of a uniform torus grid."""
    from .conformal_lab import TorusSpec, default_jobs, torus_node_values
    from .metric_zoo import builtin_spec, parse_metric_spec

    request = {"command": "sweep", "metric": metric, "dim": dim, "omega": omega, "quantity": quantity,
               "grid": grid, "params": list(params), "seed": seed}
    t0 = time.perf_counter()
    try:
        name, _, arg = quantity.partition(":")
        if name not in ("vk", "dvk") or not arg.isdigit() or int(arg) < 1:
            raise UsageError(f"sweep quantity must be vk:K or dvk:K, got {quantity!r}")
        k = int(arg)
        if metric.endswith(".json") or Path(metric).exists():
            spec = parse_metric_spec(Path(metric))
        elif metric in ("torus_perturbed", "flat"):
            p = parse_params(params)
            p.setdefault("seed", seed)
            spec = builtin_spec(metric, dim, p)
        else:
            raise InputError(f"sweep needs a periodic metric: torus_perturbed, flat or a JSON spec, got {metric!r}")
        torus = TorusSpec(spec, omega, grid)
        vals = torus_node_values(torus, k, jobs or default_jobs())
        column = vals["v"] if name == "vk" else vals["dv"]
        header = list(spec.variables) + [quantity]
        rows = [header] + [[repr(float(x)) for x in p] + [repr(float(v))] for p, v in zip(vals["points"], column)]
        if out:
            _write_csv(out, rows)
        dvol = vals["vol"] * torus.cell_volume()
        summary = {"nodes": int(column.size), "mean": float(np.mean(column)), "min": float(np.min(column)),
                   "max": float(np.max(column)), "integral": float(np.sum(column * dvol)),
                   "volume": float(np.sum(dvol))}
    except Exception as exc:  # noqa: BLE001
        fail(exc, request)
        return
    doc = {"schema": SCHEMA, "version": __version__, "request": request, "status": "ok", "out": out,
           "summary": _finite_dict(summary), "wall_time": time.perf_counter() - t0}
    emit(doc, fmt, rows)


def _finite_dict(d: dict) -> dict:
    for v in d.values():
        _finite(v)
    return d


@main.command(name="list")
@click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default="json", show_default=True)
def list_(fmt):
    """Enumerate builtin metrics, suites, checks and quantities."""
    from .metric_zoo import ALIASES, BUILTINS
    from .suites import REGISTRY, SUITES

    doc = {
        "schema": SCHEMA,
        "version": __version__,
        "builtins": list(BUILTINS),
        "aliases": ALIASES,
        "suites": {s: [c.name for c in REGISTRY if c.suite == s] for s in SUITES},
        "quantities": QUANTITIES,
    }
    rows = [["kind", "name"]] + [["builtin", b] for b in BUILTINS] + [["suite", s] for s in SUITES] + \
        [["check", c.name] for c in REGISTRY] + [["quantity", q] for q in QUANTITIES]
    emit(doc, fmt, rows)


if __name__ == "__main__":  # pragma: no cover
    main()
