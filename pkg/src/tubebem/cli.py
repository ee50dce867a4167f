"""Command line front end: ``tubebem {solve,verify,converge} --config run.ini``.

The configuration is an INI file with the sections ``geometry``, ``mesh``,
``problem``, ``verify`` and ``output``; see the README for the schema.
"""
from __future__ import annotations

import argparse
import ast
import configparser
import csv
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Family, GeometryError, TubeGeometry
from .operators import AssemblyError, SolverError, assemble_hypersingular_direct, default_threads
from .potentials import near_boundary
from .quadrature import DEFAULT_ORDER, ConfigError, build_mesh, build_volume_quadrature
from .solve import VARIANTS, Formulation, LayerOperators, solve, write_density_csv
from . import verify as vf

CSV_VERSION = 1
CHECKS = ("coercivity", "calderon", "jumps", "hypersingular", "antisymmetry", "greens")
DEFAULT_TOLERANCES = {
    "jump": 5e-2,
    "projector": 1e-1,
    "hypersingular": 0.2,
    "antisymmetry": 1e-6,
    "greens": 1e-5,
}


KNOWN_KEYS = {
    "mesh": ("m", "n", "q_t", "q_s", "levels"),
    "problem": ("type", "variant", "data", "source", "expression"),
    "verify": ("checks", "seed", "n_random", "volume_resolution") + tuple(f"tol_{k}" for k in DEFAULT_TOLERANCES),
    "output": ("directory", "field_times", "field_radial", "field_angular", "matrices"),
}


class ConfigFileError(ValueError):
    """Malformed configuration, reported with the offending line."""


# -- config parsing --------------------------------------------------------------

_SECTION = re.compile(r"^\s*\[([^\]]+)\]")
_KEY = re.compile(r"^\s*([^=:#;\s][^=:]*?)\s*[=:]")


def _line_index(text: str) -> dict:
    where, section = {}, None
    for no, line in enumerate(text.splitlines(), 1):
        m = _SECTION.match(line)
        if m:
            section = m.group(1).strip().lower()
            where.setdefault((section, None), no)
            continue
        m = _KEY.match(line)
        if m and section is not None and not line[:1].isspace():
            where[(section, m.group(1).strip().lower())] = no
    return where


@dataclass
class RunConfig:
    path: str
    kind: str
    params: dict
    T: float
    M: int
    N: int
    q_t: int
    q_s: int
    levels: tuple
    problem: str
    variant: str
    data: str
    source: tuple | None
    expression: str | None
    checks: tuple
    tolerances: dict
    seed: int
    n_random: int
    volume_resolution: int
    out_dir: str
    field_times: tuple
    field_radial: int
    field_angular: int
    dump_matrices: bool
    d_operator: str = "calderon"
    threads: int = 1
    lines: dict = field(default_factory=dict, repr=False)


class _Reader:
    def __init__(self, cp: configparser.ConfigParser, path: str, lines: dict):
        self.cp, self.path, self.lines = cp, path, lines

    def fail(self, section, key, msg):
        no = self.lines.get((section, key)) or self.lines.get((section, None))
        loc = f"{self.path}:{no}" if no else self.path
        where = f"[{section}] {key}" if key else f"[{section}]"
        raise ConfigFileError(f"{loc}: {where}: {msg}")

    def raw(self, section, key, default=None, required=False):
        if self.cp.has_option(section, key):
            return self.cp.get(section, key).strip()
        if required:
            self.fail(section, key, "missing required key")
        return default

    def conv(self, section, key, fn, default=None, required=False, what="value"):
        raw = self.raw(section, key, None, required)
        if raw is None:
            return default
        try:
            return fn(raw)
        except (TypeError, ValueError):
            self.fail(section, key, f"expected {what}, got {raw!r}")

    def floats(self, section, key, default=None):
        return self.conv(section, key, lambda s: tuple(float(v) for v in s.split(",")), default,
                         what="comma separated numbers")


def _positive(r: _Reader, section, key, value):
    if value is not None and not value > 0:
        r.fail(section, key, "must be positive")
    return value


def load_config(path, overrides: dict | None = None) -> RunConfig:
    path = str(path)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigFileError(f"{path}: cannot read config: {exc.strerror}") from exc
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=path)
    except configparser.Error as exc:
        lineno = getattr(exc, "lineno", None)
        if lineno is None and getattr(exc, "errors", None):
            lineno = exc.errors[0][0]
        head = str(exc).splitlines()[0]
        raise ConfigFileError(f"{path}:{lineno}: {head}" if lineno else f"{path}: {head}") from exc
    lines = _line_index(text)
    r = _Reader(cp, path, lines)
    known = {"geometry", "mesh", "problem", "verify", "output"}
    for sec in cp.sections():
        if sec.lower() not in known:
            r.fail(sec.lower(), None, f"unknown section (expected one of {sorted(known)})")
    if not cp.has_section("geometry"):
        raise ConfigFileError(f"{path}: missing [geometry] section")
    for sec, keys in KNOWN_KEYS.items():
        if cp.has_section(sec):
            for key in cp.options(sec):
                if key not in keys:
                    r.fail(sec, key, f"unknown key (expected one of {', '.join(keys)})")

    kind = r.raw("geometry", "kind", required=True)
    if kind not in [f.value for f in Family]:
        r.fail("geometry", "kind", f"unknown family {kind!r}")
    T = _positive(r, "geometry", "t", r.conv("geometry", "t", float, 1.0, what="a number"))
    params = {}
    for key in cp.options("geometry"):
        if key in ("kind", "t"):
            continue
        params["R0" if key == "r0" else key] = r.conv("geometry", key, float, what="a number")

    try:
        geom = TubeGeometry(kind, dict(params), T)
    except GeometryError as exc:
        r.fail("geometry", None, str(exc))

    M = r.conv("mesh", "m", int, 16, what="an integer")
    N = r.conv("mesh", "n", int, M, what="an integer")
    q_t = r.conv("mesh", "q_t", int, DEFAULT_ORDER, what="an integer")
    q_s = r.conv("mesh", "q_s", int, DEFAULT_ORDER, what="an integer")
    levels = r.conv("mesh", "levels", lambda s: tuple(int(v) for v in s.split(",")), (8, 16, 32, 64),
                    what="comma separated integers")

    try:
        build_mesh(geom, M, N, q_t, q_s)
        for L in levels:
            build_mesh(geom, L, L, q_t, q_s)
    except ConfigError as exc:
        r.fail("mesh", None, str(exc))

    problem = r.raw("problem", "type", "dirichlet").lower()
    if problem not in ("dirichlet", "neumann"):
        r.fail("problem", "type", f"expected dirichlet or neumann, got {problem!r}")
    variant = r.raw("problem", "variant", "i").lower()
    if variant not in VARIANTS:
        r.fail("problem", "variant", f"expected one of {', '.join(VARIANTS)}, got {variant!r}")
    data = r.raw("problem", "data", "manufactured").lower()
    if data not in ("manufactured", "expression", "zero"):
        r.fail("problem", "data", f"expected manufactured, expression or zero, got {data!r}")
    source = r.floats("problem", "source")
    if source is not None and len(source) != 2:
        r.fail("problem", "source", "expected two coordinates")
    expression = r.raw("problem", "expression")
    if data == "expression":
        if not expression:
            r.fail("problem", "expression", "required when data = expression")
        try:
            _compile_expression(expression)
        except ValueError as exc:
            r.fail("problem", "expression", str(exc))

    raw_checks = r.raw("verify", "checks", "all")
    checks = CHECKS if raw_checks.strip().lower() == "all" else tuple(
        c.strip().lower() for c in raw_checks.split(",") if c.strip())
    for c in checks:
        if c not in CHECKS:
            r.fail("verify", "checks", f"unknown check {c!r} (expected {', '.join(CHECKS)} or all)")
    tols = dict(DEFAULT_TOLERANCES)
    for name in DEFAULT_TOLERANCES:
        key = f"tol_{name}"
        tols[name] = _positive(r, "verify", key, r.conv("verify", key, float, tols[name], what="a number"))
    seed = r.conv("verify", "seed", int, 0, what="an integer")
    n_random = r.conv("verify", "n_random", int, 100, what="an integer")
    vres = r.conv("verify", "volume_resolution", int, 32, what="an integer")

    out_dir = r.raw("output", "directory", "tubebem-out")
    field_times = r.floats("output", "field_times", (T,))
    field_radial = r.conv("output", "field_radial", int, 4, what="an integer")
    field_angular = r.conv("output", "field_angular", int, 8, what="an integer")
    dump = r.conv("output", "matrices", _boolean, False, what="a boolean")

    cfg = RunConfig(path, kind, params, T, M, N, q_t, q_s, levels, problem, variant, data, source, expression,
                    tuple(checks), tols, seed, n_random, vres, out_dir, tuple(field_times), field_radial,
                    field_angular, dump, lines=lines)
    for key, val in (overrides or {}).items():
        if val is not None:
            setattr(cfg, key, val)
    for t in cfg.field_times:
        if not 0 < t <= T:
            r.fail("output", "field_times", f"time {t} outside (0, {T}]")
    return cfg


def _boolean(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "yes", "true", "on"):
        return True
    if v in ("0", "no", "false", "off"):
        return False
    raise ValueError(s)


# -- boundary data expressions -----------------------------------------------------

_NAMES = {"t", "x", "y", "theta", "nx", "ny", "vn", "pi", "e"}
_FUNCS = {"sin", "cos", "tan", "exp", "log", "sqrt", "abs", "tanh", "arctan2", "minimum", "maximum", "where"}
_NODES = (ast.Expression, ast.BinOp, ast.UnaryOp, ast.Call, ast.Name, ast.Load, ast.Constant, ast.Compare,
          ast.operator, ast.unaryop, ast.cmpop)


def _compile_expression(expr: str):
    try:
        tree = ast.parse(expr, mode="eval")
    except SyntaxError as exc:
        raise ValueError(f"syntax error in expression: {exc.msg}") from None
    for node in ast.walk(tree):
        if not isinstance(node, _NODES):
            raise ValueError(f"unsupported construct {type(node).__name__} in expression")
        if isinstance(node, ast.Call) and not (isinstance(node.func, ast.Name) and node.func.id in _FUNCS):
            raise ValueError("only elementary functions may be called in expressions")
        if isinstance(node, ast.Name) and node.id not in _NAMES | _FUNCS:
            raise ValueError(f"unknown name {node.id!r} in expression")
    return compile(tree, "<expression>", "eval")


def evaluate_expression(expr: str, sample) -> np.ndarray:
    code = _compile_expression(expr)
    env = {name: getattr(np, name) for name in _FUNCS}
    env.update(pi=np.pi, e=np.e, t=sample.t, x=sample.x[..., 0], y=sample.x[..., 1], theta=sample.theta,
               nx=sample.n[..., 0], ny=sample.n[..., 1], vn=sample.vn)
    val = eval(code, {"__builtins__": {}}, env)  # noqa: S307 - names and nodes are whitelisted above
    return np.broadcast_to(np.asarray(val, float), sample.t.shape).copy()


# -- shared helpers ------------------------------------------------------------------


def _geometry(cfg: RunConfig) -> TubeGeometry:
    return TubeGeometry(cfg.kind, dict(cfg.params), cfg.T)


def default_source(geom: TubeGeometry):
    """A point left of every section with a gap of 1.5 R0."""
    lo = min(float(np.min(geom.polygon(t, 512)[:, 0])) for t in np.linspace(0, geom.horizon, 33))
    return (lo - 1.5 * geom.R0, 0.0)


def _manufactured(cfg, geom):
    return vf.ManufacturedSolution(geom, cfg.source if cfg.source is not None else default_source(geom))


def _boundary_data(cfg, geom, mesh):
    col = mesh.collocation
    if cfg.data == "zero":
        return np.zeros(mesh.size), None
    if cfg.data == "expression":
        return evaluate_expression(cfg.expression, col), None
    ms = _manufactured(cfg, geom)
    g, psi = ms.traces(col)
    return (g if cfg.problem == "dirichlet" else psi), ms


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, label: str, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# tubebem {label} csv v{CSV_VERSION}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _field_points(geom, cfg):
    for t in cfg.field_times:
        c = geom.center(np.array(t))
        for a in range(cfg.field_angular):
            th = 2 * np.pi * a / cfg.field_angular
            xb = geom.positions(np.array(t), np.array(th))
            for k in range(cfg.field_radial):
                frac = (k + 0.5) / cfg.field_radial * 0.9
                yield t, c + frac * (xb - c)


def _main_error(result):
    return float(np.max(np.abs(result)))


# -- subcommands -----------------------------------------------------------------------


def cmd_solve(cfg: RunConfig, out: Path) -> int:
    geom = _geometry(cfg)
    mesh = build_mesh(geom, cfg.M, cfg.N, cfg.q_t, cfg.q_s)
    ops = LayerOperators(mesh, cfg.d_operator, cfg.threads)
    data, ms = _boundary_data(cfg, geom, mesh)
    f = Formulation(cfg.problem, cfg.variant)
    sol = solve(mesh, data, f, ops=ops)
    write_density_csv(out / "density.csv", mesh, sol.density)
    col = mesh.collocation
    _write_csv(out / "cauchy.csv", "cauchy", ["slab", "panel", "t", "theta", "dirichlet", "neumann_minus"],
               ([i, j, mesh.t_mid[i], mesh.theta_mid[j], sol.pair.w[mesh.index(i, j)], sol.pair.psi[mesh.index(i, j)]]
                for i in range(mesh.M) for j in range(mesh.N)))
    rows = []
    pts = list(_field_points(geom, cfg))
    for t0 in sorted({p[0] for p in pts}):
        X = np.array([p[1] for p in pts if p[0] == t0])
        vals = sol.interior(mesh, t0, X)
        near = near_boundary(mesh, t0, X)
        rows += [[t0, x[0], x[1], v, int(fl)] for x, v, fl in zip(X, vals, near)]
    _write_csv(out / "field.csv", "field", ["t", "x1", "x2", "value", "flag"], rows)
    summary = [("formulation", str(f)), ("M", mesh.M), ("N", mesh.N), ("d_operator", cfg.d_operator),
               ("residual", sol.residual)]
    if ms is not None:
        exact = ms.traces(col)
        got, ref = (sol.pair.psi, exact.psi) if cfg.problem == "dirichlet" else (sol.pair.w, exact.w)
        summary.append(("trace_error", _main_error(got - ref) / _main_error(ref)))
        ue = np.array([ms.u(np.array(r[0]), np.array(r[1:3])) for r in rows])
        summary.append(("field_error", _main_error(np.array([r[3] for r in rows]) - ue) / _main_error(ue)))
    _write_csv(out / "summary.csv", "summary", ["quantity", "value"], summary)
    if cfg.dump_matrices:
        for name in ("V", "K", "Kp", "D"):
            if name in ops._ops:
                ops._ops[name].dump(out / f"{name}.bin")
    for k, v in summary:
        print(f"{k}: {_fmt(v)}")
    return 0


def cmd_converge(cfg: RunConfig, out: Path) -> int:
    if cfg.data != "manufactured":
        raise ConfigFileError(f"{cfg.path}: converge needs [problem] data = manufactured")
    geom = _geometry(cfg)
    ms = _manufactured(cfg, geom)
    f = Formulation(cfg.problem, cfg.variant)
    tp, Xp = vf.interior_probes(geom, 20, cfg.seed)
    ue = ms.u(tp, Xp)
    rows, prev = [], None
    for L in cfg.levels:
        mesh = build_mesh(geom, L, L, cfg.q_t, cfg.q_s)
        exact = ms.traces(mesh.collocation)
        data = exact.w if cfg.problem == "dirichlet" else exact.psi
        sol = solve(mesh, data, f, ops=LayerOperators(mesh, cfg.d_operator, cfg.threads))
        got, ref = (sol.pair.psi, exact.psi) if cfg.problem == "dirichlet" else (sol.pair.w, exact.w)
        e_tr = _main_error(got - ref) / _main_error(ref)
        uh = vf.interior_values(lambda t0, X: sol.interior(mesh, t0, X), tp, Xp)
        e_in = _main_error(uh - ue) / _main_error(ue)
        o_tr = "" if prev is None else float(np.log2(prev[0] / e_tr))
        o_in = "" if prev is None else float(np.log2(prev[1] / e_in))
        rows.append([L, L, e_tr, o_tr, e_in, o_in, sol.residual])
        prev = (e_tr, e_in)
        print(f"M=N={L}: trace error {e_tr:.3e}  interior error {e_in:.3e}")
    _write_csv(out / "converge.csv", "converge",
               ["M", "N", "trace_error", "trace_order", "interior_error", "interior_order", "residual"], rows)
    return 0


def cmd_verify(cfg: RunConfig, out: Path) -> int:
    geom = _geometry(cfg)
    mesh = build_mesh(geom, cfg.M, cfg.N, cfg.q_t, cfg.q_s)
    ops = LayerOperators(mesh, cfg.d_operator, cfg.threads)
    tol = cfg.tolerances
    rows = []

    def record(check, quantity, value, threshold, ok):
        rows.append([check, quantity, value, threshold, "PASS" if ok else "FAIL"])

    rng = np.random.default_rng(cfg.seed)
    if "coercivity" in cfg.checks:
        rep = vf.coercivity_report(ops.blocks(), mesh, cfg.n_random, cfg.seed)
        record("coercivity", "min_eig_sym_V", rep.min_eig_V, 0.0, rep.min_eig_V > 0)
        record("coercivity", "min_eig_sym_D", rep.min_eig_D, "", True)
        npos = int(np.sum(rep.form_values > 0))
        record("coercivity", "positive_block_forms", npos, cfg.n_random, npos == cfg.n_random)
        record("coercivity", "min_block_form", float(rep.form_values.min()), 0.0, rep.form_values.min() > 0)
    if "calderon" in cfg.checks:
        ms = _manufactured(cfg, geom)
        res = vf.calderon_residuals(ops.blocks(), ms.traces(mesh.collocation), vf.random_pair(mesh, rng))
        record("calderon", "projector_residual", res["projector"], tol["projector"], res["projector"] <= tol["projector"])
        record("calderon", "involution_residual", res["involution"], "", True)
    if "jumps" in cfg.checks:
        dens = vf.smooth_density(mesh, rng)
        scale = float(np.max(np.abs(dens)))
        for pot in ("single", "double"):
            for tr in vf.TRACES:
                rep = vf.jump_probe(mesh, dens, pot, tr)
                dev = rep.max_deviation / scale
                record("jumps", f"{pot}/{tr}", dev, tol["jump"], dev <= tol["jump"])
    if "hypersingular" in cfg.checks:
        Dc = ops.blocks().D.to_dense() if cfg.d_operator == "calderon" else LayerOperators(mesh)["D"].to_dense()
        Dd = assemble_hypersingular_direct(mesh, threads=cfg.threads).matrix.to_dense()
        rel = float(np.linalg.norm(Dc - Dd) / np.linalg.norm(Dc))
        record("hypersingular", "frobenius_rel_cal_vs_dir", rel, tol["hypersingular"], rel <= tol["hypersingular"])
    if "antisymmetry" in cfg.checks or "greens" in cfg.checks:
        vq = build_volume_quadrature(geom, cfg.volume_resolution)
    if "antisymmetry" in cfg.checks:
        phi, dphi = vf.bump(geom.horizon)
        worst = 0.0
        for _ in range(10):
            u = vf.product_field(phi, dphi, rng.standard_normal(6))
            v = vf.product_field(phi, dphi, rng.standard_normal(6))
            duv = vf.bilinear_d(u, v, vq)
            worst = max(worst, abs(duv + vf.bilinear_d(v, u, vq)) / (abs(duv) + 1))
        record("antisymmetry", "max_rel_d_sum", worst, tol["antisymmetry"], worst <= tol["antisymmetry"])
    if "greens" in cfg.checks:
        ms = _manufactured(cfg, geom)
        v = vf.product_field(*vf.bump(geom.horizon), rng.standard_normal(6))
        res = abs(vf.greens_first_residual(ms.field, v, vq, mesh))
        record("greens", "residual", res, tol["greens"], res <= tol["greens"])
    _write_csv(out / "verify.csv", "verify", ["check", "quantity", "value", "threshold", "status"], rows)
    print(f"verification on {geom.kind.value}, M={mesh.M}, N={mesh.N}, seed={cfg.seed}")
    for check, q, value, thr, status in rows:
        thr_s = f" (threshold {_fmt(thr)})" if thr != "" else ""
        print(f"{status} {check} {q} = {_fmt(value)}{thr_s}")
    return 0 if all(r[4] == "PASS" for r in rows) else 1


COMMANDS = {"solve": cmd_solve, "verify": cmd_verify, "converge": cmd_converge}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tubebem", description="Space-time boundary elements for the heat "
                                "equation on moving planar domains.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="INI configuration file")
    p.add_argument("--out", help="output directory (overrides [output] directory)")
    p.add_argument("--threads", type=int, help="worker threads for assembly (default: TUBEBEM_THREADS or 1)")
    p.add_argument("--d-operator", choices=("calderon", "direct"), default="calderon",
                   help="hypersingular matrix used by the solver")
    p.add_argument("--seed", type=int, help="seed for random probes (overrides [verify] seed)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("tubebem: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 2
    try:
        threads = args.threads if args.threads is not None else default_threads()
    except ValueError:
        print("tubebem: TUBEBEM_THREADS must be an integer", file=sys.stderr)
        return 2
    if threads < 1:
        print("tubebem: thread count must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config, {"seed": args.seed, "out_dir": args.out, "d_operator": args.d_operator,
                                        "threads": threads})
    except ConfigFileError as exc:
        print(f"tubebem: {exc}", file=sys.stderr)
        return 2
    out = Path(cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"tubebem: cannot create output directory {out}: {exc.strerror}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](cfg, out)
    except ConfigFileError as exc:
        print(f"tubebem: {exc}", file=sys.stderr)
        return 2
    except (GeometryError, ConfigError) as exc:
        print(f"tubebem: configuration rejected by {type(exc).__module__.split('.')[-1]}: {exc}", file=sys.stderr)
        return 2
    except (AssemblyError, SolverError) as exc:
        print(f"tubebem: {type(exc).__module__.split('.')[-1]}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
