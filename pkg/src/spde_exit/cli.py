"""
Command-line front end: ``spde-exit run <config>``, ``describe <task>``, ``version``.

A run reads an INI file with sections ``model``, ``grid``, ``sim``, ``task``
and ``output``.  Every key is typed and range-checked against the schema
shipped as ``schema.json``; a bad value raises :class:`ConfigError` naming
the field (``grid.M``).  Data files (CSV, JSON) depend only on the config,
so identical configs give byte-identical files; wall time and timestamp go
to ``manifest.json`` alone.

Exit status: 0 ok, 1 configuration error, 2 task error.
"""
import argparse
import configparser
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, InsufficientData, SpdeExitError, TaskError, UnknownTask
from .exit import build_oracle, exit_scaling_report, exit_shape_histogram, run_exit_mc
from .grid import GridSpec, build_operator, h_norm, sup_norm
from .model import BUILTIN_MODELS, validate_assumptions
from .noise import NoiseStream, split_stream
from .persist import read_records, write_json, write_matrix, write_path, write_records, write_table
from .quasipotential import (MamProblem, find_equilibria, hat_region, initial_path, mam_minimize,
                             quasipotential, rho_sweep, tilde_region)
from .sim import SimConfig, integrate_flow, integrate_spde

ENV_OUTPUT = "SPDE_EXIT_OUTPUT_DIR"
ENV_WORKERS = "SPDE_EXIT_WORKERS"
OK, CONFIG_ERROR, TASK_ERROR = 0, 1, 2


def load_schema():
    return json.loads(resources.files(__package__).joinpath("schema.json").read_text())


SCHEMA = load_schema()


# -- configuration ---------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    """Validated configuration; ``values[section][key]`` holds typed values."""

    values: dict
    source: str = ""

    def __getitem__(self, section):
        return self.values[section]

    @property
    def task(self):
        return self.values["task"]["name"]

    def canonical(self):
        """JSON of everything that affects data (the output directory does not)."""
        data = {s: dict(v) for s, v in self.values.items()}
        data["output"] = {k: v for k, v in data["output"].items() if k != "directory"}
        return json.dumps(data, sort_keys=True, separators=(",", ":"))

    @property
    def config_hash(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def _convert(field, spec, raw):
    kind = spec["type"]
    try:
        if kind == "int":
            value = int(raw)
        elif kind == "float":
            value = float(raw)
        elif kind == "float_list":
            value = [float(v) for v in raw.replace(",", " ").split()]
            if not value:
                raise ValueError("empty list")
        elif kind == "str_list":
            value = [v for v in raw.replace(",", " ").split()]
        else:
            value = raw.strip()
    except ValueError:
        raise ConfigError(field, f"expected {kind.replace('_', ' ')}, got {raw!r}") from None
    _check_range(field, spec, value)
    return value


def _check_range(field, spec, value):
    items = value if isinstance(value, list) else [value]
    for v in items:
        if isinstance(v, float) and not np.isfinite(v):
            raise ConfigError(field, f"value {v} is not finite")
        if "min" in spec and v < spec["min"]:
            raise ConfigError(field, f"value {v} is below the minimum {spec['min']}")
        if "min_exclusive" in spec and v <= spec["min_exclusive"]:
            raise ConfigError(field, f"value {v} must exceed {spec['min_exclusive']}")
        if "max" in spec and v > spec["max"]:
            raise ConfigError(field, f"value {v} is above the maximum {spec['max']}")
        if "max_exclusive" in spec and v >= spec["max_exclusive"]:
            raise ConfigError(field, f"value {v} must be below {spec['max_exclusive']}")
        if "choices" in spec and v not in spec["choices"]:
            raise ConfigError(field, f"{v!r} is not one of {', '.join(spec['choices'])}")


def parse_config(text, source="<string>"):
    """Parse and validate INI text; unknown sections or keys are errors."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError("config", str(exc).splitlines()[0]) from None
    sections = SCHEMA["sections"]
    for name in parser.sections():
        if name not in sections:
            raise ConfigError(name, f"unknown section (expected one of {', '.join(sections)})")
        for key in parser[name]:
            if key not in sections[name]:
                raise ConfigError(f"{name}.{key}", "unknown key")
    values = {}
    for name, keys in sections.items():
        values[name] = {}
        for key, spec in keys.items():
            field = f"{name}.{key}"
            if parser.has_option(name, key):
                values[name][key] = _convert(field, spec, parser[name][key])
            elif spec.get("required"):
                raise ConfigError(field, "required key is missing")
            else:
                values[name][key] = spec["default"]
    cfg = ExperimentConfig(values, source)
    _check_model(cfg)
    return cfg


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def _parse_terms(text, r):
    terms = []
    for k, chunk in enumerate(t for t in text.split(";") if t.strip()):
        parts = chunk.split()
        if len(parts) != 2 + r:
            raise ConfigError("model.terms", f"term {k} needs component, coefficient and {r} exponents")
        try:
            comp, coef = int(parts[0]), float(parts[1])
            exps = tuple(int(e) for e in parts[2:])
        except ValueError:
            raise ConfigError("model.terms", f"term {k} is not numeric") from None
        if not 0 <= comp < r or min(exps) < 0:
            raise ConfigError("model.terms", f"term {k} has a bad component or exponent")
        terms.append((comp, coef, exps))
    if not terms:
        raise ConfigError("model.terms", "polynomial model needs at least one term")
    return terms


def build_model(cfg):
    """Model and operator for a validated config."""
    m, g = cfg["model"], cfg["grid"]
    name, diff = m["name"], m["diffusivity"]
    try:
        if name in ("allen_cahn", "allen_cahn_multiplicative"):
            kw = dict(length=g["L"], diffusivity=diff[0], modulation=m["modulation"],
                      drift=m["drift"], noise_scale=m["noise_scale"])
            if name == "allen_cahn" or m["noise_beta"] > 0:
                kw["noise_beta"] = m["noise_beta"]
            model = BUILTIN_MODELS[name](**kw)
        elif name == "coupled_cubic":
            model = BUILTIN_MODELS[name](length=g["L"], diffusivity=tuple(diff * 2 if len(diff) == 1 else diff),
                                         coupling=m["coupling"])
        else:
            model = BUILTIN_MODELS[name](m["r"], _parse_terms(m["terms"], m["r"]), length=g["L"],
                                         diffusivity=diff[0] if len(diff) == 1 else tuple(diff),
                                         lam=m["lam"], rho=m["rho"], C=m["C"],
                                         noise_scale=m["noise_scale"], noise_beta=m["noise_beta"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"model.{name}", str(exc)) from None
    return model, build_operator(model, GridSpec(g["L"], g["M"], model.r))


def _check_model(cfg):
    m = cfg["model"]
    r = {"coupled_cubic": 2, "polynomial": m["r"]}.get(m["name"], 1)
    if len(m["diffusivity"]) not in (1, r):
        raise ConfigError("model.diffusivity", f"give 1 or {r} values")
    if m["name"] == "polynomial":
        _parse_terms(m["terms"], r)
    elif m["terms"]:
        raise ConfigError("model.terms", "only used by the polynomial model")
    if m["modulation"] and r != 1:
        raise ConfigError("model.modulation", "only scalar models are modulated")


# -- shared helpers -----------------------------------------------------------------

@dataclass
class Context:
    cfg: ExperimentConfig
    model: object
    op: object
    out: Path
    workers: int
    written: list
    source_hash: str = None

    def path(self, name):
        p = self.out / name
        self.written.append(name)
        return p

    def json(self, name, obj):
        return write_json(self.path(name), {"config_hash": self.source_hash or self.cfg.config_hash,
                                            **obj})

    def wants(self, fmt):
        return fmt in self.cfg["output"]["formats"]


def _seeds(op, n_modes, r):
    xi = op.grid.nodes
    seeds = [np.zeros((r, len(xi)))]
    for k in range(1, n_modes + 1):
        s = np.tile(np.sin(k * np.pi * xi / op.grid.length), (r, 1))
        seeds += [s, -s]
    return seeds


def _equilibria(ctx):
    eqs = find_equilibria(ctx.model, ctx.op, _seeds(ctx.op, ctx.cfg["task"]["n_modes"], ctx.model.r))
    if not eqs:
        raise TaskError("no equilibrium found from the Newton seeds")
    return eqs


def _lookup(eqs, label, field):
    for e in eqs:
        if e.label == label:
            return e
    raise ConfigError(field, f"no equilibrium labelled {label!r} (found {', '.join(e.label for e in eqs)})")


def _initial(ctx):
    spec = ctx.cfg["task"]["initial"]
    if spec == "zero":
        return ctx.op.grid.zeros()
    if spec == "attractor":
        return _lookup(_equilibria(ctx), ctx.cfg["task"]["attractor"], "task.attractor").state
    parts = spec.split(":")
    if parts[0] == "sine" and len(parts) == 3:
        try:
            amp, mode = float(parts[1]), int(parts[2])
        except ValueError:
            raise ConfigError("task.initial", f"bad sine spec {spec!r}") from None
        xi = ctx.op.grid.nodes
        return np.tile(amp * np.sin(mode * np.pi * xi / ctx.op.grid.length), (ctx.model.r, 1))
    raise ConfigError("task.initial", f"expected attractor, zero or sine:<amplitude>:<mode>, got {spec!r}")


def _sim_config(cfg, eps=0.0):
    s = cfg["sim"]
    return SimConfig(dt=s["dt"], t_max=s["t_max"], epsilon=eps,
                     blowup_threshold=s["blowup_threshold"], observer_stride=s["observer_stride"])


def _path_summary(traj, grid):
    final = traj.final
    return {"t_final": float(traj.times[-1]), "n_states": int(len(traj.states)),
            "final_sup_norm": float(sup_norm(final)), "final_h_norm": float(h_norm(final, grid))}


# -- tasks ------------------------------------------------------------------------

def task_simulate(ctx):
    x0 = _initial(ctx)
    root = NoiseStream(ctx.cfg["sim"]["seed"])
    rows = []
    for k, eps in enumerate(ctx.cfg["sim"]["epsilon"]):
        traj = integrate_spde(x0, ctx.model, ctx.op, _sim_config(ctx.cfg, eps), split_stream(root, k))
        if ctx.wants("csv"):
            write_path(ctx.path(f"simulate_{k}.csv"), traj)
        rows.append({"epsilon": eps, **_path_summary(traj, ctx.op.grid)})
    ctx.json("simulate.json", {"task": "simulate", "runs": rows})


def task_flow(ctx):
    traj = integrate_flow(_initial(ctx), ctx.model, ctx.op, _sim_config(ctx.cfg))
    if ctx.wants("csv"):
        write_path(ctx.path("flow.csv"), traj)
        sup = sup_norm(traj.states)
        write_matrix(ctx.path("flow_norms.csv"),
                     np.column_stack([traj.times, sup, h_norm(traj.states, ctx.op.grid)]),
                     ["t", "sup_norm", "h_norm"])
    ctx.json("flow.json", {"task": "flow", **_path_summary(traj, ctx.op.grid)})


def task_equilibria(ctx):
    eqs = _equilibria(ctx)
    if ctx.wants("csv"):
        write_matrix(ctx.path("equilibria.csv"), [e.state.ravel() for e in eqs])
    ctx.json("equilibria.json", {"task": "equilibria",
                                 "equilibria": [e.to_dict() for e in eqs],
                                 "failures": len(eqs.failures)})


def _endpoints(ctx):
    eqs = _equilibria(ctx)
    t = ctx.cfg["task"]
    return eqs, _lookup(eqs, t["start"], "task.start"), _lookup(eqs, t["end"], "task.end")


def _domain(ctx, eqs, start):
    from .exit import default_surrogate
    saddles = [e for e in eqs if e.unstable_count == 1]
    if not saddles:
        raise TaskError("a region constraint needs at least one saddle")
    return default_surrogate(start, saddles, ctx.model, ctx.op), saddles


def task_mam(ctx):
    t = ctx.cfg["task"]
    eqs, x, y = _endpoints(ctx)
    region = None
    if t["region"] != "none":
        domain, saddles = _domain(ctx, eqs, x)
        rho = t["rho"][0]
        region = (tilde_region(domain, x.state, y.state, rho) if t["region"] == "tilde"
                  else hat_region(domain, x.state, y.state, saddles, rho))
    prob = MamProblem(x.state, y.state, t["T"], t["n_t"], region, t["penalty_weight"], t["theta"])
    res = mam_minimize(prob, ctx.model, ctx.op,
                       initial_path(x.state, y.state, t["n_t"], ctx.model, ctx.op))
    if ctx.wants("csv"):
        write_path(ctx.path("mam_path.csv"), res.path)
        write_matrix(ctx.path("mam_action.csv"),
                     np.column_stack([res.path.times[:-1], res.report.per_step]), ["t", "action"])
    report = res.report.to_dict()
    report.pop("per_step")
    ctx.json("mam.json", {"task": "mam", "start": x.label, "end": y.label, "T": t["T"],
                          "value": res.value, "converged": res.converged,
                          "violation": res.violation, "iterations": res.iterations,
                          "message": res.message, "action": report})


def task_quasipotential(ctx):
    t = ctx.cfg["task"]
    eqs, x, y = _endpoints(ctx)
    out = {"task": "quasipotential", "start": x.label, "end": y.label}
    if t["region"] == "none":
        res = quasipotential(x.state, y.state, ctx.model, ctx.op, t["schedule"], t["n_t"],
                             theta=t["theta"])
        out.update(value=res.value, records=res.records)
        if ctx.wants("csv"):
            write_table(ctx.path("action_vs_T.csv"), res.records, ["T", "value", "action", "iterations"])
            write_path(ctx.path("quasipotential_path.csv"), res.best_path)
    else:
        domain, saddles = _domain(ctx, eqs, x)
        T = max(t["schedule"])
        sweep = rho_sweep(x.state, y.state, domain, t["rho"], ctx.model, ctx.op, T=T, n_t=t["n_t"],
                          saddles=saddles if t["region"] == "hat" else (),
                          penalty_weight=t["penalty_weight"], theta=t["theta"])
        rows = [{"rho": rho, "value": r.value, "action": r.action, "violation": r.violation,
                 "converged": r.converged} for rho, r in sweep]
        out.update(region=t["region"], T=T, rows=rows)
        if ctx.wants("csv"):
            write_table(ctx.path("value_vs_rho.csv"), rows, ["rho", "value", "action", "violation"])
    ctx.json("quasipotential.json", out)


def _oracle(ctx):
    eqs = _equilibria(ctx)
    t = ctx.cfg["task"]
    x_star = _lookup(eqs, t["attractor"], "task.attractor")
    if x_star.unstable_count != 0:
        raise ConfigError("task.attractor", f"{x_star.label} is not stable")
    saddles = [e for e in eqs if e.unstable_count == 1]
    if not saddles:
        raise TaskError("no saddle found; cannot build the exit filter")
    oracle = build_oracle(x_star, eqs, ctx.model, ctx.op, rho_in=t["rho_in"], t_flow=t["t_flow"],
                          dt_flow=t["dt_flow"], band=t["band"])
    return x_star, saddles, oracle


def _write_reports(ctx, records, saddles):
    t = ctx.cfg["task"]
    try:
        scaling = exit_scaling_report(records, n_boot=t["n_boot"], seed=ctx.cfg["sim"]["seed"])
    except InsufficientData as exc:
        scaling = None
        ctx.json("scaling.json", {"skipped": str(exc)})
    else:
        ctx.json("scaling.json", scaling.to_dict())
        if ctx.wants("csv"):
            write_table(ctx.path("scaling_plot.csv"), scaling.rows,
                        ["epsilon", "mean_tau", "eps_log_mean_tau", "censor_rate"])
    shape = exit_shape_histogram(records, saddles, delta=t["delta"])
    ctx.json("shape.json", shape.to_dict())
    if ctx.wants("csv"):
        rows = [{"epsilon": lv["epsilon"], "fraction_within": lv["fraction_within"],
                 "median_distance": lv["median_distance"]} for lv in shape.levels]
        write_table(ctx.path("shape_plot.csv"), rows, ["epsilon", "fraction_within", "median_distance"])
    return scaling, shape


def _run_exit(ctx):
    s, t = ctx.cfg["sim"], ctx.cfg["task"]
    x_star, saddles, oracle = _oracle(ctx)
    records = run_exit_mc(x_star, s["epsilon"], s["n_samples"], oracle, ctx.model, ctx.op,
                          SimConfig(dt=s["dt"], t_max=s["t_max"]), NoiseStream(s["seed"]),
                          saddles=saddles, checkpoint_stride=t["checkpoint_stride"],
                          chunk_size=t["chunk_size"], workers=ctx.workers)
    write_records(ctx.out, records)
    ctx.written += ["records.csv", "records_shapes.csv"]
    return records, saddles


def task_exit_mc(ctx):
    records, saddles = _run_exit(ctx)
    _write_reports(ctx, records, saddles)


def _input_records(ctx):
    src = ctx.cfg["task"]["input"]
    path = Path(src) / "records.csv"
    if not path.is_file():
        raise ConfigError("task.input", f"{path} does not exist")
    manifest = Path(src) / "manifest.json"
    if manifest.is_file():
        # reports describe the records, so they carry the hash of the run that made them
        ctx.source_hash = json.loads(manifest.read_text()).get("config_hash")
    return read_records(path, ctx.op.grid.shape)


def task_exit_shape(ctx):
    if ctx.cfg["task"]["input"]:
        records = _input_records(ctx)
        saddles = [e for e in _equilibria(ctx) if e.unstable_count == 1]
    else:
        records, saddles = _run_exit(ctx)
    shape = exit_shape_histogram(records, saddles, delta=ctx.cfg["task"]["delta"])
    ctx.json("shape.json", shape.to_dict())


def task_report(ctx):
    if not ctx.cfg["task"]["input"]:
        raise ConfigError("task.input", "report needs an exit-mc output directory")
    records = _input_records(ctx)
    saddles = [e for e in _equilibria(ctx) if e.unstable_count == 1]
    _write_reports(ctx, records, saddles)


def task_validate(ctx):
    t = ctx.cfg["task"]
    report = validate_assumptions(ctx.model, t["sample_radius"], t["n_validate"],
                                  seed=ctx.cfg["sim"]["seed"])
    ctx.json("validation.json", report.to_dict())
    if not report.passed:
        failed = [c.name for c in report.checks if not c.passed]
        print(f"warning: assumption checks failed: {', '.join(failed)}", file=sys.stderr)


TASKS = {
    "simulate": task_simulate, "flow": task_flow, "equilibria": task_equilibria,
    "mam": task_mam, "quasipotential": task_quasipotential, "exit-mc": task_exit_mc,
    "exit-shape": task_exit_shape, "validate": task_validate, "report": task_report,
}


# -- entry points ----------------------------------------------------------------------

def _workers(flag):
    if flag is not None:
        value, field = flag, "--workers"
    elif os.environ.get(ENV_WORKERS):
        value, field = os.environ[ENV_WORKERS], ENV_WORKERS
    else:
        return 1
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(field, f"expected an integer, got {value!r}") from None
    if n < 1:
        raise ConfigError(field, "must be at least 1")
    return n


def execute(cfg, output=None, workers=None):
    """Run a validated config; returns the output directory.  Raises on failure."""
    out = Path(output or os.environ.get(ENV_OUTPUT) or cfg["output"]["directory"])
    n_workers = _workers(workers)
    model, op = build_model(cfg)
    out.mkdir(parents=True, exist_ok=True)
    ctx = Context(cfg, model, op, out, n_workers, [])
    start = time.perf_counter()
    try:
        TASKS[cfg.task](ctx)
    except (ConfigError, TaskError):
        raise
    except SpdeExitError as exc:
        raise TaskError(f"{cfg.task}: {type(exc).__name__}: {exc}") from exc
    wall = time.perf_counter() - start
    write_json(out / "manifest.json", {
        "task": cfg.task, "config_hash": cfg.config_hash, "code_version": __version__,
        "wall_time_s": wall, "timestamp": datetime.now(timezone.utc).isoformat(),
        "workers": n_workers, "config": json.loads(cfg.canonical()),
        "outputs": sorted(set(ctx.written)),
    })
    return out


def run(config_path, output=None, workers=None):
    """Load, validate and run ``config_path``; returns the exit status."""
    try:
        cfg = load_config(config_path)
        out = execute(cfg, output, workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return CONFIG_ERROR
    except TaskError as exc:
        print(f"task error: {exc}", file=sys.stderr)
        return TASK_ERROR
    print(f"{cfg.task}: outputs in {out}")
    return OK


def describe(task_name):
    """Documentation text for ``task_name``: purpose, target quantity and its config keys."""
    tasks = SCHEMA["tasks"]
    if task_name not in tasks:
        raise UnknownTask(f"unknown task {task_name!r}; valid tasks: {', '.join(tasks)}")
    info = tasks[task_name]
    lines = [f"{task_name}: {info['help']}", f"target: {info['target']}", "", "keys:"]
    for key in ["task.name"] + info["keys"] + ["output.directory", "output.formats"]:
        section, name = key.split(".")
        spec = SCHEMA["sections"][section][name]
        default = "required" if spec.get("required") else f"default {spec['default']}"
        lines.append(f"  {key:<24} {spec['type']:<10} {default}; {spec['help']}")
    lines.append("")
    lines.append("model.* and grid.* keys apply to every task.")
    return "\n".join(lines)


def main(argv=None):
    parser = argparse.ArgumentParser(prog="spde-exit", description=__doc__.split("\n\n")[0].strip())
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--workers", type=int, default=None, help=f"process cap (or ${ENV_WORKERS})")
    p_run.add_argument("--output", default=None, help=f"output directory (or ${ENV_OUTPUT})")
    p_desc = sub.add_parser("describe", help="document a task")
    p_desc.add_argument("task")
    sub.add_parser("version", help="print the version")
    args = parser.parse_args(argv)
    if args.command == "version":
        print(__version__)
        return OK
    if args.command == "describe":
        try:
            print(describe(args.task))
        except UnknownTask as exc:
            print(exc, file=sys.stderr)
            return CONFIG_ERROR
        return OK
    return run(args.config, args.output, args.workers)


if __name__ == "__main__":
    sys.exit(main())
