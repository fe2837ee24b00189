"""Command-line interface: ``drlate {estimate,simulate,test}``.

Settings come from (lowest to highest priority) built-in defaults, a TOML
config file given by ``--config``, and command-line flags.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import CovariateTransform, Roles, load_dataset
from .errors import ConfigError, DrlateError
from .estimators import METHODS, EstimatorSpec, Models
from .hausman import FLAVORS, flavor_test
from .inference import analytic_se, bootstrap_se
from .propensity import overlap_report
from .qmle import LefFamily
from .simulate import ESTIMATORS, SCENARIOS, DgpSpec, run_monte_carlo, tomllib

SCHEMA_VERSION = 1

DEFAULTS = {
    "data": None,
    "outcome": None,
    "treatment": None,
    "instrument": None,
    "covariates": "",
    "ps_covariates": None,
    "treatment_covariates": None,
    "cluster": None,
    "bound": None,
    "family": "gaussian",
    "method": "dr_late",
    "se": None,  # analytic for estimate, paired bootstrap for test
    "boot_reps": 999,
    "seed": 0,
    "one_sided": "none",
    "overlap_eps": 0.01,
    "out": None,
    "format": "text",
    # test
    "flavor": "latt_vs_att",
    "override_one_sided": False,
    # simulate
    "preset": "continuous",
    "n": None,
    "reps": 1000,
    "estimators": ",".join(ESTIMATORS),
    "scenarios": ",".join(SCENARIOS),
}

ONE_SIDED = {
    "none": (False, False),
    "no-always-takers": (True, False),
    "no-never-takers": (False, True),
}


@dataclass
class RunConfig:
    command: str
    values: dict = field(default_factory=dict)
    dgp: dict = field(default_factory=dict)

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    def echo(self) -> dict:
        out = {"command": self.command, **self.values}
        if self.command == "simulate":
            out["dgp"] = dict(self.dgp)
        return out


def _flatten_config(cfg: dict) -> tuple[dict, dict]:
    flat, dgp = {}, {}
    for key, val in cfg.items():
        if key == "roles" and isinstance(val, dict):
            for k, v in val.items():
                flat[k] = v
        elif key == "dgp" and isinstance(val, dict):
            dgp = dict(val)
        elif isinstance(val, dict):
            for k, v in val.items():
                flat[k] = v
        else:
            flat[key.replace("-", "_")] = val
    return flat, dgp


def build_config(command: str, args: argparse.Namespace) -> RunConfig:
    values = dict(DEFAULTS)
    dgp = {}
    if args.config:
        try:
            with open(args.config, "rb") as fh:
                raw = tomllib.load(fh)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"config: cannot read {args.config}: {exc}") from None
        flat, dgp = _flatten_config(raw)
        unknown = sorted(set(flat) - set(DEFAULTS) - {"command"})
        if unknown:
            raise ConfigError(f"config: unknown keys {unknown}")
        values.update(flat)
    for key in DEFAULTS:
        v = getattr(args, key, None)
        if v is not None and v is not False:
            values[key] = v
    if isinstance(values["covariates"], list):
        values["covariates"] = ",".join(values["covariates"])
    cfg = RunConfig(command, values, dgp)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig):
    v = cfg.values
    if v["one_sided"] not in ONE_SIDED:
        raise ConfigError(f"config.one_sided: expected one of {sorted(ONE_SIDED)}, got {v['one_sided']!r}")
    if v["se"] is None:
        v["se"] = "bootstrap" if cfg.command == "test" else "analytic"
    if v["se"] not in ("analytic", "bootstrap", "joint_gmm"):
        raise ConfigError(f"config.se: unknown variance method {v['se']!r}")
    if v["format"] not in ("text", "json"):
        raise ConfigError("config.format: expected 'text' or 'json'")
    if int(v["boot_reps"]) < 2:
        raise ConfigError("config.boot_reps: must be at least 2")
    if cfg.command in ("estimate", "test"):
        for key in ("data", "outcome", "treatment", "instrument"):
            if not v[key]:
                raise ConfigError(f"config.{key}: required for '{cfg.command}'")
    if cfg.command == "estimate":
        for m in _split(v["method"]):
            if m.lower() not in METHODS:
                raise ConfigError(f"config.method: unknown method {m!r}")
        if v["se"] == "joint_gmm":
            raise ConfigError("config.se: joint_gmm applies to 'test' only")
    if cfg.command == "test" and v["se"] == "analytic":
        v["se"] = "joint_gmm"
    if cfg.command == "test" and v["flavor"] not in FLAVORS:
        raise ConfigError(f"config.flavor: expected one of {sorted(FLAVORS)}")
    if cfg.command == "simulate":
        for e in _split(v["estimators"]):
            if e not in ESTIMATORS:
                raise ConfigError(f"config.estimators: unknown estimator {e!r}")
        for s in _split(v["scenarios"]):
            if s not in SCENARIOS:
                raise ConfigError(f"config.scenarios: unknown scenario {s!r}")


def _split(text) -> list[str]:
    if isinstance(text, (list, tuple)):
        return [str(t) for t in text]
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _models(v: dict) -> Models:
    fam = LefFamily.parse(v["family"])
    cov = CovariateTransform.parse(v["covariates"] or "")
    ps = None if v["ps_covariates"] is None else CovariateTransform.parse(v["ps_covariates"])
    tr = None if v["treatment_covariates"] is None else CovariateTransform.parse(v["treatment_covariates"])
    return Models.shared(cov, ps, tr, fam)


def _dataset(v: dict):
    roles = Roles(v["outcome"], v["treatment"], v["instrument"], tuple(_covariate_columns(v)),
                  v["cluster"], v["bound"])
    return load_dataset(v["data"], roles)


def _covariate_columns(v: dict) -> list[str]:
    cols = []
    for key in ("covariates", "ps_covariates", "treatment_covariates"):
        if v.get(key):
            cols += [t.column for t in CovariateTransform.parse(v[key]).terms]
    return list(dict.fromkeys(cols))


def _fmt(x) -> str:
    if x is None:
        return "-"
    return f"{x:.4g}"


def cmd_estimate(cfg: RunConfig) -> dict:
    v = cfg.values
    d = _dataset(v)
    models = _models(v)
    pi0, pi1 = ONE_SIDED[v["one_sided"]]
    results = []
    for m in _split(v["method"]):
        spec = EstimatorSpec(m, models, known_pi0_zero=pi0, known_pi1_one=pi1)
        res = spec(d)
        if v["se"] == "analytic":
            res = analytic_se(res, d)
        else:
            b = bootstrap_se(d, spec, int(v["boot_reps"]), int(v["seed"]))
            res = res.with_se(b.se, se_method="bootstrap", bootstrap=b.to_dict())
        ps = getattr(res.nuisances, "ps", None)
        if ps is not None:
            mode = "latt" if spec.method in ("dr_latt", "dr_att") else "late"
            indicator = d.z if ps.target == "instrument" else d.w
            rep = overlap_report(ps, indicator, float(v["overlap_eps"]), mode)
            res.diagnostics["overlap"] = rep.to_dict()
        results.append(res.to_dict())
    return {"results": results}


def text_estimate(out: dict) -> str:
    lines = [f"{'method':<10}{'estimand':<9}{'estimate':>12}{'se':>12}{'ci95 low':>12}{'ci95 high':>12}"]
    for r in out["results"]:
        lo, hi = r["ci95"] if r["ci95"] else (None, None)
        lines.append(f"{r['method']:<10}{r['estimand']:<9}{_fmt(r['point']):>12}{_fmt(r['se']):>12}"
                     f"{_fmt(lo):>12}{_fmt(hi):>12}")
    return "\n".join(lines)


def cmd_test(cfg: RunConfig) -> dict:
    v = cfg.values
    d = _dataset(v)
    models = _models(v)
    pi0, _ = ONE_SIDED[v["one_sided"]]
    res = flavor_test(d, v["flavor"], models, v["se"], known_pi0_zero=pi0,
                      override=bool(v["override_one_sided"]), B=int(v["boot_reps"]), seed=int(v["seed"]))
    return {"flavor": v["flavor"], "comparison": res.to_dict()}


def text_test(out: dict) -> str:
    c = out["comparison"]
    return "\n".join([
        f"{out['flavor']}: {c['left']['estimand']} ({c['left']['method']}) vs "
        f"{c['right']['estimand']} ({c['right']['method']})",
        f"{'left':>12}{'right':>12}{'diff':>12}{'se':>12}{'t':>10}{'p':>10}",
        f"{_fmt(c['left']['point']):>12}{_fmt(c['right']['point']):>12}{_fmt(c['diff']):>12}"
        f"{_fmt(c['se_diff']):>12}{_fmt(c['t_stat']):>10}{_fmt(c['p_value']):>10}",
        f"se method: {c['method_se']}, failed replicates: {c['n_failed']}",
    ])


def cmd_simulate(cfg: RunConfig) -> dict:
    v = cfg.values
    dgp = {"preset": v["preset"], **cfg.dgp}
    if v["n"] is not None:
        dgp["n"] = int(v["n"])
    spec = DgpSpec.from_mapping(dgp)
    pi0 = v["one_sided"] != "no-never-takers"
    report = run_monte_carlo(spec, _split(v["estimators"]), _split(v["scenarios"]), int(v["reps"]),
                             int(v["seed"]), known_pi0_zero=pi0)
    if v["out"]:
        report.to_csv(v["out"])
    return {"report": report.to_dict(), "_text": report.to_text()}


COMMANDS = {"estimate": cmd_estimate, "test": cmd_test, "simulate": cmd_simulate}


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="TOML config file; command-line flags take precedence")
    p.add_argument("--data", help="CSV file with a header row")
    p.add_argument("--outcome")
    p.add_argument("--treatment")
    p.add_argument("--instrument")
    p.add_argument("--covariates", help="comma-separated terms, e.g. 'age,age^2,(age-25)^2,income'")
    p.add_argument("--ps-covariates", dest="ps_covariates", help="terms for the propensity score")
    p.add_argument("--treatment-covariates", dest="treatment_covariates",
                   help="terms for the treatment regressions")
    p.add_argument("--cluster", help="cluster id column")
    p.add_argument("--bound", help="per-row bound column for a binomial outcome")
    p.add_argument("--family", help="gaussian, bernoulli, poisson or binomial:<column>")
    p.add_argument("--se", choices=["analytic", "bootstrap", "joint_gmm"])
    p.add_argument("--boot-reps", dest="boot_reps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--one-sided", dest="one_sided", choices=sorted(ONE_SIDED))
    p.add_argument("--overlap-eps", dest="overlap_eps", type=float)
    p.add_argument("--out", help="write machine-readable output here")
    p.add_argument("--format", choices=["text", "json"], help="stdout format")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drlate", description="Doubly robust LATE estimation")
    sub = parser.add_subparsers(dest="command", required=True)
    est = sub.add_parser("estimate", help="point estimates and standard errors")
    _add_common(est)
    est.add_argument("--method", help=f"comma-separated, from {sorted(METHODS)}")
    tst = sub.add_parser("test", help="Hausman-style comparison of two estimands")
    _add_common(tst)
    tst.add_argument("--flavor", choices=sorted(FLAVORS))
    tst.add_argument("--override-one-sided", dest="override_one_sided", action="store_true")
    sim = sub.add_parser("simulate", help="Monte Carlo study")
    _add_common(sim)
    sim.add_argument("--preset", choices=["continuous", "binary"])
    sim.add_argument("--n", type=int)
    sim.add_argument("--reps", type=int)
    sim.add_argument("--estimators")
    sim.add_argument("--scenarios")
    return parser


def run(cfg: RunConfig) -> dict:
    out = COMMANDS[cfg.command](cfg)
    text = out.pop("_text", None)
    record = {"schema_version": SCHEMA_VERSION, "command": cfg.command, "config": cfg.echo(), **out}
    return record if text is None else {**record, "_text": text}


def _to_json(record: dict) -> str:
    def default(o):
        if isinstance(o, np.generic):
            return o.item()
        if isinstance(o, np.ndarray):
            return o.tolist()
        raise TypeError(type(o).__name__)

    return json.dumps(record, indent=2, default=default, allow_nan=True) + "\n"


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        cfg = build_config(args.command, args)
        record = run(cfg)
    except (DrlateError, ValueError, OSError) as exc:
        print(f"drlate {args.command}: {type(exc).__name__} in {_provenance(exc)}: {exc}", file=sys.stderr)
        return 2
    text = record.pop("_text", None)
    blob = _to_json(record)
    if record["command"] != "simulate" and record["config"].get("out"):
        Path(record["config"]["out"]).write_text(blob, encoding="utf-8")
    if cfg.values["format"] == "json":
        sys.stdout.write(blob)
    elif args.command == "estimate":
        print(text_estimate(record))
    elif args.command == "test":
        print(text_test(record))
    else:
        print(text)
    return 0


def _provenance(exc: BaseException) -> str:
    """Name of the innermost package module the error passed through."""
    where = "cli"
    tb = exc.__traceback__
    while tb is not None:
        mod = tb.tb_frame.f_globals.get("__name__", "")
        if mod.startswith("drlate."):
            where = mod.split(".", 1)[1]
        tb = tb.tb_next
    return where


if __name__ == "__main__":
    sys.exit(main())
