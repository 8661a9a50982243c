"""Command-line interface: ``rebar {simulate,analyze,validate,bound,generate}``.

Settings come from an optional ``--config`` file (TOML, or the JSON
manifest of an earlier run) and are overridden by explicit flags.

Exit codes: 0 success, 2 validation failure, 3 infeasible match,
4 leakage guard.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import EmptyRemnantError, RebarAnalysis
from .bounds import bias_bound
from .data import DatasetSchema, DataValidationError, LeakageError, load_dataset, write_dataset
from .diagnostics import proximal_validation
from .estimators import RemnantPrediction
from .matching import InfeasibleMatchError, MatchAssignment, MatchSpec, read_match_csv, relax_match, \
    write_match_csv
from .propensity import fit_propensity
from .simulation import SimCell, SimConfig, SimConfigError, gen_linear, gen_nonlinear, run_study

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

EXIT_OK, EXIT_INVALID, EXIT_INFEASIBLE, EXIT_LEAKAGE = 0, 2, 3, 4


class ConfigError(ValueError):
    """Bad configuration value; the message names the field."""


def _csv_list(text):
    if text is None:
        return None
    if isinstance(text, (list, tuple)):
        return [str(t).strip() for t in text]
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _float_list(text, field):
    try:
        return [float(v) for v in _csv_list(text)]
    except ValueError:
        raise ConfigError(f"{field}: expected comma-separated numbers, got {text!r}") from None


def _load_config(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config: file not found: {p}")
    try:
        if p.suffix == ".json":
            raw = json.loads(p.read_text())
            return dict(raw.get("config", raw))
        with open(p, "rb") as fh:
            return tomllib.load(fh)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"config: cannot parse {p}: {exc}") from None


def _merge(args, command, keys):
    """File values, then the command's own table, then explicit flags."""
    cfg = _load_config(args.config)
    section = cfg.pop(command, {}) if isinstance(cfg.get(command), dict) else {}
    for other in ("simulate", "analyze", "validate", "bound", "generate"):
        cfg.pop(other, None)
    cfg.update(section)
    unknown = set(cfg) - set(keys)
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown configuration key")
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out, command, config, outputs, inputs=()):
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {name: _sha256(out / name) for name in outputs},
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)


def _out_dir(cfg):
    out = Path(cfg.get("out_dir") or "rebar-out")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- simulate

SIM_KEYS = tuple(f.name for f in dataclasses.fields(SimConfig)) + ("folds", "out_dir",
                                                                    "full_scale")


def _sim_config(cfg) -> SimConfig:
    cfg = dict(cfg)
    cfg.pop("out_dir", None)
    full = bool(cfg.pop("full_scale", False))
    if "folds" in cfg:
        cfg["k_folds"] = cfg.pop("folds")
    for key in ("kappa", "rho"):
        if key in cfg and not isinstance(cfg[key], (list, tuple, int, float)):
            cfg[key] = _float_list(cfg[key], key)
    for key in ("learners", "estimator_set"):
        if key in cfg and cfg[key] is not None:
            cfg[key] = tuple(_csv_list(cfg[key]))
    return SimConfig.full_scale(**cfg) if full else SimConfig(**cfg)


def cmd_simulate(args) -> int:
    cfg = _merge(args, "simulate", SIM_KEYS)
    sim = _sim_config(cfg)
    out = _out_dir(cfg)

    def progress(i, total):
        if args.verbose:
            print(f"\r{i}/{total} replications", end="", file=sys.stderr)

    results, summary = run_study(sim, out_dir=out, progress=progress)
    if args.verbose:
        print(file=sys.stderr)
    # replace the library manifest with one that also hashes the outputs
    _write_manifest(out, "simulate", sim.to_dict(), ["results.csv", "summary.csv"])
    cols = [c for c in ("kappa", "rho", "design", "estimator", "n_ok", "bias", "mcse_bias", "rmse",
                        "mean_cv_r2") if c in summary]
    print(summary[cols].to_string(index=False, float_format=lambda v: f"{v:.3f}"))
    failed = int((results["status"] != "ok").sum())
    if failed:
        print(f"warning: {failed} estimator rows failed (see results.csv)", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------- analyze

DATA_KEYS = ("data", "treatment_col", "outcome_col", "id_col", "covariates", "categorical",
             "missing", "match_covariates")
ANALYZE_KEYS = DATA_KEYS + ("method", "max_controls", "caliper", "bins", "learners", "folds",
                            "perms", "relax_max_controls", "seed", "out_dir", "threads", "level",
                            "predictions", "assumed_mse", "gamma", "interact_propensity")


def _dataset(cfg):
    for key in ("data", "treatment_col", "outcome_col", "match_covariates"):
        if not cfg.get(key):
            raise ConfigError(f"{key}: required")
    schema = DatasetSchema(
        treatment=cfg["treatment_col"], outcome=cfg["outcome_col"], id=cfg.get("id_col"),
        covariates=tuple(_csv_list(cfg["covariates"])) if cfg.get("covariates") else None,
        categorical=tuple(_csv_list(cfg.get("categorical")) or ()),
        missing=cfg.get("missing") or "reject",
    )
    ds = load_dataset(cfg["data"], schema)
    match_cov = _csv_list(cfg["match_covariates"])
    unknown = [c for c in match_cov if c not in ds.covariate_names]
    if unknown:
        raise ConfigError(f"match_covariates: not among the covariates: {', '.join(unknown)}")
    return ds, match_cov


def _method(cfg):
    method = cfg.get("method") or "psm"
    if method not in ("psm", "nn", "cem"):
        raise ConfigError(f"method: must be psm, nn or cem, got {method!r}")
    return method


def _library(cfg, threads):
    from .learners import RandomForest

    names = _csv_list(cfg.get("learners")) or ["lasso", "random_forest"]
    return tuple(RandomForest(n_jobs=threads) if n == "random_forest" else n for n in names), names


def _read_predictions(path, ds):
    import pandas as pd

    df = pd.read_csv(path, float_precision="round_trip")
    for col in ("unit_id", "yhat", "trained"):
        if col not in df:
            raise ConfigError(f"predictions: missing column {col!r}")
    ids = [str(u) for u in ds.unit_ids]
    pos = {u: i for i, u in enumerate(ids)}
    idx = np.array([pos[str(u)] for u in df["unit_id"]])
    if len(set(idx.tolist())) != ds.n:
        raise ConfigError("predictions: need exactly one row per unit")
    values = np.empty(ds.n)
    values[idx] = df["yhat"].to_numpy(dtype=float)
    trained = np.sort(idx[df["trained"].to_numpy(dtype=int) == 1])
    return RemnantPrediction(values, trained, learner="external")


def cmd_analyze(args) -> int:
    cfg = _merge(args, "analyze", ANALYZE_KEYS)
    ds, match_cov = _dataset(cfg)
    method = _method(cfg)
    threads = int(cfg.get("threads") or 1)
    library, names = _library(cfg, threads)
    perms = cfg.get("perms", 999)
    perms = perms if perms == "exact" else int(perms)
    analysis = RebarAnalysis(
        match_covariates=match_cov, method=method,
        max_controls=int(cfg.get("max_controls") or 1),
        caliper=None if cfg.get("caliper") is None else float(cfg["caliper"]),
        bins=int(cfg.get("bins") or 5), learners=library, folds=int(cfg.get("folds") or 5),
        n_perms=perms,
        relax_max_controls=None if cfg.get("relax_max_controls") is None
        else int(cfg["relax_max_controls"]),
        level=float(cfg.get("level") or 0.95),
        interact_propensity=bool(cfg.get("interact_propensity", False)),
        assumed_mse=None if cfg.get("assumed_mse") is None
        else _float_list(cfg["assumed_mse"], "assumed_mse"),
        gamma=tuple(_float_list(cfg["gamma"], "gamma")) if cfg.get("gamma") else (1.5, 3.0, 6.0),
        random_state=int(cfg.get("seed") or 0),
    )
    preds = _read_predictions(cfg["predictions"], ds) if cfg.get("predictions") else None
    analysis.fit_dataset(ds, predictions=preds)

    out = _out_dir(cfg)
    report = analysis.to_dict()
    report["bounds"] = [b.to_dict() for b in analysis.bounds_]
    report["learners"] = names
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, default=_json_default)
    table = analysis.summary_table()
    (out / "results.txt").write_text(table + "\n")
    with open(out / "results.csv", "w") as fh:
        fh.write("method,estimate,se,p_value,ci_lo,ci_hi\n")
        for r in analysis.reports_:
            lo, hi = r.ci if r.ci else ("", "")
            fh.write(f"{r.method},{r.point!r},{r.se!r},{'' if r.p_value is None else r.p_value!r},"
                     f"{lo!r},{hi!r}\n".replace("''", ""))
    analysis.balance_.to_csv(out / "balance.csv")
    (out / "balance.txt").write_text(analysis.balance_.to_text() + "\n")
    write_match_csv(analysis.match_, out / "match.csv", ds.unit_ids)
    outputs = ["report.json", "results.txt", "results.csv", "balance.csv", "balance.txt",
               "match.csv"]
    inputs = [cfg["data"]] + ([cfg["predictions"]] if cfg.get("predictions") else [])
    _write_manifest(out, "analyze", _abs_paths(cfg), outputs, inputs)

    print(table)
    print()
    r2 = "n/a" if not np.isfinite(analysis.cv_r2_) else f"{analysis.cv_r2_:.2f}"
    print(f"remnant CV R^2: {r2}   yhat balance p: {analysis.yhat_balance_[1]:.2f}")
    if analysis.proximal_ is not None and analysis.proximal_.flagged:
        print("warning: proximal validation flag raised (predictions extrapolate poorly "
              "toward the matched sample)")
    if analysis.match_.estimand_changed:
        print(f"warning: {analysis.match_.dropped_treated.size} treated units dropped; the "
              "estimand is the effect on the matched treated")
    return EXIT_OK


def _abs_paths(cfg):
    out = dict(cfg)
    for key in ("data", "predictions", "out_dir"):
        if out.get(key):
            out[key] = str(Path(out[key]).resolve())
    return out


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    return str(o)


# ---------------------------------------------------------------- validate

VALIDATE_KEYS = DATA_KEYS + ("max_controls", "caliper", "learners", "folds", "relax_max_controls",
                             "seed", "out_dir", "threads", "flag_ratio")


def cmd_validate(args) -> int:
    cfg = _merge(args, "validate", VALIDATE_KEYS)
    ds, match_cov = _dataset(cfg)
    if cfg.get("relax_max_controls") is None:
        raise ConfigError("relax_max_controls: required for proximal validation")
    threads = int(cfg.get("threads") or 1)
    library, names = _library(cfg, threads)
    cap = int(cfg.get("max_controls") or 1)
    caliper = None if cfg.get("caliper") is None else float(cfg["caliper"])
    spec = MatchSpec("optimal_pair", caliper=caliper) if cap == 1 else \
        MatchSpec("optimal_ratio", max_controls_per_treated=cap, caliper=caliper)
    relaxed = MatchSpec("optimal_ratio", max_controls_per_treated=int(cfg["relax_max_controls"]),
                        caliper=caliper)
    logits = fit_propensity(ds, match_cov).logits
    m, m_big = relax_match(logits, ds.Z, spec, relaxed)
    pv = proximal_validation(ds, m, m_big, library, int(cfg.get("folds") or 5),
                             int(cfg.get("seed") or 0),
                             flag_ratio=float(cfg.get("flag_ratio") or 1.25))
    out = _out_dir(cfg)
    with open(out / "validation.json", "w") as fh:
        json.dump({**pv.to_dict(), "library": names}, fh, indent=2)
    _write_manifest(out, "validate", _abs_paths(cfg), ["validation.json"], [cfg["data"]])
    print(f"distal n={pv.n_distal}  proximal n={pv.n_proximal}")
    print(f"remnant CV   MSE={pv.cv_mse:.3f}  R^2={pv.cv_r2:.3f}")
    print(f"proximal     MSE={pv.pv_mse:.3f}  R^2={pv.pv_r2:.3f}")
    if pv.flagged:
        print(f"warning: proximal MSE exceeds {pv.flag_ratio:g} x CV MSE")
    return EXIT_OK


# ---------------------------------------------------------------- bound

BOUND_KEYS = ("design", "match", "data", "treatment_col", "id_col", "mse", "gamma", "sd_yc",
              "out_dir")


def _parse_design(tokens):
    """``["1:1x20", "2:3"]`` -> a match with 20 pairs and one 2:3 set."""
    sets = []
    for tok in _csv_list(tokens):
        body, _, reps = tok.partition("x")
        try:
            a, b = (int(v) for v in body.split(":"))
            k = int(reps) if reps else 1
        except ValueError:
            raise ConfigError(f"design: cannot parse {tok!r} (use nT:nC or nT:nCxK)") from None
        if a < 1 or b < 1 or k < 1:
            raise ConfigError(f"design: counts must be positive in {tok!r}")
        sets += [(a, b)] * k
    if not sets:
        raise ConfigError("design: empty")
    z, set_ids = [], []
    for s, (a, b) in enumerate(sets):
        z += [1] * a + [0] * b
        set_ids += [s] * (a + b)
    z = np.array(z)
    return MatchAssignment(z=z, units=np.arange(z.size), set_ids=np.array(set_ids))


def cmd_bound(args) -> int:
    cfg = _merge(args, "bound", BOUND_KEYS)
    if cfg.get("design"):
        m = _parse_design(cfg["design"])
    elif cfg.get("match") and cfg.get("data") and cfg.get("treatment_col"):
        import pandas as pd

        df = pd.read_csv(cfg["data"])
        if cfg["treatment_col"] not in df:
            raise ConfigError(f"treatment_col: column {cfg['treatment_col']!r} not in data")
        ids = df[cfg["id_col"]].astype(str).tolist() if cfg.get("id_col") else None
        m = read_match_csv(cfg["match"], df[cfg["treatment_col"]].to_numpy(), ids)
    else:
        raise ConfigError("design: give --design, or --match with --data and --treatment-col")
    if cfg.get("mse") is None:
        raise ConfigError("mse: required (assumed matched-sample prediction MSE values)")
    mses = _float_list(cfg["mse"], "mse")
    gammas = _float_list(cfg["gamma"], "gamma") if cfg.get("gamma") else [None]
    sd = None if cfg.get("sd_yc") is None else float(cfg["sd_yc"])
    rows = []
    for g in gammas:
        if g is not None and g < 1:
            raise ConfigError("gamma: must be >= 1")
        for v in mses:
            if v < 0:
                raise ConfigError("mse: must be nonnegative")
            rows.append(bias_bound(m, v, sd_yc=sd, gamma=g, label="assumption-based").to_dict())
    print(f"{'mse':>8}  {'gamma':>6}  {'multiplier':>10}  {'bound':>8}")
    for r in rows:
        g = "" if r["gamma"] is None else f"{r['gamma']:g}"
        print(f"{r['mse_input']:>8.4g}  {g:>6}  {r['multiplier']:>10.3f}  {r['bound_abs_bias']:>8.4f}")
    if cfg.get("out_dir"):
        out = _out_dir(cfg)
        with open(out / "bounds.json", "w") as fh:
            json.dump(rows, fh, indent=2)
        inputs = [p for p in (cfg.get("match"), cfg.get("data")) if p]
        _write_manifest(out, "bound", _abs_paths(cfg), ["bounds.json"], inputs)
    return EXIT_OK


# ---------------------------------------------------------------- generate

GENERATE_KEYS = ("n", "p", "target_n_t", "kappa", "rho", "beta_rate", "scenario", "seed", "out")


def cmd_generate(args) -> int:
    cfg = _merge(args, "generate", GENERATE_KEYS)
    if not cfg.get("out"):
        raise ConfigError("out: required")
    sim = SimConfig(n=int(cfg.get("n", 400)), p=int(cfg.get("p", 200)),
                    target_n_t=int(cfg.get("target_n_t", 50)),
                    kappa=float(cfg.get("kappa", 0.0)), rho=float(cfg.get("rho", 0.0)),
                    beta_rate=float(cfg.get("beta_rate", 5.0)),
                    scenario=cfg.get("scenario", "linear"), seed=int(cfg.get("seed", 0)))
    cell: SimCell = sim.cells()[0]
    gen = gen_linear if sim.scenario == "linear" else gen_nonlinear
    ds, _ = gen(cell, np.random.default_rng(sim.seed))
    write_dataset(ds, cfg["out"])
    print(f"wrote {ds.n} units ({ds.n_treated} treated, {ds.p} covariates) to {cfg['out']}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rebar", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"rebar {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML config file or a previous run's manifest.json")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir", dest="out_dir")
        p.add_argument("--threads", type=int)

    def data_flags(p):
        p.add_argument("--data")
        p.add_argument("--treatment-col", dest="treatment_col")
        p.add_argument("--outcome-col", dest="outcome_col")
        p.add_argument("--id-col", dest="id_col")
        p.add_argument("--covariates", help="comma-separated covariate columns (default: all)")
        p.add_argument("--categorical", help="comma-separated columns to one-hot code")
        p.add_argument("--missing", choices=["reject", "impute"])
        p.add_argument("--match-covariates", dest="match_covariates")
        p.add_argument("--learners", help="comma-separated learner names")
        p.add_argument("--folds", type=int)
        p.add_argument("--max-controls", dest="max_controls", type=int)
        p.add_argument("--caliper", type=float)
        p.add_argument("--relax-max-controls", dest="relax_max_controls", type=int)

    s = sub.add_parser("simulate", help="run the Monte-Carlo study")
    common(s)
    s.add_argument("--n", type=int)
    s.add_argument("--p", type=int)
    s.add_argument("--target-n-t", dest="target_n_t", type=int)
    s.add_argument("--kappa", help="comma-separated grid")
    s.add_argument("--rho", help="comma-separated grid")
    s.add_argument("--beta-rate", dest="beta_rate", type=float)
    s.add_argument("--n-runs", dest="n_runs", type=int)
    s.add_argument("--scenario", choices=["linear", "nonlinear"])
    s.add_argument("--estimator-set", dest="estimator_set")
    s.add_argument("--learners")
    s.add_argument("--folds", type=int)
    s.add_argument("--rf-trees", dest="rf_trees", type=int)
    s.add_argument("--cem-bins", dest="cem_bins", type=int)
    s.add_argument("--relax-max-controls", dest="relax_max_controls", type=int)
    s.add_argument("--full-scale", dest="full_scale", action="store_const", const=True)
    s.add_argument("-v", "--verbose", action="store_true")
    s.set_defaults(func=cmd_simulate)

    a = sub.add_parser("analyze", help="matched analysis with rebar")
    common(a)
    data_flags(a)
    a.add_argument("--method", choices=["psm", "nn", "cem"])
    a.add_argument("--bins", type=int)
    a.add_argument("--perms")
    a.add_argument("--level", type=float)
    a.add_argument("--predictions", help="CSV with unit_id, yhat, trained (0/1)")
    a.add_argument("--assumed-mse", dest="assumed_mse")
    a.add_argument("--gamma")
    a.add_argument("--interact-propensity", dest="interact_propensity", action="store_const",
                   const=True)
    a.set_defaults(func=cmd_analyze)

    v = sub.add_parser("validate", help="proximal validation of the outcome model")
    common(v)
    data_flags(v)
    v.add_argument("--flag-ratio", dest="flag_ratio", type=float)
    v.set_defaults(func=cmd_validate)

    b = sub.add_parser("bound", help="bias bounds under assumed prediction error")
    b.add_argument("--config")
    b.add_argument("--design", help="sets as nT:nC[xK], comma-separated, e.g. 1:1x20")
    b.add_argument("--match", help="match CSV written by analyze")
    b.add_argument("--data")
    b.add_argument("--treatment-col", dest="treatment_col")
    b.add_argument("--id-col", dest="id_col")
    b.add_argument("--mse", help="comma-separated assumed MSE values")
    b.add_argument("--gamma", help="comma-separated odds bounds (pairs only)")
    b.add_argument("--sd-yc", dest="sd_yc", type=float)
    b.add_argument("--out-dir", dest="out_dir")
    b.set_defaults(func=cmd_bound)

    g = sub.add_parser("generate", help="write one synthetic dataset as CSV")
    g.add_argument("--config")
    g.add_argument("--n", type=int)
    g.add_argument("--p", type=int)
    g.add_argument("--target-n-t", dest="target_n_t", type=int)
    g.add_argument("--kappa", type=float)
    g.add_argument("--rho", type=float)
    g.add_argument("--beta-rate", dest="beta_rate", type=float)
    g.add_argument("--scenario", choices=["linear", "nonlinear"])
    g.add_argument("--seed", type=int)
    g.add_argument("--out")
    g.set_defaults(func=cmd_generate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except LeakageError as exc:
        print(f"error: leakage guard: {exc}; no effect estimates reported", file=sys.stderr)
        return EXIT_LEAKAGE
    except InfeasibleMatchError as exc:
        print(f"error: infeasible match: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ConfigError, SimConfigError, DataValidationError, EmptyRemnantError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
