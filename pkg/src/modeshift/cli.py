"""Command-line entry point: ``modeshift <subcommand> ...``.

Exit codes: 0 success, 2 usage/invalid input, 3 data error, 4 failed gate.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path


from . import closed_form as cf
from .config import RunConfig
from .core import BASELINE, FOUR_MODES, NO_SFHV, Scenario, surcharge_scenario
from .errors import (DataError, InvalidInputError, InvalidParameterError, ModelFormatError,
                     ModeShiftError)
from .simulator import SimParams, rng_stream

log = logging.getLogger("modeshift")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_GATE = 0, 2, 3, 4

DEFAULT_FIT_GRIDS = {
    "mnl": "lam=0.02:0.5:25,beta=0.1:1.5:15",
    "logmnl": "lam=0.5:8:31,beta=0.1:1.5:15",
    "nested": "lam=0.02:0.5:13,beta=0.1:1.5:8,tau_taxi_fhv=0.25:1:4,tau_fhv=0.25:1:4",
}


class GateFailure(ModeShiftError):
    pass


def report_schema() -> dict:
    return json.loads(resources.files("modeshift").joinpath("report_schema.json")
                      .read_text(encoding="utf-8"))


def validate_report(doc: dict) -> None:
    import jsonschema
    try:
        jsonschema.validate(doc, report_schema())
    except jsonschema.ValidationError as exc:
        raise InvalidInputError(f"report does not match schema: {exc.message}") from None


# --- helpers ------------------------------------------------------------------------

def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def _log_config(cfg: RunConfig, command: str) -> None:
    log.info("command: %s", command)
    log.info("master seed: %d", cfg.seed)
    log.info("resolved config: %s", json.dumps(cfg.to_dict(), sort_keys=True))


def _write_text(path, text: str) -> None:
    p = Path(path)
    if p.parent and not p.parent.exists():
        p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(text, encoding="utf-8")


def resolve_scenario(name: str, bundle=None, occupancy: float = 2.0) -> tuple[Scenario, Scenario]:
    """Return (baseline, intervention) for a preset name or a JSON file.

    A file holds either one scenario (compared against the baseline) or an
    object with ``baseline`` and ``intervention`` scenarios.
    """
    if name == "no-sfhv":
        return BASELINE, NO_SFHV
    if name == "surcharge":
        borough = (bundle.manifest.get("surcharge_borough") if bundle is not None else None)
        return BASELINE, surcharge_scenario(borough or "Manhattan", occupancy)
    if name == "baseline":
        return BASELINE, BASELINE
    path = Path(name)
    if not path.is_file():
        raise InvalidInputError(
            f"unknown scenario {name!r}; use no-sfhv, surcharge or a JSON file")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"scenario file {path} is not valid JSON: {exc}") from None
    if "intervention" in doc:
        return (Scenario.from_dict(doc.get("baseline", BASELINE.to_dict())),
                Scenario.from_dict(doc["intervention"]))
    return BASELINE, Scenario.from_dict(doc)


# --- subcommands ----------------------------------------------------------------------

def cmd_gen_fixture(args) -> int:
    from .data import gen_fixture
    cfg = _config(args).with_overrides(
        "fixture", n_zones=args.zones, n_wage_groups=args.wage_groups, beta=args.beta,
        sigma=args.sigma, cor_tfs=args.cor_tfs, cor_fs=args.cor_fs)
    _log_config(cfg, "gen-fixture")
    f = cfg.fixture
    truth = SimParams(f.beta, f.sigma, f.cor_tfs, f.cor_fs)
    bundle = gen_fixture(args.out, f.n_zones, f.n_wage_groups, truth, cfg.seed)
    print(f"wrote {args.out}: {len(bundle.zones)} zones, {len(bundle.wages)} wage groups, "
          f"{len(bundle.demand4)} four-mode cells, {len(bundle.demand_tlc)} taxi-nest pairs")
    return EXIT_OK


def cmd_fit_closed(args) -> int:
    from .data import load_bundle
    cfg = _config(args)
    _log_config(cfg, "fit-closed")
    bundle = load_bundle(args.data)
    cells = bundle.cells4()
    grid = cf.parse_grid(args.grid or DEFAULT_FIT_GRIDS[args.model])
    res = cf.fit_grid(cells, args.model, grid, FOUR_MODES)
    pred = cf.predict_table(cells, res.params, args.model, modes=FOUR_MODES)
    obs_tot = cf.mode_totals(cells.trips, FOUR_MODES)
    pred_tot = cf.mode_totals(pred, FOUR_MODES)
    r2 = cf.r_squared(pred_tot, obs_tot)
    table = cf.comparison_table(obs_tot, {args.model: pred_tot}, FOUR_MODES)
    print(f"model {args.model}: WRMSE {res.wrmse:.6g}  R^2 {r2:.6f}")
    print("params " + ", ".join(f"{k}={v:.6g}" for k, v in res.params.to_dict().items()))
    header = ["model"] + [m.label for m in FOUR_MODES] + ["r2"]
    print("  ".join(f"{h:>12}" for h in header))
    for row in table:
        vals = [row["model"]] + [f"{row[m.label]:.1f}" for m in FOUR_MODES]
        vals.append("" if row["r2"] is None else f"{row['r2']:.5f}")
        print("  ".join(f"{v:>12}" for v in vals))
    if args.out:
        p = res.params.to_dict()
        lines = ["model,lam,beta,tau_taxi_fhv,tau_fhv,wrmse,r2",
                 ",".join([args.model] + [repr(float(p[k])) for k in
                                          ("lam", "beta", "tau_taxi_fhv", "tau_fhv")]
                          + [repr(res.wrmse), repr(r2)])]
        _write_text(args.out, "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_train_surrogate(args) -> int:
    from . import surrogate as sg
    cfg = _config(args).with_overrides(
        "surrogate", samples=args.samples, oracle_draws=args.oracle_draws, epochs=args.epochs,
        learning_rate=args.lr, val_points=args.val_points, val_draws=args.val_draws)
    _log_config(cfg, "train-surrogate")
    s = cfg.surrogate
    data = sg.gen_training_set(s.samples, rng_stream(cfg.seed, 20), s.oracle_draws)
    tc = sg.TrainConfig(epochs=s.epochs, learning_rate=s.learning_rate, batch_size=s.batch_size,
                        optimizer=s.optimizer, seed=cfg.seed)
    model = sg.train(data, tc)
    metrics = sg.validate(model, s.val_points, s.val_draws, rng_stream(cfg.seed, 21))
    model.meta["validation"] = metrics
    sg.save_model(model, args.out)
    ok = metrics["mean_abs_err"] <= s.gate_mean_abs_err and metrics["max_abs_err"] <= s.gate_max_abs_err
    print(json.dumps({"final_loss": model.meta["final_loss"], **metrics, "gates_passed": ok},
                     sort_keys=True))
    if not ok:
        raise GateFailure(f"surrogate validation gates failed (mean <= {s.gate_mean_abs_err}, "
                          f"max <= {s.gate_max_abs_err})")
    return EXIT_OK


def cmd_infer(args) -> int:
    from . import inference as inf
    from .data import load_bundle
    from .surrogate import load_model
    cfg = _config(args).with_overrides("inference", grid=args.grid, pooling=args.pooling,
                                       oracle_draws=args.oracle_draws)
    if args.smoothing:
        cfg = cfg.with_overrides("inference", smoothing=True)
    _log_config(cfg, "infer")
    bundle = load_bundle(args.data)
    truth = _manifest_truth(bundle)
    anchor = truth if args.anchor_truth else None
    if args.anchor_truth and truth is None:
        raise InvalidInputError("--anchor-truth needs a bundle manifest with true_params")
    i = cfg.inference
    spec = inf.PriorSpec.from_grid(i.grid, ln_mu_beta=i.ln_mu_beta, sd_beta=i.sd_beta,
                                   ln_mu_sigma=i.ln_mu_sigma, sd_sigma=i.sd_sigma, anchor=anchor)
    if args.oracle:
        backend = inf.OracleBackend(i.oracle_draws, cfg.seed)
    else:
        backend = inf.SurrogateBackend(load_model(args.surrogate))
    res = inf.infer(bundle.cells4(), bundle.nest_demand(), backend, spec, i.smoothing, i.pooling)
    inf.write_posterior(res.samples, args.out)
    best = res.best
    print(f"{len(res.samples)} samples; max-likelihood beta={best.beta:.6g} sigma={best.sigma:.6g} "
          f"corTFS={best.cor_tfs:.6g} corFS={best.cor_fs:.6g}")
    if truth is not None:
        idx = [s.index for s in res.samples if s.params == truth]
        if idx:
            print(f"truth is a grid point: recovered={best == truth} "
                  f"weight within one step={res.weight_near(idx[0]):.4f}")
    return EXIT_OK


def _manifest_truth(bundle):
    tp = bundle.manifest.get("true_params") if bundle.manifest else None
    if not tp:
        return None
    return SimParams(tp["beta"], tp["sigma"], tp["cor_tfs"], tp["cor_fs"])


def cmd_impact(args) -> int:
    from .data import load_bundle
    from .impact import ImpactConstants, aggregate_posterior, run_scenario
    from .inference import read_posterior
    cfg = _config(args).with_overrides("impact", n_reps=args.reps, scale=args.scale,
                                       posterior_mass=args.mass)
    _log_config(cfg, "impact")
    im = cfg.impact
    constants = ImpactConstants(im.miles_per_gallon, im.co2_kg_per_gallon, im.transit_fare,
                                im.sfhv_occupancy)
    bundle = load_bundle(args.data)
    scen_a, scen_b = resolve_scenario(args.scenario, bundle, im.sfhv_occupancy)
    posterior = read_posterior(args.posterior)
    run = run_scenario(bundle.demand4, bundle.attrs, bundle.zones, bundle.wage_map, scen_a,
                       scen_b, posterior, im.n_reps, cfg.seed, constants, im.posterior_mass)
    digest_src = {"config": cfg.to_dict(), "baseline": scen_a.to_dict(),
                  "intervention": scen_b.to_dict()}
    report = aggregate_posterior(run, bundle.zones, im.scale, digest_src)
    doc = report.to_dict()
    validate_report(doc)
    _write_text(args.out, report.to_json())
    city = report.citywide
    print(f"scenario {scen_b.name} vs {scen_a.name}: {report.n_samples} posterior samples, "
          f"{report.demand_total:.6g} trips")
    for m in ("delta_time_hours", "delta_time_pct", "delta_miles", "fuel_gallons", "co2_kg"):
        e = city[m]
        if e["mean"] is None:
            print(f"  {m}: undefined")
        else:
            print(f"  {m}: {e['mean']:.6g} (std {e['std']:.3g}, 95% [{e['ci95'][0]:.6g}, "
                  f"{e['ci95'][1]:.6g}])")
    return EXIT_OK


def cmd_report(args) -> int:
    from .errors import MissingFileError
    from .impact import ImpactReport
    path = Path(args.input)
    if not path.is_file():
        raise MissingFileError(f"report not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{path} is not valid JSON: {exc}") from None
    validate_report(doc)
    report = ImpactReport.from_dict(doc)
    out = Path(args.out)
    if args.format == "json":
        out.mkdir(parents=True, exist_ok=True)
        _write_text(out / "report.json", report.to_json())
        print(f"wrote {out / 'report.json'}")
    else:
        for p in report.write_tables(out):
            print(f"wrote {p}")
    return EXIT_OK


# --- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="modeshift", description=__doc__.splitlines()[0])
    ap.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="JSON run configuration (flags override it)")
        if seed:
            p.add_argument("--seed", type=int, help="master seed")

    p = sub.add_parser("gen-fixture", help="write a synthetic dataset bundle")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--zones", type=int)
    p.add_argument("--wage-groups", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--cor-tfs", type=float)
    p.add_argument("--cor-fs", type=float)
    p.set_defaults(func=cmd_gen_fixture)

    p = sub.add_parser("fit-closed", help="grid-fit a closed-form model to four-mode demand")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, choices=cf.MODEL_KINDS)
    p.add_argument("--grid", help="e.g. 'lam=0.01:0.5:25,beta=0.1:1.5:15'")
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit_closed)

    p = sub.add_parser("train-surrogate", help="train and validate the likelihood surrogate")
    common(p)
    p.add_argument("--samples", type=int)
    p.add_argument("--oracle-draws", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--val-points", type=int)
    p.add_argument("--val-draws", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_surrogate)

    p = sub.add_parser("infer", help="weight the prior grid by the two-stage likelihood")
    common(p)
    p.add_argument("--data", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--surrogate", help="trained model file")
    src.add_argument("--oracle", action="store_true", help="use Monte Carlo probabilities")
    p.add_argument("--grid", help="BxSxC or BxSxRxK, e.g. 10x10x10")
    p.add_argument("--pooling", choices=["mixture", "split"])
    p.add_argument("--oracle-draws", type=int)
    p.add_argument("--smoothing", action="store_true", help="floor probabilities at 1e-12")
    p.add_argument("--anchor-truth", action="store_true",
                   help="snap the grid onto the bundle manifest's true parameters")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("impact", help="simulate a scenario against the baseline")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--posterior", required=True)
    p.add_argument("--scenario", required=True, help="no-sfhv, surcharge or FILE.json")
    p.add_argument("--reps", type=int)
    p.add_argument("--scale", type=float, help="multiplier for absolute impacts")
    p.add_argument("--mass", type=float, help="posterior mass to simulate (default 1)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_impact)

    p = sub.add_parser("report", help="re-emit a report as JSON or per-scope CSV tables")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--format", choices=["json", "csv"], default="csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    try:
        return args.func(args)
    except GateFailure as exc:
        log.error("%s", exc)
        return EXIT_GATE
    except (DataError, ModelFormatError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except (InvalidInputError, InvalidParameterError) as exc:
        log.error("invalid input: %s", exc)
        return EXIT_USAGE


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
