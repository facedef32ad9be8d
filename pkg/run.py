#!/usr/bin/env python
"""UberNet command-line launcher with configurable logging."""
import argparse
import os
import sys

import pandas as pd

# Add current directory to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from config import Config, RunConfig
from errors import ContractError, UberNetError
from logger import get_logger, log_call, setup_logging

log = get_logger('cli')

COMMANDS = {
    'ingest': 'parse pickups, aggregate, join features, impute -> panel.csv',
    'synth': 'generate a synthetic panel -> panel.csv',
    'train': 'fit UberNet on the training split -> checkpoint.json, loss_history.csv',
    'eval': 'score a checkpoint (or baseline) on the test split -> eval.csv, residuals.csv',
    'cv': 'rolling cross-validation -> cv.csv, cv.json, residuals.csv',
    'sets': 'retrain per feature set -> feature_sets.csv',
    'ablate': 'remove features one by one -> ablation.csv',
    'importance': 'permutation importance of a checkpoint -> importance.csv',
    'pdp': 'partial dependence of a checkpoint on --set feature=<name> -> pdp_<feature>.csv',
    'breakdown': 'RMSE/SMAPE per hour or region from residuals -> breakdown_<key>.csv',
    'compare': 'rolling CV for every model in `models` -> compare.csv',
    'tune': 'grid search on a validation tail -> tune.csv',
    'gradcheck': 'verify gradients against finite differences -> gradcheck.json',
}


def parse_args(argv=None):
    """Parse command line arguments."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('-d', '--debug', action='count', default=0,
                        help='Increase verbosity (can be repeated: -d, -dd, -ddd, -dddd, -ddddd)')
    common.add_argument('--config', help='JSON config file (flat object of config keys)')
    common.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help='Override one config key (repeatable)')
    common.add_argument('--out', help='Output directory (config key `out`)')
    common.add_argument('--seed', type=int, help='Base random seed (config key `seed`)')
    common.add_argument('--jobs', type=int, help='Worker threads (config key `jobs`)')
    common.add_argument('--oracle', action='store_true', default=None,
                        help='Use the perfect oracle instead of the configured model')

    epilog = f'''
Verbosity levels:
  (none)   Only errors
  -d       Errors + warnings
  -dd      + Info messages (epoch logs, artifact paths)
  -ddd     + Debug messages
  -dddd    + Trace messages (very verbose)
  -ddddd   + All library logs

Exit codes:
  0 ok, 1 unexpected error, 2 schema/config error, 3 parse error,
  4 training divergence, 5 checkpoint/schema mismatch or malformed checkpoint

Examples:
  python run.py synth --out runs/demo
  python run.py train --config configs/desk.json --out runs/demo -dd
  python run.py cv --config configs/desk.json --out runs/demo --jobs 4
  python run.py pdp --out runs/demo --set feature=g1

{RunConfig.help_epilog()}
'''
    parser = argparse.ArgumentParser(
        description='UberNet - pickup demand forecasting with dilated causal convolutions',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=epilog,
    )
    commands = parser.add_subparsers(dest='command', metavar='command')
    commands.required = True
    for name, help_text in COMMANDS.items():
        commands.add_parser(name, parents=[common], help=help_text, description=help_text,
                            formatter_class=argparse.RawDescriptionHelpFormatter, epilog=epilog)
    return parser.parse_args(argv)


# ============ Shared steps ============

def load_panel(cfg: RunConfig):
    from panel import read_panel
    return read_panel(cfg.path('panel', Config.PANEL_FILE), interval_minutes=cfg.interval_minutes).with_levels()


def split(panel, cfg: RunConfig):
    from panel import split_point, train_test_split
    return train_test_split(panel, split_point(panel, cfg.split_date, cfg.train_fraction))


def load_model(panel, cfg: RunConfig):
    """Checkpointed network wrapped as a forecaster; schema must match the panel."""
    from evaluation import UberNetForecaster
    from train import load_checkpoint
    checkpoint = load_checkpoint(cfg.path('checkpoint', Config.CHECKPOINT_FILE),
                                 expected_schema_sha=panel.schema.fingerprint())
    return UberNetForecaster.from_network(checkpoint.network, checkpoint.normalizer, cfg), checkpoint


def synth_config(cfg: RunConfig):
    from panel import SynthConfig
    return SynthConfig(slots=cfg.synth_slots, interval_minutes=cfg.interval_minutes, seed=cfg.seed,
                       start=pd.Timestamp(cfg.synth_start).to_pydatetime(), base=cfg.synth_base,
                       diurnal_amplitude=cfg.synth_diurnal, peak_hour=cfg.synth_peak_hour,
                       weekly_amplitude=cfg.synth_weekly, drivers=cfg.synth_drivers,
                       driver_weights=(cfg.synth_driver_weight,), driver_lag=cfg.synth_driver_lag,
                       noise_sigma=cfg.synth_noise, noise_features=cfg.synth_noise_features)


def out_file(cfg: RunConfig, name: str) -> str:
    return os.path.join(cfg.out, name)


# ============ Commands ============

@log_call(log)
def cmd_ingest(cfg: RunConfig):
    from models import CALENDAR_FEATURES, DEFAULT_SCHEMA, FeatureSchema, TimeGrid
    from panel import (aggregate_counts, impute_missing, join_features, load_adjacency,
                       load_feature_tables, load_schema, parse_pickups, split_point, write_panel)
    from report import write_json

    if not cfg.pickups:
        raise ContractError("ingest needs --set pickups=<events.csv>")
    events = parse_pickups(cfg.pickups)
    if cfg.start and cfg.end:
        grid = TimeGrid(pd.Timestamp(cfg.start).to_pydatetime(), pd.Timestamp(cfg.end).to_pydatetime(),
                        cfg.interval_minutes)
    elif events:
        stamps = [e.timestamp for e in events]
        grid = TimeGrid.covering(min(stamps), max(stamps), cfg.interval_minutes)
    else:
        raise ContractError("no events and no explicit start/end to build a grid from")
    panel = aggregate_counts(events, grid.validate(), cfg.scope or None)

    if cfg.schema:
        schema = load_schema(cfg.schema)
    elif cfg.features_dir:
        schema = DEFAULT_SCHEMA
    else:
        schema = FeatureSchema(tuple(DEFAULT_SCHEMA.get(name) for name in CALENDAR_FEATURES))
    panel = join_features(panel, load_feature_tables(cfg.features_dir), schema)
    missing = panel.missing_cells()
    panel = impute_missing(panel, load_adjacency(cfg.adjacency),
                           train_end=split_point(panel, cfg.split_date, cfg.train_fraction))
    paths = write_panel(panel, cfg.path('panel', Config.PANEL_FILE))
    counted = int(panel.pickups.sum())
    write_json({'events': len(events), 'counted': counted, 'dropped': panel.dropped_events,
                'slots': len(panel), 'regions': panel.regions, 'features': panel.schema.names,
                'imputed_cells': missing, 'interval_minutes': cfg.interval_minutes,
                'panel': paths[0]}, out_file(cfg, Config.INGEST_REPORT))
    print(f"panel: {len(panel)} slots, {counted} pickups counted, {panel.dropped_events} dropped, "
          f"{missing} cells imputed")


@log_call(log)
def cmd_synth(cfg: RunConfig):
    from panel import synth_panel, write_panel
    panel = synth_panel(synth_config(cfg))
    write_panel(panel, cfg.path('panel', Config.PANEL_FILE))
    print(f"panel: {len(panel)} synthetic slots")


@log_call(log)
def cmd_train(cfg: RunConfig):
    from evaluation import UberNetForecaster, derive_seed
    from report import write_csv
    from train import save_checkpoint

    panel = load_panel(cfg)
    train, _ = split(panel, cfg)
    seed = derive_seed(cfg.seed, 'holdout')
    model = UberNetForecaster(cfg, seed).fit(train)
    history = pd.DataFrame({'epoch': range(1, len(model.history) + 1), 'loss': model.history})
    write_csv(history, out_file(cfg, Config.LOSS_HISTORY))
    save_checkpoint(model.net, model.normalizer, cfg.path('checkpoint', Config.CHECKPOINT_FILE),
                    schema_sha=panel.schema.fingerprint(),
                    meta={'seed': seed, 'iterations': len(model.history),
                          'final_loss': model.history[-1], 'train_slots': len(train)})
    print(f"final train loss: {model.history[-1]:.6g}")


@log_call(log)
def cmd_eval(cfg: RunConfig):
    from evaluation import EvalReport, evaluate_holdout, reports_frame, residual_records
    from report import write_csv, write_summary
    from train import predict_iterative

    panel = load_panel(cfg)
    train, test = split(panel, cfg)
    if len(test) == 0:
        raise ContractError("test split is empty")
    if cfg.model == 'ubernet' and not cfg.oracle:
        model, checkpoint = load_model(panel, cfg)
        forecasts = model.forecast(panel, test.times)
        reports = [EvalReport.score('ubernet', 'test', forecasts, test.pickups)]
        residuals = residual_records(panel, test.times, forecasts, 'test')
        if cfg.horizon > 1:
            horizon = min(cfg.horizon, len(test))
            future = test.frame.iloc[:horizon].drop(columns='p')
            iterative = predict_iterative(model.net, train, horizon, future, model.normalizer)
            reports.append(EvalReport.score('ubernet', f'iterative h={horizon}', iterative,
                                            test.pickups[:horizon]))
    else:
        result = evaluate_holdout(panel, cfg)
        reports, residuals = [result.report], result.residuals
    table = reports_frame(reports)
    write_csv(table, out_file(cfg, Config.EVAL_FILE))
    write_csv(residuals, cfg.path('residuals', Config.RESIDUALS_FILE))
    write_summary(cfg.out, 'Holdout evaluation', [('Test split', table)], cfg.to_dict())
    for report in reports:
        print(f"{report.model} {report.slice}: RMSE {report.rmse:.4f}  SMAPE {report.smape:.3f}%  n={report.n}")


@log_call(log)
def cmd_cv(cfg: RunConfig):
    from evaluation import cv_plan, make_model_factory, rolling_cv
    from report import write_csv, write_json, write_summary

    panel = load_panel(cfg)
    plan = cv_plan(panel, cfg)
    result = rolling_cv(panel, make_model_factory(cfg), plan, seed=cfg.seed, jobs=cfg.jobs)
    table = result.to_frame()
    write_csv(table, out_file(cfg, Config.CV_FILE))
    write_json({**result.to_dict(), 'plan': plan.to_frame().astype(str).to_dict('records')},
               out_file(cfg, Config.CV_JSON))
    write_csv(result.residuals, cfg.path('residuals', Config.RESIDUALS_FILE))
    write_summary(cfg.out, 'Rolling cross-validation', [('Folds', table)], cfg.to_dict())
    print(f"pooled: RMSE {result.pooled.rmse:.4f}  SMAPE {result.pooled.smape:.3f}%  n={result.pooled.n}"
          f"{'  (some folds failed)' if result.pooled.failed else ''}")


@log_call(log)
def cmd_sets(cfg: RunConfig):
    from evaluation import evaluate_feature_sets
    from report import write_csv
    table = evaluate_feature_sets(load_panel(cfg), cfg.sets, cfg)
    write_csv(table, out_file(cfg, Config.FEATURE_SETS_FILE))
    print(table.to_string(index=False))


@log_call(log)
def cmd_ablate(cfg: RunConfig):
    from evaluation import ablate_one_by_one
    from report import write_csv
    table = ablate_one_by_one(load_panel(cfg), cfg)
    write_csv(table, out_file(cfg, Config.ABLATION_FILE))
    print(table.to_string(index=False))


@log_call(log)
def cmd_importance(cfg: RunConfig):
    from evaluation import permutation_importance
    from report import write_csv
    panel = load_panel(cfg)
    _, test = split(panel, cfg)
    model, _ = load_model(panel, cfg)
    windows = model.windows(panel, test.times)
    table = permutation_importance(model.net, windows, seed=cfg.seed, repeats=cfg.repeats,
                                   normalizer=model.normalizer, jobs=cfg.jobs)
    write_csv(table, out_file(cfg, Config.IMPORTANCE_FILE))
    print(table.to_string(index=False))


@log_call(log)
def cmd_pdp(cfg: RunConfig):
    from evaluation import partial_dependence
    from report import write_csv
    if not cfg.feature:
        raise ContractError("pdp needs --set feature=<name>")
    panel = load_panel(cfg)
    _, test = split(panel, cfg)
    model, _ = load_model(panel, cfg)
    lookback = (model.net.config.s + 1) * panel.grid.delta
    window_panel = panel.slice(test.grid.start - lookback, panel.grid.end)
    curve = partial_dependence(model.net, window_panel, cfg.feature, cfg.grid_points, model.normalizer)
    write_csv(curve, out_file(cfg, Config.pdp_file(cfg.feature)))
    print(curve.to_string(index=False))


@log_call(log)
def cmd_breakdown(cfg: RunConfig):
    from evaluation import error_breakdown, reports_frame
    from report import write_csv
    paths = [p.strip() for p in cfg.residuals.split(',') if p.strip()]
    paths = paths or [cfg.path('residuals', Config.RESIDUALS_FILE)]
    frames = []
    for path in paths:
        if not os.path.exists(path):
            raise ContractError(f"no residual records at {path}; run eval or cv first")
        frames.append(pd.read_csv(path, parse_dates=['datetime']))
    records = pd.concat(frames, ignore_index=True)
    table = reports_frame(error_breakdown(records, cfg.breakdown_by, cfg.model))
    table = table.rename(columns={'slice': cfg.breakdown_by})
    write_csv(table, out_file(cfg, Config.breakdown_file(cfg.breakdown_by)))
    print(table.to_string(index=False))


@log_call(log)
def cmd_compare(cfg: RunConfig):
    from evaluation import compare_models
    from report import write_csv, write_summary
    table = compare_models(load_panel(cfg), cfg, cfg.models)
    write_csv(table, out_file(cfg, Config.COMPARE_FILE))
    write_summary(cfg.out, 'Model comparison (rolling CV, pooled)', [('Models', table)], cfg.to_dict())
    print(table.to_string(index=False))


@log_call(log)
def cmd_tune(cfg: RunConfig):
    from evaluation import grid_search
    from report import write_csv
    table = grid_search(load_panel(cfg), cfg, cfg.tune_grid)
    write_csv(table, out_file(cfg, Config.TUNE_FILE))
    print(table.to_string(index=False))


@log_call(log)
def cmd_gradcheck(cfg: RunConfig):
    from evaluation import network_config
    from net import init_params, input_specs, quantile_bins
    from panel import build_windows, fit_normalizer
    from report import write_json
    from train import LossConfig, grad_check

    panel = load_panel(cfg)
    train, _ = split(panel, cfg)
    normalizer = fit_normalizer(train, (train.grid.start, train.grid.end))
    windows = build_windows(normalizer.apply(train), cfg.lookback)
    bins = quantile_bins(windows.targets, cfg.bins) if cfg.head == 'softmax' else ((), ())
    net = init_params(network_config(cfg, input_specs(train), cfg.seed, bins))
    report = grad_check(net, windows.inputs[-1], windows.targets[-1], LossConfig(lam=cfg.lam, l1=cfg.l1),
                        step=cfg.gradcheck_step, tolerance=cfg.gradcheck_tolerance,
                        samples=cfg.gradcheck_samples, seed=cfg.seed, full=cfg.gradcheck_full)
    write_json(report.to_dict(), out_file(cfg, Config.GRADCHECK_FILE))
    print(f"gradient check {'PASS' if report.passed else 'FAIL'}: max relative error "
          f"{report.max_rel_err:.3e} at {report.worst_parameter} over {report.checked} coordinates")


def main(argv=None) -> int:
    """Main entry point; returns the process exit code."""
    args = parse_args(argv)

    # Setup logging based on verbosity
    verbosity = min(args.debug, 5)  # Cap at 5
    setup_logging(verbosity)

    try:
        cfg = RunConfig.from_sources(args.config, args.overrides, out=args.out, seed=args.seed,
                                     jobs=args.jobs, oracle=args.oracle)
        cfg.save(cfg.out)
        log.info(f"Running {args.command} into {cfg.out}")
        globals()[f'cmd_{args.command}'](cfg)
    except UberNetError as e:
        log.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        log.info("Interrupted")
        return Config.EXIT_UNEXPECTED
    except Exception as e:
        log.error(f"{args.command} failed unexpectedly: {e}", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return Config.EXIT_UNEXPECTED
    return Config.EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
