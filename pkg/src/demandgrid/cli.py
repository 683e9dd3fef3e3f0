"""``demandctl``: one subcommand per pipeline stage.

    generate -> impute -> train -> predict-grid / evaluate / scaling / staleness

Every stage reads the run config, writes its artifacts into ``out_dir`` and a
``<stage>.manifest.json`` with content hashes of inputs and outputs. Failures
exit nonzero with a single line ``error stage=<stage> kind=<Kind>: <message>``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import datagen, evaluation, imputation, inference
from .artifacts import write_manifest
from .config import ConfigError, RunConfig
from .features import CovariateSchema, FeatureBuilder
from .model import DemandForecaster
from .training import train

log = logging.getLogger("demandctl")

STAGES = ("generate", "impute", "train", "predict-grid", "evaluate", "scaling", "staleness")

EXIT_FAILURE, EXIT_CONFIG, EXIT_STAGE_ORDER = 1, 2, 3


class StageOrderError(RuntimeError):
    pass


class Paths:
    def __init__(self, out_dir: str | Path):
        self.root = Path(out_dir)
        self.panels = self.root / "panels.jsonl"
        self.truth = self.root / "truth.npz"
        self.summary = self.root / "summary.csv"
        self.imputed = self.root / "imputed.jsonl"
        self.schema = self.root / "schema.json"
        self.model = self.root / "model.npz"
        self.trace = self.root / "loss_trace.csv"
        self.checkpoints = self.root / "checkpoints"
        self.grid = self.root / "grid.csv"
        self.metrics_txt = self.root / "metrics.txt"
        self.metrics_json = self.root / "metrics.json"
        self.curve = self.root / "horizon_curve.csv"
        self.scaling = self.root / "scaling.csv"
        self.staleness = self.root / "staleness.csv"

    def manifest(self, stage: str) -> Path:
        return self.root / f"{stage}.manifest.json"

    def need(self, path: Path, stage: str) -> Path:
        if not path.exists():
            raise StageOrderError(f"missing {path}; run stage {stage} first")
        return path


def _manifest(paths: Paths, stage: str, cfg: RunConfig, inputs: dict, outputs: dict) -> None:
    if cfg.source is not None:
        inputs = {"config": cfg.source, **inputs}
    write_manifest(paths.manifest(stage), stage, inputs, outputs, cfg.run.seed, cfg.to_dict())


def _load_data(cfg: RunConfig, paths: Paths):
    catalog = datagen.read_panels(paths.need(paths.panels, "generate"), n_weeks=cfg.catalog.n_weeks)
    imputed = imputation.read_imputed(paths.need(paths.imputed, "impute"), catalog)
    return catalog, imputed


def _builder(cfg: RunConfig, paths: Paths) -> FeatureBuilder:
    catalog, imputed = _load_data(cfg, paths)
    return FeatureBuilder(cfg.covariate_schema(), catalog, imputed)


def _load_model(cfg: RunConfig, paths: Paths) -> DemandForecaster:
    schema = CovariateSchema.load(paths.need(paths.schema, "train"))
    return DemandForecaster.load(paths.need(paths.model, "train"), schema)


# ------------------------------------------------------------------ stages


def cmd_generate(cfg: RunConfig, paths: Paths, args) -> None:
    catalog, truth = datagen.generate_catalog(cfg.catalog_spec())
    datagen.write_panels(catalog, paths.panels)
    datagen.save_truth(truth, paths.truth)
    datagen.write_summary(datagen.summarize_catalog(catalog), paths.summary)
    _manifest(paths, "generate", cfg, {}, {"panels": paths.panels, "truth": paths.truth, "summary": paths.summary})
    print(f"generated {catalog.n_articles} articles x {catalog.n_markets} markets x {catalog.n_weeks} weeks -> {paths.panels}")


def cmd_impute(cfg: RunConfig, paths: Paths, args) -> None:
    catalog = datagen.read_panels(paths.need(paths.panels, "generate"), n_weeks=cfg.catalog.n_weeks)
    imp = imputation.impute_catalog(catalog, cfg.impute.alpha, cfg.impute.min_mass)
    imputation.write_imputed(catalog, imp, paths.imputed)
    side = paths.imputed.with_suffix(".profiles.json")
    _manifest(paths, "impute", cfg, {"panels": paths.panels}, {"imputed": paths.imputed, "profiles": side})
    print(f"imputed {int(imp.imputed.sum())} article-market-weeks ({int(imp.censored.sum())} censored) -> {paths.imputed}")


def cmd_train(cfg: RunConfig, paths: Paths, args) -> None:
    builder = _builder(cfg, paths)
    schema = builder.schema
    model = DemandForecaster(cfg.model_config(), schema)
    paths.checkpoints.mkdir(exist_ok=True)
    result = train(builder, model, cfg.train_config(), cutoff=cfg.train_cutoff(), checkpoint_dir=paths.checkpoints)
    schema.save(paths.schema)
    model.save(paths.model)
    result.write_trace(paths.trace)
    _manifest(
        paths,
        "train",
        cfg,
        {"panels": paths.panels, "imputed": paths.imputed},
        {"model": paths.model, "schema": paths.schema, "loss_trace": paths.trace},
    )
    print(f"trained to week {cfg.train_cutoff()}: final losses {result.trace[-2][2]:.4f} (near), {result.trace[-1][2]:.4f} (far) -> {paths.model}")


def cmd_predict_grid(cfg: RunConfig, paths: Paths, args) -> None:
    model = _load_model(cfg, paths)
    builder = _builder(cfg, paths)
    origin = cfg.predict.origin if cfg.predict.origin is not None else builder.n_weeks - 1
    discounts = args.discounts or cfg.predict.discounts
    if isinstance(discounts, str):
        discounts = [float(x) for x in discounts.split(",")]
    grid = inference.predict_grid(model, builder, origin, discounts=discounts, horizon=cfg.predict.horizon, workers=cfg.run.workers)
    inference.export_grid(grid, paths.grid)
    _manifest(
        paths,
        "predict-grid",
        cfg,
        {"model": paths.model, "panels": paths.panels, "imputed": paths.imputed},
        {"grid": paths.grid},
    )
    print(f"grid {grid.shape} ({len(grid)} records, {len(grid.skipped)} skipped articles) -> {paths.grid}")


def cmd_evaluate(cfg: RunConfig, paths: Paths, args) -> None:
    model = _load_model(cfg, paths)
    builder = _builder(cfg, paths)
    cutoff = cfg.train_cutoff()
    starts = list(cfg.evaluate.start_dates or (cutoff,))
    trainer = evaluation.make_trainer(builder, model.config, cfg.train_config())

    def factory(t: int) -> DemandForecaster:
        return model if t == cutoff else trainer(t)

    res = evaluation.run_backtest(builder, factory, starts, cfg.evaluate.horizon)
    res.write_curve(paths.curve)
    text = res.to_text(include_naive=args.baseline == "naive")
    paths.metrics_txt.write_text(text + "\n")
    evaluation.write_json(res.to_dict(), paths.metrics_json)
    _manifest(
        paths,
        "evaluate",
        cfg,
        {"model": paths.model, "panels": paths.panels, "imputed": paths.imputed},
        {"metrics": paths.metrics_json, "report": paths.metrics_txt, "curve": paths.curve},
    )
    print(text)


def cmd_scaling(cfg: RunConfig, paths: Paths, args) -> None:
    builder = _builder(cfg, paths)
    sc = cfg.scaling
    trainer = evaluation.make_trainer(builder, cfg.model_config(), cfg.train_config())
    starts = list(sc.start_dates or (cfg.train_cutoff(),))
    res = evaluation.scaling_experiment(builder, trainer, sc.fractions, starts, sc.seeds, sc.test_share, sc.eval_weeks, cfg.run.seed)
    res.write(paths.scaling)
    _manifest(paths, "scaling", cfg, {"panels": paths.panels, "imputed": paths.imputed}, {"scaling": paths.scaling})
    for f, m, s in res.summary():
        print(f"fraction {f:.2f}: demand error {m:.4f} +- {s:.4f}")
    print(f"naive: {res.naive_error():.4f}; non-increasing within pooled sd: {res.non_increasing()}")


def cmd_staleness(cfg: RunConfig, paths: Paths, args) -> None:
    builder = _builder(cfg, paths)
    st = cfg.staleness
    trainer = evaluation.make_trainer(builder, cfg.model_config(), cfg.train_config())
    week = st.train_week if st.train_week is not None else builder.n_weeks - 1 - st.offsets
    finetune = evaluation.make_finetuner(builder, cfg.finetune_config()) if st.retrain == "finetune" else None
    res = evaluation.staleness_experiment(builder, trainer, week, range(st.offsets), st.seeds, finetune=finetune)
    res.write(paths.staleness)
    _manifest(paths, "staleness", cfg, {"panels": paths.panels, "imputed": paths.imputed}, {"staleness": paths.staleness})
    for k, stale, fresh in res.curve():
        print(f"offset {k}: stale {stale:.4f} retrained {fresh:.4f}")
    print(f"mean week-1 demand error: stale {res.mean('stale'):.4f}, retrained {res.mean('retrained'):.4f}")


COMMANDS = {
    "generate": cmd_generate,
    "impute": cmd_impute,
    "train": cmd_train,
    "predict-grid": cmd_predict_grid,
    "evaluate": cmd_evaluate,
    "scaling": cmd_scaling,
    "staleness": cmd_staleness,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="demandctl", description="Price-conditional demand forecasting pipeline")
    sub = parser.add_subparsers(dest="stage", required=True)
    for name in STAGES:
        p = sub.add_parser(name)
        p.add_argument("-c", "--config", required=True, help="run configuration file")
        p.add_argument("--seed", type=int, help="override [run] seed")
        p.add_argument("--workers", type=int, help="override [run] workers")
        p.add_argument("--out-dir", help="override [run] out_dir")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "evaluate":
            p.add_argument("--baseline", choices=["naive"], help="also report the naive last-value forecast")
        if name == "predict-grid":
            p.add_argument("--discounts", help="comma-separated discount axis override, e.g. 0,0.35,0.7")
    return parser


def _fail(stage: str, exc: BaseException, code: int) -> int:
    msg = " ".join(str(exc).split())
    print(f"error stage={stage} kind={type(exc).__name__}: {msg}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config).override(args.seed, args.workers, args.out_dir)
    except ConfigError as exc:
        return _fail(args.stage, exc, EXIT_CONFIG)
    paths = Paths(cfg.run.out_dir)
    try:
        paths.root.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.stage](cfg, paths, args)
    except StageOrderError as exc:
        return _fail(args.stage, exc, EXIT_STAGE_ORDER)
    except (ConfigError, ValueError) as exc:
        return _fail(args.stage, exc, EXIT_CONFIG if isinstance(exc, ConfigError) else EXIT_FAILURE)
    except (OSError, ArithmeticError, RuntimeError) as exc:
        return _fail(args.stage, exc, EXIT_FAILURE)
    return 0


if __name__ == "__main__":
    sys.exit(main())
