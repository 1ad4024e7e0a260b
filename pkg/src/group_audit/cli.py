"""``group-audit`` command line: synth -> fit -> audit -> report.

Run directory layout (``<out>/<config hash>-seed<seed>/``)::

    panels/panel_<year>.csv
    fit/residuals_<year>.csv, fit/fit_<year>.csv
    audit/min<M>_max<L>/forest_<year>.csv, groups_all.csv,
        groups_filtered.csv, groups_top.csv, dot_plot.svg, obs_vs_pred.svg
    tables/prevalence.{csv,txt}, tables/residual_by_condition.{csv,txt}
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import aggregate, gforest, ingest, report, riskfit, synthgen
from .config import RunConfig, load_config
from .domain import AuditError, ConfigError, DataError

log = logging.getLogger("group_audit")

STAGES = ("synth", "fit", "audit", "report", "all")
EXIT_INTERNAL, EXIT_CONFIG, EXIT_DATA = 1, 2, 3


@contextmanager
def _stage(name: str, **fields):
    start = time.perf_counter()
    extra: dict = {}
    yield extra
    kv = " ".join(f"{k}={v}" for k, v in {**fields, **extra}.items())
    log.info("stage=%s %s duration_s=%.3f", name, kv, time.perf_counter() - start)


def setting_dir(run_dir: Path, setting: tuple[int, int]) -> Path:
    return run_dir / "audit" / f"min{setting[0]}_max{setting[1]}"


def stage_synth(cfg: RunConfig, run_dir: Path) -> None:
    with _stage("synth", persons=cfg.generator.n_persons, years=len(cfg.generator.years)) as info:
        panels = synthgen.generate(cfg.generator, threads=cfg.threads)
        for year, panel in panels.items():
            ingest.write_panel(panel, run_dir / "panels" / f"panel_{year}.csv")
        info["rows"] = sum(len(p) for p in panels.values())


def _load_panels(cfg: RunConfig, run_dir: Path):
    return ingest.load_panels(run_dir / "panels", cfg.audit.profile, cfg.audit.years)


def stage_fit(cfg: RunConfig, run_dir: Path) -> None:
    panels = _load_panels(cfg, run_dir)
    for year, panel in panels.items():
        with _stage("fit", year=year, rows=len(panel)) as info:
            res = riskfit.fit(panel)
            ingest.write_residuals(run_dir / "fit" / f"residuals_{year}.csv", panel.person_id,
                                   res.predictions, res.residuals)
            ingest.write_coefficients(run_dir / "fit" / f"fit_{year}.csv", res.columns, res.beta,
                                      res.dropped_columns)
            info.update(r2=f"{res.r_squared:.4f}", dropped=len(res.dropped_columns),
                        singleton_markets=res.singleton_markets)


def _load_residuals(cfg: RunConfig, run_dir: Path, panels) -> dict[int, np.ndarray]:
    out = {}
    for year, panel in panels.items():
        path = run_dir / "fit" / f"residuals_{year}.csv"
        df = ingest.read_residuals(path)
        if len(df) != len(panel) or not np.array_equal(df["person_id"].to_numpy(), panel.person_id):
            raise DataError(f"{path}: rows do not align with panel_{year}.csv")
        out[year] = df["residual"].to_numpy()
    return out


def stage_audit(cfg: RunConfig, run_dir: Path) -> None:
    panels = _load_panels(cfg, run_dir)
    residuals = _load_residuals(cfg, run_dir, panels)
    labels = cfg.audit.profile.component_labels
    years = list(cfg.audit.years)
    for setting in cfg.audit.settings:
        audit_cfg = replace(cfg.audit, min_node_size=setting[0], max_leaf_nodes=setting[1])
        out = setting_dir(run_dir, setting)
        forests = {}
        for year in years:
            with _stage("forest", setting=f"{setting[0]}x{setting[1]}", year=year,
                        trees=audit_cfg.n_trees) as info:
                forests[year] = gforest.grow_forest(panels[year].components, residuals[year],
                                                    audit_cfg, year, threads=cfg.threads)
                ingest.write_forest(out / f"forest_{year}.csv", forests[year], labels)
                info["mean_leaves"] = f"{np.mean([t.n_leaves for t in forests[year]]):.2f}"
        with _stage("aggregate", setting=f"{setting[0]}x{setting[1]}") as info:
            stats = aggregate.collect(forests, audit_cfg.n_trees, years)
            kept = aggregate.persistence_filter(stats, audit_cfg.tree_fraction_threshold, years)
            kept = aggregate.observed_residuals(kept, panels, residuals)
            under, over = aggregate.rank(kept, audit_cfg.top_k)
            ingest.write_groups(out / "groups_all.csv", stats.values(), years, labels)
            ingest.write_groups(out / "groups_filtered.csv", kept.values(), years, labels)
            ingest.write_groups(out / "groups_top.csv", under + over, years, labels)
            info.update(groups=len(stats), persistent=len(kept), under=len(under), over=len(over))


def stage_report(cfg: RunConfig, run_dir: Path) -> None:
    labels = cfg.audit.profile.component_labels
    panels = _load_panels(cfg, run_dir)
    residuals = _load_residuals(cfg, run_dir, panels)
    with _stage("tables") as info:
        prev = synthgen.prevalence_report(panels)
        report.write_table_pair(report.prevalence_table(prev), run_dir / "tables" / "prevalence")
        by_year = {}
        for year, panel in panels.items():
            fit = riskfit.FitResult(year, [], np.zeros(0), [], panel.spend + residuals[year],
                                    residuals[year], float("nan"))
            by_year[year] = riskfit.residual_by_condition(fit, panel)
        report.write_table_pair(report.residual_table(by_year), run_dir / "tables" / "residual_by_condition")
        info["years"] = len(panels)
    for setting in cfg.audit.settings:
        out = setting_dir(run_dir, setting)
        with _stage("report", setting=f"{setting[0]}x{setting[1]}") as info:
            years, top = ingest.read_groups(out / "groups_top.csv", labels)
            under, over = aggregate.rank(top, cfg.audit.top_k)
            title = f"minimum node size: {setting[0]:,}, maximum nodes: {setting[1]}"
            info["groups"] = len(under) + len(over)
            if not under and not over:
                log.warning("stage=report setting=%sx%s no persistent groups; figures skipped", *setting)
                continue
            report.write_table_pair(report.group_table(under + over, labels, years), out / "groups_top_table")
            report.dot_plot((under, over), labels, out / "dot_plot.svg", title=title)
            report.scatter_obs_vs_pred((under, over), out / "obs_vs_pred.svg", title=title)
            if cfg.per_year:
                _per_year_figures(cfg, out, years, labels, setting)


def _per_year_figures(cfg, out: Path, years, labels, setting) -> None:
    _, groups = ingest.read_groups(out / "groups_all.csv", labels)
    for year in years:
        kept = aggregate.year_filter(groups, cfg.audit.tree_fraction_threshold, year)
        under, over = aggregate.rank(kept, cfg.audit.top_k, year=year)
        if not under and not over:
            continue
        ranked = [replace(g, overall_mean_predicted_residual=g.per_year[year].mean_predicted_residual)
                  for g in under + over]
        report.dot_plot((ranked[:len(under)], ranked[len(under):]), labels, out / f"dot_plot_{year}.svg",
                        title=f"{year}: minimum node size: {setting[0]:,}, maximum nodes: {setting[1]}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="group-audit",
                                description="Find persistently under- and overcompensated groups "
                                            "in a risk-adjustment formula.")
    p.add_argument("stage", choices=STAGES, help="pipeline stage to run")
    p.add_argument("--config", required=True, help="YAML run configuration")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--threads", type=int, help="worker threads (results do not depend on it)")
    p.add_argument("--setting", help="run a single MINxMAX setting, e.g. 100x8")
    p.add_argument("--profile", choices=("marketplaces", "medicare"), help="override the formula profile")
    p.add_argument("--out", help="output root directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", force=True)
    try:
        cfg = load_config(args.config, seed=args.seed, threads=args.threads, setting=args.setting,
                          profile=args.profile, out=args.out)
        run_dir = cfg.run_dir()
        log.info("stage=start run_dir=%s seed=%d threads=%d", run_dir, cfg.seed, cfg.threads)
        stages = ("synth", "fit", "audit", "report") if args.stage == "all" else (args.stage,)
        for name in stages:
            {"synth": stage_synth, "fit": stage_fit, "audit": stage_audit, "report": stage_report}[name](cfg, run_dir)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except DataError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except AuditError as exc:
        log.error("error: %s", exc)
        return EXIT_INTERNAL
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL
    log.info("stage=done run_dir=%s", run_dir)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
