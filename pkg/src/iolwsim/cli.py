"""Command-line front end: run scenarios, sweeps, calibration and reports.

Exit codes are stable API: 0 ok, 2 usage/config error, 3 infeasible
scenario (too many discards), 4 calibration failure.
"""

from __future__ import annotations

import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click

from . import __version__
from .channel import (
    CalibrationDiverged,
    CalibrationRow,
    calibrate_per_curve,
    rssi_from_attenuation,
)
from .config import (
    ConfigError,
    load_config,
    profile_from,
    rssi_map_from,
    scenario_from,
    write_manifest,
    write_per_curve,
)
from .engine import (
    KIND_CONNECT,
    KIND_HANDOVER,
    DurationSeries,
    ScenarioConfig,
    TooManyDiscards,
    run_scenario,
    series_from_csv,
    series_to_csv,
)
from .stats import (
    ECDF,
    compare_to_reference,
    export_ecdf_csv,
    load_reference_tables,
    summarize,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_CALIBRATION = 4

KIND_ALIASES = {"connect": KIND_CONNECT, "handover": KIND_HANDOVER}


def _out_dir(value: str | None) -> Path:
    out = value or os.environ.get("IOLWSIM_OUT") or "out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _build_scenario(config_path, **overrides) -> ScenarioConfig:
    raw = load_config(config_path) if config_path else {}
    return scenario_from(raw, **overrides)


def _validate_atten(atten: float):
    if not 0.0 <= atten <= 120.0:
        raise click.BadParameter(f"attenuation {atten} dB outside [0, 120]")


def _write_run_artifacts(out: Path, cfg: ScenarioConfig, series: DurationSeries):
    meta = {
        "kind": cfg.kind,
        "safety": cfg.safety,
        "attenuation_on_db": cfg.attenuation_on_db,
    }
    write_manifest(out / "manifest.yaml", cfg)
    series_to_csv(series, out / "durations.csv", __version__, extra=meta)
    stats = summarize(series)
    header = [
        f"iolwsim {__version__}",
        f"digest: {series.digest}",
        f"seed: {series.seed}",
    ]
    export_ecdf_csv(ECDF(series), out / "ecdf.csv", header_lines=header)
    with open(out / "summary.txt", "w") as fh:
        fh.write(f"# iolwsim {__version__}\n")
        fh.write(f"# digest: {series.digest}\n")
        fh.write(f"# seed: {series.seed}\n")
        for key, value in meta.items():
            fh.write(f"# {key}: {value}\n")
        fh.write(f"n {stats.n}\n")
        fh.write(f"min_s {stats.min:.4f}\n")
        fh.write(f"max_s {stats.max:.4f}\n")
        fh.write(f"mean_s {stats.mean:.6f}\n")
        fh.write(f"std_s {stats.std:.6f}\n")
        fh.write(f"discarded {series.discarded}\n")
    return stats


@click.group()
@click.version_option(version=__version__)
def main():
    """Roaming connect / handover simulator for safe industrial wireless links."""


@main.command("run")
@click.option("--kind", type=click.Choice(sorted(KIND_ALIASES)), default="connect")
@click.option("--safety/--no-safety", default=False)
@click.option("--atten-db", type=float, required=True)
@click.option("--seed", type=int, default=1, show_default=True)
@click.option("--reps", type=int, default=300, show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_path", type=str, default=None,
              help="Output directory (or $IOLWSIM_OUT, default ./out).")
@click.option("--trace", "trace_path", type=str, default=None,
              help="Also write the state-transition trace to this file.")
def cmd_run(kind, safety, atten_db, seed, reps, config_path, out_path, trace_path):
    """Run one scenario; writes durations.csv, summary.txt and ecdf.csv."""
    _validate_atten(atten_db)
    try:
        cfg = _build_scenario(
            config_path,
            kind=KIND_ALIASES[kind],
            safety=safety,
            attenuation_on_db=atten_db,
            seed=seed,
            repetitions=reps,
        )
    except ConfigError as exc:
        raise click.ClickException(str(exc)) from exc
    out = _out_dir(out_path)
    trace = [] if trace_path else None
    try:
        series = run_scenario(cfg, trace=trace)
    except TooManyDiscards as exc:
        click.echo(f"error: scenario infeasible: {exc}", err=True)
        sys.exit(EXIT_INFEASIBLE)
    stats = _write_run_artifacts(out, cfg, series)
    if trace_path:
        with open(trace_path, "w") as fh:
            for t, entity, old, new, label in trace:
                fh.write(f"{t} {entity} {old} {new} {label}\n")
    click.echo(
        f"{kind} atten={atten_db:g}dB safety={safety} n={stats.n} "
        f"mean={stats.mean:.4f}s std={stats.std:.4f}s discarded={series.discarded}"
    )


@main.command("sweep")
@click.option("--kind", type=click.Choice(sorted(KIND_ALIASES)), default="connect")
@click.option("--atten-db", "attens", type=float, multiple=True, required=True)
@click.option("--modes", type=click.Choice(["both", "iolw", "iolws"]), default="both")
@click.option("--seed", type=int, default=1, show_default=True)
@click.option("--reps", type=int, default=300, show_default=True)
@click.option("--jobs", type=int, default=1, show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_path", type=str, default=None)
def cmd_sweep(kind, attens, modes, seed, reps, jobs, config_path, out_path):
    """Run a grid of scenarios; one subdirectory per cell plus table.csv."""
    if not attens:
        raise click.BadParameter("at least one --atten-db required")
    for atten in attens:
        _validate_atten(atten)
    mode_list = ["iolw", "iolws"] if modes == "both" else [modes]
    cells = []
    for atten in attens:
        for mode in mode_list:
            try:
                cfg = _build_scenario(
                    config_path,
                    kind=KIND_ALIASES[kind],
                    safety=(mode == "iolws"),
                    attenuation_on_db=atten,
                    seed=seed,
                    repetitions=reps,
                )
            except ConfigError as exc:
                raise click.ClickException(str(exc)) from exc
            cells.append((atten, mode, cfg))

    out = _out_dir(out_path)
    results = {}
    try:
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                for (atten, mode, _), series in zip(
                    cells, pool.map(run_scenario, [c for _, _, c in cells])
                ):
                    results[(atten, mode)] = series
        else:
            for atten, mode, cfg in cells:
                results[(atten, mode)] = run_scenario(cfg)
    except TooManyDiscards as exc:
        _write_sweep_outputs(out, kind, cells, results, seed)
        click.echo(f"error: scenario infeasible: {exc}", err=True)
        sys.exit(EXIT_INFEASIBLE)
    _write_sweep_outputs(out, kind, cells, results, seed)
    click.echo(f"sweep complete: {len(results)} series under {out}")


def _write_sweep_outputs(out: Path, kind, cells, results, seed):
    stats = {}
    for atten, mode, cfg in cells:
        series = results.get((atten, mode))
        if series is None:
            continue
        cell_dir = out / f"{kind}_{atten:g}dB_{mode}"
        cell_dir.mkdir(parents=True, exist_ok=True)
        stats[(atten, mode)] = _write_run_artifacts(cell_dir, cfg, series)
    if not stats:
        return
    attens = sorted({a for a, _ in stats})
    with open(out / "table.csv", "w") as fh:
        fh.write(f"# iolwsim {__version__}\n")
        fh.write(f"# kind: {kind}\n")
        fh.write(f"# seed: {seed}\n")
        fh.write(
            "attenuation_db,"
            "iolw_min,iolws_min,iolw_max,iolws_max,"
            "iolw_mean,iolws_mean,iolw_std,iolws_std\n"
        )
        for atten in attens:
            row = [f"{atten:g}"]
            for field in ("min", "max", "mean", "std"):
                for mode in ("iolw", "iolws"):
                    cell = stats.get((atten, mode))
                    row.append(f"{getattr(cell, field):.4f}" if cell else "")
            fh.write(",".join(row) + "\n")


@main.command("calibrate")
@click.option("--reference", "reference_path", type=click.Path(exists=True), default=None,
              help="Reference tables file; defaults to the packaged tables.")
@click.option("--budget", type=int, default=12, show_default=True)
@click.option("--reps", type=int, default=40, show_default=True,
              help="Repetitions per simulated calibration point.")
@click.option("--seed", type=int, default=2024, show_default=True)
@click.option("--config", "config_path", type=str, default="iolwsim.yaml",
              help="Config file that receives the fitted per_curve section.")
def cmd_calibrate(reference_path, budget, reps, seed, config_path):
    """Fit the loss curve to the reference connect means; writes per_curve."""
    tables = load_reference_tables(reference_path)
    reference = [
        CalibrationRow(r.attenuation_db, r.rssi_dbm, r.iolw["mean"])
        for r in tables.connect
    ]
    raw = {}
    if os.path.exists(config_path):
        raw = load_config(config_path)
    profile = profile_from(raw)
    rssi_map = rssi_map_from(raw)

    def runner(curve, atten):
        cfg = ScenarioConfig(
            attenuation_on_db=atten,
            repetitions=reps,
            seed=seed,
            per_curve=curve,
            profile=profile,
            rssi_map=rssi_map,
        )
        return summarize(run_scenario(cfg)).mean

    try:
        curve = calibrate_per_curve(
            reference, runner, budget=budget, seed=seed, rssi_map=rssi_map
        )
    except CalibrationDiverged as exc:
        click.echo(f"error: calibration diverged: {exc}", err=True)
        for atten, rel in sorted(exc.residuals.items()):
            click.echo(f"  {atten:g} dB: {rel:+.1%}", err=True)
        sys.exit(EXIT_CALIBRATION)
    write_per_curve(config_path, curve)
    click.echo(
        f"fitted per_curve: rssi_mid={curve.rssi_mid:g} slope={curve.slope:g} "
        f"floor={curve.floor:g} -> {config_path}"
    )
    for row in reference:
        mean = runner(curve, row.attenuation_db)
        rel = (mean - row.target_mean_s) / row.target_mean_s
        click.echo(f"  {row.attenuation_db:g} dB: sim {mean:.3f} s vs {row.target_mean_s:.3f} s ({rel:+.1%})")


@main.command("report")
@click.option("--sweep-dir", type=click.Path(exists=True), required=True,
              help="Directory produced by a connect sweep.")
@click.option("--handover-dir", type=click.Path(exists=True), default=None,
              help="Optional handover sweep directory for the surplus checks.")
@click.option("--reference", "reference_path", type=click.Path(exists=True), default=None)
def cmd_report(sweep_dir, handover_dir, reference_path):
    """Compare sweep outputs against the reference tables; exit 0 iff all pass."""
    tables = load_reference_tables(reference_path)
    sweep = Path(sweep_dir)
    all_pass = True
    found = 0
    connect_means = {}
    for row in tables.connect:
        for mode in ("iolw", "iolws"):
            cell = sweep / f"connect_{row.attenuation_db:g}dB_{mode}" / "durations.csv"
            if not cell.exists():
                continue
            found += 1
            series = series_from_csv(cell)
            stats = summarize(series)
            report = compare_to_reference(stats, row, mode)
            connect_means[(row.attenuation_db, mode)] = stats.mean
            for comp in report.fields:
                mark = "pass" if comp.passed else "FAIL"
                all_pass &= comp.passed
                click.echo(
                    f"connect {row.attenuation_db:g}dB {mode} {comp.field}: "
                    f"{comp.observed:.4f} vs {comp.reference:.4f} "
                    f"({comp.relative_error:+.1%}, tol {comp.tolerance:.0%}) {mark}"
                )
            for rssi, limit in tables.connect_q99:
                if rssi == row.rssi_dbm and mode == "iolw":
                    q99 = ECDF(series).quantile(0.99)
                    ok = q99 <= limit + 0.04  # reference point plus one retry slot
                    all_pass &= ok
                    click.echo(
                        f"connect 99% quantile at {rssi:g} dBm: {q99:.3f} s "
                        f"(reference {limit:g} s) {'pass' if ok else 'FAIL'}"
                    )
    if found == 0:
        click.echo("error: no sweep outputs found", err=True)
        sys.exit(EXIT_CONFIG)

    if handover_dir:
        hdir = Path(handover_dir)
        low_ms, high_ms = tables.handover_surplus_ms
        for cell in sorted(hdir.glob("handover_*dB_*")):
            name = cell.name  # handover_<atten>dB_<mode>
            atten = float(name.split("_")[1].removesuffix("dB"))
            mode = name.split("_")[2]
            series = series_from_csv(cell / "durations.csv")
            stats = summarize(series)
            base = connect_means.get((atten, mode))
            if base is not None and atten <= 65:
                surplus_ms = (stats.mean - base) * 1000.0
                ok = low_ms <= surplus_ms <= high_ms and stats.max <= tables.handover_max_s
                all_pass &= ok
                click.echo(
                    f"handover {atten:g}dB {mode}: surplus {surplus_ms:.0f} ms "
                    f"(band [{low_ms:g}, {high_ms:g}] ms), max {stats.max:.3f} s "
                    f"{'pass' if ok else 'FAIL'}"
                )
            rssi = rssi_from_attenuation(atten)
            for ref_rssi, limit in tables.handover_q99:
                if abs(rssi - ref_rssi) < 1.5 and mode == "iolw":
                    q99 = ECDF(series).quantile(0.99)
                    ok = q99 <= limit + 0.05
                    all_pass &= ok
                    click.echo(
                        f"handover 99% quantile at {ref_rssi:g} dBm: {q99:.3f} s "
                        f"(reference {limit:g} s) {'pass' if ok else 'FAIL'}"
                    )
    click.echo("overall: " + ("PASS" if all_pass else "FAIL"))
    sys.exit(EXIT_OK if all_pass else 1)


if __name__ == "__main__":
    main()
