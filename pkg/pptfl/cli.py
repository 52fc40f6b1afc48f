"""
Command-line surface: scenario runs, experiment tables and the oracle check.
"""

import sys
from pathlib import Path

import click
import numpy as np
from rich.table import Table

from pptfl.bench import BENCH_OPS, run_bench
from pptfl.config import get_config
from pptfl.errors import ConfigError, PPTError
from pptfl.log import console, setup_logging
from pptfl.scenario import load_scenario
from pptfl.simulator import connectivity_sweep, dropout_series, run_scenario, write_outputs

EXIT_FAILED = 1
EXIT_BAD_CONFIG = 2


def _fail(message, code):
    console.print(f"❌ {message}")
    sys.exit(code)


def _table(title, frame):
    table = Table(title=title)
    for column in frame.columns:
        table.add_column(str(column), justify="right")
    for row in frame.itertuples(index=False):
        table.add_row(*(f"{v:.4f}" if isinstance(v, float) else str(v) for v in row))
    console.print(table)


def _load(path, seed):
    try:
        return load_scenario(path, seed)
    except ConfigError as e:
        _fail(f"Invalid scenario: {e}", EXIT_BAD_CONFIG)


def _parse_ints(text):
    try:
        return [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got '{text}'") from None


@click.group()
@click.option("--env", default=None, help="Settings profile (development, production, testing).")
@click.pass_context
def cli(ctx, env):
    """PPT federated-learning simulator."""
    settings = get_config(env)
    setup_logging(settings.LOG_LEVEL)
    ctx.obj = settings


@cli.command()
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None, help="Override the scenario seed.")
@click.option("--debug-dump-keys", is_flag=True, help="Also write every communication key (insecure).")
@click.pass_obj
def run(settings, config_path, seed, debug_dump_keys):
    """Run every round of a scenario and write its outputs."""
    cfg, output = _load(config_path, seed)
    out_dir = Path(settings.OUTPUT_ROOT) / (output.directory or cfg.name)
    try:
        result = run_scenario(cfg, record_challenges=output.record_challenges, debug_keys=debug_dump_keys)
        write_outputs(result, out_dir, output)
    except ConfigError as e:
        _fail(f"Invalid scenario: {e}", EXIT_BAD_CONFIG)
    except PPTError as e:
        _fail(f"Run failed: {e}", EXIT_FAILED)
    summary = result.summary()
    console.print(f"✅ {cfg.name}: {summary['rounds_completed']} rounds completed, "
                  f"{summary['rounds_aborted']} aborted")
    console.print(f"📊 Mean transmissions per round: {summary['mean_transmissions']:.1f}")
    if summary["attacks"]:
        console.print(f"📊 Attacks: {summary['attacks']} staged, {summary['successful_attacks']} succeeded")
    console.print(f"📊 Transcript hash: {summary['transcript_hash']}")
    console.print(f"📁 Outputs in {out_dir}")


@cli.command("verify-oracle")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None)
def verify_oracle(config_path, seed):
    """Run PPT next to plain FedAvg; exit 1 on any bit mismatch."""
    cfg, output = _load(config_path, seed)
    try:
        result = run_scenario(cfg)
    except PPTError as e:
        _fail(f"Run failed: {e}", EXIT_FAILED)
    mismatched = [r.round for r in result.completed if not (r.oracle_match and r.sum_match)]
    if mismatched:
        _fail(f"Aggregate differs from the FedAvg oracle in rounds {mismatched}", EXIT_FAILED)
    if not result.completed and cfg.protocol.rounds:
        _fail("No round completed", EXIT_FAILED)
    console.print(f"✅ {len(result.completed)} rounds bit-identical to the FedAvg oracle")


@cli.command("sweep-connectivity")
@click.option("--pool-sizes", default="1000,2000,5000", show_default=True)
@click.option("--ring-sizes", default="0,10,20,30,40", show_default=True)
@click.option("-n", "--clients", default=200, show_default=True)
@click.option("--trials", default=2000, show_default=True, help="Sampled ring pairs per row.")
@click.option("--graph-trials", default=50, show_default=True, help="Sampled key graphs per row.")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="CSV destination.")
@click.pass_obj
def sweep_connectivity(settings, pool_sizes, ring_sizes, clients, trials, graph_trials, seed, out):
    """Analytic vs empirical shared-key probability per (pool, ring) size."""
    table = connectivity_sweep(_parse_ints(pool_sizes), _parse_ints(ring_sizes), clients, trials, seed,
                               graph_trials, settings.WORKERS)
    _table("Key connectivity", table)
    out = Path(out) if out else Path(settings.OUTPUT_ROOT) / "connectivity.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(out, index=False)
    console.print(f"📁 {out}")


@cli.command("dropout-series")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--counts", default="0,1,5,10,15", show_default=True)
@click.option("--repetitions", type=int, default=None, help="Defaults to the settings profile.")
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@click.pass_obj
def dropout_series_cmd(settings, config_path, counts, repetitions, seed, out):
    """One row per dropout count, averaged over seeded repetitions."""
    cfg, output = _load(config_path, seed)
    try:
        table = dropout_series(cfg, _parse_ints(counts), repetitions or settings.REPETITIONS, settings.WORKERS)
    except ConfigError as e:
        _fail(str(e), EXIT_BAD_CONFIG)
    _table("Dropout series", table)
    out = Path(out) if out else Path(settings.OUTPUT_ROOT) / (output.directory or cfg.name) / "dropouts.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(out, index=False)
    if not table["transmissions"].is_monotonic_decreasing:
        console.print("⚠️  Average transmissions are not non-increasing in the dropout count")
    console.print(f"📁 {out}")


@cli.command()
@click.option("--ops", default=",".join(BENCH_OPS), show_default=True)
@click.option("--dim", default=1000, show_default=True, help="Payload length in parameters.")
@click.option("--repeats", default=50, show_default=True)
@click.option("--suite", type=click.Choice(["aead", "transparent"]), default="aead", show_default=True)
@click.option("--runs", default=1, show_default=True, help="Independent bench runs for run-to-run spread.")
@click.pass_obj
def bench(settings, ops, dim, repeats, suite, runs):
    """Relative cost of the per-hop operations. Not comparable to absolute figures from other hardware."""
    ops = tuple(op.strip() for op in ops.split(",") if op.strip())
    try:
        tables = [run_bench(ops, dim, repeats, suite, seed) for seed in range(runs)]
    except PPTError as e:
        _fail(str(e), EXIT_BAD_CONFIG)
    table = tables[0]
    if runs > 1:
        means = [t["mean_ms"].to_numpy() for t in tables]
        table = table.copy()
        stacked = np.vstack(means)
        table["run_cv"] = stacked.std(axis=0, ddof=1) / stacked.mean(axis=0)
    _table("Operation cost", table)