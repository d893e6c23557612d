"""
PowerSplit Workbench command line

    python powersplit/main.py simulate --scenario scenario-2 --controller lp-perfect --out runs/s2
    python powersplit/main.py train    --scenario scenario-1 --seeds 3 --out runs/train
    python powersplit/main.py compare  --scenario scenario-2 -c lp-perfect -c lp-persist -c bc
    python powersplit/main.py synth    --days 14 --seed 7 --out profiles.csv
    python powersplit/main.py sweep    --scenario scenario-2 --soc-weight 0 --soc-weight 1 --temperature-weight 1

Exit codes: 0 success, 2 configuration, 3 data, 4 solver, 5 training error.
"""

import sys
from pathlib import Path
from typing import Optional, Sequence

import click
import structlog

from config.app_config import get_config
from config.logging_config import configure_from
from services.errors import WorkbenchError
from services.export_service import to_json
from services.ingest_service import synth_profiles, write_csv
from services.scenario_service import (
    CONTROLLERS, compare, load_scenario, run_scenario, sweep_weights, train_scenario,
)

logger = structlog.get_logger(__name__)

scenario_option = click.option('--scenario', 'scenario_source', required=True,
                               help="Scenario YAML file or preset (scenario-1, scenario-2)")


def _default_out(config, *parts: str) -> Path:
    return Path(config.OUTPUT_DIR, *parts)


@click.group()
@click.option('--env', 'env_name', default=None, help="Configuration profile (development, production, testing)")
@click.pass_context
def cli(ctx, env_name: Optional[str]):
    """Dispatch workbench for multi-string battery storage."""
    config = get_config(env_name)
    config.validate_config()
    configure_from(config)
    ctx.obj = config


@cli.command()
@scenario_option
@click.option('--controller', type=click.Choice(CONTROLLERS), default=None)
@click.option('--out', type=click.Path(file_okay=False), default=None)
@click.option('--seed', type=int, default=None)
@click.option('--horizon', type=int, default=None, help="LP horizon in steps")
@click.option('--full-year', is_flag=True, help="Do not trim long scenarios")
@click.option('--checkpoint', type=click.Path(dir_okay=False), default=None)
@click.pass_obj
def simulate(config, scenario_source, controller, out, seed, horizon, full_year, checkpoint):
    """Run one scenario with one controller and write its report."""
    scenario = load_scenario(scenario_source, config).with_overrides(
        controller=controller, seed=seed, horizon=horizon, full_year=full_year or None,
        checkpoint=checkpoint)
    out = out or _default_out(config, scenario.name, scenario.controller)
    report = run_scenario(scenario, out)
    click.echo(to_json(report.summary.to_dict()), nl=False)
    click.echo(f"report written to {out}")


@cli.command()
@scenario_option
@click.option('--out', type=click.Path(file_okay=False), default=None)
@click.option('--seed', type=int, default=None)
@click.option('--seeds', type=click.IntRange(min=1), default=1, help="Independent training runs")
@click.option('--horizon', type=int, default=None, help="Expert LP horizon in steps")
@click.option('--ppo-iterations', type=click.IntRange(min=0), default=None)
@click.pass_obj
def train(config, scenario_source, out, seed, seeds, horizon, ppo_iterations):
    """Expert demonstrations, behavior cloning and PPO; saves the best policy."""
    scenario = load_scenario(scenario_source, config).with_overrides(
        seed=seed, horizon=horizon, ppo_iterations=ppo_iterations)
    out = out or _default_out(config, scenario.name, 'train')
    run = train_scenario(scenario, seeds=seeds, out=out)
    best = run.report.get('best_validation_savings', run.report.get('statistics'))
    click.echo(f"policy written to {Path(out) / 'policy.json'} (validation savings: {best})")


@cli.command(name='compare')
@scenario_option
@click.option('--controller', '-c', 'controllers', multiple=True, required=True,
              type=click.Choice(CONTROLLERS))
@click.option('--out', type=click.Path(file_okay=False), default=None)
@click.option('--seed', type=int, default=None)
@click.option('--horizon', type=int, default=None)
@click.option('--checkpoint', type=click.Path(dir_okay=False), default=None)
@click.option('--workers', type=click.IntRange(min=1), default=None)
@click.pass_obj
def compare_command(config, scenario_source, controllers, out, seed, horizon, checkpoint, workers):
    """Run the scenario once per controller and tabulate the metrics."""
    if len(controllers) < 2:
        raise click.UsageError("compare needs at least two --controller options")
    base = load_scenario(scenario_source, config).with_overrides(seed=seed, horizon=horizon,
                                                         checkpoint=checkpoint)
    scenarios = [base.with_overrides(controller=name) for name in controllers]
    out = out or _default_out(config, base.name, 'compare')
    comparison = compare(scenarios, workers=workers or config.MAX_WORKERS, out=out)
    click.echo(comparison.table.to_string())


@cli.command()
@click.option('--days', type=click.IntRange(min=1), required=True)
@click.option('--seed', type=int, default=None, help="Default: DEFAULT_SEED")
@click.option('--out', type=click.Path(dir_okay=False), required=True)
@click.pass_obj
def synth(config, days, seed, out):
    """Write synthetic load / PV / price profiles as CSV."""
    series = synth_profiles(days, config.DEFAULT_SEED if seed is None else seed)
    write_csv(series, out)
    click.echo(f"{len(series)} rows written to {out}")


@cli.command()
@scenario_option
@click.option('--soc-weight', 'soc_weights', type=float, multiple=True, required=True)
@click.option('--temperature-weight', 'temperature_weights', type=float, multiple=True,
              required=True)
@click.option('--controller', type=click.Choice(CONTROLLERS), default=None)
@click.option('--out', type=click.Path(file_okay=False), default=None)
@click.option('--workers', type=click.IntRange(min=1), default=None)
@click.pass_obj
def sweep(config, scenario_source, soc_weights, temperature_weights, controller, out, workers):
    """Metrics over a grid of SOC / temperature weight multipliers."""
    scenario = load_scenario(scenario_source, config).with_overrides(controller=controller)
    out = out or _default_out(config, scenario.name, 'sweep')
    table = sweep_weights(scenario, soc_weights, temperature_weights,
                          workers=workers or config.MAX_WORKERS, out=out)
    click.echo(table.to_string(index=False))


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        cli.main(args=list(argv) if argv is not None else None, standalone_mode=False)
    except WorkbenchError as exc:
        logger.error('command_failed', **exc.to_dict())
        click.echo(f"error: {exc.message}", err=True)
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
