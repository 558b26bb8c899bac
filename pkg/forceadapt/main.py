# forceadapt/main.py
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import click
import pandas as pd
from rich.console import Console
from rich.table import Table

from .checkpoint import checkpoint_load
from .config import config_hash, get_settings, load_config
from .errors import ConfigError, ForceAdaptError
from .evaluation import (
    EXPERIMENT_GRID,
    GRID_BY_NAME,
    discover_runs,
    envelope_report,
    envelope_summary,
    eval_policy,
    grid_config,
    plot_data,
    summarize_seeds,
    sweep,
    write_report,
)
from .log import setup_logging
from .robot_model import resolve_model
from .trainer import Trainer

logger = logging.getLogger(__name__)

console = Console()
err_console = Console(stderr=True)


def _parse_levels(text: str) -> List[float]:
    try:
        levels = [float(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise click.BadParameter(f"force levels must be comma-separated numbers, got '{text}'") from e
    if not levels or any(not 0.0 <= lvl <= 1.0 for lvl in levels):
        raise click.BadParameter("force levels must lie in [0, 1]")
    return levels


def _frame_table(frame: pd.DataFrame, title: str, columns: Optional[Sequence[str]] = None) -> Table:
    columns = list(columns or frame.columns)
    table = Table(title=title)
    for col in columns:
        table.add_column(str(col), justify="right" if pd.api.types.is_numeric_dtype(frame[col]) else "left")
    for _, row in frame.iterrows():
        table.add_row(*(f"{row[c]:.4g}" if isinstance(row[c], float) else str(row[c]) for c in columns))
    return table


@click.group()
@click.option("--log-level", default=None, help="Overrides FORCEADAPT_LOG_LEVEL.")
def cli(log_level: Optional[str]) -> None:
    """Force-adaptive humanoid loco-manipulation: training, evaluation and diagnostics."""
    setup_logging(log_level)


@cli.command("model-info")
@click.argument("model")
def model_info(model: str) -> None:
    """Summarize a builtin model or a model file."""
    robot = resolve_model(model)
    console.print(
        f"[bold]{robot.name}[/bold]  n={robot.dof}  n_l={robot.lower_dof_count}  n_u={robot.upper_dof_count}  "
        f"floating={robot.base.floating}  base_mass={robot.base.mass:g} kg"
    )
    table = Table(title="upper-body joints")
    for col in ("side", "joint", "lower", "upper", "default", "tau_lim", "kp", "kd", "link mass"):
        table.add_column(col)
    for arm in robot.arms:
        for i, joint in enumerate(arm.joints):
            table.add_row(
                arm.side, joint.name, f"{joint.position_limits[0]:.3g}", f"{joint.position_limits[1]:.3g}",
                f"{joint.default_position:.3g}", f"{joint.torque_limit:g}", f"{joint.pd_gains[0]:g}",
                f"{joint.pd_gains[1]:g}", f"{arm.masses[i]:g}",
            )
    console.print(table)


@cli.command()
@click.argument("model")
@click.option("--poses", default=100, show_default=True, type=click.IntRange(min=1))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--clip", "clip_range", default="narrow", show_default=True, type=click.Choice(["narrow", "wide"]))
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), help="CSV path; stdout when omitted.")
def envelope(model: str, poses: int, seed: int, clip_range: str, out: Optional[Path]) -> None:
    """Per-axis admissible force bounds at random arm poses."""
    robot = resolve_model(model)
    report = envelope_report(robot, poses, seed, clip_range)
    write_report(report, out if out is not None else sys.stdout, config_hash(robot), seed)
    err_console.print(_frame_table(envelope_summary(report), f"{robot.name} envelope quantiles ({clip_range} clip)"))


@cli.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--seed", type=int, default=None, help="Overrides train.seed.")
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.option("--updates", type=click.IntRange(min=1), default=None, help="Overrides the update count from train.total_steps.")
@click.option("--variant", type=click.Choice([e.name for e in EXPERIMENT_GRID]), default=None, help="Experiment-grid row applied on top of the config.")
def train(config: Path, seed: Optional[int], out: Optional[Path], updates: Optional[int], variant: Optional[str]) -> None:
    """Train a policy from a TOML experiment config."""
    cfg = load_config(config)
    if variant is not None:
        cfg = grid_config(cfg, GRID_BY_NAME[variant], seed)
    elif seed is not None:
        cfg = cfg.model_copy(update={"train": cfg.train.model_copy(update={"seed": seed})})
    if out is None:
        out = get_settings().runs_dir / (variant or cfg.train.mode) / f"seed_{cfg.train.seed}"
    logger.info("run start: mode=%s curriculum=%s seed=%d config=%s out=%s",
                cfg.train.mode, cfg.train.force_curriculum, cfg.train.seed, config_hash(cfg), out)
    rows = Trainer(cfg, out).train(updates)
    last = rows[-1]
    console.print(
        f"done: {last['update']} updates, e_upper={last['e_upper']:.4f} e_root={last['e_root']:.4f} "
        f"alpha_g={last['alpha_g']:.2f} -> {out / 'final.ckpt'}"
    )


@cli.command("eval")
@click.argument("checkpoint", type=click.Path(dir_okay=False, path_type=Path))
@click.option("--alpha", type=click.FloatRange(0.0, 1.0), multiple=True, help="Force level(s); defaults to eval.levels.")
@click.option("--episodes", type=click.IntRange(min=1), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option("--trajectories", type=click.Path(file_okay=False, path_type=Path), default=None, help="Dump instance-0 episodes here.")
def eval_command(checkpoint: Path, alpha: Sequence[float], episodes: Optional[int], seed: Optional[int],
                 out: Optional[Path], trajectories: Optional[Path]) -> None:
    """Evaluate a checkpoint at fixed force levels."""
    ckpt = checkpoint_load(checkpoint)
    cfg = ckpt.config
    seed = cfg.eval.seed if seed is None else seed
    rows = [
        eval_policy(ckpt, level, episodes, seed, trajectory_dir=trajectories / f"alpha_{level:g}" if trajectories else None)
        for level in (alpha or cfg.eval.levels)
    ]
    report = pd.DataFrame(rows)
    if out is not None:
        write_report(report, out, config_hash(cfg), seed)
    console.print(_frame_table(report, str(checkpoint), ["mode", "curriculum", "level", "episodes", "e_upper_mean", "e_root_mean", "fall_rate"]))


@cli.command("sweep")
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--levels", default="0,0.5,1", show_default=True)
@click.option("--episodes", type=click.IntRange(min=1), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), default=None, help="Defaults to RUN_DIR/sweep.csv.")
def sweep_command(run_dir: Path, levels: str, episodes: Optional[int], seed: Optional[int], out: Optional[Path]) -> None:
    """Evaluate every run under RUN_DIR at each force level."""
    report = sweep(discover_runs(run_dir), _parse_levels(levels), episodes, seed)
    out = out or run_dir / "sweep.csv"
    write_report(report, out, "-", seed)
    summary = summarize_seeds(report)
    if len(summary):
        console.print(_frame_table(summary, "seed means"))
    absent = int((report["status"] == "absent").sum())
    console.print(f"{len(report)} rows ({absent} absent) -> {out}")


@cli.command("plot-data")
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None, help="Defaults to RUN_DIR.")
def plot_data_command(run_dir: Path, out: Optional[Path]) -> None:
    """Training-curve CSVs (force scale, action noise, tracking error, rewards)."""
    out = out or run_dir
    curves = plot_data(run_dir)
    if all(frame.empty for frame in curves.values()):
        raise click.UsageError(f"no training_log.csv found under {run_dir}")
    for name, frame in curves.items():
        path = out / f"curves_{name}.csv"
        write_report(frame, path)
        console.print(f"{name}: {len(frame)} rows -> {path}")


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    """Runs the CLI and maps failures to exit codes: 1 for usage or config errors, 2 for runtime errors."""
    try:
        rv = cli.main(args=list(argv) if argv is not None else None, prog_name="forceadapt", standalone_mode=False)
    except click.UsageError as e:
        e.show()
        return 1
    except click.Abort:
        err_console.print("aborted")
        return 1
    except ConfigError as e:
        err_console.print(f"[red]config error:[/red] {e}")
        return 1
    except click.ClickException as e:
        e.show()
        return 2
    except ForceAdaptError as e:
        err_console.print(f"[red]error:[/red] {e}")
        return 2
    except OSError as e:
        err_console.print(f"[red]i/o error:[/red] {e}")
        return 2
    return rv if isinstance(rv, int) else 0


if __name__ == "__main__":
    sys.exit(cli_main())
