# forceadapt/evaluation.py
"""
Evaluation harness: tracking metrics, force-level sweeps over trained runs,
force-envelope diagnostics and plot-ready training curves. Every report is a
pandas DataFrame written as CSV behind a single `#` header comment line.
"""
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, IO, Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch

from .checkpoint import Checkpoint, checkpoint_load
from .config import ExperimentConfig, config_hash
from .errors import CheckpointError, ModelFormatError, ModelValidationError
from .force_curriculum import CLIP_PRESETS, ForceEnvelope, envelope_bounds, gravity_feasible
from .kinematics import chain_kinematics, gravity_torque_from, jacobian_at
from .log import progress
from .robot_model import RobotModel
from .sim_env import DeskEnv, TrajectoryRecorder
from .trainer import Policy, load_policy

logger = logging.getLogger(__name__)

REPORT_FORMAT_VERSION = 1
ActFn = Callable[[DeskEnv], tuple]


# --- Experiment grid ---

@dataclass(frozen=True)
class GridEntry:
    name: str
    mode: str
    curriculum: str
    clip_range: str = "narrow"


EXPERIMENT_GRID: List[GridEntry] = [
    GridEntry("upper_pd_no_force", "upper_pd", "off"),
    GridEntry("upper_pd", "upper_pd", "on"),
    GridEntry("upper_pid", "upper_pid", "on"),
    GridEntry("upper_pd_id", "upper_pd_id", "on"),
    GridEntry("monolithic_no_force", "monolithic", "off"),
    GridEntry("monolithic", "monolithic", "on"),
    GridEntry("falcon_no_force", "falcon", "off"),
    GridEntry("falcon", "falcon", "on"),
    GridEntry("falcon_naive", "falcon", "naive"),
    GridEntry("falcon_wide_clip", "falcon", "on", "wide"),
]
GRID_BY_NAME = {entry.name: entry for entry in EXPERIMENT_GRID}


def grid_config(base: ExperimentConfig, entry: GridEntry, seed: Optional[int] = None) -> ExperimentConfig:
    train_update = {"mode": entry.mode, "force_curriculum": entry.curriculum}
    if seed is not None:
        train_update["seed"] = seed
    return base.model_copy(update={
        "train": base.train.model_copy(update=train_update),
        "curriculum": base.curriculum.model_copy(update={"clip_range": entry.clip_range}),
    })


# --- Metrics ---

def tracking_errors(
    q_upper: np.ndarray, q_upper_ref: np.ndarray, root_vel: np.ndarray, root_vel_cmd: np.ndarray
) -> Dict[str, float]:
    """Episode errors from per-step arrays: joints (T, n_u); root (T, 3) as (v_x, v_y, w_yaw)."""
    upper = np.mean(np.abs(np.asarray(q_upper) - np.asarray(q_upper_ref)), axis=-1)
    root = np.abs(np.asarray(root_vel) - np.asarray(root_vel_cmd))
    return {
        "e_upper": float(np.mean(upper)),
        "e_root": float(np.mean(root)),
        "e_root_lin": float(np.mean(root[:, :2])),
        "e_root_ang": float(np.mean(root[:, 2])),
    }


def run_episodes(env: DeskEnv, act: ActFn, episodes: int, on_done: Optional[Callable[[np.ndarray], None]] = None) -> List[Dict[str, float]]:
    """Steps the env with `act(env) -> (action, feedforward)` until `episodes` episodes complete.

    Every instance contributes the same quota of ceil(episodes / num_envs) consecutive
    episodes, so short (fallen) episodes are not over-sampled. The result is trimmed
    round-robin: each instance's first episode, then each instance's second, and so on.
    """
    quota = math.ceil(episodes / env.num_envs)
    per_instance: List[List[Dict[str, float]]] = [[] for _ in range(env.num_envs)]
    env.pop_completed_episodes()
    while any(len(done) < quota for done in per_instance):
        action, feedforward = act(env)
        result = env.step(action, feedforward)
        if on_done is not None:
            on_done(result.done)
        for episode in env.pop_completed_episodes():
            done = per_instance[episode["instance"]]
            if len(done) < quota:
                done.append(episode)
    ordered = [done[k] for k in range(quota) for done in per_instance]
    return ordered[:episodes]


def summarize_episodes(episodes: Sequence[Dict[str, float]]) -> Dict[str, float]:
    frame = pd.DataFrame(list(episodes))
    return {
        "episodes": len(frame),
        "e_upper_mean": float(frame["e_upper"].mean()),
        "e_upper_std": float(frame["e_upper"].std(ddof=0)),
        "e_root_mean": float(frame["e_root"].mean()),
        "e_root_std": float(frame["e_root"].std(ddof=0)),
        "e_root_lin_mean": float(frame["e_root_lin"].mean()),
        "e_root_ang_mean": float(frame["e_root_ang"].mean()),
        "fall_rate": float(frame["fell"].mean()),
        "feasibility_mean": float(frame["feasibility"].mean()),
    }


def policy_actor(policy: Policy) -> ActFn:
    def act(env: DeskEnv):
        step = policy.act(env, env.observation, env.privileged(), deterministic=True)
        return step.env_action, step.feedforward

    return act


def eval_policy(
    checkpoint: Union[Path, Checkpoint],
    level: float,
    episodes: Optional[int] = None,
    seed: Optional[int] = None,
    num_envs: Optional[int] = None,
    trajectory_dir: Optional[Path] = None,
) -> Dict[str, object]:
    """Mean-action episodes with the force scale pinned at `level`; returns one report row."""
    if not 0.0 <= level <= 1.0:
        raise ValueError(f"force level must lie in [0, 1], got {level}")
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else checkpoint_load(checkpoint)
    cfg = ckpt.config
    policy = load_policy(ckpt)
    episodes = episodes or cfg.eval.episodes
    seed = cfg.eval.seed if seed is None else seed
    env_cfg = cfg.env.model_copy(update={"episode_length_s": cfg.eval.episode_length_s})
    recorder = TrajectoryRecorder(trajectory_dir, config_hash(cfg)) if trajectory_dir is not None else None
    env = DeskEnv(
        policy.model, env_cfg, cfg.curriculum, num_envs=min(num_envs or cfg.eval.num_envs, episodes),
        seed=seed, force_mode="torque_aware", recorder=recorder,
    )
    env.set_force_scale(level)
    on_done = None
    if policy.controller is not None:
        policy.controller.reset(env.num_envs)
        on_done = policy.controller.reset_indices
    with torch.no_grad():
        completed = run_episodes(env, policy_actor(policy), episodes, on_done)
    row: Dict[str, object] = {
        "mode": cfg.train.mode,
        "curriculum": cfg.train.force_curriculum,
        "clip_range": cfg.curriculum.clip_range,
        "train_seed": cfg.train.seed,
        "level": float(level),
        "status": "ok",
    }
    row.update(summarize_episodes(completed))
    logger.info(
        "eval %s/%s alpha_g=%.2f: e_upper=%.4f e_root=%.4f falls=%.2f",
        row["mode"], row["curriculum"], level, row["e_upper_mean"], row["e_root_mean"], row["fall_rate"],
    )
    return row


# --- Sweeps ---

@dataclass(frozen=True)
class SweepEntry:
    name: str
    path: Path
    mode: str = ""
    curriculum: str = ""
    clip_range: str = ""


METRIC_COLUMNS = [
    "episodes", "e_upper_mean", "e_upper_std", "e_root_mean", "e_root_std",
    "e_root_lin_mean", "e_root_ang_mean", "fall_rate", "feasibility_mean",
]
REPORT_COLUMNS = ["run", "mode", "curriculum", "clip_range", "train_seed", "level", "status"] + METRIC_COLUMNS


def _absent_row(entry: SweepEntry, level: float) -> Dict[str, object]:
    row = {"run": entry.name, "mode": entry.mode, "curriculum": entry.curriculum, "clip_range": entry.clip_range,
           "train_seed": -1, "level": float(level), "status": "absent"}
    row.update({c: np.nan for c in METRIC_COLUMNS})
    return row


def sweep(
    entries: Sequence[SweepEntry],
    levels: Sequence[float] = (0.0, 0.5, 1.0),
    episodes: Optional[int] = None,
    seed: Optional[int] = None,
) -> pd.DataFrame:
    """One row per (checkpoint, level).

    Checkpoints that cannot be read, or that do not fit their robot model, yield
    `absent` rows and the sweep moves on to the next entry.
    """
    rows = []
    for entry in progress(entries, desc="sweep", total=len(entries)):
        try:
            ckpt = checkpoint_load(entry.path)
            entry_rows = []
            for level in levels:
                row = {"run": entry.name}
                row.update(eval_policy(ckpt, level, episodes, seed))
                entry_rows.append(row)
        except (CheckpointError, ModelFormatError, ModelValidationError) as e:
            logger.warning("checkpoint %s unavailable: %s", entry.path, e)
            entry_rows = [_absent_row(entry, level) for level in levels]
        rows.extend(entry_rows)
    report = pd.DataFrame(rows, columns=REPORT_COLUMNS)
    return report.sort_values(["mode", "curriculum", "clip_range", "level", "run"], kind="mergesort").reset_index(drop=True)


def discover_runs(run_dir: Path) -> List[SweepEntry]:
    """Checkpoints under run_dir, plus an absent entry for every grid variant with no run."""
    run_dir = Path(run_dir)
    entries: List[SweepEntry] = []
    for path in sorted(run_dir.rglob("final.ckpt")):
        rel = path.parent.relative_to(run_dir)
        variant = GRID_BY_NAME.get(rel.parts[0]) if rel.parts else None
        entries.append(SweepEntry(
            str(rel), path,
            variant.mode if variant else "", variant.curriculum if variant else "", variant.clip_range if variant else "",
        ))
    found = {Path(e.name).parts[0] for e in entries if Path(e.name).parts}
    for variant in EXPERIMENT_GRID:
        if variant.name not in found:
            entries.append(SweepEntry(variant.name, run_dir / variant.name / "final.ckpt", variant.mode, variant.curriculum, variant.clip_range))
    return entries


def summarize_seeds(report: pd.DataFrame) -> pd.DataFrame:
    """Seed-mean and standard error of E_upper / E_root per variant and level."""
    ok = report[report["status"] == "ok"]
    grouped = ok.groupby(["mode", "curriculum", "clip_range", "level"], sort=True)
    summary = grouped.agg(
        seeds=("e_upper_mean", "size"),
        e_upper=("e_upper_mean", "mean"),
        e_upper_sem=("e_upper_mean", "sem"),
        e_root=("e_root_mean", "mean"),
        e_root_sem=("e_root_mean", "sem"),
        fall_rate=("fall_rate", "mean"),
    )
    return summary.reset_index()


# --- Force envelope diagnostics ---

def envelope_report(model: RobotModel, poses: int, seed: int = 0, clip_range: str = "narrow", epsilon: float = 1e-6) -> pd.DataFrame:
    """Per-axis admissible bounds at random within-limit poses, before and after clipping.

    Bounds are for the force exerted by the EE (reaction Jacobian at the EE CoM),
    with nominal masses. Poses whose gravity torque alone breaks the limits get zero bounds.
    """
    rng = np.random.default_rng(seed)
    clip_min, clip_max = CLIP_PRESETS[clip_range]
    rows = []
    for pose_id in range(poses):
        for arm in model.arms:
            q = rng.uniform(arm.lower_limits, arm.upper_limits)
            kin = chain_kinematics(arm, q)
            tau_g = gravity_torque_from(kin, arm.masses)
            feasible = bool(gravity_feasible(arm.torque_limits, tau_g))
            if feasible:
                f_min, f_max = envelope_bounds(-jacobian_at(kin, kin.ee_com), arm.torque_limits, tau_g, epsilon)
            else:
                f_min, f_max = np.zeros(3), np.zeros(3)
            clipped = ForceEnvelope(f_min, f_max, -np.full(3, np.inf), np.full(3, np.inf)).clipped(clip_min, clip_max)
            for i, axis in enumerate("xyz"):
                rows.append({
                    "pose_id": pose_id, "side": arm.side, "axis": axis, "gravity_feasible": feasible,
                    "f_min": f_min[i], "f_max": f_max[i], "clip_min": clip_min[i], "clip_max": clip_max[i],
                    "f_min_clipped": clipped.f_min[i], "f_max_clipped": clipped.f_max[i],
                })
    return pd.DataFrame(rows)


def envelope_summary(report: pd.DataFrame, quantiles: Iterable[float] = (0.05, 0.5, 0.95)) -> pd.DataFrame:
    cols = ["f_min_clipped", "f_max_clipped"]
    summary = report.groupby(["side", "axis"])[cols].quantile(list(quantiles))
    summary.index = summary.index.set_names(["side", "axis", "quantile"])
    return summary.reset_index()


# --- Training curves ---

def plot_data(run_dir: Path) -> Dict[str, pd.DataFrame]:
    """Force-scale, action-noise, tracking-error and reward curves of every training log under run_dir."""
    run_dir = Path(run_dir)
    alpha, noise, tracking, rewards = [], [], [], []
    for path in sorted(run_dir.rglob("training_log.csv")):
        run = str(path.parent.relative_to(run_dir)) or "."
        log = pd.read_csv(path)
        base = log[["update", "env_steps"]].assign(run=run)
        alpha.append(base.assign(alpha_g=log["alpha_g"]))
        tracking.append(base.assign(e_upper=log["e_upper"], e_root=log["e_root"], fall_rate=log["fall_rate"]))
        for col in [c for c in log.columns if c.endswith("_noise_std")]:
            noise.append(base.assign(agent=col[: -len("_noise_std")], noise_std=log[col]))
        rewards.append(base.assign(reward_lower=log["reward_lower"], reward_upper=log["reward_upper"]))
    frames = {"alpha": alpha, "noise_std": noise, "tracking": tracking, "rewards": rewards}
    return {
        name: (pd.concat(parts, ignore_index=True)[["run"] + [c for c in parts[0].columns if c != "run"]] if parts else pd.DataFrame())
        for name, parts in frames.items()
    }


# --- CSV output ---

def write_report(frame: pd.DataFrame, out: Union[Path, IO[str]], config_digest: str = "-", seed: Optional[int] = None) -> None:
    header = f"# forceadapt-report format={REPORT_FORMAT_VERSION} config_hash={config_digest} seed={'-' if seed is None else seed}\n"
    body = frame.to_csv(index=False, float_format="%.9g", lineterminator="\n")
    if isinstance(out, (str, Path)):
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(header + body, encoding="utf-8")
    else:
        out.write(header + body)


def read_report(path: Path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")
