# forceadapt/trainer.py
"""
Dual-agent PPO with asymmetric critics.

Every training mode is a list of AgentLayouts: which goal blocks an actor
sees, which slice of the env action it owns and which reward stream it
optimizes. Critics always see the actor input plus privileged state.
The upper-body baselines replace the upper agent with a joint controller.
"""
import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import Checkpoint, checkpoint_load, checkpoint_save
from .config import EnvConfig, ExperimentConfig, TrainerConfig, config_hash, dump_config, get_settings
from .controllers import UpperJointController
from .errors import CheckpointMismatchError, NonFiniteError, TrainingDivergedError
from .estimator import ForceEstimator, train_force_estimator
from .force_curriculum import CurriculumState, update_alpha
from .log import progress
from .networks import Critic, GaussianActor
from .robot_model import RobotModel, resolve_model
from .sim_env import LOWER_DOF, DeskEnv, Observation, PrivilegedObservation

logger = logging.getLogger(__name__)


# --- Agent layouts ---

@dataclass(frozen=True)
class AgentLayout:
    name: str
    goals: Tuple[str, ...]
    actions: Literal["lower", "upper", "all"]
    reward: Literal["lower", "upper", "sum"]


AGENT_LAYOUTS: Dict[str, List[AgentLayout]] = {
    "falcon": [
        AgentLayout("lower", ("lower",), "lower", "lower"),
        AgentLayout("upper", ("upper",), "upper", "upper"),
    ],
    "monolithic": [AgentLayout("whole", ("lower", "upper"), "all", "sum")],
    "upper_pd": [AgentLayout("lower", ("lower", "upper"), "lower", "lower")],
    "upper_pid": [AgentLayout("lower", ("lower", "upper"), "lower", "lower")],
    "upper_pd_id": [AgentLayout("lower", ("lower", "upper", "force"), "lower", "lower")],
}
CONTROLLER_MODES = {"upper_pd": "pd", "upper_pid": "pid", "upper_pd_id": "pd_id"}
FORCE_MODES = {"on": "torque_aware", "off": "none", "naive": "naive"}


def policy_dims(model: RobotModel, env_cfg: EnvConfig) -> Dict[str, int]:
    n, H, arms = model.dof, env_cfg.history_length, len(model.arms)
    return {
        "proprio": H * (3 * n + 6),
        "lower": 6,
        "upper": model.upper_dof_count,
        "force": 3 * arms,
        "privileged": 3 + 3 * arms,
        "estimator": H * (2 * n + 6 + LOWER_DOF),
        "n": n,
    }


def action_slice(layout: AgentLayout, model: RobotModel) -> slice:
    if layout.actions == "lower":
        return slice(0, LOWER_DOF)
    if layout.actions == "upper":
        return slice(LOWER_DOF, model.dof)
    return slice(0, model.dof)


def agent_reward(layout: AgentLayout, reward_lower, reward_upper):
    if layout.reward == "lower":
        return reward_lower
    if layout.reward == "upper":
        return reward_upper
    return reward_lower + reward_upper


# --- Parameters ---

class Agent(nn.Module):
    def __init__(self, actor_dim: int, critic_dim: int, act_dim: int, hidden: Sequence[int], init_log_std: float):
        super().__init__()
        self.actor = GaussianActor(actor_dim, act_dim, hidden, init_log_std)
        self.critic = Critic(critic_dim, hidden)


class PolicyParameters(nn.Module):
    def __init__(self, mode: str, agents: Dict[str, Agent]):
        super().__init__()
        self.mode = mode
        self.agents = nn.ModuleDict(agents)

    @property
    def layouts(self) -> List[AgentLayout]:
        return AGENT_LAYOUTS[self.mode]


def build_parameters(train: TrainerConfig, model: RobotModel, env_cfg: EnvConfig) -> PolicyParameters:
    dims = policy_dims(model, env_cfg)
    torch.manual_seed(train.seed)
    agents = {}
    for layout in AGENT_LAYOUTS[train.mode]:
        actor_dim = dims["proprio"] + sum(dims[g] for g in layout.goals)
        act = action_slice(layout, model)
        agents[layout.name] = Agent(
            actor_dim, actor_dim + dims["privileged"], act.stop - act.start, train.hidden, train.init_log_std
        )
    return PolicyParameters(train.mode, agents)


# --- Acting ---

@dataclass
class AgentStep:
    actor_obs: np.ndarray
    critic_obs: np.ndarray
    actions: torch.Tensor
    log_probs: Optional[torch.Tensor]


@dataclass
class PolicyStep:
    env_action: np.ndarray
    feedforward: Optional[np.ndarray]
    agents: Dict[str, AgentStep]
    estimator_input: Optional[np.ndarray] = None


class Policy:
    """Maps env observations to env actions: learned agents plus optional upper controller."""

    def __init__(
        self,
        params: PolicyParameters,
        model: RobotModel,
        env_cfg: EnvConfig,
        controller: Optional[UpperJointController] = None,
        estimator: Optional[ForceEstimator] = None,
    ):
        self.params = params
        self.model = model
        self.env_cfg = env_cfg
        self.controller = controller
        self.estimator = estimator

    def inputs(
        self, env: DeskEnv, obs: Observation, priv: PrivilegedObservation
    ) -> Tuple[Dict[str, Tuple[np.ndarray, np.ndarray]], Optional[np.ndarray], Optional[np.ndarray]]:
        """Per-agent (actor input, critic input), plus estimator input and force estimate."""
        scales = self.env_cfg.obs_scales
        proprio = obs.flatten(scales, env.joint_offsets)
        lower_goal, upper_goal = env.goal_features()
        blocks = {"lower": lower_goal, "upper": upper_goal}
        estimator_input, force_estimate = None, None
        if self.estimator is not None:
            estimator_input = obs.proprioception(scales, LOWER_DOF, env.joint_offsets)
            force_estimate = self.estimator.predict(estimator_input)
            blocks["force"] = force_estimate.reshape(env.num_envs, -1) * scales.force
        privileged = priv.flatten(scales)
        per_agent = {}
        for layout in self.params.layouts:
            actor_obs = np.concatenate([proprio] + [blocks[g] for g in layout.goals], axis=-1)
            per_agent[layout.name] = (actor_obs, np.concatenate([actor_obs, privileged], axis=-1))
        return per_agent, estimator_input, force_estimate

    def act(
        self,
        env: DeskEnv,
        obs: Observation,
        priv: PrivilegedObservation,
        generator: Optional[torch.Generator] = None,
        deterministic: bool = False,
    ) -> PolicyStep:
        per_agent, estimator_input, force_estimate = self.inputs(env, obs, priv)
        env_action = np.zeros((env.num_envs, env.n))
        agents: Dict[str, AgentStep] = {}
        for layout in self.params.layouts:
            agent = self.params.agents[layout.name]
            actor_obs, critic_obs = per_agent[layout.name]
            x = torch.as_tensor(actor_obs, dtype=torch.float32)
            if deterministic:
                with torch.no_grad():
                    actions, log_probs = agent.actor(x), None
            else:
                actions, log_probs = agent.actor.sample(x, generator)
            if not torch.isfinite(actions).all():
                rows = torch.nonzero(~torch.isfinite(actions).all(dim=-1)).flatten().tolist()
                raise NonFiniteError(f"non-finite output from the {layout.name} actor", diagnostics={"agent": layout.name, "rows": rows})
            env_action[:, action_slice(layout, self.model)] = actions.double().numpy()
            agents[layout.name] = AgentStep(actor_obs, critic_obs, actions, log_probs)

        feedforward = None
        if self.controller is not None:
            jacobians = env.ee_jacobians() if self.controller.mode == "pd_id" else None
            upper_actions, feedforward = self.controller.compute(
                env.upper_reference(), env.state.q, env.cfg.policy_dt, jacobians, force_estimate
            )
            env_action[:, LOWER_DOF:] = upper_actions
        return PolicyStep(env_action, feedforward, agents, estimator_input)


# --- Rollouts ---

@dataclass
class AgentRollout:
    actor_obs: torch.Tensor  # (T, E, D)
    critic_obs: torch.Tensor
    actions: torch.Tensor
    log_probs: torch.Tensor  # (T, E)
    values: torch.Tensor
    rewards: torch.Tensor
    dones: torch.Tensor
    last_values: torch.Tensor  # (E,)
    advantages: Optional[torch.Tensor] = None
    returns: Optional[torch.Tensor] = None

    @property
    def num_transitions(self) -> int:
        return self.rewards.numel()

    def flat(self) -> Dict[str, torch.Tensor]:
        n = self.num_transitions
        return {
            "actor_obs": self.actor_obs.reshape(n, -1),
            "critic_obs": self.critic_obs.reshape(n, -1),
            "actions": self.actions.reshape(n, -1),
            "log_probs": self.log_probs.reshape(n),
            "advantages": self.advantages.reshape(n),
            "returns": self.returns.reshape(n),
        }


@dataclass
class RolloutBatch:
    agents: Dict[str, AgentRollout]
    reward_lower: np.ndarray  # (T, E)
    reward_upper: np.ndarray
    dones: np.ndarray
    episodes: List[Dict[str, float]] = field(default_factory=list)
    mean_upper_error: float = 0.0
    mean_root_error: float = 0.0
    estimator_inputs: Optional[np.ndarray] = None
    estimator_targets: Optional[np.ndarray] = None

    @property
    def num_transitions(self) -> int:
        return self.reward_lower.size


def compute_gae(
    rewards: torch.Tensor, values: torch.Tensor, dones: torch.Tensor, last_values: torch.Tensor, gamma: float, lam: float
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Generalized advantage estimation over (T, E); the bootstrap is zeroed after terminal steps."""
    T = rewards.shape[0]
    advantages = torch.zeros_like(rewards)
    running = torch.zeros_like(last_values)
    next_values = last_values
    for t in reversed(range(T)):
        not_done = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_values * not_done - values[t]
        running = delta + gamma * lam * not_done * running
        advantages[t] = running
        next_values = values[t]
    return advantages, advantages + values


def collect_rollouts(
    env: DeskEnv,
    policy: Policy,
    cfg: TrainerConfig,
    generator: Optional[torch.Generator] = None,
    steps: Optional[int] = None,
) -> RolloutBatch:
    T = steps or cfg.rollout_steps
    obs, priv = env.observation, env.privileged()
    per_agent: Dict[str, Dict[str, list]] = {
        layout.name: {k: [] for k in ("actor_obs", "critic_obs", "actions", "log_probs", "values", "rewards")}
        for layout in policy.params.layouts
    }
    rewards_lower, rewards_upper, dones = [], [], []
    est_inputs, est_targets = [], []
    upper_err, root_err = 0.0, 0.0

    for _ in range(T):
        step = policy.act(env, obs, priv, generator)
        for layout in policy.params.layouts:
            s = step.agents[layout.name]
            buf = per_agent[layout.name]
            with torch.no_grad():
                values = policy.params.agents[layout.name].critic(torch.as_tensor(s.critic_obs, dtype=torch.float32))
            buf["actor_obs"].append(torch.as_tensor(s.actor_obs, dtype=torch.float32))
            buf["critic_obs"].append(torch.as_tensor(s.critic_obs, dtype=torch.float32))
            buf["actions"].append(s.actions)
            buf["log_probs"].append(s.log_probs)
            buf["values"].append(values)

        result = env.step(step.env_action, step.feedforward)
        if policy.controller is not None:
            policy.controller.reset_indices(result.done)
        if policy.estimator is not None:
            keep = ~result.done
            est_inputs.append(result.observation.proprioception(env.cfg.obs_scales, LOWER_DOF, env.joint_offsets)[keep])
            est_targets.append(env.state.applied_force[keep].copy())
        for layout in policy.params.layouts:
            per_agent[layout.name]["rewards"].append(
                torch.as_tensor(agent_reward(layout, result.reward_lower, result.reward_upper), dtype=torch.float32)
            )
        rewards_lower.append(result.reward_lower)
        rewards_upper.append(result.reward_upper)
        dones.append(result.done)
        upper_err += float(np.mean(env.last_step_errors["upper"]))
        root_err += float(np.mean((2.0 * env.last_step_errors["root_lin"] + env.last_step_errors["root_ang"]) / 3.0))
        obs, priv = result.observation, result.privileged

    done_tensor = torch.as_tensor(np.stack(dones), dtype=torch.float32)
    final_inputs, _, _ = policy.inputs(env, obs, priv)
    agents = {}
    for layout in policy.params.layouts:
        buf = per_agent[layout.name]
        with torch.no_grad():
            last_values = policy.params.agents[layout.name].critic(
                torch.as_tensor(final_inputs[layout.name][1], dtype=torch.float32)
            )
        agents[layout.name] = AgentRollout(
            actor_obs=torch.stack(buf["actor_obs"]),
            critic_obs=torch.stack(buf["critic_obs"]),
            actions=torch.stack(buf["actions"]),
            log_probs=torch.stack(buf["log_probs"]),
            values=torch.stack(buf["values"]),
            rewards=torch.stack(buf["rewards"]),
            dones=done_tensor,
            last_values=last_values,
        )
        agents[layout.name].advantages, agents[layout.name].returns = compute_gae(
            agents[layout.name].rewards, agents[layout.name].values, done_tensor, last_values, cfg.gamma, cfg.lam
        )

    return RolloutBatch(
        agents=agents,
        reward_lower=np.stack(rewards_lower),
        reward_upper=np.stack(rewards_upper),
        dones=np.stack(dones),
        episodes=env.pop_completed_episodes(),
        mean_upper_error=upper_err / T,
        mean_root_error=root_err / T,
        estimator_inputs=np.concatenate(est_inputs) if est_inputs else None,
        estimator_targets=np.concatenate(est_targets) if est_targets else None,
    )


# --- PPO ---

def normalize_advantages(advantages: torch.Tensor) -> torch.Tensor:
    return (advantages - advantages.mean()) / (advantages.std(unbiased=False) + 1e-8)


def clipped_surrogate(ratio: torch.Tensor, advantages: torch.Tensor, clip: float) -> torch.Tensor:
    """min(r A, clip(r) A) written with an explicit mask; the clipped branch carries no gradient."""
    unclipped = ((advantages > 0) & (ratio < 1.0 + clip)) | ((advantages < 0) & (ratio > 1.0 - clip))
    return torch.where(unclipped, ratio * advantages, ratio.detach().clamp(1.0 - clip, 1.0 + clip) * advantages)


def ppo_loss(agent: Agent, minibatch: Dict[str, torch.Tensor], cfg: TrainerConfig) -> Tuple[torch.Tensor, Dict[str, float]]:
    advantages = minibatch["advantages"]
    if cfg.normalize_advantage:
        advantages = normalize_advantages(advantages)
    log_probs, entropy = agent.actor.evaluate(minibatch["actor_obs"], minibatch["actions"])
    ratio = torch.exp(log_probs - minibatch["log_probs"])
    surrogate = clipped_surrogate(ratio, advantages, cfg.clip_ratio).mean()
    value_loss = (minibatch["returns"] - agent.critic(minibatch["critic_obs"])).pow(2).mean()
    entropy = entropy.mean()
    loss = -surrogate + cfg.value_coef * value_loss - cfg.entropy_coef * entropy
    with torch.no_grad():
        clip_fraction = float(((ratio - 1.0).abs() > cfg.clip_ratio).float().mean())
        approx_kl = float((minibatch["log_probs"] - log_probs).mean())
    return loss, {
        "surrogate": float(surrogate),
        "value_loss": float(value_loss),
        "entropy": float(entropy),
        "clip_fraction": clip_fraction,
        "approx_kl": approx_kl,
    }


def update_agent(
    agent: Agent,
    rollout: AgentRollout,
    cfg: TrainerConfig,
    optimizer: torch.optim.Optimizer,
    generator: Optional[torch.Generator] = None,
    name: str = "agent",
) -> Dict[str, float]:
    if rollout.advantages is None:
        rollout.advantages, rollout.returns = compute_gae(
            rollout.rewards, rollout.values, rollout.dones, rollout.last_values, cfg.gamma, cfg.lam
        )
    data = rollout.flat()
    n = rollout.num_transitions
    size = max(1, n // cfg.minibatches)
    totals: Dict[str, float] = {}
    count = 0
    for _ in range(cfg.epochs):
        perm = torch.randperm(n, generator=generator)
        for start in range(0, n, size):
            idx = perm[start:start + size]
            loss, info = ppo_loss(agent, {k: v[idx] for k, v in data.items()}, cfg)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite PPO loss for the {name} agent")
            optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(agent.parameters(), cfg.max_grad_norm)
            optimizer.step()
            for k, v in info.items():
                totals[k] = totals.get(k, 0.0) + v
            count += 1
    stats = {k: v / max(count, 1) for k, v in totals.items()}
    stats["noise_std"] = agent.actor.noise_std()
    return stats


def ppo_update(
    params: PolicyParameters,
    batch: RolloutBatch,
    cfg: TrainerConfig,
    optimizers: Dict[str, torch.optim.Optimizer],
    generator: Optional[torch.Generator] = None,
) -> Dict[str, Dict[str, float]]:
    """One independent clipped-surrogate update per agent, each on its own reward stream."""
    return {
        name: update_agent(agent, batch.agents[name], cfg, optimizers[name], generator, name)
        for name, agent in params.agents.items()
    }


def monolithic_update(
    params: PolicyParameters,
    batch: RolloutBatch,
    cfg: TrainerConfig,
    optimizers: Dict[str, torch.optim.Optimizer],
    generator: Optional[torch.Generator] = None,
) -> Dict[str, float]:
    if params.mode != "monolithic":
        raise ValueError(f"monolithic_update needs monolithic parameters, got mode '{params.mode}'")
    return ppo_update(params, batch, cfg, optimizers, generator)["whole"]


# --- Training log ---

class TrainingLog:
    """Append-only CSV with one row per update."""

    BASE_COLUMNS = [
        "update", "env_steps", "wall_time_s", "learning_rate", "alpha_g",
        "reward_lower", "reward_upper", "e_upper", "e_root", "episodes", "fall_rate", "estimator_mse",
    ]
    AGENT_COLUMNS = ["surrogate", "value_loss", "entropy", "noise_std", "clip_fraction", "approx_kl"]

    def __init__(self, path: Path, agent_names: Sequence[str]):
        self.path = Path(path)
        self.columns = self.BASE_COLUMNS + [f"{a}_{c}" for a in agent_names for c in self.AGENT_COLUMNS]
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists():
            with self.path.open("w", newline="", encoding="utf-8") as fh:
                csv.DictWriter(fh, fieldnames=self.columns).writeheader()

    def write(self, row: Dict[str, float]) -> None:
        with self.path.open("a", newline="", encoding="utf-8") as fh:
            csv.DictWriter(fh, fieldnames=self.columns, extrasaction="ignore").writerow(row)


# --- Trainer ---

class Trainer:
    def __init__(self, cfg: ExperimentConfig, out_dir: Optional[Path] = None, model: Optional[RobotModel] = None):
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        torch.set_num_threads(get_settings().torch_threads)
        self.model = model or resolve_model(cfg.env.model)
        train = cfg.train
        self.env = DeskEnv(
            self.model, cfg.env, cfg.curriculum, num_envs=train.num_envs, seed=train.seed,
            force_mode=FORCE_MODES[train.force_curriculum],
        )
        self.params = build_parameters(train, self.model, cfg.env)
        self.generator = torch.Generator().manual_seed(train.seed + 1)
        self.optimizers = {
            name: torch.optim.Adam(agent.parameters(), lr=train.learning_rate) for name, agent in self.params.agents.items()
        }

        dims = policy_dims(self.model, cfg.env)
        self.estimator: Optional[ForceEstimator] = None
        self.estimator_optimizer = None
        controller = None
        if train.mode in CONTROLLER_MODES:
            if train.mode == "upper_pd_id":
                self.estimator = ForceEstimator(dims["estimator"], len(self.model.arms), train.estimator_hidden, cfg.env.obs_scales.force)
                self.estimator_optimizer = torch.optim.Adam(self.estimator.parameters(), lr=train.estimator_learning_rate)
            controller = UpperJointController(
                CONTROLLER_MODES[train.mode], self.model, cfg.env.upper_action_scale,
                train.pid_ki, train.pid_integral_limit, self.estimator,
            )
            controller.reset(train.num_envs)
        self.policy = Policy(self.params, self.model, cfg.env, controller, self.estimator)

        self.curriculum = CurriculumState.from_config(cfg.curriculum)
        self.curriculum.filter_state = np.zeros((len(self.model.arms), 3))
        self.env.set_force_scale(self.curriculum.alpha_g if train.force_curriculum != "off" else 0.0)
        self.updates_done = 0
        self.log: Optional[TrainingLog] = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "config.toml").write_text(dump_config(cfg), encoding="utf-8")
            self.log = TrainingLog(self.out_dir / "training_log.csv", list(self.params.agents))
        logger.info(
            "trainer ready: mode=%s curriculum=%s model=%s envs=%d updates=%d config=%s",
            train.mode, train.force_curriculum, self.model.name, train.num_envs, train.num_updates, config_hash(cfg),
        )

    def _set_learning_rate(self, update: int) -> float:
        train = self.cfg.train
        lr = train.learning_rate
        if train.lr_decay:
            lr *= max(0.0, 1.0 - update / train.num_updates)
        for opt in self.optimizers.values():
            for group in opt.param_groups:
                group["lr"] = lr
        return lr

    def train_update(self) -> Dict[str, float]:
        train = self.cfg.train
        start = time.perf_counter()
        lr = self._set_learning_rate(self.updates_done)
        batch = collect_rollouts(self.env, self.policy, train, self.generator)

        estimator_mse = float("nan")
        if self.estimator is not None and batch.estimator_inputs is not None and len(batch.estimator_inputs):
            estimator_mse = train_force_estimator(
                self.estimator, self.estimator_optimizer, batch.estimator_inputs, batch.estimator_targets,
                train.estimator_epochs, train.minibatches, self.generator,
            )

        try:
            if train.mode == "monolithic":
                stats = {"whole": monolithic_update(self.params, batch, train, self.optimizers, self.generator)}
            else:
                stats = ppo_update(self.params, batch, train, self.optimizers, self.generator)
        except TrainingDivergedError as e:
            path = self.save(self._checkpoint_dir() / "diverged.ckpt")
            raise TrainingDivergedError(f"{e}; state dumped to {path}", checkpoint_path=str(path)) from e

        if train.force_curriculum != "off":
            self.curriculum = update_alpha(self.curriculum, batch.mean_upper_error)
            self.env.set_force_scale(self.curriculum.alpha_g)
        self.updates_done += 1

        episodes = batch.episodes
        row: Dict[str, float] = {
            "update": self.updates_done,
            "env_steps": self.updates_done * train.steps_per_update,
            "wall_time_s": round(time.perf_counter() - start, 3),
            "learning_rate": lr,
            "alpha_g": self.curriculum.alpha_g,
            "reward_lower": float(batch.reward_lower.mean()),
            "reward_upper": float(batch.reward_upper.mean()),
            "e_upper": batch.mean_upper_error,
            "e_root": batch.mean_root_error,
            "episodes": len(episodes),
            "fall_rate": float(np.mean([ep["fell"] for ep in episodes])) if episodes else float("nan"),
            "estimator_mse": estimator_mse,
        }
        for name, agent_stats in stats.items():
            for key, value in agent_stats.items():
                row[f"{name}_{key}"] = value
        if self.log is not None:
            self.log.write(row)
            if self.updates_done % train.checkpoint_every == 0:
                self.save(self.out_dir / "latest.ckpt")
        return row

    def train(self, num_updates: Optional[int] = None) -> List[Dict[str, float]]:
        total = num_updates if num_updates is not None else self.cfg.train.num_updates
        rows = []
        for _ in progress(range(total), desc=f"train {self.cfg.train.mode}", total=total):
            row = self.train_update()
            rows.append(row)
            noise = " ".join(f"{name}={row[f'{name}_noise_std']:.3f}" for name in self.params.agents)
            logger.info(
                "update %d: e_upper=%.3f e_root=%.3f alpha_g=%.2f falls=%.2f noise_std[%s]",
                row["update"], row["e_upper"], row["e_root"], row["alpha_g"], row["fall_rate"], noise,
            )
        if self.out_dir is not None:
            self.save(self.out_dir / "final.ckpt")
        return rows

    def _checkpoint_dir(self) -> Path:
        return self.out_dir if self.out_dir is not None else get_settings().runs_dir

    def save(self, path: Path) -> Path:
        modules: Dict[str, nn.Module] = {"policy": self.params}
        if self.estimator is not None:
            modules["estimator"] = self.estimator
        extra = {
            "mode": self.cfg.train.mode,
            "force_curriculum": self.cfg.train.force_curriculum,
            "model": self.model.name,
            "dims": policy_dims(self.model, self.cfg.env),
            "updates": self.updates_done,
        }
        return checkpoint_save(path, modules, self.cfg, self.curriculum, extra)


# --- Loading ---

def load_policy(checkpoint: Checkpoint, model: Optional[RobotModel] = None) -> Policy:
    """Rebuilds a Policy from a checkpoint; raises CheckpointMismatchError if the robot model differs."""
    cfg = checkpoint.config
    model = model or resolve_model(cfg.env.model)
    extra = checkpoint.extra
    if extra.get("model") not in (None, model.name):
        raise CheckpointMismatchError(f"checkpoint was trained on model '{extra.get('model')}', not '{model.name}'")
    dims = policy_dims(model, cfg.env)
    if extra.get("dims") not in (None, dims):
        raise CheckpointMismatchError(f"checkpoint dimensions {extra.get('dims')} do not match model '{model.name}' {dims}")

    params = build_parameters(cfg.train, model, cfg.env)
    try:
        params.load_state_dict(checkpoint.state_dict("policy."))
    except RuntimeError as e:
        raise CheckpointMismatchError(f"checkpoint tensors do not fit mode '{cfg.train.mode}': {e}") from e

    estimator, controller = None, None
    if cfg.train.mode in CONTROLLER_MODES:
        if cfg.train.mode == "upper_pd_id":
            estimator = ForceEstimator(dims["estimator"], len(model.arms), cfg.train.estimator_hidden, cfg.env.obs_scales.force)
            estimator.load_state_dict(checkpoint.state_dict("estimator."))
        controller = UpperJointController(
            CONTROLLER_MODES[cfg.train.mode], model, cfg.env.upper_action_scale,
            cfg.train.pid_ki, cfg.train.pid_integral_limit, estimator,
        )
    return Policy(params, model, cfg.env, controller, estimator)


def load_trainer(path: Path, out_dir: Optional[Path] = None) -> Trainer:
    """Resumes a Trainer from a checkpoint (parameters, estimator and curriculum state)."""
    ckpt = checkpoint_load(path)
    trainer = Trainer(ckpt.config, out_dir)
    trainer.params.load_state_dict(ckpt.state_dict("policy."))
    if trainer.estimator is not None:
        trainer.estimator.load_state_dict(ckpt.state_dict("estimator."))
    trainer.curriculum = ckpt.curriculum_state()
    trainer.updates_done = int(ckpt.extra.get("updates", 0))
    if trainer.cfg.train.force_curriculum != "off":
        trainer.env.set_force_scale(trainer.curriculum.alpha_g)
    return trainer
