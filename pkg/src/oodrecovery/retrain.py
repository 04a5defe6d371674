"""Recovery retraining: reward switching, consolidated SAC updates, evaluation and curves."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import dsl
from .core import ReplayBuffer
from .envs import OOD, ORIGINAL, Env
from .net import PolicyParams, load_policy, policy_mean_action, policy_sample, save_policy
from .sac import SacConfig, SacState, init_sac, sac_update

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("step", "mean_return", "std_return", "recovery_fraction")
SUCCESS_HOLD_STEPS = 50


class RetrainAbort(RuntimeError):
    """A generated program failed during retraining."""

    def __init__(self, step: int, program: dsl.Program, cause: Exception):
        super().__init__(f"{program.kind} program failed at step {step}: {cause}\n{dsl.to_source(program)}")
        self.step = step
        self.program = program
        self.cause = cause


@dataclass
class RetrainConfig:
    lam: float = 0.05
    total_steps: int = 1_000_000
    eval_interval: int = 5000
    eval_episodes: int = 5
    grad_steps_per_env_step: int = 1
    seed: int = 0
    batch_size: int = 256
    buffer_size: int = 1_000_000
    learning_starts: int = 256
    checkpoint_interval: int = 50_000
    sac: SacConfig = field(default_factory=SacConfig)

    def __post_init__(self):
        # lam == 0 is accepted: it is the zero-reward baseline
        if not (math.isfinite(self.lam) and self.lam >= 0.0):
            raise ValueError("lam must be a finite non-negative number")
        for name in ("total_steps", "grad_steps_per_env_step"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("eval_interval", "batch_size", "buffer_size", "checkpoint_interval"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.eval_episodes < 0:
            raise ValueError("eval_episodes must be >= 0")


def select_reward(eval_flag: int, r_task: float, c_reward_value: float, lam: float) -> float:
    """Task reward in valid states, scaled generated reward elsewhere."""
    if eval_flag not in (0, 1):
        raise ValueError(f"eval_flag must be 0 or 1, got {eval_flag!r}")
    return float(r_task) if eval_flag == 1 else lam * float(c_reward_value)


def lpc_term(eval_flag: int, kl: float) -> float:
    if kl < 0:
        raise ValueError("kl must be non-negative")
    return float(eval_flag) * float(kl)


class GeneratedPrograms:
    """Compiled reward/eval programs bound to an environment's views."""

    def __init__(self, env: Env, reward: dsl.Program, evaluation: dsl.Program):
        self.env = env
        self.reward_program = reward
        self.eval_program = evaluation
        self._reward = dsl.compile_program(reward, env.spec.reward_view_schema, env.spec.action_schema)
        self._eval = dsl.compile_program(evaluation, env.spec.reward_view_schema, env.spec.action_schema)
        self._action_names = env.spec.action_schema.names

    def flag(self, state, step: int = -1) -> int:
        try:
            return self._eval.flag(self.env.reward_view(state))
        except dsl.DslEvalError as exc:
            raise RetrainAbort(step, self.eval_program, exc) from exc

    def reward(self, next_state, action, step: int = -1) -> float:
        acts = {n: float(a) for n, a in zip(self._action_names, np.asarray(action))}
        try:
            return self._reward.reward(self.env.reward_view(next_state), acts)
        except dsl.DslEvalError as exc:
            raise RetrainAbort(step, self.reward_program, exc) from exc


# ----------------------------------------------------------------------------
# Evaluation


@dataclass
class EpisodeRecord:
    ret: float
    recovered: bool
    success: bool
    length: int


@dataclass
class EvalReport:
    mode: str
    episodes: list[EpisodeRecord]

    @property
    def returns(self) -> np.ndarray:
        return np.array([e.ret for e in self.episodes])

    @property
    def mean_return(self) -> float:
        return float(np.mean(self.returns)) if self.episodes else 0.0

    @property
    def std_return(self) -> float:
        return float(np.std(self.returns)) if self.episodes else 0.0

    @property
    def recovery_fraction(self) -> float:
        return float(np.mean([e.recovered for e in self.episodes])) if self.episodes else 0.0

    @property
    def success_rate(self) -> float:
        return float(np.mean([e.success for e in self.episodes])) if self.episodes else 0.0

    def to_dict(self) -> dict:
        return {
            "mode": self.mode, "n_episodes": len(self.episodes),
            "mean_return": self.mean_return, "std_return": self.std_return,
            "recovery_fraction": self.recovery_fraction, "success_rate": self.success_rate,
            "episodes": [asdict(e) for e in self.episodes],
        }


def episode_seeds(seed: int, n: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(n)


def evaluate_policy(env: Env, policy: PolicyParams, n_episodes: int, mode: str = OOD, seed: int = 0,
                    programs: GeneratedPrograms | None = None, zero_ood_reward: bool = False,
                    trace: list | None = None) -> EvalReport:
    """Greedy ``tanh(mu)`` rollouts.

    ``recovered`` means the eval flag (the generated eval program when given,
    ground-truth validity otherwise) was 1 at some step. ``success`` means the
    ground-truth valid region was held for ``SUCCESS_HOLD_STEPS`` consecutive
    steps. With ``zero_ood_reward`` the task reward of a step whose start state
    is flagged invalid counts as 0.
    """
    flag_of = programs.flag if programs is not None else env.truth_valid
    episodes = []
    for ss in episode_seeds(seed, n_episodes):
        es = env.reset(mode, np.random.default_rng(ss))
        ret, recovered, run, success, n = 0.0, False, 0, False, 0
        while True:
            flag = flag_of(es.state)
            recovered |= flag == 1
            a = policy_mean_action(policy, es.state.values).astype(np.float64)
            res = env.step(es, a)
            n += 1
            ret += res.task_reward if (flag == 1 or not zero_ood_reward) else 0.0
            run = run + 1 if env.truth_valid(res.next_state) else 0
            success |= run >= SUCCESS_HOLD_STEPS
            if trace is not None:
                trace.append((es.state.values.copy(), a, res.task_reward, flag))
            es = res.env_state
            if res.terminated or res.truncated:
                recovered |= flag_of(es.state) == 1
                break
        episodes.append(EpisodeRecord(float(ret), bool(recovered), bool(success), n))
    return EvalReport(mode, episodes)


# ----------------------------------------------------------------------------
# Curves and manifests


@dataclass
class CurvePoint:
    step: int
    mean_return: float
    std_return: float
    recovery_fraction: float
    returns: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.std_return < 0 or not 0.0 <= self.recovery_fraction <= 1.0:
            raise ValueError("curve point out of range")

    @classmethod
    def from_report(cls, step: int, report: EvalReport) -> CurvePoint:
        return cls(step, report.mean_return, report.std_return, report.recovery_fraction,
                   [float(r) for r in report.returns])


def write_curve_csv(curve: list[CurvePoint], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for p in curve:
            w.writerow([p.step, repr(p.mean_return), repr(p.std_return), repr(p.recovery_fraction)])


def read_curve_csv(path) -> list[CurvePoint]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [CurvePoint(int(r["step"]), float(r["mean_return"]), float(r["std_return"]),
                       float(r["recovery_fraction"])) for r in rows]


def file_digest(path) -> str:
    """Git-style blob hash of a file."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_manifest(run_dir, payload: dict) -> Path:
    run_dir = Path(run_dir)
    artifacts = {p.name: file_digest(p) for p in sorted(run_dir.iterdir())
                 if p.is_file() and p.name != "manifest.json"}
    doc = dict(payload, artifacts=artifacts)
    path = run_dir / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def config_dict(cfg) -> dict:
    d = asdict(cfg)
    return json.loads(json.dumps(d, default=_jsonable))


# ----------------------------------------------------------------------------
# Training loops


@dataclass
class TrainResult:
    sac: SacState
    curve: list[CurvePoint]
    buffer: ReplayBuffer
    episodes: int = 0
    elapsed: float = 0.0
    best: PolicyParams | None = None
    best_step: int = 0


@dataclass
class SeedStreams:
    env: np.random.Generator
    act: np.random.Generator
    update: np.random.Generator
    init: np.random.Generator
    eval_seed: int


def seed_streams(seed: int) -> SeedStreams:
    """One root seed split into independent consumers."""
    env_ss, act_ss, upd_ss, init_ss, eval_ss = np.random.SeedSequence(seed).spawn(5)
    return SeedStreams(np.random.default_rng(env_ss), np.random.default_rng(act_ss), np.random.default_rng(upd_ss),
                    np.random.default_rng(init_ss), int(eval_ss.generate_state(1)[0]))


def _checkpoint(run_dir: Path | None, s: SacState, step: int, meta: dict) -> None:
    if run_dir is None:
        return
    ck = run_dir / "checkpoints"
    ck.mkdir(parents=True, exist_ok=True)
    save_policy(ck / f"policy_{step:08d}.json", s.policy, dict(meta, step=step))


def retrain_loop(env: Env, org_policy: PolicyParams, programs: GeneratedPrograms, cfg: RetrainConfig,
                 run_dir=None, progress: Callable[[CurvePoint], None] | None = None,
                 sac: SacState | None = None) -> TrainResult:
    """Warm-started policy, fresh critics and buffer, OOD resets, switched rewards.

    Every transition stores the eval flag of its start state; the reward is
    ``r_task`` when that flag is 1 and ``lam * c_reward(s', a)`` otherwise.
    Actor updates add ``flag * KL(pi || pi_org)``.
    """
    t0 = time.perf_counter()
    st = seed_streams(cfg.seed)
    org = org_policy.copy()
    if sac is None:
        sac = init_sac(env.state_dim, env.action_dim, st.init, cfg.sac, policy=org_policy)
    buf = ReplayBuffer(cfg.buffer_size, env.spec.state_schema, env.spec.action_schema)
    run_dir = Path(run_dir) if run_dir is not None else None
    meta = {"env": env.name, "seed": cfg.seed, "lam": cfg.lam}

    def evaluate(step):
        rep = evaluate_policy(env, sac.policy, cfg.eval_episodes, OOD, st.eval_seed, programs, zero_ood_reward=True)
        point = CurvePoint.from_report(step, rep)
        curve.append(point)
        log.info("step %d return %.2f recovery %.2f", step, point.mean_return, point.recovery_fraction)
        if progress is not None:
            progress(point)

    curve: list[CurvePoint] = []
    evaluate(0)
    es = env.reset(OOD, st.env)
    episodes = 0
    for t in range(cfg.total_steps):
        flag = programs.flag(es.state, t)
        a, _ = policy_sample(sac.policy, es.state.values, st.act)
        a = a.astype(np.float64)
        res = env.step(es, a)
        c = programs.reward(res.next_state, a, t) if flag == 0 else 0.0
        r = select_reward(flag, res.task_reward, c, cfg.lam)
        buf.push_arrays(es.state.values, a, r, res.next_state.values, flag, res.terminated)
        es = res.env_state
        if res.terminated or res.truncated:
            episodes += 1
            es = env.reset(OOD, st.env)
        if len(buf) >= max(cfg.batch_size, cfg.learning_starts):
            for _ in range(cfg.grad_steps_per_env_step):
                sac_update(sac, buf.sample(cfg.batch_size, st.update), st.update, org_policy=org)
        step = t + 1
        if step % cfg.eval_interval == 0:
            evaluate(step)
        if step % cfg.checkpoint_interval == 0:
            _checkpoint(run_dir, sac, step, meta)
    return TrainResult(sac, curve, buf, episodes, time.perf_counter() - t0)


@dataclass
class TrainConfig:
    """Plain SAC on the original task."""

    total_steps: int = 1_000_000
    eval_interval: int = 5000
    eval_episodes: int = 5
    seed: int = 0
    batch_size: int = 256
    buffer_size: int = 1_000_000
    random_steps: int = 1000
    checkpoint_interval: int = 50_000
    sac: SacConfig = field(default_factory=SacConfig)

    def __post_init__(self):
        if self.total_steps < 0 or self.random_steps < 0 or self.eval_episodes < 0:
            raise ValueError("step counts must be >= 0")
        if self.eval_interval <= 0 or self.batch_size <= 0 or self.buffer_size <= 0:
            raise ValueError("eval_interval, batch_size and buffer_size must be positive")


def train_original(env: Env, cfg: TrainConfig, run_dir=None,
                   progress: Callable[[CurvePoint], None] | None = None) -> TrainResult:
    """Uniform random actions for ``random_steps``, then on-policy samples with one update per step."""
    t0 = time.perf_counter()
    st = seed_streams(cfg.seed)
    sac = init_sac(env.state_dim, env.action_dim, st.init, cfg.sac, angle_dims=env.angle_dims)
    buf = ReplayBuffer(cfg.buffer_size, env.spec.state_schema, env.spec.action_schema)
    run_dir = Path(run_dir) if run_dir is not None else None
    curve: list[CurvePoint] = []
    best = {"policy": sac.policy.copy(), "step": 0}

    def evaluate(step):
        rep = evaluate_policy(env, sac.policy, cfg.eval_episodes, ORIGINAL, st.eval_seed)
        curve.append(CurvePoint.from_report(step, rep))
        # SAC on the balance task oscillates; keep the best evaluated snapshot
        if step == 0 or curve[-1].mean_return > max(p.mean_return for p in curve[:-1]):
            best.update(policy=sac.policy.copy(), step=step)
        if progress is not None:
            progress(curve[-1])

    evaluate(0)
    es = env.reset(ORIGINAL, st.env)
    episodes = 0
    for t in range(cfg.total_steps):
        if t < cfg.random_steps:
            a = st.act.uniform(-1.0, 1.0, env.action_dim)
        else:
            a = policy_sample(sac.policy, es.state.values, st.act)[0].astype(np.float64)
        res = env.step(es, a)
        buf.push_arrays(es.state.values, a, res.task_reward, res.next_state.values, 1, res.terminated)
        es = res.env_state
        if res.terminated or res.truncated:
            episodes += 1
            es = env.reset(ORIGINAL, st.env)
        if len(buf) >= cfg.batch_size:
            sac_update(sac, buf.sample(cfg.batch_size, st.update), st.update)
        step = t + 1
        if step % cfg.eval_interval == 0:
            evaluate(step)
        if step % cfg.checkpoint_interval == 0:
            _checkpoint(run_dir, sac, step, {"env": env.name, "seed": cfg.seed})
    return TrainResult(sac, curve, buf, episodes, time.perf_counter() - t0, best["policy"], best["step"])


def recompute_rewards(env: Env, programs: GeneratedPrograms, buffer: ReplayBuffer, lam: float) -> dict:
    """Re-derive every stored flag and reward from the programs; counts of agreement."""
    b = buffer.all()
    flags_ok = rewards_ok = 0
    for i in range(len(b)):
        s, a, s2 = b.states[i], b.actions[i], b.next_states[i]
        flag = programs.flag(s)
        r_task = env.task_reward(s, a, s2)
        c = programs.reward(s2, a) if flag == 0 else 0.0
        flags_ok += int(flag == int(b.eval_flags[i]))
        rewards_ok += int(select_reward(flag, r_task, c, lam) == b.rewards[i])
    return {"n": len(b), "flags": flags_ok, "rewards": rewards_ok}


def load_original_policy(path, env: Env) -> PolicyParams:
    return load_policy(path, env.state_dim, env.action_dim)[0]
