"""Soft Actor-Critic updates with twin critics, polyak targets and automatic entropy tuning.

Every update takes an explicit ``numpy.random.Generator`` so that two runs
sharing a seed consume identical noise and produce bit-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Batch
from .net import (
    AdamState,
    MlpParams,
    NonFiniteGradientError,
    PolicyParams,
    QParams,
    adam_init,
    adam_step,
    init_critics,
    init_policy,
    kl_diag_gaussian,
    mlp_backward,
    mlp_forward,
    policy_head,
    squashed_log_prob,
)


@dataclass
class SacConfig:
    gamma: float = 0.99
    tau: float = 0.005
    policy_lr: float = 3e-4
    q_lr: float = 3e-4
    alpha_lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.99
    init_alpha: float = 1.0
    hidden: tuple[int, ...] = (256, 256)
    dtype: str = "float32"


@dataclass
class SacState:
    policy: PolicyParams
    critics: QParams
    target_critics: QParams
    log_alpha: np.ndarray  # shape (1,), float64
    target_entropy: float
    gamma: float
    tau: float
    pi_opt: AdamState
    q_opt: AdamState
    alpha_opt: AdamState
    updates: int = 0
    last: dict = field(default_factory=dict)

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha[0]))

    @property
    def state_dim(self) -> int:
        return self.policy.state_dim

    @property
    def action_dim(self) -> int:
        return self.policy.action_dim


def _critic_tensors(q: QParams) -> list[np.ndarray]:
    return q.q1.tensors() + q.q2.tensors()


def init_sac(state_dim: int, action_dim: int, rng: np.random.Generator, cfg: SacConfig | None = None,
             policy: PolicyParams | None = None, angle_dims=()) -> SacState:
    """Fresh critics, optimizers and temperature; ``policy`` (copied) warm-starts the actor.

    ``angle_dims`` lists state columns fed to the networks as ``(sin, cos)``;
    a warm-start policy brings its own and the critics follow it.
    """
    cfg = cfg or SacConfig()
    if not 0.0 < cfg.gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    dtype = np.dtype(cfg.dtype)
    if policy is None:
        policy = init_policy(state_dim, action_dim, rng, cfg.hidden, dtype, angle_dims)
    else:
        policy = policy.copy()
        if policy.state_dim != state_dim or policy.action_dim != action_dim:
            raise ValueError("warm-start policy does not match the state/action dimensions")
    critics = init_critics(state_dim, action_dim, rng, cfg.hidden, policy.mlp.dtype, policy.angle_dims)
    log_alpha = np.array([np.log(cfg.init_alpha)], dtype=np.float64)
    return SacState(
        policy=policy,
        critics=critics,
        target_critics=critics.copy(),
        log_alpha=log_alpha,
        target_entropy=-float(action_dim),
        gamma=cfg.gamma,
        tau=cfg.tau,
        pi_opt=adam_init(policy.mlp.tensors(), cfg.policy_lr, cfg.beta1, cfg.beta2),
        q_opt=adam_init(_critic_tensors(critics), cfg.q_lr, cfg.beta1, cfg.beta2),
        alpha_opt=adam_init([log_alpha], cfg.alpha_lr, cfg.beta1, cfg.beta2),
    )


def q_values(q: QParams, states, actions) -> tuple[np.ndarray, np.ndarray]:
    x = q.inputs(states, actions)
    return mlp_forward(q.q1, x)[:, 0], mlp_forward(q.q2, x)[:, 0]


def _sample_actions(policy: PolicyParams, states, eps):
    head = policy_head(policy, states)
    u = head.mu + np.exp(head.log_std) * eps
    return np.tanh(u), squashed_log_prob(u, eps, head.log_std)


def compute_target_y(s: SacState, batch: Batch, rng: np.random.Generator) -> np.ndarray:
    """Soft Bellman target with the next action drawn fresh from the current policy."""
    eps = rng.standard_normal((len(batch), s.action_dim)).astype(s.policy.mlp.dtype)
    a2, logp2 = _sample_actions(s.policy, batch.next_states, eps)
    t1, t2 = q_values(s.target_critics, batch.next_states, a2)
    soft_v = np.minimum(t1, t2) - s.alpha * logp2
    mask = 1.0 - batch.terminals.astype(np.float64)
    return batch.rewards + s.gamma * mask * soft_v


def q_loss_and_grads(critics: QParams, states, actions, y) -> tuple[float, MlpParams, MlpParams]:
    """Loss is averaged over batch and both critics; each critic gets the gradient of its own
    ``mean(0.5 * (Q_k - y)^2)``."""
    x = critics.inputs(states, actions)
    b = x.shape[0]
    out = []
    loss = 0.0
    for q in (critics.q1, critics.q2):
        pred, cache = mlp_forward(q, x, return_cache=True)
        err = pred[:, 0].astype(np.float64) - y
        loss += 0.5 * float(np.mean(err * err))
        grads, _ = mlp_backward(q, cache, (err / b)[:, None])
        out.append(grads)
    return loss / 2.0, out[0], out[1]


def update_q(s: SacState, batch: Batch, rng: np.random.Generator, y: np.ndarray | None = None):
    if len(batch) == 0:
        raise ValueError("empty batch")
    if y is None:
        y = compute_target_y(s, batch, rng)
    loss, g1, g2 = q_loss_and_grads(s.critics, batch.states, batch.actions, y)
    if not np.isfinite(loss):
        raise NonFiniteGradientError(f"non-finite critic loss {loss}")
    adam_step(s.q_opt, _critic_tensors(s.critics), g1.tensors() + g2.tensors())
    return s, loss


@dataclass
class PolicyLossParts:
    loss: float
    log_prob: np.ndarray
    q_min: np.ndarray
    lpc: np.ndarray  # per-sample weight * KL, zeros when consolidation is off


def policy_loss_and_grads(policy: PolicyParams, critics: QParams, alpha: float, states, eps,
                          org_policy: PolicyParams | None = None,
                          lpc_weights: np.ndarray | None = None) -> tuple[PolicyLossParts, MlpParams]:
    """Mean over the batch of ``alpha*log pi(a|s) - min Q(s,a) + w(s)*KL(pi || pi_org)``.

    ``a`` is the reparameterized sample ``tanh(mu + std*eps)``; critics are held fixed.
    Rows with zero weight are never touched by the consolidation term, so an
    all-zero weight vector reproduces the plain SAC gradient bit for bit.
    """
    states = np.atleast_2d(states)
    b, m = states.shape[0], policy.action_dim
    head = policy_head(policy, states, return_cache=True)
    std = np.exp(head.log_std)
    u = head.mu + std * eps
    t = np.tanh(u)
    logp = squashed_log_prob(u, eps, head.log_std)

    x = critics.inputs(states, t)
    q1, c1 = mlp_forward(critics.q1, x, return_cache=True)
    q2, c2 = mlp_forward(critics.q2, x, return_cache=True)
    q1, q2 = q1[:, 0], q2[:, 0]
    pick1 = q1 <= q2
    q_min = np.where(pick1, q1, q2)
    w1 = pick1.astype(q1.dtype)
    _, gx1 = mlp_backward(critics.q1, c1, (-w1 / b)[:, None], need_params=False)
    _, gx2 = mlp_backward(critics.q2, c2, (-(1.0 - w1) / b)[:, None], need_params=False)
    d_a = gx1[:, -m:] + gx2[:, -m:]

    # d/du of -log(1 - tanh(u)^2) is 2 tanh(u)
    d_u = d_a * (1.0 - t * t) + (alpha / b) * 2.0 * t
    d_mu = d_u
    d_log_std = d_u * std * eps - alpha / b

    lpc = np.zeros(b)
    use_lpc = org_policy is not None and lpc_weights is not None and np.any(lpc_weights != 0)
    if use_lpc:
        w = np.asarray(lpc_weights, dtype=np.float64)
        rows = w != 0
        ho = policy_head(org_policy, states[rows])
        mu_o = ho.mu.astype(np.float64)
        ls_o = ho.log_std.astype(np.float64)
        mu_r = head.mu[rows].astype(np.float64)
        ls_r = head.log_std[rows].astype(np.float64)
        inv_var_o = np.exp(-2.0 * ls_o)
        kl = kl_diag_gaussian(mu_r, ls_r, mu_o, ls_o)
        lpc[rows] = w[rows] * kl
        wr = (w[rows] / b)[:, None]
        d_mu = d_mu.copy()
        d_log_std = d_log_std.copy()
        d_mu[rows] += (wr * (mu_r - mu_o) * inv_var_o).astype(d_mu.dtype)
        d_log_std[rows] += (wr * (np.exp(2.0 * (ls_r - ls_o)) - 1.0)).astype(d_log_std.dtype)

    d_log_std = d_log_std * head.clamp_mask
    upstream = np.concatenate([d_mu, d_log_std], axis=1)
    grads, _ = mlp_backward(policy.mlp, head.cache, upstream)

    per_sample = alpha * logp.astype(np.float64) - q_min.astype(np.float64)
    loss = float(np.mean(per_sample))
    if use_lpc:
        loss += float(np.mean(lpc))
    return PolicyLossParts(loss, logp, q_min, lpc), grads


def update_pi(s: SacState, batch: Batch, rng: np.random.Generator, org_policy: PolicyParams | None = None,
              lpc_weights: np.ndarray | None = None):
    """One actor step. With ``org_policy`` given and no explicit weights, the stored
    eval flags of the batch gate the consolidation term."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    if org_policy is not None and lpc_weights is None:
        lpc_weights = batch.eval_flags
    eps = rng.standard_normal((len(batch), s.action_dim)).astype(s.policy.mlp.dtype)
    parts, grads = policy_loss_and_grads(s.policy, s.critics, s.alpha, batch.states, eps, org_policy, lpc_weights)
    if not np.isfinite(parts.loss):
        raise NonFiniteGradientError(f"non-finite policy loss {parts.loss}")
    adam_step(s.pi_opt, s.policy.mlp.tensors(), grads.tensors())
    s.last["log_prob_mean"] = float(np.mean(parts.log_prob))
    s.last["lpc_mean"] = float(np.mean(parts.lpc))
    s.last["log_prob"] = parts.log_prob
    return s, parts.loss


def alpha_grad(log_alpha: float, log_prob: np.ndarray, target_entropy: float) -> float:
    """Gradient w.r.t. log(alpha) of ``mean(-alpha * (log_prob + target_entropy))``."""
    return -float(np.exp(log_alpha)) * float(np.mean(log_prob + target_entropy))


def update_alpha(s: SacState, batch: Batch, rng: np.random.Generator, log_prob: np.ndarray | None = None):
    if log_prob is None:
        eps = rng.standard_normal((len(batch), s.action_dim)).astype(s.policy.mlp.dtype)
        _, log_prob = _sample_actions(s.policy, batch.states, eps)
    g = alpha_grad(float(s.log_alpha[0]), np.asarray(log_prob, dtype=np.float64), s.target_entropy)
    adam_step(s.alpha_opt, [s.log_alpha], [np.array([g])])
    return s


def soft_update_targets(s: SacState, tau: float | None = None) -> SacState:
    tau = s.tau if tau is None else tau
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    for tgt, src in zip(_critic_tensors(s.target_critics), _critic_tensors(s.critics)):
        tgt *= 1.0 - tau
        tgt += tau * src
    return s


def sac_update(s: SacState, batch: Batch, rng: np.random.Generator, org_policy: PolicyParams | None = None) -> dict:
    """Critic step, actor step (optionally consolidated), temperature step, target tracking."""
    _, q_loss = update_q(s, batch, rng)
    _, pi_loss = update_pi(s, batch, rng, org_policy)
    # the temperature step reuses the actor's sample rather than drawing a new one
    update_alpha(s, batch, rng, log_prob=s.last.pop("log_prob"))
    soft_update_targets(s)
    s.updates += 1
    s.last.update(q_loss=q_loss, pi_loss=pi_loss, alpha=s.alpha)
    return s.last
