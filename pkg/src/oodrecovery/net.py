"""Dense ReLU networks with hand-written backprop, Adam, and the squashed Gaussian policy head."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
HIDDEN = (256, 256)
_LOG_2PI = float(np.log(2.0 * np.pi))
CHECKPOINT_VERSION = 1


class NonFiniteGradientError(FloatingPointError):
    """Raised when an update would consume a NaN/Inf gradient (training halt signal)."""


@dataclass
class MlpParams:
    """Weights stored ``(fan_in, fan_out)`` so a batch forward is ``x @ W + b``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def dtype(self):
        return self.weights[0].dtype

    def tensors(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_tensors(cls, tensors: list[np.ndarray]) -> MlpParams:
        return cls(list(tensors[0::2]), list(tensors[1::2]))

    def copy(self) -> MlpParams:
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> MlpParams:
        return MlpParams([np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases])


def init_mlp(sizes, rng: np.random.Generator, dtype=np.float32) -> MlpParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for every layer."""
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        ws.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))
        bs.append(rng.uniform(-bound, bound, size=fan_out).astype(dtype))
    return MlpParams(ws, bs)


@dataclass
class MlpCache:
    inputs: list[np.ndarray]  # input to each layer
    masks: list[np.ndarray]  # ReLU activity of each hidden layer


def mlp_forward(p: MlpParams, x, return_cache: bool = False):
    """Evaluate the network on a single vector or a ``(batch, in)`` matrix."""
    x = np.asarray(x, dtype=p.dtype)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[-1] != p.sizes[0]:
        raise ValueError(f"input dimension {x.shape[-1]} does not match network input {p.sizes[0]}")
    inputs, masks = [], []
    h = x
    last = len(p.weights) - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        inputs.append(h)
        z = h @ w
        z += b
        if i < last:
            mask = z > 0
            masks.append(mask)
            h = np.multiply(z, mask, out=z)
        else:
            h = z
    out = h[0] if single else h
    if return_cache:
        return out, MlpCache(inputs, masks)
    return out


def mlp_backward(p: MlpParams, cache: MlpCache, upstream,
                 need_params: bool = True) -> tuple[MlpParams | None, np.ndarray]:
    """Gradients of ``sum(upstream * output)`` w.r.t. every parameter and the input.

    With ``need_params=False`` only the input gradient is formed (params slot is None).
    """
    g = np.asarray(upstream, dtype=p.dtype)
    if g.ndim == 1:
        g = g[None, :]
    gw = [None] * len(p.weights)
    gb = [None] * len(p.weights)
    for i in range(len(p.weights) - 1, -1, -1):
        if need_params:
            gw[i] = cache.inputs[i].T @ g
            gb[i] = g.sum(axis=0)
        g = g @ p.weights[i].T
        if i > 0:
            g *= cache.masks[i - 1]
    return (MlpParams(gw, gb) if need_params else None), g


def backward(p: MlpParams, x, upstream) -> tuple[MlpParams, np.ndarray]:
    _, cache = mlp_forward(p, x, return_cache=True)
    grads, gx = mlp_backward(p, cache, upstream)
    if np.asarray(x).ndim == 1:
        gx = gx[0]
    return grads, gx


# ----------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8


def adam_init(params: list[np.ndarray], lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.99,
              eps: float = 1e-8) -> AdamState:
    return AdamState([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0, lr, beta1, beta2, eps)


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]):
    """Bias-corrected Adam update applied in place; returns ``(params, state)`` for chaining."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("parameter, gradient and moment lists differ in length")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError("non-finite gradient passed to adam_step")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params, state


# ----------------------------------------------------------------------------
# Policy


def encode_states(states, angle_dims=()) -> np.ndarray:
    """Network input: each angle column becomes ``(sin, cos)`` so +-pi map to the same point."""
    states = np.atleast_2d(states)
    if not angle_dims:
        return states
    cols = []
    for j in range(states.shape[1]):
        if j in angle_dims:
            cols += [np.sin(states[:, j]), np.cos(states[:, j])]
        else:
            cols.append(states[:, j])
    return np.stack(cols, axis=1)


@dataclass
class PolicyParams:
    """An MLP whose head emits per-dimension mean and log-std of a pre-squash Gaussian."""

    mlp: MlpParams
    action_dim: int
    angle_dims: tuple[int, ...] = ()

    @property
    def state_dim(self) -> int:
        return self.mlp.sizes[0] - len(self.angle_dims)

    def copy(self) -> PolicyParams:
        return PolicyParams(self.mlp.copy(), self.action_dim, self.angle_dims)


@dataclass
class QParams:
    """Twin critics over ``encoded state ++ action``; the two never share arrays."""

    q1: MlpParams
    q2: MlpParams
    angle_dims: tuple[int, ...] = ()

    def copy(self) -> QParams:
        return QParams(self.q1.copy(), self.q2.copy(), self.angle_dims)

    def inputs(self, states, actions) -> np.ndarray:
        dt = self.q1.dtype
        return np.concatenate([encode_states(states, self.angle_dims).astype(dt, copy=False),
                               np.asarray(actions).astype(dt, copy=False)], axis=1)


def init_policy(state_dim: int, action_dim: int, rng: np.random.Generator, hidden=HIDDEN,
                dtype=np.float32, angle_dims=()) -> PolicyParams:
    angle_dims = tuple(sorted(angle_dims))
    sizes = (state_dim + len(angle_dims), *hidden, 2 * action_dim)
    return PolicyParams(init_mlp(sizes, rng, dtype), action_dim, angle_dims)


def init_critics(state_dim: int, action_dim: int, rng: np.random.Generator, hidden=HIDDEN,
                 dtype=np.float32, angle_dims=()) -> QParams:
    angle_dims = tuple(sorted(angle_dims))
    sizes = (state_dim + len(angle_dims) + action_dim, *hidden, 1)
    return QParams(init_mlp(sizes, rng, dtype), init_mlp(sizes, rng, dtype), angle_dims)


@dataclass
class HeadOut:
    mu: np.ndarray
    log_std: np.ndarray
    clamp_mask: np.ndarray  # True where log-std is inside the clamp range
    cache: MlpCache | None = field(default=None, repr=False)


def policy_head(p: PolicyParams, states, return_cache: bool = False) -> HeadOut:
    out, cache = mlp_forward(p.mlp, encode_states(states, p.angle_dims), return_cache=True)
    m = p.action_dim
    mu, raw = out[:, :m], out[:, m:]
    log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
    inside = (raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX)
    return HeadOut(mu, log_std, inside, cache if return_cache else None)


def log1m_tanh_sq(u):
    """``log(1 - tanh(u)^2)`` in the softplus form, stable for large |u|."""
    return 2.0 * (np.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


def squashed_log_prob(u, eps, log_std):
    """Per-sample log density of ``a = tanh(u)`` where ``u = mu + std * eps``."""
    gauss = -0.5 * eps * eps - log_std - 0.5 * _LOG_2PI
    return np.sum(gauss - log1m_tanh_sq(u), axis=-1)


def policy_sample(p: PolicyParams, s, rng) -> tuple[np.ndarray, np.ndarray]:
    """Reparameterized draw ``a = tanh(mu + std * eps)`` with its log-probability.

    ``rng`` may be an int seed or a ``Generator``. A single state returns a
    single action and scalar log-prob.
    """
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    values = getattr(s, "values", s)
    single = np.ndim(values) == 1
    head = policy_head(p, values)
    eps = gen.standard_normal(head.mu.shape).astype(head.mu.dtype)
    u = head.mu + np.exp(head.log_std) * eps
    a = np.tanh(u)
    # keep samples strictly inside (-1, 1) in the saturated limit
    lim = np.nextafter(np.asarray(1.0, a.dtype), np.asarray(0.0, a.dtype))
    a = np.clip(a, -lim, lim)
    logp = squashed_log_prob(u, eps, head.log_std)
    if single:
        return a[0], logp[0]
    return a, logp


def policy_mean_action(p: PolicyParams, s) -> np.ndarray:
    values = getattr(s, "values", s)
    head = policy_head(p, values)
    a = np.tanh(head.mu)
    return a[0] if np.ndim(values) == 1 else a


def kl_diag_gaussian(mu_p, log_std_p, mu_q, log_std_q):
    """Closed-form KL(p || q) per row, summed over independent dimensions."""
    var_ratio = np.exp(2.0 * (log_std_p - log_std_q))
    mean_term = (mu_p - mu_q) ** 2 * np.exp(-2.0 * log_std_q)
    return np.sum(log_std_q - log_std_p + 0.5 * (var_ratio + mean_term) - 0.5, axis=-1)


def gaussian_kl(p: PolicyParams, q: PolicyParams, s):
    """KL(pi_p(.|s) || pi_q(.|s)); the shared tanh map leaves the value unchanged."""
    if p.action_dim != q.action_dim:
        raise ValueError("policies have different action dimensions")
    values = getattr(s, "values", s)
    hp, hq = policy_head(p, values), policy_head(q, values)
    kl = kl_diag_gaussian(hp.mu.astype(np.float64), hp.log_std.astype(np.float64),
                          hq.mu.astype(np.float64), hq.log_std.astype(np.float64))
    kl = np.maximum(kl, 0.0)
    return float(kl[0]) if np.ndim(values) == 1 else kl


# ----------------------------------------------------------------------------
# Checkpoints: structured text, one tensor per entry, 17 significant digits


def tensors_to_doc(tensors: dict[str, np.ndarray], meta: dict | None = None) -> dict:
    return {
        "schema_version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "tensors": {
            name: {
                "shape": list(arr.shape),
                "dtype": str(arr.dtype),
                "data": " ".join(format(float(x), ".17g") for x in np.asarray(arr).ravel()),
            }
            for name, arr in tensors.items()
        },
    }


def doc_to_tensors(doc: dict) -> tuple[dict[str, np.ndarray], dict]:
    version = doc.get("schema_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint schema_version {version!r}")
    out = {}
    for name, t in doc["tensors"].items():
        data = np.array([float(x) for x in t["data"].split()], dtype=np.float64)
        out[name] = data.astype(t["dtype"]).reshape(t["shape"])
    return out, doc.get("meta", {})


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_text(json.dumps(tensors_to_doc(tensors, meta), indent=1, sort_keys=True) + "\n")


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    return doc_to_tensors(json.loads(Path(path).read_text()))


def mlp_to_tensors(prefix: str, p: MlpParams) -> dict[str, np.ndarray]:
    return {f"{prefix}.{i}": t for i, t in enumerate(p.tensors())}


def mlp_from_tensors(prefix: str, tensors: dict[str, np.ndarray]) -> MlpParams:
    keys = sorted((k for k in tensors if k.startswith(prefix + ".")), key=lambda k: int(k.rsplit(".", 1)[1]))
    if not keys:
        raise KeyError(f"checkpoint has no tensors for {prefix!r}")
    return MlpParams.from_tensors([tensors[k] for k in keys])


def save_policy(path, p: PolicyParams, meta: dict | None = None) -> None:
    meta = dict(meta or {})
    meta.update(kind="policy", state_dim=p.state_dim, action_dim=p.action_dim, angle_dims=list(p.angle_dims))
    save_tensors(path, mlp_to_tensors("policy", p.mlp), meta)


def load_policy(path, state_dim: int | None = None, action_dim: int | None = None) -> tuple[PolicyParams, dict]:
    tensors, meta = load_tensors(path)
    p = PolicyParams(mlp_from_tensors("policy", tensors), int(meta["action_dim"]),
                     tuple(int(j) for j in meta.get("angle_dims", ())))
    if state_dim is not None and p.state_dim != state_dim:
        raise ValueError(f"checkpoint policy expects state dimension {p.state_dim}, environment has {state_dim}")
    if action_dim is not None and p.action_dim != action_dim:
        raise ValueError(f"checkpoint policy emits action dimension {p.action_dim}, environment has {action_dim}")
    return p, meta
