"""Shared data types: named-field schemas, typed vectors, transitions and the replay buffer."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class ValidationError(ValueError):
    """A vector or transition violates its schema or finiteness contract."""


class UnderfilledBufferError(ValueError):
    pass


@dataclass(frozen=True)
class Field:
    name: str
    index: int
    unit: str = ""
    bounds: tuple[float, float] | None = None
    description: str = ""


@dataclass(frozen=True)
class FieldSchema:
    """Ordered, named description of a real vector's coordinates."""

    fields: tuple[Field, ...]

    def __post_init__(self):
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate field names in schema: {names}")
        if [f.index for f in self.fields] != list(range(len(self.fields))):
            raise ValidationError("field indices must be 0..n-1 without gaps")
        for f in self.fields:
            if f.bounds is not None and not f.bounds[0] < f.bounds[1]:
                raise ValidationError(f"field {f.name!r}: bounds lo must be < hi")

    @classmethod
    def build(cls, *specs: tuple) -> FieldSchema:
        """Build from ``(name, unit[, (lo, hi)[, description]])`` tuples."""
        out = []
        for i, spec in enumerate(specs):
            name, unit = spec[0], spec[1]
            bounds = tuple(spec[2]) if len(spec) > 2 and spec[2] is not None else None
            description = spec[3] if len(spec) > 3 else ""
            out.append(Field(name, i, unit, bounds, description))
        return cls(tuple(out))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.fields)

    def __len__(self) -> int:
        return len(self.fields)

    def index_of(self, name: str) -> int:
        for f in self.fields:
            if f.name == name:
                return f.index
        raise KeyError(name)


def _as_finite_vector(values, schema: FieldSchema, what: str) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != len(schema):
        raise ValidationError(
            f"{what}: expected length {len(schema)} for fields {list(schema.names)}, got shape {v.shape}"
        )
    if not np.all(np.isfinite(v)):
        bad = [schema.names[i] for i in np.flatnonzero(~np.isfinite(v))]
        raise ValidationError(f"{what}: non-finite entries in {bad}")
    return v


@dataclass(frozen=True)
class StateVector:
    values: np.ndarray
    schema: FieldSchema

    def __post_init__(self):
        object.__setattr__(self, "values", _as_finite_vector(self.values, self.schema, "state"))

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.schema.index_of(name)])

    def as_dict(self) -> dict[str, float]:
        return {n: float(x) for n, x in zip(self.schema.names, self.values)}


@dataclass(frozen=True)
class ActionVector:
    values: np.ndarray
    schema: FieldSchema

    def __post_init__(self):
        v = _as_finite_vector(self.values, self.schema, "action")
        if np.any(np.abs(v) > 1.0):
            raise ValidationError(f"action entries must lie in [-1, 1], got {v.tolist()}")
        object.__setattr__(self, "values", v)

    def as_dict(self) -> dict[str, float]:
        return {n: float(x) for n, x in zip(self.schema.names, self.values)}


def validate_against_schema(values: Sequence[float] | np.ndarray, schema: FieldSchema) -> StateVector:
    return StateVector(np.asarray(values, dtype=np.float64), schema)


@dataclass(frozen=True)
class Transition:
    state: StateVector
    action: ActionVector
    reward: float
    next_state: StateVector
    eval_flag: int
    terminal: bool = False

    def __post_init__(self):
        if self.eval_flag not in (0, 1):
            raise ValidationError(f"eval_flag must be 0 or 1, got {self.eval_flag!r}")
        if not np.isfinite(self.reward):
            raise ValidationError(f"reward must be finite, got {self.reward!r}")
        if self.state.schema != self.next_state.schema:
            raise ValidationError("state and next_state use different schemas")


@dataclass
class Batch:
    """Column-wise view of sampled transitions, the layout the SAC updates consume."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    eval_flags: np.ndarray
    terminals: np.ndarray
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return self.rewards.shape[0]


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions stored column-wise.

    A single writer may push while readers sample; the lock guarantees a
    sample never observes a half-written row.
    """

    def __init__(self, capacity: int, state_schema: FieldSchema, action_schema: FieldSchema):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.state_schema = state_schema
        self.action_schema = action_schema
        self.cursor = 0
        self._size = 0
        self._lock = threading.Lock()
        # grown on demand so a 1M-capacity buffer costs nothing until filled
        self._alloc = 0
        ds, da = len(state_schema), len(action_schema)
        self._s = np.empty((0, ds))
        self._a = np.empty((0, da))
        self._r = np.empty(0)
        self._s2 = np.empty((0, ds))
        self._flag = np.empty(0, dtype=np.int8)
        self._term = np.empty(0, dtype=bool)

    def __len__(self) -> int:
        return self._size

    @property
    def size(self) -> int:
        return self._size

    def _grow(self, needed: int) -> None:
        new = min(self.capacity, max(needed, 2 * self._alloc, 1024))
        if new <= self._alloc:
            return

        def grow(arr):
            out = np.empty((new,) + arr.shape[1:], dtype=arr.dtype)
            out[: self._alloc] = arr[: self._alloc]
            return out

        self._s, self._a, self._r = grow(self._s), grow(self._a), grow(self._r)
        self._s2, self._flag, self._term = grow(self._s2), grow(self._flag), grow(self._term)
        self._alloc = new

    def push(self, t: Transition) -> ReplayBuffer:
        if t.state.schema != self.state_schema or t.action.schema != self.action_schema:
            raise ValidationError("transition schema does not match buffer schema")
        self.push_arrays(t.state.values, t.action.values, t.reward, t.next_state.values, t.eval_flag, t.terminal)
        return self

    def push_arrays(self, state, action, reward, next_state, eval_flag, terminal) -> None:
        """Fast path for the interaction loop; performs the same validation as ``push``."""
        state = np.asarray(state, dtype=np.float64)
        next_state = np.asarray(next_state, dtype=np.float64)
        action = np.asarray(action, dtype=np.float64)
        if not (np.isfinite(reward) and np.all(np.isfinite(state)) and np.all(np.isfinite(next_state))
                and np.all(np.isfinite(action))):
            raise ValidationError("transition contains non-finite entries")
        if eval_flag not in (0, 1):
            raise ValidationError(f"eval_flag must be 0 or 1, got {eval_flag!r}")
        if state.shape != (len(self.state_schema),) or next_state.shape != state.shape:
            raise ValidationError(f"state shape {state.shape} does not match schema")
        if action.shape != (len(self.action_schema),):
            raise ValidationError(f"action shape {action.shape} does not match schema")
        with self._lock:
            i = self.cursor
            if i >= self._alloc:
                self._grow(i + 1)
            self._s[i], self._a[i], self._r[i] = state, action, reward
            self._s2[i], self._flag[i], self._term[i] = next_state, eval_flag, bool(terminal)
            self.cursor = (i + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)

    def sample(self, n: int, rng: int | np.random.Generator) -> Batch:
        """Uniform sample with replacement; an int ``rng`` seeds a fresh generator."""
        if n <= 0:
            raise ValueError("n must be positive")
        gen = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        with self._lock:
            if n > self._size:
                raise UnderfilledBufferError(f"requested {n} transitions but buffer holds {self._size}")
            idx = gen.integers(0, self._size, size=n)
            return Batch(
                states=self._s[idx], actions=self._a[idx], rewards=self._r[idx],
                next_states=self._s2[idx], eval_flags=self._flag[idx].astype(np.float64),
                terminals=self._term[idx].copy(), indices=idx,
            )

    def all(self) -> Batch:
        """Every stored transition, oldest first."""
        with self._lock:
            if self._size < self.capacity:
                order = np.arange(self._size)
            else:
                order = (np.arange(self.capacity) + self.cursor) % self.capacity
            return Batch(
                states=self._s[order], actions=self._a[order], rewards=self._r[order],
                next_states=self._s2[order], eval_flags=self._flag[order].astype(np.float64),
                terminals=self._term[order].copy(), indices=order,
            )

    def transitions(self, batch: Batch | None = None) -> list[Transition]:
        batch = self.all() if batch is None else batch
        return [
            Transition(
                StateVector(batch.states[i], self.state_schema),
                ActionVector(batch.actions[i], self.action_schema),
                float(batch.rewards[i]),
                StateVector(batch.next_states[i], self.state_schema),
                int(batch.eval_flags[i]),
                bool(batch.terminals[i]),
            )
            for i in range(len(batch))
        ]

    def extend(self, items: Iterable[Transition]) -> None:
        for t in items:
            self.push(t)


def push(buffer: ReplayBuffer, t: Transition) -> ReplayBuffer:
    return buffer.push(t)


def sample(buffer: ReplayBuffer, n: int, rng_seed: int) -> list[Transition]:
    return buffer.transitions(buffer.sample(n, rng_seed))
