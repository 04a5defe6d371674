"""Two small continuous-control tasks with an explicit valid region and an out-of-distribution start.

Both environments are value-semantic: ``reset`` and ``step`` return new
``EnvState`` objects and never mutate their inputs, so many episodes may run
side by side on one environment instance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import ActionVector, Field, FieldSchema, StateVector, ValidationError

ORIGINAL = "original"
OOD = "ood"


def wrap_angle(a: float) -> float:
    """Map an angle to (-pi, pi]."""
    return a - 2.0 * math.pi * math.ceil((a - math.pi) / (2.0 * math.pi))


@dataclass(frozen=True)
class ViewField:
    name: str
    unit: str
    description: str
    formula: Callable[[np.ndarray], float] = field(compare=False, repr=False)
    bounds: tuple[float, float] | None = None


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_schema: FieldSchema
    action_schema: FieldSchema
    reward_view_schema: FieldSchema
    dt: float
    max_episode_steps: int
    termination_description: str
    task_name: str
    task_description: str


@dataclass(frozen=True)
class EnvState:
    state: StateVector
    step_count: int = 0
    enforce_termination: bool = True


@dataclass(frozen=True)
class StepResult:
    next_state: StateVector
    task_reward: float
    terminated: bool
    truncated: bool
    env_state: EnvState


@dataclass(frozen=True)
class SceneDocument:
    """Snapshot of a state: a textual scene description plus a drawing."""

    text: str
    svg: str
    shapes: tuple = ()
    width: int = 480
    height: int = 320

    def to_png(self) -> bytes:
        from io import BytesIO

        from PIL import Image, ImageDraw

        img = Image.new("RGB", (self.width, self.height), "white")
        draw = ImageDraw.Draw(img)
        for shape in self.shapes:
            kind = shape[0]
            if kind == "rect":
                _, x, y, w, h, fill = shape
                draw.rectangle([x, y, x + w, y + h], fill=fill, outline="black")
            elif kind == "line":
                _, x1, y1, x2, y2, width, color = shape
                draw.line([x1, y1, x2, y2], fill=color, width=int(round(width)))
            elif kind == "circle":
                _, cx, cy, r, fill = shape
                draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=fill, outline="black")
        buf = BytesIO()
        img.save(buf, format="PNG")
        return buf.getvalue()


def _svg(shapes, width: int, height: int) -> str:
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
    ]
    for shape in shapes:
        kind = shape[0]
        if kind == "rect":
            _, x, y, w, h, fill = shape
            parts.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{w:.2f}" height="{h:.2f}" '
                         f'fill="{fill}" stroke="black"/>')
        elif kind == "line":
            _, x1, y1, x2, y2, w, color = shape
            parts.append(f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" '
                         f'stroke="{color}" stroke-width="{w:.2f}"/>')
        elif kind == "circle":
            _, cx, cy, r, fill = shape
            parts.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="{r:.2f}" fill="{fill}" stroke="black"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


class Env:
    """Shared reset/step plumbing; subclasses supply dynamics, rewards and descriptions."""

    name = ""
    noise = 0.05
    angle_dims: tuple[int, ...] = ()  # state columns the networks see as (sin, cos)

    def __init__(self):
        self.spec = self._make_spec()
        self._view_fields: tuple[ViewField, ...] = self._view_field_defs()

    # -- subclass hooks
    def _make_spec(self) -> EnvSpec:
        raise NotImplementedError

    def _view_field_defs(self) -> tuple[ViewField, ...]:
        raise NotImplementedError

    def _integrate(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def task_reward(self, state, action, next_state) -> float:
        raise NotImplementedError

    def is_terminal(self, s) -> bool:
        """Termination predicate of the original task."""
        raise NotImplementedError

    def truth_valid(self, s) -> int:
        raise NotImplementedError

    def ood_configuration(self) -> np.ndarray:
        raise NotImplementedError

    def render_snapshot(self, s) -> SceneDocument:
        raise NotImplementedError

    # -- shared behaviour
    @property
    def state_dim(self) -> int:
        return len(self.spec.state_schema)

    @property
    def action_dim(self) -> int:
        return len(self.spec.action_schema)

    def make_state(self, values) -> StateVector:
        return StateVector(np.asarray(values, dtype=np.float64), self.spec.state_schema)

    def reset(self, mode: str = ORIGINAL, rng_seed=None, noise: float | None = None) -> EnvState:
        """Original mode starts near the valid upright configuration with termination enforced;
        OOD mode starts at the documented OOD configuration and never terminates."""
        noise = self.noise if noise is None else noise
        if not 0.0 <= noise <= 0.05:
            raise ValueError("reset noise must lie in [0, 0.05]")
        gen = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
        jitter = gen.uniform(-noise, noise, size=self.state_dim) if noise > 0 else np.zeros(self.state_dim)
        if mode == ORIGINAL:
            base = np.zeros(self.state_dim)
        elif mode == OOD:
            base = self.ood_configuration()
        else:
            raise ValueError(f"unknown reset mode {mode!r}; expected 'original' or 'ood'")
        values = self._wrap(base + jitter)
        return EnvState(self.make_state(values), 0, enforce_termination=(mode == ORIGINAL))

    def _wrap(self, s: np.ndarray) -> np.ndarray:
        return s

    def step(self, es: EnvState, action) -> StepResult:
        a = np.asarray(getattr(action, "values", action), dtype=np.float64)
        if a.shape != (self.action_dim,) or not np.all(np.isfinite(a)):
            raise ValidationError(f"action must be a finite vector of length {self.action_dim}")
        if np.any(np.abs(a) > 1.0):
            raise ValidationError(f"action {a.tolist()} outside [-1, 1]")
        s = es.state.values
        s2 = self._wrap(self._integrate(s, a))
        nxt = self.make_state(s2)
        reward = self.task_reward(s, a, s2)
        steps = es.step_count + 1
        terminated = bool(es.enforce_termination and self.is_terminal(s2))
        truncated = steps >= self.spec.max_episode_steps
        return StepResult(nxt, float(reward), terminated, truncated, EnvState(nxt, steps, es.enforce_termination))

    def action_vector(self, values) -> ActionVector:
        return ActionVector(np.asarray(values, dtype=np.float64), self.spec.action_schema)

    def reward_view(self, s) -> dict[str, float]:
        """Named features handed to generated reward/eval programs (raw fields plus derived)."""
        v = np.asarray(getattr(s, "values", s), dtype=np.float64)
        return {f.name: float(f.formula(v)) for f in self._view_fields}

    def view_documentation(self) -> tuple[ViewField, ...]:
        return self._view_fields


def _view_schema(fields: tuple[ViewField, ...]) -> FieldSchema:
    return FieldSchema(tuple(Field(f.name, i, f.unit, f.bounds, f.description) for i, f in enumerate(fields)))


class CartPole(Env):
    """Cart-pole with the pole angle measured from upright (theta = 0), wrapped to (-pi, pi]."""

    name = "cartpole"
    angle_dims = (2,)

    def __init__(self, cart_mass=1.0, pole_mass=0.1, half_length=0.5, gravity=9.8, dt=0.02,
                 force_mag=10.0, max_episode_steps=1000, rail_limit=2.4, clamp_cart=False):
        self.cart_mass = cart_mass
        self.pole_mass = pole_mass
        self.half_length = half_length
        self.gravity = gravity
        self.dt = dt
        self.force_mag = force_mag
        self.max_episode_steps = max_episode_steps
        # end stops: the cart halts when it reaches |x| = rail_limit
        self.rail_limit = rail_limit
        # test-only variant: cart fixed, pole is a free physical pendulum
        self.clamp_cart = clamp_cart
        super().__init__()

    def _make_spec(self) -> EnvSpec:
        state = FieldSchema.build(
            ("x", "m", (-self.rail_limit, self.rail_limit), "cart position along the rail; 0 is the middle"),
            ("x_dot", "m/s", None, "cart velocity"),
            ("theta", "rad", (-math.pi, math.pi), "pole angle from upright; 0 upright, +-pi hanging down"),
            ("theta_dot", "rad/s", None, "pole angular velocity"))
        action = FieldSchema.build(("force", f"normalized, times {self.force_mag:g} N", (-1.0, 1.0),
                                    "horizontal push on the cart; positive pushes toward +x"))
        return EnvSpec(
            name=self.name,
            state_schema=state,
            action_schema=action,
            reward_view_schema=_view_schema(self._view_field_defs()),
            dt=self.dt,
            max_episode_steps=self.max_episode_steps,
            termination_description="episode ends when |theta| > 0.5 rad (pole fallen) during original-task training",
            task_name="CartPoleBalance",
            task_description=(
                f"A cart moves along a horizontal rail (end stops at x = +-{self.rail_limit:g} m) with a pole "
                "hinged on top of it. The original task "
                "is to keep the pole balanced upright above the cart for as long as possible by pushing "
                "the cart left or right. The task reward each step is cos(theta) - 0.01 * force^2."
            ),
        )

    def _view_field_defs(self) -> tuple[ViewField, ...]:
        return (
            ViewField("x", "m", "cart position along the rail; 0 is the middle", lambda v: v[0],
                      (-self.rail_limit, self.rail_limit)),
            ViewField("x_dot", "m/s", "cart velocity", lambda v: v[1]),
            ViewField("theta", "rad", "pole angle from upright, wrapped to (-pi, pi]; 0 is upright, +-pi is hanging down",
                      lambda v: v[2], (-math.pi, math.pi)),
            ViewField("theta_dot", "rad/s", "pole angular velocity", lambda v: v[3]),
            ViewField("cos_theta", "", "cos(theta): 1 upright, -1 hanging down", lambda v: math.cos(v[2]), (-1.0, 1.0)),
            ViewField("sin_theta", "", "sin(theta)", lambda v: math.sin(v[2]), (-1.0, 1.0)),
            ViewField("abs_theta", "rad", "|theta|, angular distance from upright", lambda v: abs(v[2]), (0.0, math.pi)),
            ViewField("abs_theta_dot", "rad/s", "|theta_dot|", lambda v: abs(v[3])),
            ViewField("upright_err", "rad", "upright error |theta|", lambda v: abs(v[2]), (0.0, math.pi)),
        )

    def _wrap(self, s):
        s = np.array(s, dtype=np.float64)
        s[2] = wrap_angle(s[2])
        return s

    def _integrate(self, s, a):
        x, x_dot, th, th_dot = s
        force = self.force_mag * float(a[0])
        sin, cos = math.sin(th), math.cos(th)
        l, mp, g = self.half_length, self.pole_mass, self.gravity
        pivot = l * 4.0 / 3.0
        if self.clamp_cart:
            x_acc = 0.0
            th_acc = g * sin / pivot
        else:
            total = self.cart_mass + mp
            temp = (force + mp * l * th_dot * th_dot * sin) / total
            th_acc = (g * sin - cos * temp) / (l * (4.0 / 3.0 - mp * cos * cos / total))
            x_acc = temp - mp * l * th_acc * cos / total
            if abs(x) >= self.rail_limit and x_dot == 0.0 and x_acc * x > 0.0:
                # pinned against an end stop: the stop takes the push, the pivot is fixed
                x_acc = 0.0
                th_acc = g * sin / pivot
        # semi-implicit Euler: velocities first, positions from the new velocities
        x_dot = x_dot + self.dt * x_acc
        th_dot = th_dot + self.dt * th_acc
        x = x + self.dt * x_dot
        if abs(x) > self.rail_limit:
            # inelastic end stop: the pivot halts and the pole keeps its momentum about it
            x = math.copysign(self.rail_limit, x)
            th_dot = th_dot + cos * x_dot / pivot
            x_dot = 0.0
        return np.array([x, x_dot, th + self.dt * th_dot, th_dot])

    def pendulum_energy(self, s) -> float:
        """Mechanical energy of the pole about a fixed pivot (clamped-cart variant)."""
        v = np.asarray(getattr(s, "values", s))
        inertia = (4.0 / 3.0) * self.pole_mass * self.half_length ** 2
        return 0.5 * inertia * v[3] ** 2 + self.pole_mass * self.gravity * self.half_length * math.cos(v[2])

    def task_reward(self, state, action, next_state) -> float:
        a = np.asarray(getattr(action, "values", action), dtype=np.float64)
        return math.cos(float(np.asarray(getattr(next_state, "values", next_state))[2])) - 0.01 * float(a @ a)

    def is_terminal(self, s) -> bool:
        return abs(float(np.asarray(getattr(s, "values", s))[2])) > 0.5

    def truth_valid(self, s) -> int:
        v = np.asarray(getattr(s, "values", s))
        return int(abs(v[2]) <= 0.5 and abs(v[3]) <= 2.0)

    def ood_configuration(self):
        return np.array([0.0, 0.0, math.pi, 0.0])

    def render_snapshot(self, s) -> SceneDocument:
        x, x_dot, th, th_dot = (float(t) for t in np.asarray(getattr(s, "values", s)))
        deg = math.degrees(th)
        tip_height = 2.0 * self.half_length * math.cos(th)
        side = "to the right (+x)" if th > 0 else "to the left (-x)"
        if abs(th) <= 0.5:
            pose = "the pole is balanced nearly upright above the cart"
        elif abs(th) < math.pi / 2:
            pose = f"the pole is tilted {side}, above horizontal, and falling"
        elif abs(th) < 2.6:
            pose = f"the pole has fallen {side} below horizontal and is swinging below the cart"
        else:
            pose = "the pole is hanging downward below the cart"
        text = "\n".join([
            "Scene: a cart-pole system seen from the side by a fixed camera.",
            f"Cart: on a horizontal rail at x = {x:+.3f} m, moving at {x_dot:+.3f} m/s.",
            f"Pole: angle from upright = {deg:+.1f} degrees ({th:+.3f} rad), angular velocity {th_dot:+.3f} rad/s.",
            f"Orientation: {pose}.",
            f"Pole tip height relative to the hinge: {tip_height:+.3f} m.",
            "Contact: the cart rests on the rail; the pole hangs freely from its hinge and touches nothing else.",
        ]) + "\n"
        w, h, scale = 480, 320, 100.0
        cx = w / 2 + max(-2.0, min(2.0, x)) * scale * 0.5
        cy = h / 2
        px = cx + 2 * self.half_length * scale * math.sin(th)
        py = cy - 2 * self.half_length * scale * math.cos(th)
        shapes = (
            ("line", 20.0, cy + 20.0, w - 20.0, cy + 20.0, 2.0, "gray"),
            ("rect", cx - 30.0, cy - 15.0, 60.0, 30.0, "#4a6fa5"),
            ("line", cx, cy, px, py, 6.0, "#c0392b"),
            ("circle", cx, cy, 4.0, "black"),
        )
        return SceneDocument(text, _svg(shapes, w, h), shapes, w, h)


class FlipBot(Env):
    """Planar body that can only drive while upright; overturned (phi = pi) is a resting state."""

    name = "flipbot"
    angle_dims = (2,)

    def __init__(self, dt=0.02, drive_accel=5.0, friction=1.0, righting_barrier=4.0, torque_gain=6.0,
                 roll_damping=0.5, max_episode_steps=1000):
        self.dt = dt
        self.drive_accel = drive_accel
        self.friction = friction
        self.righting_barrier = righting_barrier
        self.torque_gain = torque_gain
        self.roll_damping = roll_damping
        self.max_episode_steps = max_episode_steps
        super().__init__()

    def _make_spec(self) -> EnvSpec:
        state = FieldSchema.build(
            ("x", "m", None, "body position along the ground"),
            ("x_dot", "m/s", None, "forward velocity"),
            ("phi", "rad", (-math.pi, math.pi), "body roll from upright; +-pi is upside-down"),
            ("phi_dot", "rad/s", None, "roll rate"))
        action = FieldSchema.build(
            ("drive", "normalized", (-1.0, 1.0), "wheel drive; moves the body only while upright"),
            ("roll_torque", "normalized", (-1.0, 1.0), "body roll torque; positive increases phi"))
        return EnvSpec(
            name=self.name,
            state_schema=state,
            action_schema=action,
            reward_view_schema=_view_schema(self._view_field_defs()),
            dt=self.dt,
            max_episode_steps=self.max_episode_steps,
            termination_description="episode ends when |phi| > 0.3 rad (body tipped over) during original-task training",
            task_name="FlipBotDrive",
            task_description=(
                "A small wheeled robot body moves along flat ground. Its wheels only grip while the body is "
                "upright (|phi| < 0.3 rad). The original task is to drive forward (+x) as fast as possible. "
                "The task reward each step is x_dot * [|phi| < 0.3] - 0.01 * |action|^2."
            ),
        )

    def _view_field_defs(self) -> tuple[ViewField, ...]:
        return (
            ViewField("x", "m", "body position along the ground", lambda v: v[0]),
            ViewField("x_dot", "m/s", "forward velocity", lambda v: v[1]),
            ViewField("phi", "rad", "body roll from upright, wrapped to (-pi, pi]; +-pi is upside-down",
                      lambda v: v[2], (-math.pi, math.pi)),
            ViewField("phi_dot", "rad/s", "roll rate", lambda v: v[3]),
            ViewField("cos_phi", "", "cos(phi): 1 upright, -1 upside-down", lambda v: math.cos(v[2]), (-1.0, 1.0)),
            ViewField("abs_phi", "rad", "|phi|, roll distance from upright", lambda v: abs(v[2]), (0.0, math.pi)),
            ViewField("abs_phi_dot", "rad/s", "|phi_dot|", lambda v: abs(v[3])),
        )

    def _wrap(self, s):
        s = np.array(s, dtype=np.float64)
        s[2] = wrap_angle(s[2])
        return s

    def _integrate(self, s, a):
        x, x_dot, phi, phi_dot = s
        drive, torque = float(a[0]), float(a[1])
        gate = 1.0 if abs(phi) < 0.3 else 0.0
        x_acc = self.drive_accel * drive * gate - self.friction * x_dot
        phi_acc = (self.torque_gain * torque - self.righting_barrier * math.sin(2.0 * phi)
                   - self.roll_damping * phi_dot)
        x_dot = x_dot + self.dt * x_acc
        phi_dot = phi_dot + self.dt * phi_acc
        return np.array([x + self.dt * x_dot, x_dot, phi + self.dt * phi_dot, phi_dot])

    def task_reward(self, state, action, next_state) -> float:
        a = np.asarray(getattr(action, "values", action), dtype=np.float64)
        v = np.asarray(getattr(next_state, "values", next_state))
        gate = 1.0 if abs(v[2]) < 0.3 else 0.0
        return float(v[1]) * gate - 0.01 * float(a @ a)

    def is_terminal(self, s) -> bool:
        return abs(float(np.asarray(getattr(s, "values", s))[2])) > 0.3

    def truth_valid(self, s) -> int:
        return int(abs(float(np.asarray(getattr(s, "values", s))[2])) <= 0.3)

    def ood_configuration(self):
        return np.array([0.0, 0.0, math.pi, 0.0])

    def render_snapshot(self, s) -> SceneDocument:
        x, x_dot, phi, phi_dot = (float(t) for t in np.asarray(getattr(s, "values", s)))
        a = abs(phi)
        if a <= 0.3:
            pose = "the robot is upright with its wheels on the ground"
        elif a < 1.2:
            pose = "the robot is tilted and its wheels are lifting off the ground"
        elif a < 2.0:
            pose = "the robot is lying on its side; its wheels do not touch the ground"
        else:
            pose = "the robot is upside-down, flipped onto its back with its wheels pointing at the sky"
        text = "\n".join([
            "Scene: a small wheeled robot on flat ground seen from the side by a fixed camera.",
            f"Body: at x = {x:+.3f} m, moving at {x_dot:+.3f} m/s.",
            f"Roll: {math.degrees(phi):+.1f} degrees from upright ({phi:+.3f} rad), roll rate {phi_dot:+.3f} rad/s.",
            f"Orientation: {pose}.",
            "Contact: " + ("wheels touching the ground." if a <= 0.3 else "the body shell touches the ground, wheels do not."),
        ]) + "\n"
        w, h = 480, 320
        cx, cy = w / 2, h * 0.6
        ux, uy = math.sin(phi), -math.cos(phi)
        wx, wy = cx - 30 * ux, cy - 30 * uy
        shapes = (
            ("line", 20.0, cy + 35.0, w - 20.0, cy + 35.0, 2.0, "gray"),
            ("line", cx - 40 * uy, cy + 40 * ux, cx + 40 * uy, cy - 40 * ux, 24.0, "#4a6fa5"),
            ("circle", wx - 25 * uy, wy + 25 * ux, 9.0, "black"),
            ("circle", wx + 25 * uy, wy - 25 * ux, 9.0, "black"),
            ("line", cx, cy, cx + 45 * ux, cy + 45 * uy, 3.0, "#c0392b"),
        )
        return SceneDocument(text, _svg(shapes, w, h), shapes, w, h)


ENVIRONMENTS: dict[str, type[Env]] = {"cartpole": CartPole, "flipbot": FlipBot}

# generated-reward scale per environment
DEFAULT_LAMBDA = {"cartpole": 0.05, "flipbot": 0.05}


class UnknownEnvironmentError(KeyError):
    def __str__(self):
        return self.args[0]


def make_env(name: str, **kwargs) -> Env:
    try:
        cls = ENVIRONMENTS[name]
    except KeyError:
        raise UnknownEnvironmentError(
            f"unknown environment {name!r}; available: {', '.join(sorted(ENVIRONMENTS))}") from None
    return cls(**kwargs)
