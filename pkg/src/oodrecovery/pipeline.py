"""Recovery-reward generation: OOD description, behavior reasoning, code generation.

The language model is reached through a ``ChatClient``: ``LiveClient`` talks to
an OpenAI-compatible chat-completions endpoint, ``RecordedClient`` replays a
frozen transcript keyed by a digest of the canonical request.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import re
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

from . import dsl
from .envs import EnvSpec, SceneDocument

log = logging.getLogger(__name__)

PIPELINE_TEMPERATURE = 0.0
MAX_ATTEMPTS = 3

ENV_ENDPOINT = "OODRECOVERY_LLM_ENDPOINT"
ENV_MODEL = "OODRECOVERY_LLM_MODEL"
ENV_API_KEY = "OODRECOVERY_LLM_API_KEY"


class PipelineError(RuntimeError):
    pass


class TransportError(PipelineError):
    pass


class UnrecordedPromptError(PipelineError):
    def __init__(self, digest: str):
        super().__init__(f"unrecorded prompt: no recorded response for request digest {digest}")
        self.digest = digest


class PipelineAbort(PipelineError):
    """A phase exhausted its attempts. Carries every exchange and error for diagnosis."""

    def __init__(self, phase: str, errors: list[str], transcript: list[dict]):
        super().__init__(f"{phase} aborted after {len(errors)} failed attempt(s): " + " | ".join(errors))
        self.phase = phase
        self.errors = errors
        self.transcript = transcript


# ----------------------------------------------------------------------------
# Requests and clients


@dataclass(frozen=True)
class Attachment:
    """Image bytes plus the identity used in request digests.

    ``key`` lets a rendered image be identified by its vector source, so
    digests do not depend on the rasterizer version.
    """

    media_type: str
    data: bytes
    key: str = ""

    def digest(self) -> str:
        return self.key or hashlib.sha256(self.data).hexdigest()


@dataclass(frozen=True)
class ChatMessage:
    role: str
    text: str
    image: Attachment | None = None

    def __post_init__(self):
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"invalid chat role {self.role!r}")


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[ChatMessage, ...]
    temperature: float = PIPELINE_TEMPERATURE
    model: str = ""

    def canonical(self) -> dict:
        """Model-independent form used for digests and transcripts (images by hash)."""
        msgs = []
        for m in self.messages:
            entry = {"role": m.role, "text": m.text}
            if m.image is not None:
                entry["image"] = {"media_type": m.image.media_type, "sha256": m.image.digest()}
            msgs.append(entry)
        return {"messages": msgs, "temperature": self.temperature}

    def digest(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"), ensure_ascii=True)
        return hashlib.sha256(blob.encode()).hexdigest()


class ChatClient(Protocol):
    def complete(self, request: ChatRequest) -> str: ...


class RecordedClient:
    """Replays responses recorded against a live model; never touches the network."""

    def __init__(self, responses: dict[str, str]):
        self.responses = dict(responses)
        self.calls = 0

    @classmethod
    def from_file(cls, path) -> RecordedClient:
        doc = json.loads(Path(path).read_text())
        return cls(doc["responses"])

    def complete(self, request: ChatRequest) -> str:
        self.calls += 1
        key = request.digest()
        if key not in self.responses:
            raise UnrecordedPromptError(key)
        return self.responses[key]


class RecordingClient:
    """Wraps another client and keeps every response under its request digest."""

    def __init__(self, inner):
        self.inner = inner
        self.responses: dict[str, str] = {}

    def complete(self, request: ChatRequest) -> str:
        text = self.inner.complete(request)
        self.responses[request.digest()] = text
        return text

    def save(self, path, note: str = "") -> None:
        doc = {"note": note, "responses": dict(sorted(self.responses.items()))}
        Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


class ScriptedClient:
    """Returns queued responses in order; for tests and for authoring recordings."""

    def __init__(self, replies):
        self.replies = list(replies)
        self.requests: list[ChatRequest] = []

    def complete(self, request: ChatRequest) -> str:
        self.requests.append(request)
        if not self.replies:
            raise TransportError("scripted client has no replies left")
        reply = self.replies.pop(0)
        if isinstance(reply, Exception):
            raise reply
        return reply


class LiveClient:
    """OpenAI-compatible ``/chat/completions`` client.

    Endpoint, model and key default to the ``OODRECOVERY_LLM_*`` environment
    variables. Every raw request/response body is kept in ``exchanges`` with the
    key redacted.
    """

    def __init__(self, endpoint: str | None = None, model: str | None = None, api_key: str | None = None,
                 attach_images: bool = False, timeout: float = 120.0, transport=None):
        import httpx

        self.endpoint = (endpoint or os.environ.get(ENV_ENDPOINT) or "https://api.openai.com/v1").rstrip("/")
        self.model = model or os.environ.get(ENV_MODEL) or "gpt-4o"
        self._api_key = api_key if api_key is not None else os.environ.get(ENV_API_KEY, "")
        self.attach_images = attach_images
        self.exchanges: list[dict] = []
        self._http = httpx.Client(timeout=timeout, transport=transport)

    def body(self, request: ChatRequest) -> dict:
        messages = []
        for m in request.messages:
            if m.image is not None and self.attach_images:
                url = f"data:{m.image.media_type};base64,{base64.b64encode(m.image.data).decode()}"
                content = [{"type": "text", "text": m.text}, {"type": "image_url", "image_url": {"url": url}}]
            else:
                content = m.text
            messages.append({"role": m.role, "content": content})
        return {"model": request.model or self.model, "messages": messages, "temperature": request.temperature}

    def complete(self, request: ChatRequest) -> str:
        import httpx

        body = self.body(request)
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        record = {"url": f"{self.endpoint}/chat/completions", "request": body,
                  "headers": {k: ("Bearer [REDACTED]" if k == "Authorization" else v) for k, v in headers.items()}}
        self.exchanges.append(record)
        try:
            resp = self._http.post(record["url"], json=body, headers=headers)
        except httpx.HTTPError as exc:
            record["error"] = str(exc)
            raise TransportError(f"chat request failed: {exc}") from exc
        record["status"] = resp.status_code
        record["response"] = resp.text
        if resp.status_code != 200:
            raise TransportError(f"chat endpoint returned HTTP {resp.status_code}: {resp.text[:300]}")
        try:
            return resp.json()["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, ValueError) as exc:
            raise TransportError(f"malformed chat response: {resp.text[:300]}") from exc


# ----------------------------------------------------------------------------
# Prompt templates

GRAMMAR_REFERENCE = """\
Programs are written in a small expression language (not Python):
  let <name> = <expression>;      (zero or more bindings, each may use earlier ones)
  return <expression>;            (exactly one, last)
Expressions use real numbers, the listed identifiers, + - * /, parentheses,
comparisons < <= > >= == (yielding 1 or 0), and / or / not,
if(condition, value_if_true, value_if_false),
and the functions abs, min, max, exp, log, sqrt, tanh, sin, cos, sq (square), clip(x, lo, hi).
A # starts a comment that runs to the end of the line.
There are no loops, assignments after definition, or other functions.
log of a non-positive number and division by zero are errors."""


@dataclass(frozen=True)
class PromptTemplates:
    system: str = "You are an expert in robotics and reinforcement learning reward design."
    p_ood: str = (
        "The snapshot below shows an agent from a fixed third-person camera. The agent is in a state it never "
        "encountered while learning its task.\n\n"
        "Describe the agent's current state precisely: its body pose and orientation, which parts touch the "
        "ground or other objects, and how it differs from a normal operating posture. Describe only what is "
        "visible; do not propose actions.\n\n"
        "Snapshot:\n$snapshot"
    )
    p_br: str = (
        "Original task of the agent:\n$task\n\n"
        "Description of the agent's current state:\n$ood\n\n"
        "Think step by step.\n"
        "Step 1: Identify a valid state, that is a state from which the agent can successfully perform the "
        "original task. Describe it concretely.\n"
        "Step 2: Compare the current state with that valid state.\n"
        "Step 3: Infer the recovery behavior the agent must perform to move from the current state to the "
        "valid state, as a sequence of stages if needed.\n"
        "Finish with a short paragraph starting with 'Recovery behavior:'."
    )
    p_cg: str = (
        "Recovery behavior to reinforce:\n$recovery\n\n"
        "Environment description:\n$env\n\n"
        "$grammar\n\n"
        "${fewshot}"
        "Write two programs.\n"
        "1. A dense reward program that returns a reward for the state reached after an action, which "
        "increases as the agent makes progress on the recovery behavior. It may use the state identifiers "
        "and the action identifiers.\n"
        "2. An evaluation program that uses only the state identifiers and returns 1 if the agent is in a "
        "valid state from which it can perform the original task, and 0 otherwise.\n\n"
        "Reply with exactly two fenced code blocks, the first tagged reward and the second tagged eval:\n"
        "```reward\n...\n```\n```eval\n...\n```"
    )
    fewshot_header: str = "Example of a reward program for a different task (for format and style only):\n"
    retry: str = (
        "The programs in your previous reply could not be used:\n$errors\n\n"
        "Reply again with both corrected programs as two fenced code blocks tagged reward and eval."
    )


def fill(template: str, **slots) -> str:
    """Substitute every ``$slot``; a missing slot raises ``KeyError`` before any dispatch."""
    return string.Template(template).substitute(**slots)


# ----------------------------------------------------------------------------
# Environment description


def _field_lines(schema, bullet="- ") -> list[str]:
    out = []
    for f in schema.fields:
        line = f"{bullet}{f.name}"
        if f.unit:
            line += f" [{f.unit}]"
        if f.description:
            line += f": {f.description}"
        out.append(line)
        if f.bounds is not None:
            out.append(f"    range: {f.bounds[0]:.6g} to {f.bounds[1]:.6g}")
    return out


def build_env_description(spec: EnvSpec) -> str:
    """Deterministic text of the state, action and reward-program inputs of an environment."""
    lines = [f"Environment: {spec.task_name}", f"Time step: {spec.dt:g} s per action", ""]
    lines.append("State observed by the agent:")
    lines += _field_lines(spec.state_schema)
    lines += ["", "Action (each component in [-1, 1]):"]
    lines += _field_lines(spec.action_schema)
    lines += ["", "Identifiers available to reward and evaluation programs (computed from the state):"]
    lines += _field_lines(spec.reward_view_schema)
    lines += [
        "",
        "State identifiers: " + ", ".join(spec.reward_view_schema.names),
        "Action identifiers (reward programs only): " + ", ".join(spec.action_schema.names),
        f"Original-task termination: {spec.termination_description}",
    ]
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------------
# Phases

_FENCE = re.compile(r"```[ \t]*([A-Za-z_ \t-]*)\n(.*?)```", re.DOTALL)


def extract_code_blocks(text: str) -> dict[str, str]:
    """Fenced blocks whose info string ends in ``reward`` or ``eval``."""
    blocks = {}
    for info, body in _FENCE.findall(text):
        tag = info.strip().split()[-1].lower() if info.strip() else ""
        if tag in (dsl.REWARD, dsl.EVAL) and tag not in blocks:
            blocks[tag] = body
    return blocks


@dataclass
class Transcript:
    exchanges: list[dict] = field(default_factory=list)
    sink: Path | None = None

    def add(self, phase: str, attempt: int, request: ChatRequest, response: str | None, error: str | None = None):
        entry = {"phase": phase, "attempt": attempt, "request": request.canonical(), "response": response}
        if error is not None:
            entry["error"] = error
        self.exchanges.append(entry)
        if self.sink is not None:
            self.write(self.sink)

    def write(self, path: Path) -> None:
        lines = [json.dumps(e, sort_keys=True, ensure_ascii=True) for e in self.exchanges]
        Path(path).write_text("".join(line + "\n" for line in lines))


def _ask(client, request: ChatRequest, phase: str, transcript: Transcript) -> str:
    """Send with up to ``MAX_ATTEMPTS`` tries on transport errors or empty replies."""
    if request.temperature != PIPELINE_TEMPERATURE:
        raise PipelineError("pipeline requests must use temperature 0.0")
    errors = []
    for attempt in range(1, MAX_ATTEMPTS + 1):
        try:
            text = client.complete(request)
        except UnrecordedPromptError:
            raise
        except (TransportError, OSError) as exc:
            transcript.add(phase, attempt, request, None, str(exc))
            errors.append(str(exc))
            continue
        transcript.add(phase, attempt, request, text)
        if text and text.strip():
            return text.strip()
        errors.append("empty response")
    raise PipelineAbort(phase, errors, transcript.exchanges)


def _messages(templates: PromptTemplates, user: str, image: Attachment | None = None) -> tuple[ChatMessage, ...]:
    return (ChatMessage("system", templates.system), ChatMessage("user", user, image))


def describe_ood(client, snapshot: SceneDocument, templates: PromptTemplates | None = None,
                 transcript: Transcript | None = None, model: str = "", attach_image: bool = True) -> str:
    templates = templates or PromptTemplates()
    transcript = transcript if transcript is not None else Transcript()
    image = None
    if attach_image and snapshot.shapes:
        image = Attachment("image/png", snapshot.to_png(), hashlib.sha256(snapshot.svg.encode()).hexdigest())
    prompt = fill(templates.p_ood, snapshot=snapshot.text.strip())
    return _ask(client, ChatRequest(_messages(templates, prompt, image), model=model), "ood_description", transcript)


def reason_behavior(client, d_ood: str, d_task: str, templates: PromptTemplates | None = None,
                    transcript: Transcript | None = None, model: str = "") -> str:
    if not d_ood or not d_ood.strip():
        raise ValueError("OOD description is empty")
    if not d_task or not d_task.strip():
        raise ValueError("task description is empty")
    templates = templates or PromptTemplates()
    transcript = transcript if transcript is not None else Transcript()
    prompt = fill(templates.p_br, task=d_task.strip(), ood=d_ood.strip())
    return _ask(client, ChatRequest(_messages(templates, prompt), model=model), "behavior_reasoning", transcript)


def parse_generated(text: str, spec: EnvSpec) -> tuple[dsl.Program, dsl.Program]:
    """Extract, parse and validate both programs; raises ``dsl.DslError`` listing every problem."""
    blocks = extract_code_blocks(text)
    problems = []
    programs = {}
    for kind in (dsl.REWARD, dsl.EVAL):
        if kind not in blocks:
            problems.append(f"missing {kind} block: expected a fenced code block tagged {kind}")
            continue
        try:
            prog = dsl.parse(blocks[kind], kind)
            dsl.validate(prog, spec.reward_view_schema, spec.action_schema)
            programs[kind] = prog
        except dsl.DslValidationError as exc:
            problems += [f"{kind} program: {p}" for p in exc.problems]
        except dsl.DslSyntaxError as exc:
            problems.append(f"{kind} program: syntax error at {exc}")
    if problems:
        raise dsl.DslValidationError(problems)
    return programs[dsl.REWARD], programs[dsl.EVAL]


def generate_code(client, d_recovery: str, d_env: str, spec: EnvSpec, templates: PromptTemplates | None = None,
                  fewshot: str | None = None, transcript: Transcript | None = None,
                  model: str = "") -> tuple[dsl.Program, dsl.Program, str]:
    """Returns ``(reward_program, eval_program, raw_response)``; re-prompts with the problems on failure."""
    if not d_recovery or not d_recovery.strip():
        raise ValueError("recovery description is empty")
    templates = templates or PromptTemplates()
    transcript = transcript if transcript is not None else Transcript()
    few = fill(templates.fewshot_header) + fewshot.strip() + "\n\n" if fewshot else ""
    prompt = fill(templates.p_cg, recovery=d_recovery.strip(), env=d_env.strip(),
                  grammar=GRAMMAR_REFERENCE, fewshot=few)
    messages = list(_messages(templates, prompt))
    errors = []
    for attempt in range(1, MAX_ATTEMPTS + 1):
        text = _ask(client, ChatRequest(tuple(messages), model=model), "code_generation", transcript)
        try:
            reward, evaluation = parse_generated(text, spec)
            return reward, evaluation, text
        except dsl.DslValidationError as exc:
            errors.append(str(exc))
            log.info("code generation attempt %d rejected: %s", attempt, exc)
            feedback = fill(templates.retry, errors="\n".join(f"- {p}" for p in exc.problems))
            messages += [ChatMessage("assistant", text), ChatMessage("user", feedback)]
    raise PipelineAbort("code_generation", errors, transcript.exchanges)


# ----------------------------------------------------------------------------
# Full run

ARTIFACT_FILES = ("d_ood.txt", "d_recovery.txt", "d_env.txt", "reward.dsl", "eval.dsl", "transcript.jsonl")


@dataclass
class PipelineArtifacts:
    d_ood: str
    d_recovery: str
    d_env: str
    raw_code_response: str
    reward_program: dsl.Program
    eval_program: dsl.Program
    transcript: list[dict]

    def digests(self) -> dict[str, str]:
        return {"reward": self.reward_program.digest(), "eval": self.eval_program.digest()}


def run_pipeline(client, spec: EnvSpec, snapshot: SceneDocument, run_dir, templates: PromptTemplates | None = None,
                 fewshot: str | None = None, model: str = "", attach_image: bool = True) -> PipelineArtifacts:
    """Run the three phases in order, writing each artifact to ``run_dir`` as soon as it exists."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    templates = templates or PromptTemplates()
    transcript = Transcript(sink=run_dir / "transcript.jsonl")
    transcript.write(transcript.sink)

    d_env = build_env_description(spec)
    (run_dir / "d_env.txt").write_text(d_env)
    try:
        d_ood = describe_ood(client, snapshot, templates, transcript, model, attach_image)
        (run_dir / "d_ood.txt").write_text(d_ood + "\n")
        d_recovery = reason_behavior(client, d_ood, spec.task_description, templates, transcript, model)
        (run_dir / "d_recovery.txt").write_text(d_recovery + "\n")
        reward, evaluation, raw = generate_code(client, d_recovery, d_env, spec, templates, fewshot, transcript, model)
    except PipelineAbort as exc:
        (run_dir / "errors.txt").write_text(f"phase: {exc.phase}\n" + "\n".join(exc.errors) + "\n")
        raise
    (run_dir / "code_response.txt").write_text(raw + "\n")
    (run_dir / "reward.dsl").write_text(dsl.dump_program_file(reward))
    (run_dir / "eval.dsl").write_text(dsl.dump_program_file(evaluation))
    return PipelineArtifacts(d_ood, d_recovery, d_env, raw, reward, evaluation, list(transcript.exchanges))


def load_programs(run_dir, spec: EnvSpec) -> tuple[dsl.Program, dsl.Program]:
    """Read ``reward.dsl``/``eval.dsl`` from a run directory and validate them against ``spec``."""
    run_dir = Path(run_dir)
    reward = dsl.parse_program_file((run_dir / "reward.dsl").read_text(), dsl.REWARD)
    evaluation = dsl.parse_program_file((run_dir / "eval.dsl").read_text(), dsl.EVAL)
    dsl.validate(reward, spec.reward_view_schema, spec.action_schema)
    dsl.validate(evaluation, spec.reward_view_schema, spec.action_schema)
    return reward, evaluation
