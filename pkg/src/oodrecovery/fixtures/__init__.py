"""Frozen model responses for the bundled environments.

``<env>.replies.json`` holds the three phase replies; ``<env>.recorded.json``
holds them keyed by request digest, as consumed by ``RecordedClient``.
``record`` regenerates the latter after a template change.
"""

from __future__ import annotations

import json
import tempfile
from importlib import resources
from pathlib import Path

PHASES = ("ood_description", "behavior_reasoning", "code_generation")


def _path(name: str) -> Path:
    return Path(str(resources.files(__package__).joinpath(name)))


def available() -> tuple[str, ...]:
    return tuple(sorted(p.name.split(".")[0] for p in _path(".").glob("*.replies.json")))


def replies(env_name: str) -> dict[str, str]:
    path = _path(f"{env_name}.replies.json")
    if not path.exists():
        raise FileNotFoundError(f"no fixture replies for environment {env_name!r}; have {', '.join(available())}")
    return json.loads(path.read_text())


def recorded_path(env_name: str) -> Path:
    return _path(f"{env_name}.recorded.json")


def recorded_client(env_name: str):
    from ..pipeline import RecordedClient

    return RecordedClient.from_file(recorded_path(env_name))


def record(env_name: str, out: Path | None = None) -> Path:
    """Replay the canned replies through the pipeline and store them under the request digests."""
    from ..envs import OOD, make_env
    from ..pipeline import RecordingClient, ScriptedClient, run_pipeline

    env = make_env(env_name)
    canned = replies(env_name)
    client = RecordingClient(ScriptedClient([canned[p] for p in PHASES]))
    snapshot = env.render_snapshot(env.reset(OOD, 0, noise=0.0).state)
    with tempfile.TemporaryDirectory() as tmp:
        run_pipeline(client, env.spec, snapshot, tmp)
    out = out or recorded_path(env_name)
    client.save(out, note=f"{env_name}: recorded responses keyed by canonical request digest")
    return out

