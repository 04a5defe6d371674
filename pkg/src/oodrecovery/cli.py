"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error,
3 pipeline abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__, dsl, fixtures
from .config import FIELD_NAMES, ConfigError, RunConfig, load_config_file, resolve, show_defaults
from .core import validate_against_schema
from .envs import OOD, ORIGINAL, UnknownEnvironmentError, make_env
from .net import load_policy, save_policy
from .pipeline import (
    ENV_API_KEY,
    LiveClient,
    PipelineAbort,
    PipelineError,
    RecordedClient,
    RecordingClient,
    load_programs,
    run_pipeline,
)
from .retrain import (
    CurvePoint,
    GeneratedPrograms,
    evaluate_policy,
    read_curve_csv,
    retrain_loop,
    train_original,
    write_curve_csv,
    write_manifest,
)

log = logging.getLogger("oodrecovery")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_ABORT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_run_options(p: argparse.ArgumentParser, *names: str) -> None:
    """Config-backed flags; defaults are None so unset flags fall through to file/defaults."""
    spec = {
        "env": (str, "environment name"),
        "seed": (int, "root seed"),
        "total_steps": (int, "environment steps"),
        "eval_interval": (int, "steps between curve points"),
        "eval_episodes": (int, "episodes per curve point"),
        "batch_size": (int, "minibatch size"),
        "buffer_size": (int, "replay capacity"),
        "lam": (float, "generated-reward scale (0 gives the zero-reward baseline)"),
        "gamma": (float, "discount"),
        "hidden": (int, "width of both hidden layers"),
        "grad_steps_per_env_step": (int, "gradient steps per environment step"),
        "learning_starts": (int, "buffer size before updates start"),
        "random_steps": (int, "uniform-random warmup steps"),
        "checkpoint_interval": (int, "steps between policy checkpoints"),
        "backend": (str, "language model backend: live or recorded"),
        "endpoint": (str, "chat-completions base URL (live backend)"),
        "model": (str, "model name (live backend)"),
        "transcript": (str, "recorded responses file (recorded backend)"),
        "fewshot": (str, "file with a few-shot reward program example"),
        "out": (str, "output directory"),
    }
    for name in names:
        typ, help_ = spec[name]
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None, help=help_)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="oodrecovery", description="Recover RL agents from out-of-distribution states.")
    parser.add_argument("--config", help="JSON config file; flags override it")
    parser.add_argument("--log-level", default="WARNING")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train-original", help="train plain SAC on the original task")
    _add_run_options(p, "env", "seed", "total_steps", "eval_interval", "eval_episodes", "batch_size",
                     "buffer_size", "gamma", "hidden", "random_steps", "checkpoint_interval", "out")
    p.add_argument("--seeds", type=int, default=1, help="train this many seeds and mark the best")

    p = sub.add_parser("capture-ood", help="write the OOD snapshot of an environment")
    _add_run_options(p, "env", "seed", "out")
    p.add_argument("--noise", type=float, default=0.0, help="reset jitter in [0, 0.05]")

    p = sub.add_parser("generate", help="run the language-model pipeline on a snapshot")
    _add_run_options(p, "env", "backend", "endpoint", "model", "transcript", "fewshot", "out")
    p.add_argument("--snapshot", required=True, help="directory written by capture-ood")
    p.add_argument("--record", help="also save responses keyed by request digest to this file")
    p.add_argument("--attach-image", action="store_true", help="send the rendered snapshot to a vision model")

    p = sub.add_parser("retrain", help="retrain a policy from OOD resets with generated programs")
    _add_run_options(p, "env", "seed", "total_steps", "eval_interval", "eval_episodes", "batch_size",
                     "buffer_size", "lam", "gamma", "hidden", "grad_steps_per_env_step", "learning_starts",
                     "checkpoint_interval", "out")
    p.add_argument("--checkpoint", required=True, help="original policy checkpoint")
    p.add_argument("--artifacts", required=True, help="run directory holding reward.dsl and eval.dsl")

    p = sub.add_parser("evaluate", help="evaluate a policy checkpoint")
    _add_run_options(p, "env", "seed", "out")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=(ORIGINAL, OOD), default=OOD)
    p.add_argument("-n", "--episodes", type=int, default=100)
    p.add_argument("--artifacts", help="use this run's eval program for recovery flags")
    p.add_argument("--report", help="write the JSON report here (default: <out>/report.json)")

    p = sub.add_parser("export-curve", help="export a run's learning curve")
    p.add_argument("--run", required=True, help="run directory with curve.jsonl or curve.csv")
    p.add_argument("--output", "-o", help="destination file (default: stdout)")
    p.add_argument("--delimiter", default=",", help="column delimiter")

    p = sub.add_parser("config", help="configuration helpers")
    csub = p.add_subparsers(dest="config_command", parser_class=_Parser)
    csub.add_parser("show-defaults", help="print the default configuration")
    return parser


def _config(args) -> RunConfig:
    file_values = load_config_file(args.config) if args.config else {}
    overrides = {k: getattr(args, k) for k in FIELD_NAMES if hasattr(args, k)}
    return resolve(file_values, overrides)


def _progress(point: CurvePoint) -> None:
    log.info("step %d mean_return %.3f recovery %.2f", point.step, point.mean_return, point.recovery_fraction)


def _write_curve(run_dir: Path, curve: list[CurvePoint]) -> None:
    write_curve_csv(curve, run_dir / "curve.csv")
    with open(run_dir / "curve.jsonl", "w") as fh:
        for p in curve:
            fh.write(json.dumps({"step": p.step, "mean_return": p.mean_return, "std_return": p.std_return,
                                 "recovery_fraction": p.recovery_fraction, "returns": p.returns}) + "\n")


def cmd_train_original(cfg: RunConfig, seeds: int) -> int:
    if seeds < 1:
        raise UsageError("--seeds must be >= 1")
    env = make_env(cfg.env)
    out = Path(cfg.out)
    results = []
    for k in range(seeds):
        seed = cfg.seed + k
        run_dir = out / f"seed_{seed}" if seeds > 1 else out
        run_dir.mkdir(parents=True, exist_ok=True)
        tcfg = cfg.train_config(seed)
        res = train_original(env, tcfg, run_dir, _progress)
        meta = {"env": env.name, "seed": seed}
        save_policy(run_dir / "policy.json", res.best, dict(meta, step=res.best_step))
        save_policy(run_dir / "policy_final.json", res.sac.policy, dict(meta, step=cfg.total_steps))
        _write_curve(run_dir, res.curve)
        write_manifest(run_dir, {"command": "train-original", "config": cfg.to_dict(), "seed": seed})
        top = max(p.mean_return for p in res.curve)
        results.append((top, seed, run_dir))
        print(f"seed {seed}: best mean return {top:.3f} at step {res.best_step} -> {run_dir / 'policy.json'}")
    if seeds > 1:
        best = max(results, key=lambda r: (r[0], -r[1]))
        (out / "best.txt").write_text(f"{best[2].name}\n")
        link = out / "best"
        if link.is_symlink() or link.exists():
            link.unlink()
        try:
            link.symlink_to(best[2].name)
        except OSError:
            pass
        print(f"best: {best[2].name} (mean return {best[0]:.3f})")
    return EXIT_OK


def cmd_capture_ood(cfg: RunConfig, noise: float) -> int:
    env = make_env(cfg.env)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    es = env.reset(OOD, cfg.seed, noise=noise)
    doc = env.render_snapshot(es.state)
    (out / "snapshot.txt").write_text(doc.text)
    (out / "snapshot.svg").write_text(doc.svg)
    (out / "snapshot.png").write_bytes(doc.to_png())
    state = {"env": env.name, "fields": list(env.spec.state_schema.names),
             "values": [float(v) for v in es.state.values], "seed": cfg.seed, "noise": noise}
    (out / "state.json").write_text(json.dumps(state, indent=2) + "\n")
    print(f"OOD snapshot of {env.name} written to {out}")
    return EXIT_OK


def _load_snapshot(env, path: Path):
    state = json.loads((path / "state.json").read_text())
    if state.get("env") != env.name:
        raise UsageError(f"snapshot was captured for {state.get('env')!r}, not {env.name!r}")
    sv = validate_against_schema(state["values"], env.spec.state_schema)
    return env.render_snapshot(sv)


def _client(cfg: RunConfig, attach_image: bool = False):
    if cfg.backend == "live":
        return LiveClient(cfg.endpoint, cfg.model, attach_images=attach_image)
    if cfg.transcript:
        return RecordedClient.from_file(cfg.transcript)
    return fixtures.recorded_client(cfg.env)


def cmd_generate(cfg: RunConfig, snapshot_dir: str, record: str | None, attach_image: bool) -> int:
    env = make_env(cfg.env)
    snapshot = _load_snapshot(env, Path(snapshot_dir))
    client = _client(cfg, attach_image)
    if record:
        client = RecordingClient(client)
    fewshot = Path(cfg.fewshot).read_text() if cfg.fewshot else None
    try:
        arts = run_pipeline(client, env.spec, snapshot, cfg.out, fewshot=fewshot)
    finally:
        if record:
            client.save(record, note=f"{env.name}: recorded responses keyed by canonical request digest")
    for kind, digest in arts.digests().items():
        print(f"{kind}: {digest}")
    return EXIT_OK


def cmd_retrain(cfg: RunConfig, checkpoint: str, artifacts: str) -> int:
    env = make_env(cfg.env)
    policy, _ = load_policy(checkpoint, env.state_dim, env.action_dim)
    reward, evaluation = load_programs(artifacts, env.spec)
    programs = GeneratedPrograms(env, reward, evaluation)
    rcfg = cfg.retrain_config()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    res = retrain_loop(env, policy, programs, rcfg, out, _progress)
    save_policy(out / "policy.json", res.sac.policy, {"env": env.name, "seed": cfg.seed, "step": cfg.total_steps})
    _write_curve(out, res.curve)
    write_manifest(out, {
        "command": "retrain", "config": cfg.to_dict(), "lam": rcfg.lam, "seed": cfg.seed,
        "programs": {"reward": reward.digest(), "eval": evaluation.digest()},
        "inputs": {"checkpoint": str(checkpoint), "artifacts": str(artifacts)},
    })
    last = res.curve[-1]
    print(f"final: mean return {last.mean_return:.3f}, recovery fraction {last.recovery_fraction:.2f}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, checkpoint: str, mode: str, n: int, artifacts: str | None,
                 report: str | None) -> int:
    if n < 0:
        raise UsageError("-n must be >= 0")
    env = make_env(cfg.env)
    policy, _ = load_policy(checkpoint, env.state_dim, env.action_dim)
    programs = None
    if artifacts:
        programs = GeneratedPrograms(env, *load_programs(artifacts, env.spec))
    rep = evaluate_policy(env, policy, n, mode, cfg.seed, programs)
    doc = rep.to_dict()
    path = Path(report) if report else Path(cfg.out) / "report.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n")
    print(f"episodes {len(rep.episodes)}  mean return {rep.mean_return:.3f} +- {rep.std_return:.3f}  "
          f"recovery {rep.recovery_fraction:.2f}  success {rep.success_rate:.2f}")
    return EXIT_OK


def cmd_export_curve(run: str, output: str | None, delimiter: str) -> int:
    run_dir = Path(run)
    if (run_dir / "curve.jsonl").exists():
        points = [json.loads(line) for line in (run_dir / "curve.jsonl").read_text().splitlines() if line]
        rows = [(p["step"], p["mean_return"], p["std_return"], p["recovery_fraction"]) for p in points]
    elif (run_dir / "curve.csv").exists():
        rows = [(p.step, p.mean_return, p.std_return, p.recovery_fraction) for p in read_curve_csv(run_dir / "curve.csv")]
    else:
        raise FileNotFoundError(f"no curve.jsonl or curve.csv in {run_dir}")
    lines = [delimiter.join(("step", "mean_return", "std_return", "recovery_fraction"))]
    lines += [delimiter.join([str(r[0])] + [repr(float(v)) for v in r[1:]]) for r in rows]
    text = "\n".join(lines) + "\n"
    if output:
        Path(output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        raise UsageError("a command is required; see --help")
    if args.command == "config":
        if args.config_command != "show-defaults":
            raise UsageError("config: expected 'show-defaults'")
        sys.stdout.write(show_defaults())
        return EXIT_OK
    if args.command == "export-curve":
        return cmd_export_curve(args.run, args.output, args.delimiter)
    cfg = _config(args)
    if args.command == "train-original":
        return cmd_train_original(cfg, args.seeds)
    if args.command == "capture-ood":
        return cmd_capture_ood(cfg, args.noise)
    if args.command == "generate":
        return cmd_generate(cfg, args.snapshot, args.record, args.attach_image)
    if args.command == "retrain":
        return cmd_retrain(cfg, args.checkpoint, args.artifacts)
    if args.command == "evaluate":
        return cmd_evaluate(cfg, args.checkpoint, args.mode, args.episodes, args.artifacts, args.report)
    raise UsageError(f"unknown command {args.command!r}")


def _redact(text: str) -> str:
    key = os.environ.get(ENV_API_KEY)
    return text.replace(key, "[REDACTED]") if key else text


def main(argv=None) -> int:
    try:
        return run(argv)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (UsageError, ConfigError, UnknownEnvironmentError) as exc:
        print(f"error: {_redact(str(exc))}", file=sys.stderr)
        return EXIT_USAGE
    except PipelineAbort as exc:
        print(f"pipeline aborted: {_redact(str(exc))}", file=sys.stderr)
        return EXIT_ABORT
    except (PipelineError, dsl.DslError, OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {_redact(str(exc))}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
