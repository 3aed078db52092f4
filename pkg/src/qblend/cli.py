"""End-to-end workflow driver.

Subcommands mirror the pipeline stages: ``collect`` rolls out a scripted
behavior policy and writes a trajectory file, ``train`` fits the critic on
it, ``run``/``eval`` play the agent with and without rescoring, ``report``
renders tables and figures, and ``pipeline`` chains all of the above.

Every option can also be supplied through a JSON config file (--config);
explicit flags override file values. Outputs contain no timestamps - wall
times go to a sidecar file - so identical config+seed reruns are
byte-identical (the training log's wall_ms field is the documented
exception).

Exit codes: 0 ok, 2 config error, 3 I/O, 4 transport, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

from .agent import EpisodeRecord, RescoreConfig, audit_lines, compute_metrics, run_episode
from .critic import CriticParams, IqlConfig, action_values, load_critic, save_critic, train_iql
from .errors import ConfigError, DataFormatError, NumericError, TransportError
from .experience import ExperienceMemory, load_memory, save_memory
from .policy import MockPolicy, RemotePolicy
from .report import render_report
from .seeding import child_seed
from .textlab import behavior_rollout, LabEnv, load_spec, scripted_policy_table

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_TRANSPORT = 4
EXIT_NUMERIC = 5

_MODES = ("policy_only", "rescored", "critic_only")


def _canonical(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _config_hash(resolved: dict) -> str:
    # out/config are paths and jobs is an execution detail; none affect results.
    # Input paths are reduced to their basenames so the hash tracks what was
    # used, not where a particular run happened to put it.
    doc = {}
    for key, value in sorted(resolved.items()):
        if key in ("out", "config", "jobs"):
            continue
        if key in ("critic", "traj", "env") and value is not None:
            value = Path(str(value)).name
        doc[key] = value
    return hashlib.sha256(_canonical(doc).encode("utf-8")).hexdigest()[:12]


class _Options:
    """Layered option lookup: CLI flag, then config file, then default."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.file_cfg: dict = {}
        self.resolved: dict = {"command": args.command}
        config_path = getattr(args, "config", None)
        if config_path:
            try:
                with open(config_path, "r", encoding="utf-8") as fh:
                    self.file_cfg = json.load(fh)
            except OSError as exc:
                raise ConfigError(f"cannot read config file {config_path!r}: {exc}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {config_path!r} is not valid JSON: {exc.msg}") from exc
            if not isinstance(self.file_cfg, dict):
                raise ConfigError("config file must hold a JSON object")

    def get(self, name: str, default):
        value = getattr(self.args, name, None)
        if value is None:
            value = self.file_cfg.get(name, default)
        self.resolved[name] = value
        return value

    def finish(self, out_dir: Path) -> str:
        unknown = set(self.file_cfg) - set(self.resolved)
        if unknown and not getattr(self.args, "pipeline_stage", False):
            raise ConfigError(f"config file keys not used by this command: {sorted(unknown)}")
        cfg_hash = _config_hash(self.resolved)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / f"config_{self.args.command}.json", "w", encoding="utf-8") as fh:
            fh.write(_canonical({**self.resolved, "config_hash": cfg_hash}) + "\n")
        return cfg_hash


def _write_timing(out_dir: Path, command: str, wall_s: float) -> None:
    with open(out_dir / f"timing_{command}.json", "w", encoding="utf-8") as fh:
        fh.write(_canonical({"command": command, "wall_s": wall_s}) + "\n")


def _rescore_config(opts: _Options) -> RescoreConfig:
    cfg = RescoreConfig(
        b=float(opts.get("b", 0.6)),
        d=float(opts.get("d", 0.97)),
        k=int(opts.get("k", 5)),
        static_alpha=opts.get("static_alpha", None),
        window=int(opts.get("window", 10)),
        temperature=float(opts.get("temperature", 1.0)),
        top_p=float(opts.get("top_p", 0.95)),
    )
    if cfg.static_alpha is not None:
        cfg = replace(cfg, static_alpha=float(cfg.static_alpha))
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _build_policies(spec, policy_arg: str, error_rate: float) -> dict:
    """One policy per task id (mock tables are task-specific)."""
    if policy_arg == "mock":
        return {
            task.id: MockPolicy(scripted_policy_table(spec, task.id), error_rate)
            for task in spec.tasks
        }
    if policy_arg.startswith(("http://", "https://")):
        remote = RemotePolicy(policy_arg)
        return {task.id: remote for task in spec.tasks}
    raise ConfigError(f"--policy must be 'mock' or an http(s) URL, got {policy_arg!r}")


def _load_critic_checked(critic_path) -> CriticParams | None:
    if not critic_path:
        return None
    if not Path(critic_path).exists():
        raise ConfigError(f"critic checkpoint {critic_path} does not exist")
    return load_critic(critic_path)


class CriticScorer:
    """Adapter giving the agent loop batched critic values for candidates."""

    def __init__(self, params: CriticParams):
        self.params = params

    def action_values(self, task, state, actions):
        return action_values(self.params, task, state, actions)


def _run_episodes(spec, policies: dict, critic_params: CriticParams | None,
                  cfg: RescoreConfig, episodes: int, seed: int, max_steps: int,
                  jobs: int = 1) -> list[EpisodeRecord]:
    scorer = CriticScorer(critic_params) if critic_params is not None else None

    def one(i: int) -> EpisodeRecord:
        task = spec.tasks[i % len(spec.tasks)]
        env = LabEnv(spec, task.id)
        return run_episode(env, policies[task.id], scorer, cfg,
                           seed=child_seed(seed, "episode", i), max_steps=max_steps)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, range(episodes)))
    return [one(i) for i in range(episodes)]


def _write_audits(records: list[EpisodeRecord], directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    summary_lines = []
    for i, record in enumerate(records):
        path = directory / f"ep_{i:04d}.jsonl"
        path.write_text("".join(line + "\n" for line in audit_lines(record)), encoding="utf-8")
        summary_lines.append(_canonical({
            "episode": i,
            "task": record.task.id,
            "seed": record.seed,
            "final_score": record.final_score,
            "success": record.success,
            "steps": record.step_count,
        }))
    (directory / "episodes.jsonl").write_text(
        "".join(line + "\n" for line in summary_lines), encoding="utf-8")


def cmd_collect(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    opts = _Options(args)
    env = opts.get("env", "lab3")
    episodes = int(opts.get("episodes", 500))
    behavior = opts.get("behavior", "epsilon_greedy")
    epsilon = float(opts.get("epsilon", 0.3))
    seed = int(opts.get("seed", 0))
    out_dir = Path(opts.get("out", "out"))
    opts.finish(out_dir)

    spec = load_spec(env)
    trajectories = behavior_rollout(spec, behavior, episodes, seed, epsilon=epsilon)
    memory = ExperienceMemory().extend(trajectories)
    path = out_dir / "trajectories.jsonl"
    save_memory(memory, path)
    successes = sum(t.success for t in trajectories)
    _write_timing(out_dir, "collect", time.perf_counter() - started)
    print(f"collect: wrote {len(trajectories)} trajectories to {path} "
          f"(SR {100.0 * successes / len(trajectories):.1f}%)")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    opts = _Options(args)
    out_dir = Path(opts.get("out", "out"))
    traj = Path(opts.get("traj", None) or out_dir / "trajectories.jsonl")
    reward_mode = opts.get("reward_mode", "delta")
    cfg = IqlConfig(
        tau=float(opts.get("tau", 0.9)),
        gamma=float(opts.get("gamma", 0.9)),
        epochs=int(opts.get("epochs", 20)),
        batch_size=int(opts.get("batch_size", 128)),
        target_update_coefficient=float(opts.get("rho", 0.995)),
        twin_q=bool(opts.get("twin_q", False)),
        seed=int(opts.get("seed", 0)),
        lr=float(opts.get("lr", 3e-4)),
        vocab_size=int(opts.get("vocab_size", 8192)),
        embed_dim=int(opts.get("embed_dim", 64)),
        hidden_dim=int(opts.get("hidden_dim", 128)),
        encoder_layout=opts.get("layout", "three"),
    )
    opts.finish(out_dir)

    if not traj.exists():
        raise ConfigError(f"trajectory file {traj} does not exist")
    memory = load_memory(traj, reward_mode=reward_mode)
    params, log = train_iql(memory, cfg)
    q_path = out_dir / "critic_q.ckpt"
    v_path = out_dir / "critic_v.ckpt"
    save_critic(q_path, v_path, params)
    log_path = out_dir / "train_log.jsonl"
    with open(log_path, "w", encoding="utf-8") as fh:
        for entry in log:
            fh.write(_canonical({
                "epoch": entry.epoch,
                "mean_loss_v": entry.mean_loss_v,
                "mean_loss_q": entry.mean_loss_q,
                "wall_ms": entry.wall_ms,
            }) + "\n")
    _write_timing(out_dir, "train", time.perf_counter() - started)
    print(f"train: {cfg.epochs} epochs on {len(memory.step_view)} steps -> {q_path} "
          f"(final loss_v {log[-1].mean_loss_v:.5f}, loss_q {log[-1].mean_loss_q:.5f})")
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    opts = _Options(args)
    env = opts.get("env", "lab3")
    policy_arg = opts.get("policy", "mock")
    critic_path = opts.get("critic", None)
    episodes = int(opts.get("episodes", 10))
    seed = int(opts.get("seed", 0))
    error_rate = float(opts.get("error_rate", 0.0))
    max_steps = int(opts.get("max_steps", 100))
    jobs = int(opts.get("jobs", 1))
    cfg = _rescore_config(opts)
    out_dir = Path(opts.get("out", "out"))
    opts.finish(out_dir)

    spec = load_spec(env)
    policies = _build_policies(spec, policy_arg, error_rate)
    critic_params = _load_critic_checked(critic_path)
    records = _run_episodes(spec, policies, critic_params, cfg, episodes, seed, max_steps, jobs)
    _write_audits(records, out_dir / "episodes")
    metrics = compute_metrics(records)
    _write_timing(out_dir, "run", time.perf_counter() - started)
    print(f"run: {episodes} episodes -> AS {metrics['AS']:.2f}, SR {metrics['SR']:.2f}%")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    opts = _Options(args)
    env = opts.get("env", "lab3")
    policy_arg = opts.get("policy", "mock")
    critic_path = opts.get("critic", None)
    episodes = int(opts.get("episodes", 200))
    seed = int(opts.get("seed", 0))
    error_rate = float(opts.get("error_rate", 0.0))
    max_steps = int(opts.get("max_steps", 100))
    jobs = int(opts.get("jobs", 1))
    modes = [m.strip() for m in str(opts.get("modes", "policy_only,rescored")).split(",") if m.strip()]
    cfg = _rescore_config(opts)
    out_dir = Path(opts.get("out", "out"))
    cfg_hash = opts.finish(out_dir)

    for mode in modes:
        if mode not in _MODES:
            raise ConfigError(f"unknown eval mode {mode!r}; choose from {_MODES}")
    needs_critic = any(m != "policy_only" for m in modes)
    if needs_critic and not critic_path:
        raise ConfigError("--critic is required for rescored/critic_only evaluation")

    spec = load_spec(env)
    policies = _build_policies(spec, policy_arg, error_rate)
    critic_params = _load_critic_checked(critic_path)

    mode_rows = []
    for mode in modes:
        if mode == "policy_only":
            mode_critic, mode_cfg = None, cfg
        elif mode == "rescored":
            mode_critic, mode_cfg = critic_params, cfg
        else:  # critic_only: alpha drops to 0 after the first step
            mode_critic, mode_cfg = critic_params, replace(cfg, b=0.0, d=0.0, static_alpha=None)
        records = _run_episodes(spec, policies, mode_critic, mode_cfg,
                                episodes, seed, max_steps, jobs)
        _write_audits(records, out_dir / "eval" / mode)
        metrics = compute_metrics(records)
        mode_rows.append({
            "mode": mode,
            "n_episodes": len(records),
            "AS": metrics["AS"],
            "SR": metrics["SR"],
            "mean_steps": float(sum(r.step_count for r in records)) / len(records),
        })

    report_doc = {
        "config_hash": cfg_hash,
        "env": spec.name,
        "episodes": episodes,
        "seed": seed,
        "modes": mode_rows,
    }
    with open(out_dir / "eval_report.json", "w", encoding="utf-8") as fh:
        fh.write(_canonical(report_doc) + "\n")
    _write_timing(out_dir, "eval", time.perf_counter() - started)
    summary = "; ".join(f"{m['mode']}: AS {m['AS']:.2f} SR {m['SR']:.2f}%" for m in mode_rows)
    print(f"eval: {episodes} episodes per mode -> {summary}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    opts = _Options(args)
    out_dir = Path(opts.get("out", "out"))
    opts.finish(out_dir)
    written = render_report(out_dir)
    _write_timing(out_dir, "report", time.perf_counter() - started)
    print("report: wrote " + ", ".join(str(p) for p in written))
    return EXIT_OK


def cmd_pipeline(args: argparse.Namespace) -> int:
    """collect -> train -> eval -> report with one shared seed and out dir."""
    given = vars(args)
    out_dir = Path(_Options(args).get("out", "out"))

    def stage(command, func, names, **extra):
        ns = argparse.Namespace(command=command, pipeline_stage=True, **extra)
        for name in ("config", "seed", "out", *names):
            setattr(ns, name, given.get(name))
        return func(ns)

    code = stage("collect", cmd_collect, ("env", "behavior", "epsilon", "episodes"))
    if code == EXIT_OK:
        code = stage("train", cmd_train,
                     ("traj", "tau", "gamma", "rho", "epochs", "batch_size", "lr", "twin_q",
                      "vocab_size", "embed_dim", "hidden_dim", "layout", "reward_mode"))
    if code == EXIT_OK:
        code = stage("eval", cmd_eval,
                     ("env", "policy", "error_rate", "jobs", "modes", "b", "d", "k",
                      "static_alpha", "window", "max_steps", "temperature", "top_p"),
                     critic=str(out_dir / "critic_q.ckpt"),
                     episodes=given.get("eval_episodes"))
    if code == EXIT_OK:
        code = stage("report", cmd_report, ())
    return code


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file; flags override file values")
    parser.add_argument("--seed", type=int, help="root random seed (default 0)")
    parser.add_argument("--out", help="output directory (default ./out)")


def _add_env(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--env", help="environment spec path or builtin name (default lab3)")


def _add_rescore(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--b", type=float, help="alpha lower bound in [0,1] (default 0.6)")
    parser.add_argument("--d", type=float, help="alpha decay per step in [0,1] (default 0.97)")
    parser.add_argument("--k", type=int, help="candidate count (default 5)")
    parser.add_argument("--static-alpha", dest="static_alpha", type=float,
                        help="force a constant alpha (including t=0)")
    parser.add_argument("--window", type=int, help="history window for contexts (default 10)")
    parser.add_argument("--max-steps", dest="max_steps", type=int,
                        help="episode step cap at the agent level (default 100)")
    parser.add_argument("--temperature", type=float, help="sampling temperature (default 1.0)")
    parser.add_argument("--top-p", dest="top_p", type=float, help="nucleus mass (default 0.95)")


def _add_policy(parser: argparse.ArgumentParser, include_critic: bool = True) -> None:
    parser.add_argument("--policy", help="'mock' or a remote policy base URL (default mock)")
    parser.add_argument("--error-rate", dest="error_rate", type=float,
                        help="mock flaw rate: promote a wrong action with this probability")
    if include_critic:
        parser.add_argument("--critic", help="path to a trained Q checkpoint")
        parser.add_argument("--episodes", type=int, help="number of episodes")
    parser.add_argument("--jobs", type=int, help="parallel episodes for eval (default 1)")


def _add_train(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--traj", help="trajectory file (default <out>/trajectories.jsonl)")
    parser.add_argument("--tau", type=float, help="expectile in (0.5,1) (default 0.9)")
    parser.add_argument("--gamma", type=float, help="discount in [0,1) (default 0.9)")
    parser.add_argument("--rho", type=float, help="target update coefficient (default 0.995)")
    parser.add_argument("--epochs", type=int, help="training epochs (default 20)")
    parser.add_argument("--batch-size", dest="batch_size", type=int, help="batch size (default 128)")
    parser.add_argument("--lr", type=float, help="optimizer learning rate (default 3e-4)")
    parser.add_argument("--twin-q", dest="twin_q", action=argparse.BooleanOptionalAction,
                        default=None, help="train a twin Q pair (min at inference)")
    parser.add_argument("--vocab-size", dest="vocab_size", type=int, help="hashed vocab (default 8192)")
    parser.add_argument("--embed-dim", dest="embed_dim", type=int, help="embedding size (default 64)")
    parser.add_argument("--hidden-dim", dest="hidden_dim", type=int, help="recurrent size (default 128)")
    parser.add_argument("--layout", choices=("three", "five"), help="encoder wiring (default three)")
    parser.add_argument("--reward-mode", dest="reward_mode", choices=("delta", "terminal"),
                        help="per-step reward derivation (default delta)")


def _add_collect(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--behavior", choices=("optimal", "epsilon_greedy", "uniform_random"),
                        help="data-collection policy (default epsilon_greedy)")
    parser.add_argument("--epsilon", type=float, help="exploration rate for epsilon_greedy (default 0.3)")
    parser.add_argument("--episodes", type=int, help="number of trajectories (default 500)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qblend",
        description="Train an offline-RL critic on agent experience and rescore a base policy's actions.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", help="roll out a scripted behavior policy into a trajectory file")
    _add_common(p); _add_env(p); _add_collect(p)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("train", help="train the critic on a trajectory file")
    _add_common(p); _add_train(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("run", help="play episodes and write per-step audits")
    _add_common(p); _add_env(p); _add_policy(p); _add_rescore(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="compare policy-only vs rescored agents side by side")
    _add_common(p); _add_env(p); _add_policy(p); _add_rescore(p)
    p.add_argument("--modes", help="comma list from policy_only,rescored,critic_only")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render tables and figures from run artifacts")
    _add_common(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pipeline", help="collect, train, eval, and report in one go")
    _add_common(p); _add_env(p); _add_collect(p); _add_train(p)
    _add_policy(p, include_critic=False); _add_rescore(p)
    p.add_argument("--eval-episodes", dest="eval_episodes", type=int,
                   help="episodes per mode in the eval stage (default 200)")
    p.add_argument("--modes", help="comma list from policy_only,rescored,critic_only")
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TransportError as exc:
        print(f"transport error: {exc} (url={exc.url}, attempts={exc.attempts})", file=sys.stderr)
        return EXIT_TRANSPORT
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
