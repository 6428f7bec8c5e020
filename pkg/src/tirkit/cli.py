"""Command-line entry point.

Subcommands mirror the workflows: rollout, evaluate, curate, diagnose,
verify, sandbox-serve.  Configuration comes from one declarative YAML file
plus overriding flags; every run writes a manifest echoing the fully
resolved configuration (credentials stay behind environment-variable
names).  Exit codes: 0 success, 1 usage or config error, 2 partial
failure with outputs preserved.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import yaml

from . import curation, diagnostics
from .policy import HttpPolicyClient, MockPolicy
from .records import dumps_canonical, read_jsonl, write_jsonl
from .rollout import (
    MODE_TEXT_ONLY,
    MODE_TIR,
    Problem,
    RolloutConfig,
    STOP_POLICY_ERROR,
    STOP_TOKEN_BUDGET,
    STOP_TOOL_BUDGET,
    Trajectory,
    TrajectoryInvariantError,
    deserialize_trajectory,
    run_batch,
    run_rollout,
)
from .sandbox import SandboxConfig, SandboxGateway, fake_worker_factory
from .server import SandboxServer
from .tokenizer import DEFAULT_TOKENIZER
from .verify import verify as verify_answer

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PARTIAL = 2

DEFAULT_CONFIG = {
    "seed": 0,
    "system_prompt": None,
    "policy": {
        "endpoint": None,
        "credential_env": "TIRKIT_POLICY_TOKEN",
        "mock_script": None,
        "timeout_s": 120.0,
    },
    "sandbox": {
        "worker": "fake",
        "pool_size": 4,
        "default_timeout_ms": 10_000,
        "output_cap_bytes": 8192,
        "worker_launch_command": "python3 -m tir_worker",
        "fake_table": None,
    },
    "rollout": {
        "max_tool_calls": 128,
        "max_tokens": 80_000,
        "tool_open_tag": "<code>",
        "tool_close_tag": "</code>",
        "answer_pattern": "\\boxed",
        "concurrency": 4,
        "n": 8,
        "modes": [MODE_TIR],
    },
    "evaluate": {
        "k": 8,
        "pass_k": [1, 4, 8],
        "estimator": "unbiased",
    },
    "curate": {
        "delta": curation.DEFAULT_TOOL_ADVANTAGE_DELTA,
        "text_fraction": curation.DEFAULT_TEXT_FRACTION,
        "max_tokens": curation.DEFAULT_OVERLONG_TOKENS,
        "jaccard_threshold": curation.DEFAULT_JACCARD_THRESHOLD,
        "difficulty_samples": curation.DEFAULT_DIFFICULTY_SAMPLES,
        "difficulty_max_correct": curation.DEFAULT_DIFFICULTY_MAX_CORRECT,
    },
}


def load_config(path: str | None) -> dict:
    """Defaults overlaid with the YAML config file, deep-merged."""
    resolved = _deep_copy(DEFAULT_CONFIG)
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise click.UsageError(f"config file {path} must be a mapping")
        _deep_merge(resolved, loaded)
    return resolved


@click.group()
def main() -> None:
    """Tool-integrated reasoning rollout and curation toolkit."""


@main.command("rollout")
@click.option("--problems", "problems_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--mock-script", type=click.Path(exists=True),
              help="JSON mapping problem id to scripted policy outputs.")
@click.option("--fake-table", type=click.Path(exists=True),
              help="JSON table for the in-process fake worker.")
@click.option("--endpoint", help="Policy endpoint URL (overrides config).")
@click.option("--n", "n_rollouts", type=int, help="Rollouts per problem and mode.")
@click.option("--mode", "modes", multiple=True,
              type=click.Choice([MODE_TIR, MODE_TEXT_ONLY]),
              help="Rollout mode(s); repeatable. Overrides config.")
@click.option("--manifest", "manifest_path", type=click.Path())
def cmd_rollout(problems_path, out_path, config_path, mock_script, fake_table,
                endpoint, n_rollouts, modes, manifest_path) -> None:
    """Run n rollouts per problem; resumable on an existing output file."""
    cfg = load_config(config_path)
    if mock_script:
        cfg["policy"]["mock_script"] = mock_script
    if fake_table:
        cfg["sandbox"]["fake_table"] = fake_table
    if endpoint:
        cfg["policy"]["endpoint"] = endpoint
    if n_rollouts:
        cfg["rollout"]["n"] = n_rollouts
    if modes:
        cfg["rollout"]["modes"] = list(modes)

    problems = _load_problems(problems_path)
    if not problems:
        raise click.UsageError(f"no problems in {problems_path}")
    script = _load_json(cfg["policy"]["mock_script"]) if cfg["policy"]["mock_script"] else None
    if script is None and not cfg["policy"]["endpoint"]:
        raise click.UsageError("either a mock script or a policy endpoint is required")

    rollout_cfg = _rollout_config(cfg)
    done = _completed_counts(out_path)

    jobs: list[tuple[Problem, object]] = []
    http_client = None
    if script is None:
        http_client = HttpPolicyClient(
            cfg["policy"]["endpoint"],
            credential_env=cfg["policy"]["credential_env"],
            timeout_s=float(cfg["policy"]["timeout_s"]),
        )
    for base in problems:
        for mode in cfg["rollout"]["modes"]:
            have = done.get((base.id, mode), 0)
            for index in range(have, int(cfg["rollout"]["n"])):
                problem = Problem(id=base.id, statement=base.statement,
                                  ground_truth=base.ground_truth,
                                  tools_enabled=(mode == MODE_TIR))
                if script is not None:
                    policy = MockPolicy(_script_outputs(script.get(base.id, []), index))
                else:
                    policy = http_client
                jobs.append((problem, policy))

    new_records = 0
    policy_errors = 0
    if jobs:
        with _gateway(cfg) as gateway:
            trajectories = run_batch(jobs, gateway, rollout_cfg,
                                     DEFAULT_TOKENIZER, cfg["system_prompt"])
        with open(out_path, "a", encoding="utf-8") as fh:
            for trajectory in trajectories:
                fh.write(dumps_canonical(trajectory.to_dict()) + "\n")
                new_records += 1
                if trajectory.stop_reason == STOP_POLICY_ERROR:
                    policy_errors += 1

    manifest = {
        "command": "rollout",
        "config": _public_config(cfg),
        "inputs": {"problems": str(problems_path)},
        "outputs": {"trajectories": str(out_path)},
        "counts": {"problems": len(problems), "new_records": new_records,
                   "policy_errors": policy_errors},
    }
    _write_manifest(manifest_path or f"{out_path}.manifest.json", manifest)
    click.echo(f"wrote {new_records} new trajectory records to {out_path}")
    if policy_errors:
        click.echo(f"{policy_errors} rollouts ended in policy_error", err=True)
        sys.exit(EXIT_PARTIAL)


@main.command("evaluate")
@click.option("--trajectories", "traj_path", required=True, type=click.Path(exists=True))
@click.option("--truths", "truths_path", required=True, type=click.Path(exists=True))
@click.option("--report", "report_path", required=True, type=click.Path())
@click.option("--per-problem", "per_problem_path", type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--k", type=int, help="k for avg@k.")
@click.option("--mode", type=click.Choice([MODE_TIR, MODE_TEXT_ONLY]),
              help="Restrict to one rollout mode.")
@click.option("--label", default=None, help="Checkpoint label stored in the report.")
def cmd_evaluate(traj_path, truths_path, report_path, per_problem_path,
                 config_path, k, mode, label) -> None:
    """Verify answers and aggregate a diagnostics report."""
    cfg = load_config(config_path)
    if k:
        cfg["evaluate"]["k"] = k

    truths = {}
    for record in read_jsonl(truths_path):
        answer = record.get("ground_truth", record.get("answer"))
        if record.get("id") is not None and answer is not None:
            truths[str(record["id"])] = str(answer)

    trajectories: list[Trajectory] = []
    errors: list[dict] = []
    for lineno, record in enumerate(read_jsonl(traj_path), 1):
        try:
            trajectory = deserialize_trajectory(record)
        except TrajectoryInvariantError as exc:
            errors.append({"line": lineno, "error": str(exc)})
            continue
        if mode and trajectory.mode != mode:
            continue
        trajectories.append(trajectory)
    if not trajectories:
        click.echo("no usable trajectory records", err=True)
        sys.exit(EXIT_USAGE)

    by_problem: dict[str, list[Trajectory]] = {}
    for trajectory in trajectories:
        by_problem.setdefault(trajectory.problem_id, []).append(trajectory)

    outcomes = []
    evaluated: list[Trajectory] = []
    for problem_id in sorted(by_problem):
        truth = truths.get(problem_id)
        if truth is None:
            errors.append({"problem_id": problem_id, "error": "missing ground truth"})
            continue
        rollouts = []
        for trajectory in by_problem[problem_id]:
            if trajectory.final_answer is None:
                correct = False
            else:
                correct = verify_answer(trajectory.final_answer, truth).correct
            rollouts.append(diagnostics.RolloutOutcome(
                correct=correct,
                token_count=trajectory.token_count,
                tool_call_count=trajectory.tool_call_count,
                truncated=trajectory.stop_reason in (STOP_TOKEN_BUDGET, STOP_TOOL_BUDGET),
                code_token_counts=tuple(
                    DEFAULT_TOKENIZER.count(turn.content)
                    for turn in trajectory.turns if turn.action == "code"),
            ))
            evaluated.append(trajectory)
        outcomes.append(diagnostics.ProblemOutcomes(problem_id, tuple(rollouts)))
    if not outcomes:
        click.echo("no problems could be evaluated (missing truths?)", err=True)
        sys.exit(EXIT_USAGE)

    eval_cfg = cfg["evaluate"]
    k_eval = int(eval_cfg["k"])
    min_n = min(p.n for p in outcomes)
    if k_eval > min_n:
        click.echo(f"k={k_eval} exceeds the smallest rollout count {min_n}", err=True)
        sys.exit(EXIT_USAGE)
    pass_ks = sorted({int(value) for value in eval_cfg["pass_k"] if int(value) <= min_n})
    stats = diagnostics.trajectory_stats(evaluated, DEFAULT_TOKENIZER)
    report = {
        "label": label or Path(traj_path).stem,
        "k": k_eval,
        "avg_at_k": diagnostics.avg_at_k(outcomes, k_eval),
        "pass_at_k": {str(kk): diagnostics.pass_at_k(outcomes, kk, eval_cfg["estimator"])
                      for kk in pass_ks},
        "estimator": eval_cfg["estimator"],
        "truncation_rate": diagnostics.truncation_rate(evaluated),
        "mean_tool_calls": stats["mean_tool_calls"],
        "mean_token_count": stats["mean_token_count"],
        "mean_snippet_tokens": stats["mean_snippet_tokens"],
        "tool_use_fraction": stats["tool_use_fraction"],
        "counts": {"problems": len(outcomes), "rollouts": len(evaluated)},
        "errors": errors,
        "config_echo": _public_config(cfg),
    }
    _write_manifest(report_path, report)
    if per_problem_path:
        write_jsonl(per_problem_path, (
            {"problem_id": p.problem_id,
             "correct": [r.correct for r in p.rollouts],
             "n": p.n}
            for p in outcomes))
    click.echo(f"avg@{k_eval}={report['avg_at_k']:.4f} over "
               f"{len(outcomes)} problems -> {report_path}")
    if errors:
        sys.exit(EXIT_PARTIAL)


@main.command("curate")
@click.argument("pipeline", type=click.Choice(["rl-build", "sft-select"]))
@click.option("--records", "records_path", type=click.Path(exists=True),
              help="CurationRecord JSONL (rl-build).")
@click.option("--stats", "stats_path", type=click.Path(exists=True),
              help="PromptStats JSONL (sft-select).")
@click.option("--tir", "tir_path", type=click.Path(exists=True),
              help="TIR trajectory JSONL (sft-select).")
@click.option("--text", "text_path", type=click.Path(exists=True),
              help="Text-only trajectory JSONL (sft-select).")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--manifest", "manifest_path", type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--mock-script", type=click.Path(exists=True))
@click.option("--fake-table", type=click.Path(exists=True))
@click.option("--endpoint")
@click.option("--delta", type=float)
@click.option("--text-fraction", type=float)
@click.option("--seed", type=int)
def cmd_curate(pipeline, records_path, stats_path, tir_path, text_path,
               out_path, manifest_path, config_path, mock_script, fake_table,
               endpoint, delta, text_fraction, seed) -> None:
    """Run a curation pipeline in its canonical filter order."""
    cfg = load_config(config_path)
    if mock_script:
        cfg["policy"]["mock_script"] = mock_script
    if fake_table:
        cfg["sandbox"]["fake_table"] = fake_table
    if endpoint:
        cfg["policy"]["endpoint"] = endpoint
    if delta is not None:
        cfg["curate"]["delta"] = delta
    if text_fraction is not None:
        cfg["curate"]["text_fraction"] = text_fraction
    if seed is not None:
        cfg["seed"] = seed
    cur = cfg["curate"]

    if pipeline == "rl-build":
        if not records_path:
            raise click.UsageError("rl-build requires --records")
        records = [curation.CurationRecord.from_dict(r)
                   for r in read_jsonl(records_path)]
        runner, gateway = _difficulty_runner(cfg)
        try:
            kept, manifest = curation.rl_build(
                records, runner,
                jaccard_threshold=float(cur["jaccard_threshold"]),
                n_samples=int(cur["difficulty_samples"]),
                max_correct=int(cur["difficulty_max_correct"]))
        finally:
            gateway.shutdown()
        write_jsonl(out_path, (r.to_dict() for r in
                               sorted(kept, key=lambda r: r.id)))
    else:
        if not stats_path:
            raise click.UsageError("sft-select requires --stats")
        if float(cur["text_fraction"]) >= 1.0 and tir_path:
            raise click.UsageError("text_fraction=1 with a TIR set is unsatisfiable")
        stats = [curation.PromptStats(
                     prompt_id=str(r["prompt_id"]), acc_tool=float(r["acc_tool"]),
                     acc_text=float(r["acc_text"]), k=int(r["k"]))
                 for r in read_jsonl(stats_path)]
        tir_set = _load_trajectories(tir_path) if tir_path else []
        text_set = _load_trajectories(text_path) if text_path else []
        selected, mixed, manifest = curation.sft_select(
            stats, delta=float(cur["delta"]), tir_set=tir_set, text_set=text_set,
            text_fraction=float(cur["text_fraction"]), seed=int(cfg["seed"]),
            max_tokens=int(cur["max_tokens"]))
        if tir_path or text_path:
            write_jsonl(out_path, (t.to_dict() for t in
                                   sorted(mixed, key=lambda t: t.problem_id)))
        else:
            write_jsonl(out_path, ({"prompt_id": pid} for pid in selected))

    manifest["config_echo"] = _public_config(cfg)
    manifest["outputs"] = {"records": str(out_path)}
    _write_manifest(manifest_path or f"{out_path}.manifest.json", manifest)
    counts = manifest["counts"]
    click.echo(f"{pipeline}: " + ", ".join(f"{k}={v}" for k, v in counts.items()))


@main.command("diagnose")
@click.option("--reports", "report_paths", required=True, multiple=True,
              type=click.Path(exists=True))
@click.option("--out", "out_path", type=click.Path())
def cmd_diagnose(report_paths, out_path) -> None:
    """Flag checkpoints whose diagnostics look unready for RL."""
    if len(report_paths) < 2:
        click.echo("need at least 2 checkpoint reports", err=True)
        sys.exit(EXIT_USAGE)
    reports = [_load_json(path) for path in report_paths]
    assessments = diagnostics.checkpoint_readiness(reports)
    for entry in assessments:
        flags = ", ".join(entry["flags"]) if entry["flags"] else "no flags"
        click.echo(f"checkpoint {entry['index']} ({entry['label']}): {flags}")
    if out_path:
        _write_manifest(out_path, {"assessments": assessments})


@main.command("verify")
@click.option("--pairs", "pairs_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
def cmd_verify(pairs_path, out_path) -> None:
    """Score candidate/truth pairs; exit 0 regardless of correctness."""
    results = []
    for record in read_jsonl(pairs_path):
        verdict = verify_answer(str(record.get("candidate", "")),
                                str(record.get("truth", "")))
        row = verdict.to_dict()
        if record.get("id") is not None:
            row["id"] = record["id"]
        results.append(row)
    write_jsonl(out_path, results)
    correct = sum(1 for r in results if r["correct"])
    click.echo(f"verified {len(results)} pairs: {correct} correct")


@main.command("sandbox-serve")
@click.option("--host", default="127.0.0.1")
@click.option("--port", default=8731, type=int)
@click.option("--config", "config_path", type=click.Path(exists=True))
def cmd_sandbox_serve(host, port, config_path) -> None:
    """Serve gateway sessions over a local socket."""
    cfg = load_config(config_path)
    with _gateway(cfg) as gateway:
        server = SandboxServer(gateway, host=host, port=port)
        click.echo(f"sandbox gateway listening on {server.address[0]}:{server.address[1]}")
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass
        finally:
            server.shutdown()


def _gateway(cfg: dict) -> SandboxGateway:
    sandbox_cfg = SandboxConfig(
        pool_size=int(cfg["sandbox"]["pool_size"]),
        default_timeout_ms=int(cfg["sandbox"]["default_timeout_ms"]),
        output_cap_bytes=int(cfg["sandbox"]["output_cap_bytes"]),
        worker_launch_command=cfg["sandbox"]["worker_launch_command"],
    )
    if cfg["sandbox"]["worker"] == "fake":
        table = _load_json(cfg["sandbox"]["fake_table"]) if cfg["sandbox"]["fake_table"] else {}
        factory = fake_worker_factory(table, sandbox_cfg.output_cap_bytes)
        return SandboxGateway(sandbox_cfg, worker_factory=factory)
    return SandboxGateway(sandbox_cfg)


def _rollout_config(cfg: dict) -> RolloutConfig:
    r = cfg["rollout"]
    return RolloutConfig(
        max_tool_calls=int(r["max_tool_calls"]),
        max_tokens=int(r["max_tokens"]),
        tool_open_tag=r["tool_open_tag"],
        tool_close_tag=r["tool_close_tag"],
        answer_pattern=r["answer_pattern"],
        concurrency=int(r["concurrency"]),
    )


def _difficulty_runner(cfg: dict):
    """Difficulty measurement through the rollout engine, any policy.

    Returns (runner, gateway); the caller owns the gateway shutdown.
    """
    script = _load_json(cfg["policy"]["mock_script"]) if cfg["policy"]["mock_script"] else None
    if script is None and not cfg["policy"]["endpoint"]:
        raise click.UsageError(
            "rl-build needs a mock script or a policy endpoint for difficulty sampling")
    rollout_cfg = _rollout_config(cfg)
    gateway = _gateway(cfg)
    http_client = None
    if script is None:
        http_client = HttpPolicyClient(
            cfg["policy"]["endpoint"],
            credential_env=cfg["policy"]["credential_env"],
            timeout_s=float(cfg["policy"]["timeout_s"]))

    def runner(record: curation.CurationRecord, n: int) -> list[bool]:
        problem = Problem(id=record.id, statement=record.statement,
                          ground_truth=record.answer, tools_enabled=True)
        verdicts = []
        for index in range(n):
            if script is not None:
                policy = MockPolicy(_script_outputs(script.get(record.id, []), index))
            else:
                policy = http_client
            trajectory = run_rollout(problem, policy, gateway, rollout_cfg,
                                     DEFAULT_TOKENIZER, cfg["system_prompt"])
            if trajectory.final_answer is None:
                verdicts.append(False)
            else:
                verdicts.append(
                    verify_answer(trajectory.final_answer, record.answer).correct)
        return verdicts

    return runner, gateway


def _script_outputs(value, index: int) -> list[str]:
    """Mock scripts: a flat output list shared by every rollout, or a list
    of per-rollout lists cycled by rollout index."""
    if value and isinstance(value[0], list):
        return value[index % len(value)]
    return list(value)


def _load_problems(path: str) -> list[Problem]:
    problems = []
    for record in read_jsonl(path):
        problems.append(Problem(
            id=str(record["id"]),
            statement=record["statement"],
            ground_truth=str(record.get("ground_truth", record.get("answer", ""))),
            tools_enabled=bool(record.get("tools_enabled", True)),
        ))
    return problems


def _load_trajectories(path: str) -> list[Trajectory]:
    return [deserialize_trajectory(record) for record in read_jsonl(path)]


def _completed_counts(path: str) -> dict[tuple[str, str], int]:
    out = Path(path)
    if not out.exists():
        return {}
    counts: dict[tuple[str, str], int] = {}
    for record in read_jsonl(out):
        key = (str(record.get("problem_id")), str(record.get("mode")))
        counts[key] = counts.get(key, 0) + 1
    return counts


def _load_json(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _write_manifest(path: str, manifest: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_canonical(manifest) + "\n")


def _public_config(cfg: dict) -> dict:
    """Config echo for manifests; credentials stay as env-var names."""
    return _deep_copy(cfg)


def _deep_copy(obj):
    return json.loads(json.dumps(obj))


def _deep_merge(base: dict, overlay: dict) -> None:
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_merge(base[key], value)
        else:
            base[key] = value


if __name__ == "__main__":
    main()
