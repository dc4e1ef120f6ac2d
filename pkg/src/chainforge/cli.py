"""Command-line entry point.

    chainforge run TASK --config chain.yaml --backend scripted:script.yaml --out runs/
    chainforge eval tasks/ --config chain.yaml --backend http --out runs/ --parallel 4
    chainforge replay runs/<id>/transcript.log --speaker assistant
    chainforge stats runs/

Exit codes: 0 success, 1 usage error, 2 engine error, 3 backend error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import re
import sys
from datetime import datetime, timezone
from pathlib import Path

from .chain import ChatChain, load_chain_config
from .dialogue import split_language_chars
from .errors import BackendError, ChainforgeError, ConfigError, UsageError
from .evaluator import evaluate_batch, load_task_prompts
from .gateway import resolve_backend
from .runner import run_chain
from .transcript import filter_records, read_transcript

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_ENGINE = 2
EXIT_BACKEND = 3

logger = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems must exit 1, not argparse's 2
        raise UsageError(message)


def _slugify(text: str) -> str:
    slug = re.sub(r"[^a-z0-9]+", "_", text.lower()).strip("_")
    return slug[:40] or "task"


def _load_config(path: str | None) -> ChatChain:
    if path is None:
        from .chain import load_default_chain
        return load_default_chain()
    config_path = Path(path)
    if not config_path.is_file():
        raise UsageError(f"config file not found: {config_path}")
    return load_chain_config(config_path.read_text(encoding="utf-8"))


def _apply_ablation_flags(chain: ChatChain, args) -> ChatChain:
    kwargs = {}
    if args.halt_after:
        kwargs["halt_after"] = args.halt_after
    if args.no_cdh:
        kwargs["disable_dehallucination"] = True
    if args.no_roles:
        kwargs["strip_roles"] = True
    return chain.with_switches(**kwargs) if kwargs else chain


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def cmd_run(args) -> int:
    chain = _apply_ablation_flags(_load_config(args.config), args)
    backend = resolve_backend(args.backend)

    task_arg = Path(args.task)
    if task_arg.is_file():
        task_prompt = task_arg.read_text(encoding="utf-8").strip()
        slug = task_arg.stem
    else:
        task_prompt = args.task
        slug = _slugify(args.task)
    if not task_prompt:
        raise UsageError("task prompt is empty")
    run_id = args.run_id or slug

    out_root = Path(args.out)
    run_dir = out_root / run_id
    if run_dir.exists():
        raise UsageError(
            f"run directory {run_dir} already exists; refusing to overwrite (pick another --run-id)"
        )

    started_at = _utc_now()
    result = run_chain(
        chain,
        task_prompt,
        backend,
        run_id=run_id,
        task_slug=slug,
        out_dir=run_dir,
        sandbox_timeout=args.timeout,
    )
    config_text = Path(args.config).read_text(encoding="utf-8") if args.config else ""
    manifest = {
        "run_id": run_id,
        "task_slug": slug,
        "config_digest": hashlib.sha256(config_text.encode("utf-8")).hexdigest(),
        "started_at": started_at,
        "ended_at": _utc_now(),
        "completed_phases": sorted({phase for phase, _ in result.completed}),
        "paths": {
            "workspace": str(run_dir / "workspace"),
            "transcript": str(run_dir / "transcript.log"),
            "result": str(run_dir / "result.json"),
            "tests": str(run_dir / "tests"),
        },
    }
    (run_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(
        f"run {run_id}: {len(result.completed)} subtasks, "
        f"{result.stats.file_count} files, {result.stats.line_count} lines, "
        f"{result.stats.total_tokens} tokens"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    chain = _apply_ablation_flags(_load_config(args.config), args)
    backend = resolve_backend(args.backend)
    tasks_dir = Path(args.tasks)
    if not tasks_dir.is_dir():
        raise UsageError(f"tasks directory not found: {tasks_dir}")
    prompts = load_task_prompts(tasks_dir)

    out_root = Path(args.out)
    report = evaluate_batch(
        prompts,
        chain,
        backend,
        parallelism=args.parallel,
        out_root=out_root,
        sandbox_timeout=args.timeout,
        quality_mode=args.quality_mode,
    )
    report.save(out_root / "report")
    print(
        f"completeness={report.completeness:.4f} "
        f"executability={report.executability:.4f} "
        f"consistency={report.consistency_mean:.4f} "
        f"quality={report.quality_score:.4f}"
    )
    return EXIT_OK


def cmd_replay(args) -> int:
    path = Path(args.transcript)
    if not path.is_file():
        raise UsageError(f"transcript not found: {path}")
    records = read_transcript(path)
    current = None
    for record in filter_records(records, phase=args.phase, speaker=args.speaker, kind=args.kind):
        group = (record.phase, record.subtask)
        if group != current:
            print(f"=== {record.phase}/{record.subtask} ===")
            current = group
        content = record.content.replace("\n", "\\n")
        print(f"[r{record.round}] {record.speaker}({record.role}) {record.kind}: {content}")
    return EXIT_OK


def cmd_stats(args) -> int:
    root = Path(args.root)
    if not root.exists():
        raise UsageError(f"no such path: {root}")
    results = sorted(root.rglob("result.json"))
    transcripts = sorted(root.rglob("transcript.log"))
    if not results and not transcripts:
        raise UsageError(f"no run artifacts under {root}")

    if results:
        rows = [json.loads(p.read_text(encoding="utf-8")) for p in results]
        n = len(rows)
        print(f"runs: {n}")
        print(f"duration_mean_s: {sum(r['duration_seconds'] for r in rows) / n:.3f}")
        print(f"tokens_mean: {sum(r['total_tokens'] for r in rows) / n:.1f}")
        print(f"files_mean: {sum(r['file_count'] for r in rows) / n:.2f}")
        print(f"lines_mean: {sum(r['line_count'] for r in rows) / n:.2f}")
        if any(r.get("tokens_approximate") for r in rows):
            print("tokens_note: approximate (provider reported no usage)")
    natural = code = 0
    for path in transcripts:
        for record in read_transcript(path):
            nl_chars, code_chars = split_language_chars(record.content)
            natural += nl_chars
            code += code_chars
    total = natural + code
    if total:
        print(f"natural_language_pct: {100.0 * natural / total:.2f}")
        print(f"code_pct: {100.0 * code / total:.2f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="chainforge", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def _common(p):
        p.add_argument("--config", default=None, help="chain config YAML (default: shipped config)")
        p.add_argument("--backend", default="http", help="scripted:PATH or http")
        p.add_argument("--out", default="runs", help="output root directory")
        p.add_argument("--halt-after", dest="halt_after", default=None, metavar="PHASE")
        p.add_argument("--no-cdh", dest="no_cdh", action="store_true", help="disable communicative dehallucination")
        p.add_argument("--no-roles", dest="no_roles", action="store_true", help="strip role descriptions from prompts")
        p.add_argument("--timeout", type=float, default=10.0, help="sandbox timeout in seconds")

    run_p = sub.add_parser("run", help="run one task through the chain")
    run_p.add_argument("task", help="task prompt text or a file containing it")
    run_p.add_argument("--run-id", default=None)
    _common(run_p)
    run_p.set_defaults(func=cmd_run)

    eval_p = sub.add_parser("eval", help="evaluate a directory of task prompts")
    eval_p.add_argument("tasks", help="directory of .txt requirement files")
    eval_p.add_argument("--parallel", type=int, default=1)
    eval_p.add_argument("--quality-mode", choices=("product", "average"), default="product")
    _common(eval_p)
    eval_p.set_defaults(func=cmd_eval)

    replay_p = sub.add_parser("replay", help="pretty-print a transcript log")
    replay_p.add_argument("transcript")
    replay_p.add_argument("--phase", default=None)
    replay_p.add_argument("--speaker", default=None, choices=("instructor", "assistant"))
    replay_p.add_argument(
        "--kind", default=None,
        choices=("instruction", "response", "clarification_request", "clarification_answer"),
    )
    replay_p.set_defaults(func=cmd_replay)

    stats_p = sub.add_parser("stats", help="print run statistics and utterance mix")
    stats_p.add_argument("root", help="directory containing run outputs")
    stats_p.set_defaults(func=cmd_stats)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except ChainforgeError as exc:
        print(f"engine error: {exc}", file=sys.stderr)
        return EXIT_ENGINE


if __name__ == "__main__":
    raise SystemExit(main())
