"""Executes a chat chain end to end.

Subtasks run strictly in order. Each one gets freshly instantiated agents,
an opening instruction composed from all solutions extracted so far plus
the phase prompt, and (for system testing) instructions rendered from real
sandbox feedback. Everything observable is persisted under the run
directory as it happens, so an interrupted run can resume from its last
completed subtask.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

from .agents import instantiate_agent, render_inception_prompts
from .chain import ChatChain, LongTermMemory, Phase, Subtask, compose_seed
from .dialogue import DialogueOutcome, DialogueState, run_dialogue
from .errors import ChainforgeError, EntrypointMissingError, WorkspaceError
from .gateway import Backend, TokenLedger
from .sandbox import classify_feedback, execute, persist_report, render_test_instruction, select_entrypoint
from .transcript import LogicalClock, TranscriptRecord, TranscriptWriter, WallClock
from .workspace import Workspace, count_stats

logger = logging.getLogger(__name__)


@dataclass
class RunStats:
    duration_seconds: float = 0.0
    prompt_tokens: int = 0
    completion_tokens: int = 0
    total_tokens: int = 0
    tokens_approximate: bool = False
    llm_calls: int = 0
    file_count: int = 0
    line_count: int = 0

    def to_dict(self) -> dict:
        return {
            "duration_seconds": round(self.duration_seconds, 3),
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "total_tokens": self.total_tokens,
            "tokens_approximate": self.tokens_approximate,
            "llm_calls": self.llm_calls,
            "file_count": self.file_count,
            "line_count": self.line_count,
        }


@dataclass
class ChainResult:
    workspace: Workspace
    records: list[TranscriptRecord]
    stats: RunStats
    memory: LongTermMemory
    states: dict[tuple[str, str], DialogueState] = field(default_factory=dict)
    verdicts: dict[tuple[str, str], str] = field(default_factory=dict)
    sandbox_labels: list[str] = field(default_factory=list)
    completed: list[tuple[str, str]] = field(default_factory=list)


def _effective_subtask(subtask: Subtask, chain: ChatChain) -> Subtask:
    if chain.switches.disable_dehallucination and subtask.dehallucination:
        return replace(subtask, dehallucination=False)
    return subtask


def _persist_prompts(out_dir: Path, phase: Phase, subtask: Subtask, prompts) -> None:
    prompt_dir = out_dir / "prompts"
    prompt_dir.mkdir(parents=True, exist_ok=True)
    base = f"{phase.name}.{subtask.name}"
    (prompt_dir / f"{base}.instructor.txt").write_text(prompts.instructor, encoding="utf-8")
    (prompt_dir / f"{base}.assistant.txt").write_text(prompts.assistant, encoding="utf-8")


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def run_chain(
    chain: ChatChain,
    task_prompt: str,
    backend: Backend,
    workspace: Workspace | None = None,
    *,
    run_id: str = "run",
    task_slug: str | None = None,
    out_dir: Path | None = None,
    prompts_root=None,
    clock=None,
    sandbox_timeout: float = 10.0,
    gui_heuristic: bool = False,
    resume: bool = False,
) -> ChainResult:
    """Execute every subtask of the chain in order and return the result.

    With a deterministic backend the run is fully reproducible: a logical
    clock stamps the transcript, so identical (config, task, script) yield
    identical transcript bytes and workspace bytes. ``resume=True`` picks up
    after the last subtask whose solution was persisted.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    if clock is None:
        clock = LogicalClock() if getattr(backend, "deterministic", False) else WallClock()

    slug = task_slug or run_id
    ltm = LongTermMemory()
    done: set[tuple[str, str]] = set()
    solutions_path = out_dir / "solutions.json" if out_dir is not None else None
    if resume and solutions_path is not None and solutions_path.exists():
        ltm = LongTermMemory.from_payload(json.loads(solutions_path.read_text(encoding="utf-8")))
        done = {(e.phase, e.subtask) for e in ltm}
        logger.info("resuming run %s after %d completed subtasks", run_id, len(done))

    if workspace is None:
        ws_root = out_dir / "workspace" if out_dir is not None else None
        if resume and ws_root is not None and ws_root.exists():
            workspace = Workspace.load(ws_root)
        else:
            workspace = Workspace(root=ws_root)
    if workspace.root is not None:
        Path(workspace.root).mkdir(parents=True, exist_ok=True)

    writer = TranscriptWriter(
        run_id=run_id,
        path=out_dir / "transcript.log" if out_dir is not None else None,
        clock=clock,
    )
    ledger = TokenLedger()
    started = clock.now()

    result = ChainResult(
        workspace=workspace,
        records=writer.records,
        stats=RunStats(),
        memory=ltm,
    )
    execution_counter = 0

    def _sandbox_hook(subtask: Subtask):
        def hook(round_index: int, ws: Workspace) -> str | None:
            nonlocal execution_counter
            try:
                entrypoint = select_entrypoint(ws, slug)
                report = execute(ws, entrypoint, timeout=sandbox_timeout, gui_heuristic=gui_heuristic)
            except (EntrypointMissingError, WorkspaceError) as exc:
                # sandbox trouble is feedback, not a run failure
                return (
                    f"The test run could not start: {exc}. "
                    "Fix the code and resend every file in full."
                )
            feedback = classify_feedback(report)
            result.sandbox_labels.append(feedback.label)
            if out_dir is not None:
                execution_counter += 1
                persist_report(report, feedback, out_dir / "tests", execution_counter)
            return render_test_instruction(feedback, report)

        return hook

    try:
        for phase in chain.phases:
            for subtask in phase.subtasks:
                if (phase.name, subtask.name) in done:
                    continue
                effective = _effective_subtask(subtask, chain)
                seed = compose_seed(ltm, phase, task_prompt, chain.defaults.token_budget)
                prompts = render_inception_prompts(
                    effective,
                    task_prompt,
                    seed,
                    phase_name=phase.name,
                    strip_roles=chain.switches.strip_roles,
                    prompts_root=prompts_root,
                )
                if out_dir is not None:
                    _persist_prompts(out_dir, phase, subtask, prompts)
                instructor = instantiate_agent(effective.instructor, prompts.instructor)
                assistant = instantiate_agent(effective.assistant, prompts.assistant)

                def emit(utterance, _phase=phase, _sub=subtask, _i=instructor, _a=assistant):
                    role = _i.role.name if utterance.speaker == "instructor" else _a.role.name
                    writer.emit(_phase.name, _sub.name, utterance.round, role, utterance)

                outcome: DialogueOutcome = run_dialogue(
                    instructor,
                    assistant,
                    seed,
                    effective,
                    workspace,
                    backend,
                    phase_name=phase.name,
                    task_slug=slug,
                    clarification_cap=chain.defaults.clarification_cap,
                    temperature=chain.defaults.temperature,
                    ledger=ledger,
                    emit=emit,
                    instruction_hook=_sandbox_hook(effective) if effective.sandbox_feedback else None,
                )
                ltm.append(phase.name, subtask.name, outcome.solution)
                result.states[(phase.name, subtask.name)] = outcome.state
                result.verdicts[(phase.name, subtask.name)] = outcome.verdict.verdict
                result.completed.append((phase.name, subtask.name))
                if solutions_path is not None:
                    _write_json(solutions_path, ltm.to_payload())
            if chain.switches.halt_after == phase.name:
                logger.info("halting chain after phase %r as configured", phase.name)
                break
    finally:
        # partial transcripts survive aborted runs
        stats = result.stats
        stats.duration_seconds = max(clock.now() - started, 0.0)
        stats.prompt_tokens = ledger.prompt_tokens
        stats.completion_tokens = ledger.completion_tokens
        stats.total_tokens = ledger.total_tokens
        stats.tokens_approximate = ledger.approximate
        stats.llm_calls = ledger.calls
        stats.file_count, stats.line_count = count_stats(workspace)
        if out_dir is not None:
            _write_json(out_dir / "result.json", {
                "run_id": run_id,
                "task_slug": slug,
                "completed_subtasks": [list(pair) for pair in result.completed],
                "verdicts": {f"{p}/{s}": v for (p, s), v in result.verdicts.items()},
                **stats.to_dict(),
            })
            workspace.write_manifest(out_dir / "workspace.manifest.json")
        writer.close()

    return result


def reconstruct_states(records: list[TranscriptRecord], chain: ChatChain) -> dict[tuple[str, str], DialogueState]:
    """Rebuild every subtask's final DialogueState from a transcript log."""
    limits = {
        (phase.name, sub.name): sub.round_limit
        for phase in chain.phases
        for sub in phase.subtasks
    }
    grouped: dict[tuple[str, str], list[TranscriptRecord]] = {}
    for record in records:
        grouped.setdefault((record.phase, record.subtask), []).append(record)
    return {
        key: DialogueState.from_transcript(group, round_limit=limits.get(key, 10))
        for key, group in grouped.items()
    }
