"""One subtask's instructor/assistant dialogue.

The engine alternates instruction and response, keeping an append-only
short-term memory of (instruction, response) pairs. With dehallucination
enabled, the assistant may open a bounded inner loop of clarification
requests before its conclusive reply; those exchanges live inside the
current round and never enter the pair memory. Code replies are applied to
the workspace as they arrive, which is what feeds the unchanged-code
termination rule.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

from .agents import Agent, INFO_REQUEST_MARKER, SOLUTION_MARKER
from .errors import ChainforgeError, ExtractionError, MemoryLimitError
from .gateway import Backend, ChatRequest, TokenLedger, complete_chat
from .workspace import CodeBlock, CodeParseError, Workspace, apply_response, parse_code_blocks

logger = logging.getLogger(__name__)

FORMAT_REMINDER = (
    "Your last reply carried no usable code. Resend the complete file(s): each file as a fenced "
    'code block immediately preceded by a line holding its file name, for example "main.py".'
)


@dataclass(frozen=True)
class Utterance:
    speaker: str  # "instructor" | "assistant"
    kind: str     # "instruction" | "response" | "clarification_request" | "clarification_answer"
    content: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    round: int = 0

    def __post_init__(self):
        if not self.content:
            raise ChainforgeError("utterance content must be non-empty")


@dataclass(frozen=True)
class Solution:
    kind: str  # "text" | "code"
    content: str
    source_round: int


@dataclass(frozen=True)
class TerminationDecision:
    verdict: str  # "continue" | "consensus" | "round-cap" | "unchanged-code"
    detail: str = ""


@dataclass(frozen=True)
class DialogueState:
    """Short-term memory: ordered (instruction, response) pairs.

    Append-only; ``t`` always equals the number of recorded pairs.
    ``clarification_depth`` counts the inner exchanges of the round still in
    flight and resets to zero once that round's pair is recorded.
    """

    pairs: tuple[tuple[str, str], ...] = ()
    t: int = 0
    clarification_depth: int = 0
    round_limit: int = 10

    @classmethod
    def from_transcript(cls, records, round_limit: int = 10) -> "DialogueState":
        """Rebuild the state a finished (or aborted) dialogue left behind."""
        pairs: list[tuple[str, str]] = []
        pending: str | None = None
        trailing_clarifications = 0
        for record in records:
            if record.kind == "instruction":
                pending = record.content
                trailing_clarifications = 0
            elif record.kind == "response":
                if pending is None:
                    raise ChainforgeError("transcript has a response with no open instruction")
                pairs.append((pending, record.content))
                pending = None
                trailing_clarifications = 0
            elif record.kind == "clarification_request":
                trailing_clarifications += 1
        return cls(
            pairs=tuple(pairs),
            t=len(pairs),
            clarification_depth=trailing_clarifications if pending is not None else 0,
            round_limit=round_limit,
        )


def update_memory(state: DialogueState, instruction: str, response: str) -> DialogueState:
    """Append one (instruction, response) pair; refuse past the round limit."""
    if state.t >= state.round_limit:
        raise MemoryLimitError(
            f"dialogue memory is full: round limit {state.round_limit} reached"
        )
    return replace(
        state,
        pairs=state.pairs + ((instruction, response),),
        t=state.t + 1,
        clarification_depth=0,
    )


def _starts_with(text: str, marker: str) -> bool:
    return text.lstrip().startswith(marker)


def detect_termination(state: DialogueState, digest_history: list[str], subtask) -> TerminationDecision:
    """Decide whether the dialogue is over.

    Tie-break order when several rules fire at once: consensus beats
    unchanged-code beats round-cap. ``digest_history`` holds only this
    subtask's applied-snapshot digests (the counter resets per subtask).
    """
    if state.pairs and _starts_with(state.pairs[-1][1], SOLUTION_MARKER):
        return TerminationDecision("consensus", "assistant reply opened with the consensus marker")
    if (
        subtask.solution_kind == "code"
        and len(digest_history) >= 2
        and digest_history[-1] == digest_history[-2]
    ):
        return TerminationDecision(
            "unchanged-code", "two consecutive code replies left the workspace digest unchanged"
        )
    if state.t >= state.round_limit:
        return TerminationDecision("round-cap", f"round limit {state.round_limit} reached")
    return TerminationDecision("continue")


def extract_solution(transcript: list[Utterance], kind: str, workspace_snapshot: str | None = None) -> Solution:
    """Pull the consensus artifact out of a finished dialogue.

    A marker-bearing response wins; otherwise the last conclusive response
    stands in (round-cap and unchanged-code endings). For code solutions the
    workspace's final snapshot is authoritative, so its serialized form is
    the content regardless of what the winning reply said.
    """
    responses = [u for u in transcript if u.kind == "response"]
    if not responses:
        raise ExtractionError("transcript has no assistant responses to extract from")
    chosen = None
    for utterance in responses:
        if _starts_with(utterance.content, SOLUTION_MARKER):
            chosen = utterance
            break
    if chosen is None:
        chosen = responses[-1]
    if kind == "code":
        if not workspace_snapshot or not workspace_snapshot.strip():
            raise ExtractionError("code subtask finished with an empty workspace")
        return Solution(kind="code", content=workspace_snapshot, source_round=chosen.round)
    content = chosen.content.lstrip()
    if content.startswith(SOLUTION_MARKER):
        content = content[len(SOLUTION_MARKER):].lstrip()
    if not content:
        content = chosen.content.strip()
    return Solution(kind="text", content=content, source_round=chosen.round)


def classify_utterance_language(utterance: Utterance) -> tuple[int, int]:
    """(natural-language chars, code chars) for one utterance.

    Characters on lines strictly inside a fenced block count as code; fence
    lines themselves are overhead and count as natural language. The two
    totals always sum to the content length.
    """
    return split_language_chars(utterance.content)


def split_language_chars(text: str) -> tuple[int, int]:
    code = 0
    in_fence = False
    for line in text.splitlines(keepends=True):
        if line.strip().startswith("```"):
            in_fence = not in_fence
            continue
        if in_fence:
            code += len(line)
    return len(text) - code, code


# --- engine -----------------------------------------------------------------

@dataclass
class DialogueOutcome:
    solution: Solution
    utterances: list[Utterance]
    state: DialogueState
    verdict: TerminationDecision
    digests: list[str] = field(default_factory=list)


def _call(
    backend: Backend,
    system_prompt: str,
    messages: list[tuple[str, str]],
    *,
    temperature: float,
    ledger: TokenLedger | None,
    tags: dict,
) -> tuple[str, int, int]:
    request = ChatRequest(
        messages=(("system", system_prompt),) + tuple(messages),
        temperature=temperature,
        tags=tags,
    )
    result = complete_chat(backend, request, ledger)
    return result.content, result.prompt_tokens or 0, result.completion_tokens or 0


def _assistant_view(state: DialogueState) -> list[tuple[str, str]]:
    messages = []
    for instruction, response in state.pairs:
        messages.append(("user", instruction))
        messages.append(("assistant", response))
    return messages


def _instructor_view(state: DialogueState) -> list[tuple[str, str]]:
    messages = []
    for instruction, response in state.pairs:
        messages.append(("assistant", instruction))
        messages.append(("user", response))
    return messages


def run_dialogue(
    instructor: Agent,
    assistant: Agent,
    seed: str,
    subtask,
    workspace: Workspace,
    backend: Backend,
    *,
    phase_name: str = "",
    task_slug: str = "",
    clarification_cap: int = 3,
    temperature: float = 0.2,
    ledger: TokenLedger | None = None,
    emit: Callable[[Utterance], None] | None = None,
    instruction_hook: Callable[[int, Workspace], str | None] | None = None,
) -> DialogueOutcome:
    """Run one subtask's dialogue to termination and extract its solution."""
    for agent in (instructor, assistant):
        if agent.history is not None:
            raise ChainforgeError(
                f"agent for role {agent.role.name!r} was already used; agents are per-subtask"
            )
    state = DialogueState(round_limit=subtask.round_limit)
    instructor.history = state
    assistant.history = state

    utterances: list[Utterance] = []
    digests: list[str] = []
    decision = TerminationDecision("continue")

    def _record(utterance: Utterance) -> None:
        utterances.append(utterance)
        if emit is not None:
            emit(utterance)

    def _tags(speaker: str, round_index: int) -> dict:
        return {
            "task": task_slug,
            "phase": phase_name,
            "subtask": subtask.name,
            "round": round_index,
            "speaker": speaker,
        }

    for round_index in range(1, subtask.round_limit + 1):
        # --- instruction ---
        if round_index == 1:
            instruction, usage = seed, (0, 0)
        else:
            hooked = instruction_hook(round_index, workspace) if instruction_hook else None
            if hooked is not None:
                instruction, usage = hooked, (0, 0)
            else:
                content, p, c = _call(
                    backend, instructor.system_prompt, _instructor_view(state),
                    temperature=temperature, ledger=ledger,
                    tags=_tags("instructor", round_index),
                )
                instruction, usage = content, (p, c)
        _record(Utterance("instructor", "instruction", instruction, *usage, round=round_index))

        # --- assistant turn, with the bounded clarification inner loop ---
        inner: list[tuple[str, str]] = []  # (request, answer) this round

        def _assistant_messages(extra: list[tuple[str, str]] = ()) -> list[tuple[str, str]]:
            messages = _assistant_view(state) + [("user", instruction)]
            for request, answer in inner:
                messages.append(("assistant", request))
                messages.append(("user", answer))
            messages.extend(extra)
            return messages

        while True:
            content, p, c = _call(
                backend, assistant.system_prompt, _assistant_messages(),
                temperature=temperature, ledger=ledger,
                tags=_tags("assistant", round_index),
            )
            if (
                subtask.dehallucination
                and _starts_with(content, INFO_REQUEST_MARKER)
                and len(inner) < clarification_cap
            ):
                _record(Utterance("assistant", "clarification_request", content, p, c, round=round_index))
                answer, ap, ac = _call(
                    backend, instructor.system_prompt,
                    _instructor_view(state)
                    + [("assistant", instruction)]
                    + [m for req, ans in inner for m in (("user", req), ("assistant", ans))]
                    + [("user", content)],
                    temperature=temperature, ledger=ledger,
                    tags=_tags("instructor", round_index),
                )
                _record(Utterance("instructor", "clarification_answer", answer, ap, ac, round=round_index))
                inner.append((content, answer))
                state = replace(state, clarification_depth=len(inner))
                continue
            break

        response, rp, rc = content, p, c

        # --- materialize code, with a single format-reminder retry ---
        # The retry shares the round's clarification budget so the total
        # call count stays within round_limit * (1 + cap) * 2.
        blocks: list[CodeBlock] = []
        if subtask.solution_kind == "code":
            blocks, parse_failed = _try_parse(response)
            if (
                (parse_failed or not blocks)
                and not _starts_with(response, SOLUTION_MARKER)
                and len(inner) < clarification_cap
            ):
                content, p, c = _call(
                    backend, assistant.system_prompt,
                    _assistant_messages([("assistant", response), ("user", FORMAT_REMINDER)]),
                    temperature=temperature, ledger=ledger,
                    tags=_tags("assistant", round_index),
                )
                response, rp, rc = content, rp + p, rc + c
                blocks, _ = _try_parse(response)

        _record(Utterance("assistant", "response", response, rp, rc, round=round_index))

        if subtask.solution_kind == "code" and blocks:
            apply_response(workspace, blocks)
            digests.append(workspace.digest_history[-1])

        state = update_memory(state, instruction, response)
        decision = detect_termination(state, digests, subtask)
        if decision.verdict != "continue":
            break

    snapshot = workspace.serialize() if subtask.solution_kind == "code" else None
    solution = extract_solution(utterances, subtask.solution_kind, snapshot)
    return DialogueOutcome(
        solution=solution,
        utterances=utterances,
        state=state,
        verdict=decision,
        digests=digests,
    )


def _try_parse(response: str) -> tuple[list[CodeBlock], bool]:
    try:
        return parse_code_blocks(response), False
    except (CodeParseError, ChainforgeError) as exc:
        logger.debug("response failed code parsing: %s", exc)
        return [], True


def run_subtask_dialogue(
    instructor: Agent,
    assistant: Agent,
    seed: str,
    subtask,
    workspace: Workspace,
    backend: Backend,
    **kwargs,
) -> tuple[Solution, list[Utterance]]:
    """Public operation: run the dialogue, return (solution, transcript)."""
    outcome = run_dialogue(instructor, assistant, seed, subtask, workspace, backend, **kwargs)
    return outcome.solution, outcome.utterances
