import random

import pytest

from chainforge import (
    MemoryLimitError,
    ScriptedBackend,
    Workspace,
    classify_utterance_language,
    detect_termination,
    extract_solution,
    load_default_chain,
    run_subtask_dialogue,
    update_memory,
)
from chainforge.agents import instantiate_agent
from chainforge.dialogue import (
    DialogueState,
    Solution,
    Utterance,
    run_dialogue,
    split_language_chars,
)
from chainforge.errors import ExtractionError
from chainforge.gateway import ScriptEntry
from chainforge.transcript import TranscriptRecord

from helpers import AdversarialBackend, CountingBackend, audit_clarification_shape


def _subtask(kind="text", dehallucination=False, round_limit=10, name="design"):
    from dataclasses import replace
    chain = load_default_chain()
    base = chain.phases[0].subtasks[0]
    return replace(
        base, name=name, solution_kind=kind,
        dehallucination=dehallucination, round_limit=round_limit,
    )


def _agents(subtask):
    return (
        instantiate_agent(subtask.instructor, "instructor prompt"),
        instantiate_agent(subtask.assistant, "assistant prompt"),
    )


def _records(utterances, phase="p", subtask="s"):
    return [
        TranscriptRecord(
            run_id="r", phase=phase, subtask=subtask, round=u.round, speaker=u.speaker,
            role="x", kind=u.kind, content=u.content, prompt_tokens=u.prompt_tokens,
            completion_tokens=u.completion_tokens, timestamp=0.0,
        )
        for u in utterances
    ]


# --- update_memory -------------------------------------------------------------

def test_update_memory_base_case():
    state = update_memory(DialogueState(), "I1", "A1")
    assert state.t == 1 and state.pairs == (("I1", "A1"),)


def test_update_memory_refuses_past_limit():
    state = DialogueState(round_limit=10)
    for i in range(10):
        state = update_memory(state, f"I{i}", f"A{i}")
    with pytest.raises(MemoryLimitError):
        update_memory(state, "I11", "A11")


def test_update_memory_preserves_prior_pairs():
    s1 = update_memory(DialogueState(), "I1", "A1")
    s2 = update_memory(s1, "I2", "A2")
    assert s1.pairs == (("I1", "A1"),)
    assert s2.pairs == (("I1", "A1"), ("I2", "A2"))


def test_state_round_trips_through_log_format():
    state = DialogueState()
    utterances = []
    for i in range(1, 4):
        utterances.append(Utterance("instructor", "instruction", f"I{i}", round=i))
        utterances.append(Utterance("assistant", "response", f"A{i}", round=i))
        state = update_memory(state, f"I{i}", f"A{i}")
    rebuilt = DialogueState.from_transcript(_records(utterances), round_limit=10)
    assert rebuilt == state


# --- detect_termination -----------------------------------------------------------

def test_consensus_marker_wins():
    state = update_memory(DialogueState(), "I", "<SOLUTION> def f(): ...")
    decision = detect_termination(state, [], _subtask("code"))
    assert decision.verdict == "consensus"


def test_two_equal_consecutive_digests():
    state = update_memory(update_memory(update_memory(
        DialogueState(), "I1", "A1"), "I2", "A2"), "I3", "A3")
    decision = detect_termination(state, ["d1", "d2", "d2"], _subtask("code"))
    assert decision.verdict == "unchanged-code"


def test_no_rule_fires_continues():
    state = DialogueState(round_limit=10)
    for i in range(9):
        state = update_memory(state, f"I{i}", f"A{i}")
    decision = detect_termination(state, ["d1", "d2", "d3"], _subtask("code"))
    assert decision.verdict == "continue"


def test_round_cap_fires_at_limit():
    state = DialogueState(round_limit=3)
    for i in range(3):
        state = update_memory(state, f"I{i}", f"A{i}")
    assert detect_termination(state, [], _subtask("text", round_limit=3)).verdict == "round-cap"


def test_unchanged_code_ignored_for_text_subtasks():
    state = update_memory(DialogueState(), "I", "A")
    assert detect_termination(state, ["d", "d"], _subtask("text")).verdict == "continue"


def test_priority_consensus_over_unchanged_over_cap():
    subtask = _subtask("code", round_limit=2)
    state = update_memory(update_memory(DialogueState(round_limit=2), "I1", "A1"), "I2", "<SOLUTION> done")
    # all three rules hold simultaneously
    assert detect_termination(state, ["d", "d"], subtask).verdict == "consensus"
    state2 = update_memory(update_memory(DialogueState(round_limit=2), "I1", "A1"), "I2", "A2")
    assert detect_termination(state2, ["d", "d"], subtask).verdict == "unchanged-code"
    assert detect_termination(state2, ["d1", "d2"], subtask).verdict == "round-cap"


# --- extract_solution ---------------------------------------------------------------

def test_extract_marker_tail():
    transcript = [
        Utterance("instructor", "instruction", "I1", round=1),
        Utterance("assistant", "response", "A1 plain", round=1),
        Utterance("instructor", "instruction", "I2", round=2),
        Utterance("assistant", "response", "<SOLUTION> use a 15x15 board", round=2),
    ]
    solution = extract_solution(transcript, "text")
    assert solution == Solution(kind="text", content="use a 15x15 board", source_round=2)


def test_extract_falls_back_to_last_response():
    transcript = [
        Utterance("instructor", "instruction", "I1", round=1),
        Utterance("assistant", "response", "first", round=1),
        Utterance("instructor", "instruction", "I2", round=2),
        Utterance("assistant", "response", "final answer", round=2),
    ]
    assert extract_solution(transcript, "text").content == "final answer"


def test_extract_code_uses_workspace_snapshot():
    transcript = [Utterance("assistant", "response", "<SOLUTION> ok", round=1)]
    snapshot = "main.py\n```python\nx = 1\n```\n"
    solution = extract_solution(transcript, "code", snapshot)
    assert solution.kind == "code" and solution.content == snapshot


def test_extract_requires_assistant_responses():
    with pytest.raises(ExtractionError):
        extract_solution([Utterance("instructor", "instruction", "I", round=1)], "text")


def test_extract_code_requires_nonempty_snapshot():
    transcript = [Utterance("assistant", "response", "<SOLUTION>", round=1)]
    with pytest.raises(ExtractionError):
        extract_solution(transcript, "code", "")


# --- utterance language split -------------------------------------------------------

def test_language_pure_prose():
    u = Utterance("assistant", "response", "all prose here", round=1)
    assert classify_utterance_language(u) == (len(u.content), 0)


def test_language_single_fence_accounting():
    content = "```python\nbody line\n```\n"
    nl, code = split_language_chars(content)
    assert code == len("body line\n")
    assert nl == len(content) - code  # fence overhead
    assert nl + code == len(content)


def test_language_mixed_against_independent_scan():
    content = "intro\n```js\nlet a = 1;\nlet b = 2;\n```\noutro ```inline not a fence\n"
    nl, code = split_language_chars(content)
    # independent scan: walk lines, tracking fence state with a flag
    expected_code = 0
    inside = False
    for line in content.splitlines(keepends=True):
        stripped = line.strip()
        if stripped.startswith("```"):
            inside = not inside
            continue
        if inside:
            expected_code += len(line)
    assert (nl, code) == (len(content) - expected_code, expected_code)
    assert nl + code == len(content)


# --- run_subtask_dialogue -------------------------------------------------------------

def test_consensus_on_round_one_records_one_pair():
    subtask = _subtask("text")
    instructor, assistant = _agents(subtask)
    backend = ScriptedBackend.from_responses(["<SOLUTION> settled"])
    solution, transcript = run_subtask_dialogue(
        instructor, assistant, "the seed", subtask, Workspace(root=None), backend
    )
    assert solution.content == "settled"
    kinds = [(u.speaker, u.kind) for u in transcript]
    assert kinds == [("instructor", "instruction"), ("assistant", "response")]


def test_identical_code_in_consecutive_rounds_terminates():
    code_a = "main.py\n```python\nx = 1\n```"
    code_b = "main.py\n```python\nx = 2\n```"
    entries = [
        ScriptEntry(content=code_a, round=1, speaker="assistant"),
        ScriptEntry(content="keep going", round=2, speaker="instructor"),
        ScriptEntry(content=code_b, round=2, speaker="assistant"),
        ScriptEntry(content="more", round=3, speaker="instructor"),
        ScriptEntry(content=code_b, round=3, speaker="assistant"),  # identical again
    ]
    subtask = _subtask("code")
    instructor, assistant = _agents(subtask)
    ws = Workspace(root=None)
    outcome = run_dialogue(instructor, assistant, "seed", subtask, ws, ScriptedBackend(entries))
    assert outcome.verdict.verdict == "unchanged-code"
    assert outcome.state.t == 3
    assert ws.files["main.py"] == "x = 2\n"


def test_never_converging_hits_round_cap():
    class Restless:
        deterministic = True

        def __init__(self):
            self.n = 0

        def clone(self):
            return Restless()

        def complete(self, request):
            from chainforge.gateway import ChatResult
            self.n += 1
            return ChatResult(content=f"utterance {self.n}")

    subtask = _subtask("text", round_limit=10)
    instructor, assistant = _agents(subtask)
    outcome = run_dialogue(instructor, assistant, "seed", subtask, Workspace(root=None), Restless())
    assert outcome.verdict.verdict == "round-cap"
    assert outcome.state.t == 10


def test_clarification_inner_loop_shape():
    entries = [
        ScriptEntry(content="<INFO_REQUEST> which file?", round=1, speaker="assistant"),
        ScriptEntry(content="main.py please", round=1, speaker="instructor"),
        ScriptEntry(content="<INFO_REQUEST> which function?", round=1, speaker="assistant"),
        ScriptEntry(content="the entry point", round=1, speaker="instructor"),
        ScriptEntry(content="<SOLUTION> understood, done", round=1, speaker="assistant"),
    ]
    subtask = _subtask("text", dehallucination=True)
    instructor, assistant = _agents(subtask)
    outcome = run_dialogue(
        instructor, assistant, "seed", subtask, Workspace(root=None),
        ScriptedBackend(entries), clarification_cap=3,
    )
    kinds = [u.kind for u in outcome.utterances]
    assert kinds == [
        "instruction",
        "clarification_request", "clarification_answer",
        "clarification_request", "clarification_answer",
        "response",
    ]
    assert outcome.state.t == 1
    audit_clarification_shape(_records(outcome.utterances), cap=3)


def test_clarification_cap_forces_conclusive_treatment():
    # assistant asks forever; after the cap its request counts as the response
    class AlwaysAsking:
        deterministic = True

        def __init__(self):
            self.n = 0

        def clone(self):
            return AlwaysAsking()

        def complete(self, request):
            from chainforge.gateway import ChatResult
            self.n += 1
            if request.tags.get("speaker") == "instructor":
                return ChatResult(content=f"answer {self.n}")
            return ChatResult(content=f"<INFO_REQUEST> more {self.n}")

    subtask = _subtask("text", dehallucination=True, round_limit=2)
    instructor, assistant = _agents(subtask)
    outcome = run_dialogue(
        instructor, assistant, "seed", subtask, Workspace(root=None), AlwaysAsking(),
        clarification_cap=3,
    )
    assert outcome.verdict.verdict == "round-cap"
    per_round = {}
    for u in outcome.utterances:
        if u.kind == "clarification_request":
            per_round[u.round] = per_round.get(u.round, 0) + 1
    assert all(count <= 3 for count in per_round.values())


def test_cdh_disabled_treats_marker_as_plain_response():
    subtask = _subtask("text", dehallucination=False)
    instructor, assistant = _agents(subtask)
    backend = ScriptedBackend.from_responses(
        ["<INFO_REQUEST> ignored?", "second instruction", "<SOLUTION> fine"]
    )
    outcome = run_dialogue(instructor, assistant, "seed", subtask, Workspace(root=None), backend)
    kinds = {u.kind for u in outcome.utterances}
    assert "clarification_request" not in kinds
    assert outcome.state.pairs[0][1] == "<INFO_REQUEST> ignored?"


def test_malformed_code_gets_one_format_reminder():
    entries = [
        ScriptEntry(content="no code here, sorry", round=1, speaker="assistant"),
        ScriptEntry(content="main.py\n```python\nx = 1\n```", round=1, speaker="assistant"),
        ScriptEntry(content="good, finish", round=2, speaker="instructor"),
        ScriptEntry(content="<SOLUTION> done", round=2, speaker="assistant"),
    ]
    subtask = _subtask("code")
    instructor, assistant = _agents(subtask)
    ws = Workspace(root=None)
    outcome = run_dialogue(instructor, assistant, "seed", subtask, ws, ScriptedBackend(entries))
    assert ws.files["main.py"] == "x = 1\n"
    # the malformed draft was replaced, not recorded
    assert outcome.state.pairs[0][1].startswith("main.py")
    assert outcome.verdict.verdict == "consensus"


def test_still_malformed_after_reminder_is_plain_response():
    entries = [
        ScriptEntry(content="still prose", round=1, speaker="assistant"),
        ScriptEntry(content="prose again", round=1, speaker="assistant"),
        ScriptEntry(content="try once more", round=2, speaker="instructor"),
        ScriptEntry(content="<SOLUTION> giving up", round=2, speaker="assistant"),
    ]
    subtask = _subtask("code")
    instructor, assistant = _agents(subtask)
    ws = Workspace(root=None, files={"carry.py": "y = 1\n"})
    outcome = run_dialogue(instructor, assistant, "seed", subtask, ws, ScriptedBackend(entries))
    assert outcome.state.pairs[0][1] == "prose again"
    assert set(ws.files) == {"carry.py"}  # nothing was applied
    assert outcome.verdict.verdict == "consensus"
    assert "carry.py" in outcome.solution.content


def test_code_subtask_with_no_code_at_all_is_extraction_error():
    entries = [
        ScriptEntry(content="prose", round=1, speaker="assistant"),
        ScriptEntry(content="prose", round=1, speaker="assistant"),
        ScriptEntry(content="<SOLUTION> nothing to send", round=2, speaker="assistant"),
        ScriptEntry(content="go on", round=2, speaker="instructor"),
    ]
    subtask = _subtask("code")
    instructor, assistant = _agents(subtask)
    with pytest.raises(ExtractionError):
        run_dialogue(instructor, assistant, "seed", subtask, Workspace(root=None), ScriptedBackend(entries))


def test_fuzz_termination_and_call_bounds():
    cap = 3
    limit = 10
    rng = random.Random(1234)
    for _ in range(100):
        subtask = _subtask("code", dehallucination=True, round_limit=limit, name="fuzz")
        instructor, assistant = _agents(subtask)
        backend = CountingBackend(AdversarialBackend(rng.randint(0, 2 ** 31)))
        ws = Workspace(root=None, files={"seeded.py": "x = 0\n"})
        outcome = run_dialogue(
            instructor, assistant, "seed", subtask, ws, backend, clarification_cap=cap
        )
        assert outcome.verdict.verdict in {"consensus", "round-cap", "unchanged-code"}
        assert outcome.state.t <= limit
        assert backend.calls <= limit * (1 + cap) * 2
        audit_clarification_shape(_records(outcome.utterances), cap=cap)
