import pytest

from chainforge import RoleSpec, instantiate_agent, load_default_chain, render_inception_prompts
from chainforge.agents import (
    NEUTRAL_ROLE_SENTENCE,
    SECTION_ORDER,
    SHARED_SECTIONS,
    split_sections,
)
from chainforge.errors import ChainforgeError, RenderError


@pytest.fixture
def review_subtask():
    return load_default_chain().phases[2].subtasks[0]


def _render(subtask, **kwargs):
    defaults = dict(phase_name="testing", task_prompt="Build a sliding puzzle game.", seed="SEED-TEXT-HERE")
    defaults.update(kwargs)
    task = defaults.pop("task_prompt")
    seed = defaults.pop("seed")
    return render_inception_prompts(subtask, task, seed, **defaults)


def test_default_review_prompts_match_golden(fixtures, review_subtask):
    prompts = _render(review_subtask)
    want_i = (fixtures / "prompts_golden" / "review_instructor.txt").read_text(encoding="utf-8")
    want_a = (fixtures / "prompts_golden" / "review_assistant.txt").read_text(encoding="utf-8")
    assert prompts.instructor == want_i
    assert prompts.assistant == want_a


def test_prompts_carry_six_sections_in_order(review_subtask):
    prompts = _render(review_subtask)
    for text in (prompts.instructor, prompts.assistant):
        assert tuple(split_sections(text)) == SECTION_ORDER


def test_shared_sections_are_string_equal():
    chain = load_default_chain()
    for phase in chain.phases:
        for subtask in phase.subtasks:
            prompts = render_inception_prompts(subtask, "task text", "seed text", phase_name=phase.name)
            si, sa = split_sections(prompts.instructor), split_sections(prompts.assistant)
            for section in SHARED_SECTIONS:
                assert si[section] == sa[section], (phase.name, subtask.name, section)


def test_role_sections_name_each_role(review_subtask):
    prompts = _render(review_subtask)
    si, sa = split_sections(prompts.instructor), split_sections(prompts.assistant)
    assert review_subtask.instructor.description in si["Role"]
    assert review_subtask.assistant.description in sa["Role"]
    assert si["Role"] != sa["Role"]


def test_strip_roles_uses_neutral_sentence(review_subtask):
    prompts = _render(review_subtask, strip_roles=True)
    for text in (prompts.instructor, prompts.assistant):
        role = split_sections(text)["Role"]
        assert NEUTRAL_ROLE_SENTENCE in role
        assert review_subtask.instructor.description not in role
        assert review_subtask.assistant.description not in role


def test_dehallucination_flag_controls_info_request_clause():
    chain = load_default_chain()
    code_writing = chain.phases[1].subtasks[0]   # dehallucination off
    code_completion = chain.phases[1].subtasks[1]  # dehallucination on
    off = render_inception_prompts(code_writing, "t", "s", phase_name="coding")
    on = render_inception_prompts(code_completion, "t", "s", phase_name="coding")
    assert "<INFO_REQUEST>" not in off.assistant
    assert "<INFO_REQUEST>" not in off.instructor
    assert "<INFO_REQUEST>" in on.assistant


def test_termination_section_states_round_limit(review_subtask):
    prompts = _render(review_subtask)
    assert str(review_subtask.round_limit) in split_sections(prompts.instructor)["Termination"]


def test_rendering_is_pure(review_subtask):
    assert _render(review_subtask) == _render(review_subtask)


def test_unresolved_placeholder_is_named(tmp_path, review_subtask):
    custom = tmp_path / "testing" / "code_review"
    custom.mkdir(parents=True)
    (custom / "instructor.txt").write_text("## Overview\n{task}\n{mystery}\n", encoding="utf-8")
    (custom / "assistant.txt").write_text("## Overview\n{task}\n", encoding="utf-8")
    with pytest.raises(RenderError, match="mystery"):
        _render(review_subtask, prompts_root=tmp_path)


def test_custom_subtask_falls_back_to_default_templates():
    subtask = load_default_chain().phases[0].subtasks[0]
    prompts = render_inception_prompts(subtask, "t", "s", phase_name="no_such_phase")
    assert tuple(split_sections(prompts.instructor)) == SECTION_ORDER


def test_role_constraints_fold_into_role_block():
    role = RoleSpec(name="guard", description="Security reviewer.", constraints=("approve secrets in code",))
    base = load_default_chain().phases[0].subtasks[0]
    from dataclasses import replace
    subtask = replace(base, instructor=role)
    prompts = render_inception_prompts(subtask, "t", "s", phase_name="design")
    assert "Never: approve secrets in code." in split_sections(prompts.instructor)["Role"]


# --- instantiate_agent ----------------------------------------------------------

def test_agent_system_prompt_is_first_wire_message():
    from chainforge.gateway import ChatRequest, ScriptedBackend

    role = RoleSpec(name="cto", description="d")
    agent = instantiate_agent(role, "the system prompt")
    captured = {}

    class Spy(ScriptedBackend):
        def complete(self, request: ChatRequest):
            captured["first"] = request.messages[0]
            return super().complete(request)

    backend = Spy.from_responses(["ok"])
    from chainforge.gateway import complete_chat
    complete_chat(backend, ChatRequest(messages=(("system", agent.system_prompt), ("user", "x"))))
    assert captured["first"] == ("system", "the system prompt")


def test_same_role_different_prompts_are_distinct_agents():
    role = RoleSpec(name="cto", description="d")
    assert instantiate_agent(role, "one") != instantiate_agent(role, "two")


def test_agent_reuse_across_subtasks_is_rejected():
    from chainforge import ScriptedBackend, Workspace
    from chainforge.dialogue import run_dialogue
    chain = load_default_chain()
    subtask = chain.phases[0].subtasks[0]
    instructor = instantiate_agent(subtask.instructor, "pi")
    assistant = instantiate_agent(subtask.assistant, "pa")
    backend = ScriptedBackend.from_responses(["<SOLUTION> done", "<SOLUTION> done"])
    run_dialogue(instructor, assistant, "seed", subtask, Workspace(root=None), backend)
    with pytest.raises(ChainforgeError, match="per-subtask"):
        run_dialogue(instructor, assistant, "seed", subtask, Workspace(root=None), backend.clone())


def test_empty_role_name_rejected():
    with pytest.raises(ChainforgeError):
        RoleSpec(name="", description="d")
