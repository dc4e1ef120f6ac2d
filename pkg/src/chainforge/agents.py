"""Agent instantiation via inception prompting.

Each subtask gets an instructor and an assistant, both initialized with
mostly symmetrical system prompts rendered from editable template files.
A prompt always carries six sections, in order: Overview, Role, Tools,
Protocol, Termination, Constraints. The Overview, Tools, and Termination
sections are byte-identical across the pair; Role (and any role-derived
constraints) is where the two differ.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .errors import ChainforgeError, RenderError

SOLUTION_MARKER = "<SOLUTION>"
INFO_REQUEST_MARKER = "<INFO_REQUEST>"
NEUTRAL_ROLE_SENTENCE = "You are a helpful assistant."

SECTION_ORDER = ("Overview", "Role", "Tools", "Protocol", "Termination", "Constraints")
SHARED_SECTIONS = ("Overview", "Tools", "Termination")

_PLACEHOLDER_RE = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")
_SECTION_RE = re.compile(r"^## (\w+)\s*$", re.MULTILINE)


@dataclass(frozen=True)
class RoleSpec:
    """A named specialization plus its forbidden behaviors."""

    name: str
    description: str
    constraints: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.name:
            raise ChainforgeError("role name must be non-empty")


@dataclass(frozen=True)
class InceptionPrompts:
    instructor: str
    assistant: str


@dataclass
class Agent:
    """A role bound to a system prompt for exactly one subtask.

    ``history`` is assigned by the dialogue engine when the subtask starts;
    a non-None value marks the agent as spent, so reuse across subtasks is
    rejected there.
    """

    role: RoleSpec
    system_prompt: str
    history: object | None = None


def instantiate_agent(role: RoleSpec, system_prompt: str) -> Agent:
    """Bind a role to its rendered system prompt.

    Every backend call made on behalf of this agent sends ``system_prompt``
    as the conversation's first (system) message.
    """
    return Agent(role=role, system_prompt=system_prompt)


def protocol_markers(dehallucination: bool, solution_kind: str) -> str:
    """The communication-protocol clause injected at ``{markers}``."""
    lines = [
        f'When consensus is reached, the assistant begins its reply with "{SOLUTION_MARKER}".'
    ]
    if dehallucination:
        lines.append(
            f'Before committing to an answer, the assistant may open a reply with "{INFO_REQUEST_MARKER}" '
            "to ask the instructor for one concrete missing detail; the instructor answers that request "
            "directly, and the assistant then delivers its conclusive response."
        )
    if solution_kind == "code":
        lines.append(
            "Code travels as complete files: each file is a fenced code block immediately preceded by a "
            'line holding its file name, for example "main.py". Whole files only, never fragments.'
        )
    return "\n".join(lines)


def _default_prompts_root():
    return resources.files("chainforge").joinpath("data", "prompts")


def _read_template(prompts_root, phase: str, subtask: str, side: str) -> str:
    """Load ``prompts/<phase>/<subtask>/<side>.txt``, falling back to the
    generic ``prompts/default/<side>.txt`` pair for custom subtasks."""
    if prompts_root is None:
        prompts_root = _default_prompts_root()
    elif isinstance(prompts_root, (str, Path)):
        prompts_root = Path(prompts_root)
    for parts in ((phase, subtask, f"{side}.txt"), ("default", f"{side}.txt")):
        candidate = prompts_root.joinpath(*parts)
        if isinstance(candidate, Path):
            if candidate.is_file():
                return candidate.read_text(encoding="utf-8")
        elif candidate.is_file():
            return candidate.read_text(encoding="utf-8")
    raise RenderError(
        f"no prompt template for {phase}/{subtask}/{side} and no default template found"
    )


def _expand(template: str, values: dict[str, str]) -> str:
    """Substitute ``{name}`` placeholders in one pass.

    Substituted values are inserted verbatim (never rescanned), so code in
    the seed cannot collide with the placeholder syntax. An unknown
    placeholder in the template is a hard error naming it.
    """
    def _sub(match: re.Match) -> str:
        name = match.group(1)
        if name not in values:
            raise RenderError(f"unresolved template placeholder {{{name}}}")
        return values[name]

    return _PLACEHOLDER_RE.sub(_sub, template)


def _role_block(role: RoleSpec, strip_roles: bool) -> str:
    if strip_roles:
        return NEUTRAL_ROLE_SENTENCE
    block = role.description
    if role.constraints:
        block += "\nNever: " + "; ".join(role.constraints) + "."
    return block


def render_inception_prompts(
    subtask,
    task_prompt: str,
    seed: str,
    *,
    phase_name: str = "default",
    strip_roles: bool = False,
    prompts_root=None,
) -> InceptionPrompts:
    """Render the instructor/assistant system prompt pair for one subtask.

    Rendering is pure template expansion: the same inputs always produce
    byte-identical prompts. The protocol section declares the consensus
    marker and, only when dehallucination is enabled, the clarification
    marker; the termination section states the round limit.
    """
    markers = protocol_markers(subtask.dehallucination, subtask.solution_kind)
    rendered = {}
    for side, role in (("instructor", subtask.instructor), ("assistant", subtask.assistant)):
        template = _read_template(prompts_root, phase_name, subtask.name, side)
        rendered[side] = _expand(
            template,
            {
                "task": task_prompt,
                "seed": seed,
                "role_description": _role_block(role, strip_roles),
                "round_limit": str(subtask.round_limit),
                "markers": markers,
            },
        )
    return InceptionPrompts(instructor=rendered["instructor"], assistant=rendered["assistant"])


def split_sections(prompt: str) -> dict[str, str]:
    """Split a rendered prompt into its ``## Header`` sections."""
    sections: dict[str, str] = {}
    matches = list(_SECTION_RE.finditer(prompt))
    for i, match in enumerate(matches):
        end = matches[i + 1].start() if i + 1 < len(matches) else len(prompt)
        sections[match.group(1)] = prompt[match.end():end].strip("\n")
    return sections
