"""Chat-chain definition: phases, subtasks, defaults, ablation switches.

A chain is loaded once from YAML, validated, and treated as immutable for
the rest of the run. Long-term memory lives here too: the ordered record of
extracted solutions that seeds each phase's opening instruction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Iterator

import yaml

from .agents import RoleSpec
from .dialogue import Solution
from .errors import ConfigError
from .gateway import count_tokens

DEFAULT_ROUND_LIMIT = 10
DEFAULT_TEMPERATURE = 0.2
DEFAULT_CLARIFICATION_CAP = 3
DEFAULT_TOKEN_BUDGET = 16000

TRUNCATION_MARKER = "[truncated]"


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = DEFAULT_TEMPERATURE
    round_limit: int = DEFAULT_ROUND_LIMIT
    clarification_cap: int = DEFAULT_CLARIFICATION_CAP
    token_budget: int = DEFAULT_TOKEN_BUDGET


@dataclass(frozen=True)
class Subtask:
    name: str
    instructor: RoleSpec
    assistant: RoleSpec
    dehallucination: bool = False
    solution_kind: str = "text"
    round_limit: int = DEFAULT_ROUND_LIMIT
    sandbox_feedback: bool = False


@dataclass(frozen=True)
class Phase:
    name: str
    phase_prompt: str
    subtasks: tuple[Subtask, ...]


@dataclass(frozen=True)
class AblationFlags:
    halt_after: str | None = None
    disable_dehallucination: bool = False
    strip_roles: bool = False


@dataclass(frozen=True)
class ChatChain:
    phases: tuple[Phase, ...]
    defaults: GenerationParams = GenerationParams()
    switches: AblationFlags = AblationFlags()
    roles: tuple[RoleSpec, ...] = ()

    def subtask_count(self) -> int:
        return sum(len(p.subtasks) for p in self.phases)

    def with_switches(self, **kwargs) -> "ChatChain":
        switches = replace(self.switches, **kwargs)
        if switches.halt_after is not None and switches.halt_after not in [p.name for p in self.phases]:
            raise ConfigError(f"halt_after names unknown phase {switches.halt_after!r}", field="ablation.halt_after")
        return replace(self, switches=switches)


# --- configuration loading --------------------------------------------------

def default_config_text() -> str:
    return resources.files("chainforge").joinpath("data", "default_chain.yaml").read_text(encoding="utf-8")


def load_default_chain() -> ChatChain:
    return load_chain_config(default_config_text())


def _line_map(source: str) -> dict[str, int]:
    """Map config field paths ("phases[0].subtasks[1].name") to line numbers."""
    lines: dict[str, int] = {}
    try:
        node = yaml.compose(source, Loader=yaml.SafeLoader)
    except yaml.YAMLError:
        return lines
    if node is None:
        return lines

    def walk(n, path: str) -> None:
        lines[path or "<root>"] = n.start_mark.line + 1
        if isinstance(n, yaml.MappingNode):
            for key_node, value_node in n.value:
                key = str(key_node.value)
                walk(value_node, f"{path}.{key}" if path else key)
        elif isinstance(n, yaml.SequenceNode):
            for i, item in enumerate(n.value):
                walk(item, f"{path}[{i}]")

    walk(node, "")
    return lines


class _Validator:
    """Schema checks that report the offending field and its source line."""

    def __init__(self, source: str):
        self.lines = _line_map(source)

    def fail(self, message: str, path: str) -> ConfigError:
        return ConfigError(message, field=path, line=self.lines.get(path))

    def mapping(self, value: Any, path: str) -> dict:
        if not isinstance(value, dict):
            raise self.fail("expected a mapping", path)
        return value

    def sequence(self, value: Any, path: str) -> list:
        if not isinstance(value, list) or not value:
            raise self.fail("expected a non-empty list", path)
        return value

    def text(self, value: Any, path: str) -> str:
        if not isinstance(value, str) or not value.strip():
            raise self.fail("expected non-empty text", path)
        return value

    def boolean(self, value: Any, path: str) -> bool:
        if not isinstance(value, bool):
            raise self.fail("expected a boolean", path)
        return value


def load_chain_config(source: str) -> ChatChain:
    """Parse and validate a chain configuration document.

    Unspecified fields take the documented defaults (round limit 10,
    temperature 0.2, clarification cap 3). Schema violations name the field
    and, where the parser can tell, the source line; a subtask referencing
    an undeclared role is a validation error.
    """
    try:
        data = yaml.safe_load(source)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(
            f"configuration is not valid YAML: {getattr(exc, 'problem', exc)}",
            field="<document>",
            line=mark.line + 1 if mark else None,
        ) from exc
    check = _Validator(source)
    root = check.mapping(data, "<root>") if data is not None else {}

    defaults_raw = root.get("defaults") or {}
    check.mapping(defaults_raw, "defaults") if defaults_raw else None
    temperature = defaults_raw.get("temperature", DEFAULT_TEMPERATURE)
    if not isinstance(temperature, (int, float)) or not 0.0 <= float(temperature) <= 2.0:
        raise check.fail("temperature must be a number in [0, 2]", "defaults.temperature")
    round_limit = defaults_raw.get("round_limit", DEFAULT_ROUND_LIMIT)
    if not isinstance(round_limit, int) or round_limit < 1:
        raise check.fail("round_limit must be a positive integer", "defaults.round_limit")
    clarification_cap = defaults_raw.get("clarification_cap", DEFAULT_CLARIFICATION_CAP)
    if not isinstance(clarification_cap, int) or clarification_cap < 0:
        raise check.fail("clarification_cap must be a non-negative integer", "defaults.clarification_cap")
    token_budget = defaults_raw.get("token_budget", DEFAULT_TOKEN_BUDGET)
    if not isinstance(token_budget, int) or token_budget < 1:
        raise check.fail("token_budget must be a positive integer", "defaults.token_budget")
    defaults = GenerationParams(
        temperature=float(temperature),
        round_limit=round_limit,
        clarification_cap=clarification_cap,
        token_budget=token_budget,
    )

    ablation_raw = root.get("ablation") or {}
    switches = AblationFlags(
        halt_after=ablation_raw.get("halt_after"),
        disable_dehallucination=bool(ablation_raw.get("disable_dehallucination", False)),
        strip_roles=bool(ablation_raw.get("strip_roles", False)),
    )

    roles: dict[str, RoleSpec] = {}
    for name, value in check.mapping(root.get("roles") or {}, "roles").items():
        path = f"roles.{name}"
        if isinstance(value, str):
            description, constraints = value, ()
        elif isinstance(value, dict):
            description = check.text(value.get("description"), f"{path}.description")
            constraints = tuple(value.get("constraints") or ())
        else:
            raise check.fail("role must be a description string or a mapping", path)
        if not description.strip() and not switches.strip_roles:
            raise check.fail("role description must be non-empty", path)
        roles[str(name)] = RoleSpec(name=str(name), description=description, constraints=constraints)

    phases = []
    seen_phase_names = set()
    for i, phase_raw in enumerate(check.sequence(root.get("phases"), "phases")):
        ppath = f"phases[{i}]"
        phase_map = check.mapping(phase_raw, ppath)
        phase_name = check.text(phase_map.get("name"), f"{ppath}.name")
        if phase_name in seen_phase_names:
            raise check.fail(f"duplicate phase name {phase_name!r}", f"{ppath}.name")
        seen_phase_names.add(phase_name)
        phase_prompt = check.text(phase_map.get("phase_prompt"), f"{ppath}.phase_prompt")
        subtasks = []
        for j, sub_raw in enumerate(check.sequence(phase_map.get("subtasks"), f"{ppath}.subtasks")):
            spath = f"{ppath}.subtasks[{j}]"
            sub_map = check.mapping(sub_raw, spath)
            sub_name = check.text(sub_map.get("name"), f"{spath}.name")
            resolved = {}
            for side in ("instructor", "assistant"):
                role_name = check.text(sub_map.get(side), f"{spath}.{side}")
                if role_name not in roles:
                    raise check.fail(f"unknown role reference {role_name!r}", f"{spath}.{side}")
                resolved[side] = roles[role_name]
            if resolved["instructor"].name == resolved["assistant"].name:
                raise check.fail("instructor and assistant must be different roles", spath)
            kind = sub_map.get("solution_kind", "text")
            if kind not in ("text", "code"):
                raise check.fail("solution_kind must be 'text' or 'code'", f"{spath}.solution_kind")
            sub_limit = sub_map.get("round_limit", defaults.round_limit)
            if not isinstance(sub_limit, int) or sub_limit < 1:
                raise check.fail("round_limit must be a positive integer", f"{spath}.round_limit")
            dehallucination = sub_map.get("dehallucination", False)
            if not isinstance(dehallucination, bool):
                raise check.fail("dehallucination must be a boolean", f"{spath}.dehallucination")
            subtasks.append(
                Subtask(
                    name=sub_name,
                    instructor=resolved["instructor"],
                    assistant=resolved["assistant"],
                    dehallucination=dehallucination,
                    solution_kind=kind,
                    round_limit=sub_limit,
                    sandbox_feedback=bool(sub_map.get("sandbox_feedback", False)),
                )
            )
        phases.append(Phase(name=phase_name, phase_prompt=phase_prompt, subtasks=tuple(subtasks)))

    if switches.halt_after is not None and switches.halt_after not in seen_phase_names:
        raise check.fail(
            f"halt_after names unknown phase {switches.halt_after!r}", "ablation.halt_after"
        )

    return ChatChain(
        phases=tuple(phases),
        defaults=defaults,
        switches=switches,
        roles=tuple(roles.values()),
    )


# --- long-term memory and phase seeding -------------------------------------

@dataclass(frozen=True)
class MemoryEntry:
    phase: str
    subtask: str
    solution: Solution


class LongTermMemory:
    """Ordered record of extracted solutions, one per completed subtask.

    Only Solution values are admitted; anything transcript-shaped is
    rejected at construction so raw dialogue can never leak across phases.
    """

    def __init__(self, entries: tuple[MemoryEntry, ...] = ()):
        self._entries: list[MemoryEntry] = []
        for entry in entries:
            self.append(entry.phase, entry.subtask, entry.solution)

    def append(self, phase: str, subtask: str, solution: Solution) -> None:
        if not isinstance(solution, Solution):
            raise TypeError(
                f"long-term memory accepts Solution values only, got {type(solution).__name__}"
            )
        self._entries.append(MemoryEntry(phase=phase, subtask=subtask, solution=solution))

    @property
    def entries(self) -> tuple[MemoryEntry, ...]:
        return tuple(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[MemoryEntry]:
        return iter(self._entries)

    def to_payload(self) -> list[dict]:
        return [
            {
                "phase": e.phase,
                "subtask": e.subtask,
                "kind": e.solution.kind,
                "content": e.solution.content,
                "source_round": e.solution.source_round,
            }
            for e in self._entries
        ]

    @classmethod
    def from_payload(cls, payload: list[dict]) -> "LongTermMemory":
        ltm = cls()
        for item in payload:
            ltm.append(
                item["phase"],
                item["subtask"],
                Solution(kind=item["kind"], content=item["content"], source_round=item["source_round"]),
            )
        return ltm


def solution_separator(phase: str, subtask: str) -> str:
    return f"--- {phase}/{subtask} solution ---"


def compose_seed(
    ltm: LongTermMemory,
    phase: Phase,
    task_prompt: str = "",
    token_budget: int | None = None,
) -> str:
    """All accumulated solutions, in chain order, then the phase prompt.

    Every entry is introduced by its labeled separator line. When the result
    exceeds the token budget, the oldest entries are dropped head-first and
    the text opens with an explicit truncation marker.
    """
    prompt = phase.phase_prompt.replace("{task}", task_prompt) if task_prompt else phase.phase_prompt
    entries = list(ltm.entries)

    def build(items: list[MemoryEntry], truncated: bool) -> str:
        parts = [TRUNCATION_MARKER] if truncated else []
        for entry in items:
            parts.append(f"{solution_separator(entry.phase, entry.subtask)}\n{entry.solution.content}")
        parts.append(prompt)
        return "\n".join(parts)

    seed = build(entries, truncated=False)
    if token_budget is None:
        return seed
    truncated = False
    while entries and count_tokens(seed) > token_budget:
        entries.pop(0)
        truncated = True
        seed = build(entries, truncated=truncated)
    return seed


def seed_phase_instruction(ltm: LongTermMemory, phase: Phase, task_prompt: str = "",
                           token_budget: int | None = None) -> str:
    """Seed a phase's opening instruction from prior phases' solutions.

    Precondition: every memory entry comes from a phase other than the one
    being seeded (the chain is sequential, so "other" means "earlier").
    """
    for entry in ltm:
        if entry.phase == phase.name:
            raise ConfigError(
                f"long-term memory already holds an entry for phase {phase.name!r}; "
                "phase seeding takes solutions from earlier phases only"
            )
    return compose_seed(ltm, phase, task_prompt, token_budget)
