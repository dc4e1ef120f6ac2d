"""Shared test machinery: adversarial backends and transcript audits."""

from __future__ import annotations

import random

from chainforge.gateway import ChatRequest, ChatResult


class AdversarialBackend:
    """Seeded random responses that try to break the dialogue loop.

    Mixes clarification floods, consensus markers, fresh code, repeated code
    (to provoke unchanged-code), unterminated fences, and plain prose.
    """

    deterministic = True

    def __init__(self, seed: int):
        self.rng = random.Random(seed)
        self._sticky_code: str | None = None

    def clone(self) -> "AdversarialBackend":
        return AdversarialBackend(self.rng.randint(0, 2 ** 31))

    def complete(self, request: ChatRequest) -> ChatResult:
        speaker = request.tags.get("speaker")
        if speaker == "instructor":
            roll = self.rng.random()
            if roll < 0.1:
                content = "<SOLUTION> just agree already"
            else:
                content = f"instruction {self.rng.randint(0, 9999)}"
            return ChatResult(content=content)
        roll = self.rng.random()
        if roll < 0.30:
            content = f"<INFO_REQUEST> need detail {self.rng.randint(0, 9999)}"
        elif roll < 0.40:
            content = f"<SOLUTION> agreed on variant {self.rng.randint(0, 9999)}"
        elif roll < 0.55 and self._sticky_code is not None:
            content = self._sticky_code  # repeat verbatim: provokes unchanged-code
        elif roll < 0.75:
            body = f"value = {self.rng.randint(0, 9999)}\n"
            content = f"main.py\n```python\n{body}```"
            self._sticky_code = content
        elif roll < 0.85:
            content = "main.py\n```python\nbroken = True\n"  # unterminated fence
        else:
            content = f"prose reply {self.rng.randint(0, 9999)} with no code at all"
        return ChatResult(content=content)


class CountingBackend:
    """Wraps a backend and counts calls."""

    def __init__(self, inner):
        self.inner = inner
        self.calls = 0
        self.deterministic = getattr(inner, "deterministic", False)

    def clone(self):
        return CountingBackend(self.inner.clone())

    def complete(self, request: ChatRequest) -> ChatResult:
        self.calls += 1
        return self.inner.complete(request)


def audit_clarification_shape(records, cap: int) -> None:
    """State-machine audit of the inner-loop shape over transcript records.

    Within each (phase, subtask): every clarification request is followed
    immediately by exactly one clarification answer; requests per round
    never exceed the cap; conclusive responses close their round.
    """
    grouped: dict[tuple[str, str], list] = {}
    for record in records:
        grouped.setdefault((record.phase, record.subtask), []).append(record)
    for key, group in grouped.items():
        expecting_answer = False
        requests_this_round = 0
        current_round = None
        for record in group:
            if record.round != current_round:
                assert not expecting_answer, f"{key}: round changed with a dangling request"
                current_round = record.round
                requests_this_round = 0
            if expecting_answer:
                assert record.kind == "clarification_answer", (
                    f"{key} r{record.round}: request not followed by an answer (saw {record.kind})"
                )
                expecting_answer = False
                continue
            if record.kind == "clarification_request":
                requests_this_round += 1
                assert requests_this_round <= cap, f"{key} r{record.round}: clarification cap exceeded"
                expecting_answer = True
            elif record.kind == "clarification_answer":
                raise AssertionError(f"{key} r{record.round}: answer without a request")
        assert not expecting_answer, f"{key}: transcript ends on an unanswered request"
