"""The four software metrics and batch evaluation.

Completeness: no placeholder snippets anywhere in the workspace.
Executability: the final snapshot runs to a Success verdict in the sandbox.
Consistency: cosine similarity between embeddings of the requirement text
and the comment-stripped code, clamped to [0, 1] (the stripping keeps code
comments from leaking requirement wording into the score).
Quality: the product of the three, matching the headline aggregation; an
averaging variant is exposed as a report option.
"""

from __future__ import annotations

import csv
import json
import logging
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .chain import ChatChain
from .errors import ChainforgeError, EntrypointMissingError, WorkspaceError
from .gateway import Backend, HashingEmbedder, embed_text
from .runner import ChainResult, run_chain
from .sandbox import ExecutionReport, classify_feedback, execute, select_entrypoint
from .transcript import TranscriptRecord
from .workspace import LANGUAGE_EXTENSIONS, Workspace, scan_placeholders, strip_comments

logger = logging.getLogger(__name__)

REVIEW_CATEGORIES = (
    "Method Not Implemented", "Module Not Imported", "Robustness/Exception",
    "Unused Class", "Infinite Loop", "No Suggestion", "Other",
)

# Ordered keyword rules; the first hit wins. Kept as data so the taxonomy
# can be re-tuned without touching the classifier.
REVIEW_RULES: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("No Suggestion", ("no further findings", "no suggestion", "looks good", "no issues", "nothing to fix")),
    ("Method Not Implemented", ("not implemented", "unimplemented", "placeholder", "empty method", "todo", "fill in the")),
    ("Module Not Imported", ("not imported", "missing import", "module not imported", "importerror", "import error", "no import")),
    ("Infinite Loop", ("infinite loop", "endless loop", "never terminates", "loops forever", "non-terminating")),
    ("Unused Class", ("unused class", "unused variable", "unused function", "dead code", "never used")),
    ("Robustness/Exception", ("exception", "error handling", "try/except", "robustness", "crash", "edge case", "validate input")),
)


@dataclass
class TaskEval:
    slug: str
    complete: bool
    executable: bool
    consistency: float
    duration: float
    tokens: int
    files: int
    lines: int
    verdict_label: str = ""
    failed: bool = False

    def to_row(self) -> dict:
        return {
            "slug": self.slug,
            "complete": int(self.complete),
            "executable": int(self.executable),
            "consistency": round(self.consistency, 6),
            "duration": round(self.duration, 3),
            "tokens": self.tokens,
            "files": self.files,
            "lines": self.lines,
            "verdict_label": self.verdict_label,
            "failed": int(self.failed),
        }


@dataclass
class EvalReport:
    rows: list[TaskEval]
    quality_mode: str = "product"
    taxonomy: dict[str, int] = field(default_factory=dict)
    review_tallies: dict[str, int] = field(default_factory=dict)

    @property
    def completeness(self) -> float:
        return sum(r.complete for r in self.rows) / len(self.rows)

    @property
    def executability(self) -> float:
        return sum(r.executable for r in self.rows) / len(self.rows)

    @property
    def consistency_mean(self) -> float:
        return sum(r.consistency for r in self.rows) / len(self.rows)

    @property
    def quality_score(self) -> float:
        if self.quality_mode == "average":
            return (self.completeness + self.executability + self.consistency_mean) / 3.0
        return quality(self.completeness, self.executability, self.consistency_mean)

    def means(self) -> dict[str, float]:
        n = len(self.rows)
        return {
            "duration": sum(r.duration for r in self.rows) / n,
            "tokens": sum(r.tokens for r in self.rows) / n,
            "files": sum(r.files for r in self.rows) / n,
            "lines": sum(r.lines for r in self.rows) / n,
        }

    def summary(self) -> dict:
        return {
            "completeness": round(self.completeness, 6),
            "executability": round(self.executability, 6),
            "consistency": round(self.consistency_mean, 6),
            "quality": round(self.quality_score, 6),
            "quality_mode": self.quality_mode,
            "tasks": len(self.rows),
            "means": {k: round(v, 4) for k, v in self.means().items()},
            "taxonomy": dict(sorted(self.taxonomy.items())),
            "review_tallies": dict(sorted(self.review_tallies.items())),
        }

    def save(self, directory: Path) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        payload = self.summary()
        payload["rows"] = [r.to_row() for r in self.rows]
        (directory / "summary.json").write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        with (directory / "tasks.csv").open("w", newline="", encoding="utf-8") as handle:
            writer = csv.DictWriter(handle, fieldnames=list(self.rows[0].to_row().keys()))
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row.to_row())


def completeness(workspace: Workspace) -> bool:
    """True iff the placeholder scan comes back empty."""
    return not scan_placeholders(workspace)


def executability(report: ExecutionReport) -> bool:
    """True iff the sandbox classified the final snapshot as Success."""
    return classify_feedback(report).label == "Success"


def stripped_source_text(workspace: Workspace) -> str:
    """Comment-stripped sources concatenated in name order."""
    parts = []
    for name in sorted(workspace.files):
        ext = name.rsplit(".", 1)[-1].lower()
        tag = next((t for t, e in LANGUAGE_EXTENSIONS.items() if e == ext), ext)
        parts.append(strip_comments(workspace.files[name], tag))
    return "\n".join(parts)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    denominator = float(np.linalg.norm(a) * np.linalg.norm(b))
    if denominator == 0.0:
        return 0.0
    return float(np.dot(a, b) / denominator)


def consistency(requirement: str, workspace: Workspace, embedder=None) -> float:
    """Requirement-to-code similarity in [0, 1]; higher is more consistent."""
    if not requirement or not requirement.strip():
        raise ChainforgeError("requirement text must be non-empty")
    embedder = embedder or HashingEmbedder()
    code_text = stripped_source_text(workspace)
    if not code_text.strip():
        logger.warning("consistency: workspace stripped to nothing, scoring 0")
        return 0.0
    a = embed_text(embedder, requirement).vector
    b = embed_text(embedder, code_text).vector
    return min(max(cosine_similarity(a, b), 0.0), 1.0)


def quality(c: float, e: float, s: float) -> float:
    """Product of completeness, executability, and consistency aggregates."""
    for name, value in (("completeness", c), ("executability", e), ("consistency", s)):
        if not 0.0 <= value <= 1.0:
            raise ChainforgeError(f"{name} must lie in [0, 1], got {value!r}")
    return c * e * s


def review_category(utterance) -> str:
    """Classify one reviewer suggestion into the fixed category set."""
    content = utterance.content if hasattr(utterance, "content") else str(utterance)
    stripped = content.lstrip()
    if stripped.startswith("<SOLUTION>"):
        return "No Suggestion"
    lowered = content.lower()
    for label, keywords in REVIEW_RULES:
        if any(keyword in lowered for keyword in keywords):
            return label
    return "Other"


def tally_review_suggestions(
    records: list[TranscriptRecord], review_subtasks: tuple[str, ...] = ("code_review",)
) -> dict[str, int]:
    """Count reviewer-suggestion categories across a transcript.

    Suggestions are the reviewer's instructions from round 2 onward; the
    round-1 instruction is the seeded phase prompt, not a finding.
    """
    tallies: dict[str, int] = {}
    for record in records:
        if record.subtask not in review_subtasks:
            continue
        if record.kind != "instruction" or record.round < 2:
            continue
        label = review_category(record)
        tallies[label] = tallies.get(label, 0) + 1
    return tallies


@dataclass(frozen=True)
class TaskPrompt:
    slug: str
    text: str


def load_task_prompts(directory: Path) -> list[TaskPrompt]:
    """Read a directory of plain-text requirements, one task per file."""
    directory = Path(directory)
    prompts = [
        TaskPrompt(slug=path.stem, text=path.read_text(encoding="utf-8").strip())
        for path in sorted(directory.glob("*.txt"))
        if path.is_file()
    ]
    if not prompts:
        raise ChainforgeError(f"no task prompt files (*.txt) found in {directory}")
    return prompts


def evaluate_task(
    prompt: TaskPrompt,
    chain: ChatChain,
    backend: Backend,
    *,
    out_dir: Path | None = None,
    embedder=None,
    sandbox_timeout: float = 10.0,
    gui_heuristic: bool = False,
) -> tuple[TaskEval, ChainResult | None]:
    """Run the chain for one task and score the result."""
    try:
        result = run_chain(
            chain,
            prompt.text,
            backend,
            run_id=prompt.slug,
            task_slug=prompt.slug,
            out_dir=out_dir,
            sandbox_timeout=sandbox_timeout,
            gui_heuristic=gui_heuristic,
        )
    except ChainforgeError as exc:
        logger.warning("task %s failed: %s", prompt.slug, exc)
        row = TaskEval(
            slug=prompt.slug, complete=False, executable=False, consistency=0.0,
            duration=0.0, tokens=0, files=0, lines=0, verdict_label="", failed=True,
        )
        return row, None

    complete = completeness(result.workspace)
    label = ""
    executable = False
    try:
        entrypoint = select_entrypoint(result.workspace, prompt.slug)
        report = execute(
            result.workspace, entrypoint, timeout=sandbox_timeout, gui_heuristic=gui_heuristic
        )
        feedback = classify_feedback(report)
        label = feedback.label
        executable = feedback.label == "Success"
        result.sandbox_labels.append(feedback.label)
    except (EntrypointMissingError, WorkspaceError) as exc:
        logger.info("task %s not executable: %s", prompt.slug, exc)
    try:
        score = consistency(prompt.text, result.workspace, embedder)
    except ChainforgeError:
        score = 0.0
    row = TaskEval(
        slug=prompt.slug,
        complete=complete,
        executable=executable,
        consistency=score,
        duration=result.stats.duration_seconds,
        tokens=result.stats.total_tokens,
        files=result.stats.file_count,
        lines=result.stats.line_count,
        verdict_label=label,
    )
    return row, result


def evaluate_batch(
    task_prompts: list[TaskPrompt],
    chain: ChatChain,
    backend: Backend,
    parallelism: int = 1,
    *,
    out_root: Path | None = None,
    embedder=None,
    sandbox_timeout: float = 10.0,
    gui_heuristic: bool = False,
    quality_mode: str = "product",
    review_subtasks: tuple[str, ...] = ("code_review",),
) -> EvalReport:
    """Run the chain per task and aggregate the four metrics.

    Each task gets an isolated workspace and its own backend clone, so a
    scripted batch produces the same report at any parallelism. A failing
    task becomes a zeroed row; the batch continues.
    """
    if not task_prompts:
        raise ChainforgeError("task prompt list is empty")
    embedder = embedder or HashingEmbedder()

    def _one(prompt: TaskPrompt) -> tuple[TaskEval, ChainResult | None]:
        task_backend = backend.clone() if hasattr(backend, "clone") else backend
        if out_root is not None:
            out_dir = Path(out_root) / prompt.slug
            return evaluate_task(
                prompt, chain, task_backend, out_dir=out_dir, embedder=embedder,
                sandbox_timeout=sandbox_timeout, gui_heuristic=gui_heuristic,
            )
        with tempfile.TemporaryDirectory(prefix=f"chainforge-{prompt.slug}-") as tmp:
            return evaluate_task(
                prompt, chain, task_backend, out_dir=Path(tmp), embedder=embedder,
                sandbox_timeout=sandbox_timeout, gui_heuristic=gui_heuristic,
            )

    outcomes: dict[str, tuple[TaskEval, ChainResult | None]] = {}
    if parallelism <= 1:
        for prompt in task_prompts:
            outcomes[prompt.slug] = _one(prompt)
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            for prompt, outcome in zip(task_prompts, pool.map(_one, task_prompts)):
                outcomes[prompt.slug] = outcome

    rows = []
    taxonomy: dict[str, int] = {}
    review_tallies: dict[str, int] = {}
    for prompt in sorted(task_prompts, key=lambda p: p.slug):
        row, result = outcomes[prompt.slug]
        rows.append(row)
        if result is not None:
            for label in result.sandbox_labels:
                taxonomy[label] = taxonomy.get(label, 0) + 1
            for label, count in tally_review_suggestions(result.records, review_subtasks).items():
                review_tallies[label] = review_tallies.get(label, 0) + count
    return EvalReport(rows=rows, quality_mode=quality_mode, taxonomy=taxonomy, review_tallies=review_tallies)
