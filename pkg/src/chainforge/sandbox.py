"""Run generated software in an isolated child process and read the fallout.

The child gets the workspace root as its working directory, a minimized
environment whose HOME/TMPDIR point inside the workspace, and a hard
timeout enforced on its whole process group. Stderr is classified into a
fixed error taxonomy that feeds the testing dialogue.
"""

from __future__ import annotations

import json
import os
import re
import signal
import subprocess
import sys
import time
from dataclasses import dataclass
from pathlib import Path

from .errors import EntrypointMissingError, SandboxEnvironmentError, WorkspaceError
from .workspace import SOURCE_EXTENSIONS, Workspace

DEFAULT_TIMEOUT = 10.0
DEFAULT_GRACE = 1.0
DEFAULT_OUTPUT_CAP = 4096
INSTRUCTION_EXCERPT_CAP = 1500
TRUNCATION_SUFFIX = "\n[truncated]"

FEEDBACK_LABELS = (
    "Success", "ModuleNotFound", "NameError", "ImportError", "AttributeError",
    "TypeError", "SyntaxError", "FileNotFound", "GUIInitError", "Timeout", "OtherError",
)

_EXCEPTION_MAP = {
    "ModuleNotFoundError": "ModuleNotFound",
    "NameError": "NameError",
    "ImportError": "ImportError",
    "AttributeError": "AttributeError",
    "TypeError": "TypeError",
    "SyntaxError": "SyntaxError",
    "IndentationError": "SyntaxError",
    "TabError": "SyntaxError",
    "FileNotFoundError": "FileNotFound",
    "TclError": "GUIInitError",
}

_GUI_PATTERNS = (
    "no display name and no $display",
    "couldn't connect to display",
    "cannot connect to x server",
    "no available video device",
)

_EXCEPTION_LINE_RE = re.compile(r"^([A-Za-z_][\w.]*(?:Error|Exception|Exit|Interrupt))\b.*:", re.ASCII)


@dataclass(frozen=True)
class ExecutionReport:
    entrypoint: str
    exit_code: int | None
    timed_out: bool
    stdout: str
    stderr: str
    wall_time: float
    alive_healthy: bool = False

    def to_dict(self) -> dict:
        return {
            "entrypoint": self.entrypoint,
            "exit_code": self.exit_code,
            "timed_out": self.timed_out,
            "stdout": self.stdout,
            "stderr": self.stderr,
            "wall_time": round(self.wall_time, 3),
            "alive_healthy": self.alive_healthy,
        }


@dataclass(frozen=True)
class FeedbackClass:
    label: str
    evidence: str


def select_entrypoint(workspace: Workspace, task_slug: str | None = None) -> str:
    """Pick the file to launch: main.<ext>, else the only source file, else
    the file named after the task slug."""
    source_files = sorted(
        name for name in workspace.files
        if name.rsplit(".", 1)[-1].lower() in SOURCE_EXTENSIONS
    )
    for name in source_files:
        stem = name.rsplit("/", 1)[-1]
        if stem.rsplit(".", 1)[0] == "main":
            return name
    if len(source_files) == 1:
        return source_files[0]
    if task_slug:
        for name in source_files:
            stem = name.rsplit("/", 1)[-1].rsplit(".", 1)[0]
            if stem == task_slug:
                return name
    raise EntrypointMissingError(
        f"no entrypoint found among {len(source_files)} source files"
    )


def _truncate(text: str, cap: int) -> str:
    if len(text) <= cap:
        return text
    return text[:cap] + TRUNCATION_SUFFIX


def _sandbox_env(root: Path) -> dict[str, str]:
    """Minimal child environment; user-writable locations stay inside root."""
    tmp = root / ".tmp"
    tmp.mkdir(exist_ok=True)
    env = {
        "HOME": str(tmp),
        "TMPDIR": str(tmp),
        "TEMP": str(tmp),
        "TMP": str(tmp),
        "PYTHONDONTWRITEBYTECODE": "1",
        "PYTHONIOENCODING": "utf-8",
    }
    for key in ("PATH", "LANG", "LC_ALL", "SYSTEMROOT"):
        value = os.environ.get(key)
        if value:
            env[key] = value
    return env


def execute(
    workspace: Workspace,
    entrypoint: str,
    timeout: float = DEFAULT_TIMEOUT,
    *,
    interpreter: list[str] | None = None,
    output_cap: int = DEFAULT_OUTPUT_CAP,
    grace: float = DEFAULT_GRACE,
    gui_heuristic: bool = False,
) -> ExecutionReport:
    """Run ``entrypoint`` inside the workspace with a hard timeout.

    With ``gui_heuristic`` set, a process still alive at the timeout with a
    clean stderr is treated as healthy interactive software rather than a
    hang. The whole process group is killed on timeout so grandchildren are
    reaped too.
    """
    if workspace.root is None:
        raise WorkspaceError("workspace has no on-disk root; cannot execute")
    root = Path(workspace.root)
    target = root / entrypoint
    if entrypoint not in workspace.files or not target.is_file():
        raise EntrypointMissingError(f"entrypoint {entrypoint!r} does not exist in the workspace")
    command = list(interpreter) if interpreter else [sys.executable]
    command.append(entrypoint)

    started = time.monotonic()
    try:
        process = subprocess.Popen(
            command,
            cwd=str(root),
            stdin=subprocess.DEVNULL,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            env=_sandbox_env(root),
            start_new_session=True,
            text=True,
        )
    except FileNotFoundError as exc:
        raise SandboxEnvironmentError(f"interpreter not found: {command[0]}") from exc

    timed_out = False
    try:
        stdout, stderr = process.communicate(timeout=timeout)
    except subprocess.TimeoutExpired:
        timed_out = True
        try:
            os.killpg(os.getpgid(process.pid), signal.SIGKILL)
        except (ProcessLookupError, PermissionError):
            process.kill()
        stdout, stderr = process.communicate()
    wall_time = time.monotonic() - started

    alive_healthy = bool(gui_heuristic and timed_out and not _has_traceback(stderr or ""))
    return ExecutionReport(
        entrypoint=entrypoint,
        exit_code=None if timed_out else process.returncode,
        timed_out=timed_out,
        stdout=_truncate(stdout or "", output_cap),
        stderr=_truncate(stderr or "", output_cap),
        wall_time=wall_time,
        alive_healthy=alive_healthy,
    )


def _has_traceback(stderr: str) -> bool:
    if "Traceback (most recent call last):" in stderr:
        return True
    last = _last_meaningful_line(stderr)
    return bool(last and _EXCEPTION_LINE_RE.match(last))


def _last_meaningful_line(stderr: str) -> str:
    for line in reversed(stderr.splitlines()):
        if line.strip() and not line.strip().startswith("[truncated]"):
            return line.strip()
    return ""


def classify_feedback(report: ExecutionReport) -> FeedbackClass:
    """Deterministic first-match classification of an execution report.

    Success requires exit status 0 and a stderr free of tracebacks; the GUI
    readiness rule upgrades a healthy still-running process to Success.
    Unknown diagnostics fall through to OtherError with evidence preserved.
    """
    if report.timed_out:
        if report.alive_healthy:
            return FeedbackClass("Success", "process alive and healthy at the readiness window")
        return FeedbackClass("Timeout", f"killed after {report.wall_time:.1f}s")
    stderr = report.stderr or ""
    if report.exit_code == 0 and not _has_traceback(stderr):
        return FeedbackClass("Success", "exit status 0, no traceback")
    last = _last_meaningful_line(stderr)
    lowered = stderr.lower()
    for pattern in _GUI_PATTERNS:
        if pattern in lowered:
            evidence = next(
                (l.strip() for l in stderr.splitlines() if pattern in l.lower()), last
            )
            return FeedbackClass("GUIInitError", evidence)
    match = _EXCEPTION_LINE_RE.match(last)
    if match:
        name = match.group(1).split(".")[-1]
        label = _EXCEPTION_MAP.get(name)
        if label:
            return FeedbackClass(label, last)
    return FeedbackClass("OtherError", last or f"exit status {report.exit_code}")


SUCCESS_INSTRUCTION = (
    "The software ran cleanly: exit status 0 with no error output. If the behavior matches the "
    "requirement, reply with <SOLUTION> and a one-line confirmation; otherwise state the single "
    "remaining problem."
)


def render_test_instruction(feedback: FeedbackClass, report: ExecutionReport) -> str:
    """Deterministic tester instruction built from one execution report."""
    if feedback.label == "Success":
        return SUCCESS_INSTRUCTION
    evidence = _truncate(feedback.evidence, 300)
    excerpt = _truncate(report.stderr or "(no error output)", INSTRUCTION_EXCERPT_CAP)
    return (
        f"Running {report.entrypoint} failed with {feedback.label}.\n"
        f"Evidence: {evidence}\n"
        f"Error output:\n{excerpt}\n"
        "Fix the code and resend every changed file in full."
    )


def persist_report(report: ExecutionReport, feedback: FeedbackClass, directory: Path, index: int) -> Path:
    """Write one execution report under ``<run>/tests/``."""
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"exec-{index:03d}.json"
    payload = report.to_dict()
    payload["label"] = feedback.label
    payload["evidence"] = feedback.evidence
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
