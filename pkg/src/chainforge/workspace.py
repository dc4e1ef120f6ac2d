"""File-backed snapshot of the software under construction.

Agent responses carry code as fenced blocks, each preceded by a file-name
line; this module turns those responses into files, digests every snapshot
so "nothing changed" is detectable, and provides the static scans the
evaluator needs (placeholders, comment stripping, file/line counts).
"""

from __future__ import annotations

import ast
import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath

from .errors import CodeParseError, WorkspaceError

logger = logging.getLogger(__name__)

# File types that count as source code, both for file-name detection in chat
# responses and for the #Files / #Lines statistics.
SOURCE_EXTENSIONS = {
    "py", "js", "ts", "jsx", "tsx", "java", "c", "cc", "cpp", "h", "hpp",
    "cs", "go", "rs", "rb", "php", "sh", "html", "css", "sql", "json",
    "xml", "yaml", "yml",
}

# Language tag -> extension, for synthesizing a name for an unnamed block.
LANGUAGE_EXTENSIONS = {
    "python": "py", "py": "py", "python3": "py",
    "javascript": "js", "js": "js", "node": "js",
    "typescript": "ts", "ts": "ts",
    "java": "java", "c": "c", "cpp": "cpp", "c++": "cpp",
    "csharp": "cs", "cs": "cs", "go": "go", "golang": "go",
    "rust": "rs", "ruby": "rb", "php": "php",
    "bash": "sh", "sh": "sh", "shell": "sh",
    "html": "html", "css": "css", "sql": "sql", "json": "json",
    "xml": "xml", "yaml": "yml", "yml": "yml",
}

# Digest of a workspace with zero files (sha256 of the empty byte string).
EMPTY_DIGEST = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"

_FENCE_RE = re.compile(r"^```(\S*)\s*$")
_NAME_TOKEN_RE = re.compile(r"[\w./+-]+\.\w+")


@dataclass(frozen=True)
class CodeBlock:
    """One file extracted from a chat response."""

    file_name: str
    language: str
    body: str


@dataclass(frozen=True)
class PlaceholderFinding:
    file_name: str
    line: int
    pattern: str


@dataclass
class Workspace:
    """Named-file snapshot with a content-digest history.

    ``root`` may be None for purely in-memory protocol tests; a real root is
    required before anything is executed in the sandbox. Files are written
    through to disk on every apply so the sandbox always sees the current
    snapshot.
    """

    root: Path | None = None
    files: dict[str, str] = field(default_factory=dict)
    digest_history: list[str] = field(default_factory=list)

    @classmethod
    def load(cls, root: Path) -> "Workspace":
        """Rebuild the file map from an existing on-disk workspace."""
        root = Path(root)
        files: dict[str, str] = {}
        if root.is_dir():
            for path in sorted(root.rglob("*")):
                if path.is_file() and not path.name.startswith("."):
                    rel = path.relative_to(root).as_posix()
                    if rel.split("/", 1)[0] == ".tmp":
                        continue
                    files[rel] = path.read_text(encoding="utf-8")
        return cls(root=root, files=files)

    def serialize(self) -> str:
        """Render the snapshot in the same fenced format agents use.

        The output parses back into one CodeBlock per file, which is what
        makes a code Solution self-describing.
        """
        parts = []
        for name in sorted(self.files):
            ext = name.rsplit(".", 1)[-1].lower()
            tag = next((t for t, e in LANGUAGE_EXTENSIONS.items() if e == ext), ext)
            body = self.files[name]
            if not body.endswith("\n"):
                body += "\n"
            parts.append(f"{name}\n```{tag}\n{body}```")
        return "\n\n".join(parts) + ("\n" if parts else "")

    def manifest(self) -> list[dict]:
        """Per-file (name, size, digest) records."""
        return [
            {
                "name": name,
                "size": len(content.encode("utf-8")),
                "digest": hashlib.sha256(content.encode("utf-8")).hexdigest(),
            }
            for name, content in sorted(self.files.items())
        ]

    def write_manifest(self, path: Path) -> None:
        path.write_text(json.dumps(self.manifest(), indent=2) + "\n", encoding="utf-8")

    def _write_through(self, name: str, content: str) -> None:
        if self.root is None:
            return
        target = Path(self.root) / name
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(content, encoding="utf-8")


def is_safe_relative_path(name: str) -> bool:
    """Reject absolute paths, parent traversal, and empty names."""
    if not name or name != name.strip():
        return False
    pure = PurePosixPath(name)
    if pure.is_absolute() or name.startswith("\\") or re.match(r"^[A-Za-z]:", name):
        return False
    return all(part not in ("..", "") for part in pure.parts)


def _candidate_file_name(line: str) -> str | None:
    """Pull a source file name out of a prose line, if one is there.

    Accepts plain names ("main.py"), decorated ones ("## File: `main.py`"),
    and list items; the last extension-bearing token on the line wins.
    """
    cleaned = line.strip().strip("*_#>-").strip()
    cleaned = cleaned.replace("`", "").replace('"', "").replace("'", "")
    cleaned = cleaned.rstrip(":").strip()
    tokens = _NAME_TOKEN_RE.findall(cleaned)
    for token in reversed(tokens):
        ext = token.rsplit(".", 1)[-1].lower()
        if ext in SOURCE_EXTENSIONS:
            if not is_safe_relative_path(token):
                raise WorkspaceError(f"unsafe file path in response: {token!r}")
            return token
    return None


def parse_code_blocks(response: str) -> list[CodeBlock]:
    """Extract fenced code blocks and their file names from a response.

    A block's file name comes from a name line within the two lines above
    its opening fence. The first unnamed block falls back to a synthetic
    ``main.<ext>`` derived from its language tag; later unnamed blocks are
    dropped. Raises CodeParseError on an unterminated fence.
    """
    lines = response.split("\n")
    blocks: list[CodeBlock] = []
    used_synthetic = False
    i = 0
    while i < len(lines):
        match = _FENCE_RE.match(lines[i])
        if not match:
            i += 1
            continue
        language = match.group(1).lower()
        name = None
        for back in (1, 2):
            if i - back >= 0:
                name = _candidate_file_name(lines[i - back])
                if name:
                    break
        # find closing fence
        j = i + 1
        while j < len(lines) and not lines[j].rstrip() == "```":
            j += 1
        if j >= len(lines):
            raise CodeParseError(
                "unterminated code fence: a ``` block was opened but never closed"
            )
        body_lines = lines[i + 1 : j]
        body = "\n".join(body_lines)
        if body.strip():
            if not body.endswith("\n"):
                body += "\n"
            if name is None:
                ext = LANGUAGE_EXTENSIONS.get(language)
                if ext and not used_synthetic:
                    name = f"main.{ext}"
                    used_synthetic = True
            if name is not None:
                if not is_safe_relative_path(name):
                    raise WorkspaceError(f"unsafe file path in response: {name!r}")
                blocks.append(CodeBlock(file_name=name, language=language, body=body))
        i = j + 1
    return blocks


def snapshot_digest(workspace: Workspace) -> str:
    """Content digest over sorted (name, content) pairs.

    Timestamp- and order-independent; an empty workspace digests to
    EMPTY_DIGEST.
    """
    h = hashlib.sha256()
    for name in sorted(workspace.files):
        h.update(name.encode("utf-8"))
        h.update(b"\x00")
        h.update(workspace.files[name].encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


def apply_response(workspace: Workspace, blocks: list[CodeBlock]) -> bool:
    """Overwrite/create each block's file; append the new snapshot digest.

    Returns True when the snapshot differs from the previous one. Files not
    mentioned by any block are preserved.
    """
    previous = workspace.digest_history[-1] if workspace.digest_history else snapshot_digest(workspace)
    for block in blocks:
        if not is_safe_relative_path(block.file_name):
            raise WorkspaceError(f"unsafe file path: {block.file_name!r}")
        workspace.files[block.file_name] = block.body
        workspace._write_through(block.file_name, block.body)
    digest = snapshot_digest(workspace)
    workspace.digest_history.append(digest)
    return digest != previous


# --- placeholder scan -------------------------------------------------------

PLACEHOLDER_PATTERNS = [
    ("todo", re.compile(r"\btodo\b", re.IGNORECASE)),
    ("fixme", re.compile(r"\bfixme\b", re.IGNORECASE)),
    ("placeholder", re.compile(r"placeholder", re.IGNORECASE)),
    ("your-code-here", re.compile(r"your\s+code\s+here", re.IGNORECASE)),
    ("not-implemented", re.compile(r"not\s+implemented", re.IGNORECASE)),
]


def _python_stub_findings(name: str, source: str) -> list[PlaceholderFinding]:
    """Functions whose whole body is ``pass`` or ``...`` (docstring aside)."""
    findings = []
    try:
        tree = ast.parse(source)
    except SyntaxError:
        return []
    for node in ast.walk(tree):
        if not isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef)):
            continue
        body = list(node.body)
        if body and isinstance(body[0], ast.Expr) and isinstance(body[0].value, ast.Constant) \
                and isinstance(body[0].value.value, str):
            body = body[1:]
        if len(body) != 1:
            continue
        stmt = body[0]
        if isinstance(stmt, ast.Pass):
            findings.append(PlaceholderFinding(name, stmt.lineno, "pass-only-body"))
        elif isinstance(stmt, ast.Expr) and isinstance(stmt.value, ast.Constant) \
                and stmt.value.value is Ellipsis:
            findings.append(PlaceholderFinding(name, stmt.lineno, "ellipsis-body"))
    return findings


def scan_placeholders(workspace: Workspace) -> list[PlaceholderFinding]:
    """Find placeholder snippets in every recognized source file.

    One finding per line at most (first matching text pattern wins); Python
    files additionally get stub-body detection via the ast module. Sorted by
    (file, line).
    """
    findings: list[PlaceholderFinding] = []
    for name in sorted(workspace.files):
        ext = name.rsplit(".", 1)[-1].lower()
        if ext not in SOURCE_EXTENSIONS:
            continue
        content = workspace.files[name]
        flagged_lines = set()
        for lineno, line in enumerate(content.split("\n"), 1):
            for label, pattern in PLACEHOLDER_PATTERNS:
                if pattern.search(line):
                    findings.append(PlaceholderFinding(name, lineno, label))
                    flagged_lines.add(lineno)
                    break
        if ext == "py":
            for finding in _python_stub_findings(name, content):
                if finding.line not in flagged_lines:
                    findings.append(finding)
    return sorted(findings, key=lambda f: (f.file_name, f.line))


# --- comment stripping ------------------------------------------------------

HASH_COMMENT_LANGUAGES = {"python", "py", "python3", "sh", "bash", "shell", "ruby", "rb", "yaml", "yml"}
SLASH_COMMENT_LANGUAGES = {
    "javascript", "js", "typescript", "ts", "java", "c", "cpp", "c++",
    "csharp", "cs", "go", "golang", "rust", "rs", "php",
}
SUPPORTED_COMMENT_LANGUAGES = HASH_COMMENT_LANGUAGES | SLASH_COMMENT_LANGUAGES | {"css", "html"}


def _strip_hash_comments(source: str) -> str:
    """Remove ``#`` comments, honoring single/double/triple-quoted strings."""
    out = []
    i = 0
    n = len(source)
    quote: str | None = None
    line_start = 0  # index in `out` where the current line began
    modified = False

    def _end_line():
        nonlocal line_start, modified
        if modified:
            # trim trailing spaces the comment removal left behind
            while len(out) > line_start and out[-1] in (" ", "\t"):
                out.pop()
        modified = False

    while i < n:
        ch = source[i]
        if quote:
            out.append(ch)
            if ch == "\\" and i + 1 < n:
                out.append(source[i + 1])
                i += 2
                continue
            if source.startswith(quote, i):
                # may be longer than one char (triple quotes)
                out.extend(quote[1:])
                i += len(quote)
                quote = None
                continue
            if ch == "\n":
                line_start = len(out)
            i += 1
            continue
        if ch in ("'", '"'):
            triple = source[i : i + 3]
            if triple in ("'''", '"""'):
                quote = triple
                out.append(triple)
                i += 3
            else:
                quote = ch
                out.append(ch)
                i += 1
            continue
        if ch == "#":
            while i < n and source[i] != "\n":
                i += 1
            modified = True
            continue
        if ch == "\n":
            _end_line()
            out.append(ch)
            line_start = len(out)
        else:
            out.append(ch)
        i += 1
    _end_line()
    return "".join(out)


def _strip_slash_comments(source: str, block_only: bool = False) -> str:
    """Remove ``//`` and ``/* */`` comments outside string literals.

    Newlines inside block comments are preserved so statement line numbers
    survive the transform.
    """
    out = []
    i = 0
    n = len(source)
    quote: str | None = None
    line_start = 0
    modified = False

    def _end_line():
        nonlocal modified
        if modified:
            while len(out) > line_start and out[-1] in (" ", "\t"):
                out.pop()
        modified = False

    while i < n:
        ch = source[i]
        if quote:
            out.append(ch)
            if ch == "\\" and i + 1 < n:
                out.append(source[i + 1])
                i += 2
                continue
            if ch == quote:
                quote = None
            if ch == "\n":
                line_start = len(out)
            i += 1
            continue
        if ch in ("'", '"', "`"):
            quote = ch
            out.append(ch)
            i += 1
            continue
        if not block_only and source.startswith("//", i):
            while i < n and source[i] != "\n":
                i += 1
            modified = True
            continue
        if source.startswith("/*", i):
            i += 2
            modified = True
            while i < n and not source.startswith("*/", i):
                if source[i] == "\n":
                    _end_line()
                    out.append("\n")
                    line_start = len(out)
                    modified = True
                i += 1
            i += 2 if i < n else 0
            continue
        if ch == "\n":
            _end_line()
            out.append(ch)
            line_start = len(out)
        else:
            out.append(ch)
        i += 1
    _end_line()
    return "".join(out)


def _strip_html_comments(source: str) -> str:
    return re.sub(r"<!--.*?-->", lambda m: "\n" * m.group(0).count("\n"), source, flags=re.DOTALL)


def strip_comments(source: str, language: str) -> str:
    """Remove comments while preserving string literals and line structure.

    Unsupported languages come back unchanged (with a logged warning) so the
    consistency metric degrades gracefully instead of corrupting input.
    """
    tag = language.lower()
    if tag in HASH_COMMENT_LANGUAGES:
        return _strip_hash_comments(source)
    if tag in SLASH_COMMENT_LANGUAGES:
        return _strip_slash_comments(source)
    if tag == "css":
        return _strip_slash_comments(source, block_only=True)
    if tag == "html":
        return _strip_html_comments(source)
    logger.warning("strip_comments: unsupported language tag %r, returning input unchanged", language)
    return source


def count_stats(workspace: Workspace) -> tuple[int, int]:
    """(file count, total line count) over recognized source files.

    Lines are newline-delimited records, blanks included; a trailing newline
    does not add an empty record.
    """
    file_count = 0
    line_count = 0
    for name, content in workspace.files.items():
        ext = name.rsplit(".", 1)[-1].lower()
        if ext not in SOURCE_EXTENSIONS:
            continue
        file_count += 1
        if content:
            line_count += content.count("\n")
            if not content.endswith("\n"):
                line_count += 1
    return file_count, line_count
