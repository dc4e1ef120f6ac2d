"""chainforge: a chat-chain engine for dual-agent LLM software development.

Agents work a task through sequential phases and subtasks (design, coding,
testing), talking in bounded instructor/assistant dialogues with an optional
clarification inner loop. The engine is backend-agnostic: point it at any
chat-completions endpoint, or replay a scripted transcript fully offline.
"""

from .agents import (
    Agent,
    InceptionPrompts,
    RoleSpec,
    instantiate_agent,
    render_inception_prompts,
)
from .chain import (
    AblationFlags,
    ChatChain,
    GenerationParams,
    LongTermMemory,
    MemoryEntry,
    Phase,
    Subtask,
    load_chain_config,
    load_default_chain,
    seed_phase_instruction,
)
from .dialogue import (
    DialogueState,
    Solution,
    TerminationDecision,
    Utterance,
    classify_utterance_language,
    detect_termination,
    extract_solution,
    run_subtask_dialogue,
    update_memory,
)
from .errors import (
    BackendError,
    ChainforgeError,
    CodeParseError,
    ConfigError,
    EntrypointMissingError,
    ExtractionError,
    MemoryLimitError,
    RenderError,
    SandboxEnvironmentError,
    ScriptExhaustedError,
    UsageError,
    WorkspaceError,
)
from .evaluator import (
    EvalReport,
    TaskEval,
    TaskPrompt,
    completeness,
    consistency,
    evaluate_batch,
    executability,
    load_task_prompts,
    quality,
    review_category,
)
from .gateway import (
    ChatRequest,
    ChatResult,
    EmbeddingResult,
    HashingEmbedder,
    HttpBackend,
    ScriptedBackend,
    TokenLedger,
    complete_chat,
    count_tokens,
    embed_text,
    load_script,
)
from .runner import ChainResult, RunStats, run_chain
from .sandbox import (
    ExecutionReport,
    FeedbackClass,
    classify_feedback,
    execute,
    render_test_instruction,
    select_entrypoint,
)
from .stub_server import StubServer
from .transcript import LogicalClock, TranscriptRecord, TranscriptWriter, WallClock, read_transcript
from .workspace import (
    CodeBlock,
    PlaceholderFinding,
    Workspace,
    apply_response,
    count_stats,
    parse_code_blocks,
    scan_placeholders,
    snapshot_digest,
    strip_comments,
)

__version__ = "0.1.0"
