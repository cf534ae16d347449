"""Text-generation backends and prompt plumbing.

Candidate generation, category induction and error repair are all plain
conditional text-generation calls.  Two providers implement them: a
scripted one that replays a recorded transcript (bit-deterministic, used
by every test), and an HTTP one that talks to any OpenAI-compatible
chat-completions endpoint.

Transcript files are JSONL, one object per line:
    {"kind": str, "index": int, "response": str}
keyed by prompt kind and a per-kind monotone call index.
"""

from __future__ import annotations

import json
import os
import string
import threading
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import requests

API_KEY_ENV = "CDEOH_API_KEY"
BASE_URL_ENV = "CDEOH_BASE_URL"

DEFAULT_MAX_PROMPT_BYTES = 65536
TRUNCATION_MARKER = "...[truncated]"

GENERATION_TEMPERATURE_DEFAULT = 1.0
DETERMINISTIC_TEMPERATURE = 0.0  # category induction and reflection


class PromptKind(str, Enum):
    INITIALIZATION = "initialization"
    REFINEMENT = "refinement"
    INNOVATION = "innovation"
    CATEGORY_INDUCTION = "category-induction"
    REFLECTION = "reflection"


GENERATION_KINDS = (
    PromptKind.INITIALIZATION,
    PromptKind.REFINEMENT,
    PromptKind.INNOVATION,
    PromptKind.REFLECTION,
)

_NEEDS_PARENT = (PromptKind.REFINEMENT, PromptKind.INNOVATION,
                 PromptKind.CATEGORY_INDUCTION, PromptKind.REFLECTION)


class MissingContextError(ValueError):
    """PromptContext does not satisfy the invariants for the prompt kind."""


PROVIDER_ERROR_KINDS = (
    "transcript-miss", "network", "http-status", "rate-limited-exhausted", "malformed-response",
)


class ProviderError(Exception):
    def __init__(self, kind: str, message: str):
        assert kind in PROVIDER_ERROR_KINDS
        self.kind = kind
        super().__init__(f"provider error [{kind}]: {message}")


class ParseFailure(Exception):
    """Generation output missing the thought brace block or the code fence.

    Carries whichever part was extractable so repair prompts can still show
    the model its own partial output.
    """

    def __init__(self, kind: str, message: str,
                 thought: str | None = None, code: str | None = None):
        assert kind in ("missing-thought", "missing-code")
        self.kind = kind
        self.thought = thought
        self.code = code
        super().__init__(f"response parse failure [{kind}]: {message}")


@dataclass
class PromptContext:
    task_description: str
    dsl_grammar: str
    parent_thought: str | None = None
    parent_code: str | None = None
    error_message: str | None = None
    known_categories: tuple[str, ...] = ()
    seed: int = 0


@dataclass
class ProviderConfig:
    provider: str = "scripted"  # "scripted" | "http"
    base_url: str | None = None
    model: str | None = None
    temperature: float = GENERATION_TEMPERATURE_DEFAULT
    max_retries: int = 3
    transcript_path: str | None = None
    max_in_flight: int = 4
    max_prompt_bytes: int = DEFAULT_MAX_PROMPT_BYTES
    retry_backoff_s: float = 0.5

    def __post_init__(self):
        if self.provider not in ("scripted", "http"):
            raise ValueError(f"unknown provider {self.provider!r}")
        if self.provider == "scripted" and not self.transcript_path:
            raise ValueError("scripted provider requires transcript_path")
        if self.provider == "http":
            base = os.environ.get(BASE_URL_ENV) or self.base_url
            if not base or not self.model:
                raise ValueError("http provider requires base_url and model")
        if self.max_retries < 1:
            raise ValueError("max_retries must be >= 1")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")


# --------------------------------------------------------------------------
# Prompt templates
# --------------------------------------------------------------------------

_OUTPUT_FORMAT = """\
Answer with exactly two parts:
1. A one-or-two sentence design idea inside a single pair of braces, like
   {place each item where it leaves the least slack}.
2. The program in one fenced code block:
```
return -(cap_remaining - item)
```
No other braces or fences."""


def _header(kind: PromptKind, seed: int) -> str:
    return f"[prompt-kind: {kind.value}] [variation-seed: {seed}]"


def _parent_block(ctx: PromptContext) -> str:
    return (f"Current algorithm idea:\n{{{ctx.parent_thought}}}\n\n"
            f"Current algorithm code:\n```\n{ctx.parent_code}\n```")


def _render_once(kind: PromptKind, ctx: PromptContext) -> str:
    head = _header(kind, ctx.seed)
    common = (f"{head}\n\nTask:\n{ctx.task_description}\n\n"
              f"Write programs in this language only:\n{ctx.dsl_grammar}\n")
    if kind is PromptKind.INITIALIZATION:
        return (common
                + "\nDesign a brand-new priority function for this task. Aim for a sensible,"
                  "\nself-contained strategy rather than a trivial constant.\n\n"
                + _OUTPUT_FORMAT)
    if kind is PromptKind.REFINEMENT:
        return (common + "\n" + _parent_block(ctx)
                + "\n\nRefine this algorithm: keep the core idea, improve parameters and"
                  "\ndetails (weights, thresholds, tie handling).\n\n" + _OUTPUT_FORMAT)
    if kind is PromptKind.INNOVATION:
        return (common + "\n" + _parent_block(ctx)
                + "\n\nPropose a fundamentally different idea and new code: change the"
                  "\nalgorithmic strategy, not just its constants.\n\n" + _OUTPUT_FORMAT)
    if kind is PromptKind.REFLECTION:
        return (common + "\n" + _parent_block(ctx)
                + "\n\nRunning this program failed with the error:\n"
                + f"{ctx.error_message}\n\n"
                  "Repair the program so it runs, keeping the idea as intact as possible.\n\n"
                + _OUTPUT_FORMAT)
    # category induction
    known = "\n".join(f"  - {c}" for c in ctx.known_categories) or "  (none yet)"
    return (common + "\n" + _parent_block(ctx)
            + "\n\nName the algorithmic paradigm this algorithm belongs to"
              " (examples of paradigms: greedy, dynamic programming, randomized).\n"
              "Known categories so far:\n" + known
            + "\nReuse an existing label when applicable, else coin a new 1-4 word label.\n"
              "Answer with the label on a single line and nothing else.")


def _check_context(kind: PromptKind, ctx: PromptContext) -> None:
    if kind in _NEEDS_PARENT and (ctx.parent_thought is None or ctx.parent_code is None):
        raise MissingContextError(f"{kind.value} prompt requires parent_thought and parent_code")
    if kind is PromptKind.REFLECTION and ctx.error_message is None:
        raise MissingContextError("reflection prompt requires error_message")


def render_prompt(kind: PromptKind, ctx: PromptContext,
                  max_bytes: int = DEFAULT_MAX_PROMPT_BYTES) -> str:
    """Deterministic prompt text for `kind`; never exceeds `max_bytes`."""
    kind = PromptKind(kind)
    _check_context(kind, ctx)
    text = _render_once(kind, ctx)
    over = len(text.encode("utf-8")) - max_bytes
    if over > 0 and ctx.parent_code:
        # Drop the tail of the parent code first, marking the cut.
        keep = max(0, len(ctx.parent_code.encode("utf-8")) - over - len(TRUNCATION_MARKER))
        cut_code = ctx.parent_code.encode("utf-8")[:keep].decode("utf-8", errors="ignore")
        ctx2 = PromptContext(**{**ctx.__dict__, "parent_code": cut_code + TRUNCATION_MARKER})
        text = _render_once(kind, ctx2)
    raw = text.encode("utf-8")
    if len(raw) > max_bytes:
        marker = TRUNCATION_MARKER.encode("utf-8")
        text = raw[:max_bytes - len(marker)].decode("utf-8", errors="ignore") + TRUNCATION_MARKER
    return text


def prompt_kind_of(prompt: str) -> PromptKind:
    """Recover the kind tag embedded in a rendered prompt's header."""
    first = prompt.split("\n", 1)[0]
    if first.startswith("[prompt-kind: "):
        tag = first[len("[prompt-kind: "):].split("]", 1)[0]
        try:
            return PromptKind(tag)
        except ValueError:
            pass
    raise ValueError("prompt does not carry a kind tag header")


# --------------------------------------------------------------------------
# Response parsing
# --------------------------------------------------------------------------

def parse_generation(raw: str) -> tuple[str, str]:
    """Extract (thought, code): first balanced {...} span, first fenced block."""
    thought = _first_brace_span(raw)
    code = _first_fenced_block(raw)
    if thought is None:
        raise ParseFailure("missing-thought", "no balanced {...} block found in the response",
                           code=code.strip() if code else None)
    if code is None:
        raise ParseFailure("missing-code", "no ``` fenced code block found in the response",
                           thought=thought.strip())
    return thought.strip(), code.strip()


def _first_brace_span(text: str) -> str | None:
    start = text.find("{")
    if start < 0:
        return None
    depth = 0
    for i in range(start, len(text)):
        if text[i] == "{":
            depth += 1
        elif text[i] == "}":
            depth -= 1
            if depth == 0:
                return text[start + 1:i]
    return None


def _first_fenced_block(text: str) -> str | None:
    open_at = text.find("```")
    if open_at < 0:
        return None
    body_start = text.find("\n", open_at)
    if body_start < 0:
        return None
    close_at = text.find("```", body_start)
    if close_at < 0:
        return None
    return text[body_start + 1:close_at]


def wrap_generation(thought: str, code: str) -> str:
    """Inverse of parse_generation for well-formed inputs; used by fixtures."""
    return f"{{{thought}}}\n```\n{code}\n```"


_PUNCT_WS = string.punctuation + string.whitespace


def canonical_label(text: str) -> str:
    """First nonempty line, lowercased, whitespace-collapsed, trimmed, <= 48 chars."""
    line = ""
    for cand in text.splitlines():
        if cand.strip():
            line = cand
            break
    label = " ".join(line.lower().split()).strip(_PUNCT_WS)
    if len(label) > 48:
        label = label[:48].strip(_PUNCT_WS)
    return label or "uncategorized"


# --------------------------------------------------------------------------
# Providers
# --------------------------------------------------------------------------

class ScriptedProvider:
    """Replays a transcript keyed by (kind, per-kind monotone call index)."""

    def __init__(self, transcript_path: str | Path,
                 config: ProviderConfig | None = None):
        self.config = config or ProviderConfig(provider="scripted", transcript_path=str(transcript_path))
        self._entries: dict[tuple[str, int], str] = {}
        self._counters: dict[str, int] = {}
        self._lock = threading.Lock()
        path = Path(transcript_path)
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            key = (str(obj["kind"]), int(obj["index"]))
            if key in self._entries:
                raise ValueError(f"{path}:{lineno}: duplicate transcript key {key}")
            self._entries[key] = str(obj["response"])

    def calls_made(self, kind: str | PromptKind) -> int:
        kind = PromptKind(kind).value
        with self._lock:
            return self._counters.get(kind, 0)

    def complete(self, prompt: str, seed: int = 0, temperature: float | None = None) -> str:
        kind = prompt_kind_of(prompt).value
        with self._lock:
            index = self._counters.get(kind, 0)
            self._counters[kind] = index + 1
        try:
            return self._entries[(kind, index)]
        except KeyError:
            raise ProviderError(
                "transcript-miss",
                f"no transcript entry for kind={kind!r} index={index}") from None


def write_transcript(path: str | Path, entries) -> None:
    """Write (kind, index, response) triples as a transcript file."""
    lines = []
    for kind, index, response in entries:
        kind = PromptKind(kind).value if not isinstance(kind, str) else kind
        lines.append(json.dumps({"kind": kind, "index": index, "response": response}))
    Path(path).write_text("\n".join(lines) + "\n")


class HttpProvider:
    """OpenAI-compatible chat-completions client with retry and backoff."""

    def __init__(self, config: ProviderConfig):
        if config.provider != "http":
            raise ValueError("HttpProvider requires provider='http'")
        self.config = config
        self.base_url = (os.environ.get(BASE_URL_ENV) or config.base_url).rstrip("/")
        self.api_key = os.environ.get(API_KEY_ENV)
        if not self.api_key:
            raise ValueError(f"{API_KEY_ENV} is not set (the key is never read from config files)")
        self._slots = threading.Semaphore(config.max_in_flight)
        self._gate_lock = threading.Lock()
        self._not_before = 0.0  # shared rate-limit gate

    def _wait_for_gate(self) -> None:
        with self._gate_lock:
            delay = self._not_before - time.monotonic()
        if delay > 0:
            time.sleep(delay)

    def _push_gate(self, seconds: float) -> None:
        with self._gate_lock:
            self._not_before = max(self._not_before, time.monotonic() + seconds)

    def complete(self, prompt: str, seed: int = 0, temperature: float | None = None) -> str:
        temp = self.config.temperature if temperature is None else temperature
        body = {
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": temp,
        }
        headers = {"Authorization": f"Bearer {self.api_key}"}
        url = f"{self.base_url}/chat/completions"
        backoff = self.config.retry_backoff_s
        last: ProviderError | None = None
        for attempt in range(self.config.max_retries):
            self._wait_for_gate()
            with self._slots:
                try:
                    resp = requests.post(url, json=body, headers=headers, timeout=120)
                except requests.RequestException as e:
                    last = ProviderError("network", f"attempt {attempt + 1}: {e}")
                    time.sleep(backoff)
                    backoff *= 2
                    continue
            if resp.status_code == 429:
                self._push_gate(backoff)
                last = ProviderError("rate-limited-exhausted",
                                     f"attempt {attempt + 1}: rate limited (429)")
                backoff *= 2
                continue
            if resp.status_code >= 500:
                last = ProviderError("http-status",
                                     f"attempt {attempt + 1}: server returned {resp.status_code}")
                time.sleep(backoff)
                backoff *= 2
                continue
            if resp.status_code != 200:
                raise ProviderError("http-status", f"server returned {resp.status_code}: {resp.text[:200]}")
            try:
                content = resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as e:
                raise ProviderError("malformed-response", f"cannot read completion: {e}") from e
            if not isinstance(content, str):
                raise ProviderError("malformed-response", "message content is not text")
            return content
        assert last is not None
        raise last


Provider = ScriptedProvider | HttpProvider


def make_provider(config: ProviderConfig) -> Provider:
    if config.provider == "scripted":
        return ScriptedProvider(config.transcript_path, config)
    return HttpProvider(config)


# --------------------------------------------------------------------------
# High-level calls
# --------------------------------------------------------------------------

def generate(provider: Provider, kind: PromptKind, ctx: PromptContext) -> tuple[str, str]:
    """Render a candidate-producing prompt, complete it, parse thought+code."""
    assert kind in (PromptKind.INITIALIZATION, PromptKind.REFINEMENT, PromptKind.INNOVATION)
    prompt = render_prompt(kind, ctx, provider.config.max_prompt_bytes)
    raw = provider.complete(prompt, seed=ctx.seed, temperature=provider.config.temperature)
    return parse_generation(raw)


def induce_category(provider: Provider, ctx: PromptContext) -> str:
    """Ask for an algorithm-paradigm label and canonicalize it."""
    prompt = render_prompt(PromptKind.CATEGORY_INDUCTION, ctx, provider.config.max_prompt_bytes)
    raw = provider.complete(prompt, seed=ctx.seed, temperature=DETERMINISTIC_TEMPERATURE)
    return canonical_label(raw)


def reflect(provider: Provider, ctx: PromptContext) -> tuple[str, str]:
    """One repair attempt conditioned on the failing code and its error."""
    prompt = render_prompt(PromptKind.REFLECTION, ctx, provider.config.max_prompt_bytes)
    raw = provider.complete(prompt, seed=ctx.seed, temperature=DETERMINISTIC_TEMPERATURE)
    return parse_generation(raw)
