"""Pluggable text-completion clients.

Two implementations: a deterministic rule-based mock that rewrites prompts
extractively (the offline default, a pure function of its inputs), and a
chat-completions HTTP client for live use. Library code only depends on the
``complete`` call.
"""

from __future__ import annotations

import json
import os
import time
import urllib.error
import urllib.request
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Protocol

from semvox.corpus import MASK_TOKEN, tokenize

API_KEY_ENV = "C2B_LLM_API_KEY"

# Prompt section labels. Shared between the prompt builders and the mock so
# the mock can parse prompts it is handed.
QUERY_LABEL = "Query:"
TITLE_LABEL = "Title:"
SAMPLES_LABEL = "Similar samples:"
POSITIVE_LABEL = "Positive examples:"
NEGATIVE_LABEL = "Negative examples:"


class LlmError(RuntimeError):
    """Transport or protocol failure talking to a completion backend."""


class LlmClient(Protocol):
    name: str
    deterministic: bool

    def complete(
        self,
        prompt: str,
        *,
        max_tokens: int = 256,
        temperature: float = 0.0,
        seed: int | None = None,
    ) -> str: ...


def _dedup(tokens) -> list[str]:
    seen = set()
    out = []
    for t in tokens:
        if t not in seen:
            seen.add(t)
            out.append(t)
    return out


def _top_by_count(counter: Counter, m: int) -> list[str]:
    # Highest count first, ties by ascending token.
    ranked = sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))
    return [t for t, _ in ranked[:m]]


def _section_items(lines: list[str], label: str) -> list[str]:
    """Bullet items under a labeled section ('- item' lines after the label)."""
    items = []
    try:
        start = lines.index(label)
    except ValueError:
        return items
    for line in lines[start + 1 :]:
        if line.startswith("- "):
            items.append(line[2:])
        else:
            break
    return items


def _labeled_value(lines: list[str], label: str) -> str | None:
    for line in lines:
        if line.startswith(label):
            return line[len(label) :].strip()
    return None


@dataclass(frozen=True)
class MockLlmClient:
    """Deterministic extractive rewriter; a pure function of the prompt.

    It recognizes the two prompt shapes this package produces. Augmentation
    prompts carry a ``Title:`` line plus a kind-specific instruction; the mock
    rewrites the title by reordering, templated expansion, or keyword
    extraction. Refinement prompts carry ``Query:`` and ``Similar samples:``
    sections; the mock answers with the query's surviving keywords plus the
    most frequent retrieved-sample tokens. Anything else is summarized by its
    first distinct tokens.
    """

    name: str = "mock-v1"
    deterministic: bool = True

    def complete(
        self,
        prompt: str,
        *,
        max_tokens: int = 256,
        temperature: float = 0.0,
        seed: int | None = None,
    ) -> str:
        lines = prompt.splitlines()
        title = _labeled_value(lines, TITLE_LABEL)
        if title is not None:
            return self._augment(prompt, title)
        query = _labeled_value(lines, QUERY_LABEL)
        if query is not None:
            return self._refine(lines, query)
        return " ".join(_dedup(tokenize(prompt))[:12]) or "empty"

    def _augment(self, prompt: str, title: str) -> str:
        tokens = tokenize(title)
        if not tokens:
            return "untitled study"
        if "differs substantially" in prompt:
            # Major synonym: reverse word order, same bag of words.
            return " ".join(reversed(tokens))
        if "minimal wording changes" in prompt:
            # Minor synonym: rotate the first word to the end.
            return " ".join(tokens[1:] + tokens[:1]) if len(tokens) > 1 else tokens[0]
        if "plausible abstract" in prompt:
            joined = " ".join(tokens)
            return (
                f"this study examines {joined}. "
                f"we report activation patterns associated with {joined} "
                "in a functional imaging cohort."
            )
        if "experimental design" in prompt:
            joined = " ".join(tokens)
            return (
                f"participants performed a task probing {joined} "
                "while whole brain activity was recorded in "
                "alternating task and rest blocks."
            )
        if "informative keywords" in prompt:
            return ", ".join(_top_by_count(Counter(tokens), 5))
        return " ".join(tokens)

    def _refine(self, lines: list[str], query: str) -> str:
        surviving = [t for t in _dedup(tokenize(query)) if t != MASK_TOKEN]
        sample_counts: Counter = Counter()
        for item in _section_items(lines, SAMPLES_LABEL):
            sample_counts.update(tokenize(item))
        n_pos = len(_section_items(lines, POSITIVE_LABEL))
        n_neg = len(_section_items(lines, NEGATIVE_LABEL))
        # Feedback narrows or widens how much retrieved vocabulary is pulled in.
        m = max(2, 6 + n_pos - 2 * n_neg)
        keywords = _top_by_count(sample_counts, m)
        out = _dedup(surviving + keywords)
        return " ".join(out) or "empty query"


def _default_transport(url: str, payload: dict, headers: dict, timeout: float) -> dict:
    body = json.dumps(payload).encode("utf-8")
    req = urllib.request.Request(url, data=body, headers=headers, method="POST")
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return json.loads(resp.read().decode("utf-8"))
    except (urllib.error.URLError, urllib.error.HTTPError, TimeoutError, OSError) as exc:
        raise LlmError(f"chat-completions request failed: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise LlmError(f"chat-completions response is not JSON: {exc}") from exc


@dataclass
class HttpLlmClient:
    """JSON chat-completions client (OpenAI-style wire format).

    Credential comes from the C2B_LLM_API_KEY environment variable unless
    given explicitly. The transport is injectable for tests.
    """

    base_url: str = "https://api.openai.com/v1"
    model: str = "gpt-3.5-turbo"
    api_key: str | None = None
    timeout_s: float = 30.0
    max_retries: int = 2
    retry_wait_s: float = 1.0
    # Fixed preamble; temperature 0 favors reproducibility.
    system_preamble: str = (
        "You assist with indexing neuroscience studies. "
        "Answer with the requested text only, no commentary."
    )
    transport: Callable[[str, dict, dict, float], dict] = field(default=_default_transport)
    name: str = "http"
    deterministic: bool = False

    def complete(
        self,
        prompt: str,
        *,
        max_tokens: int = 256,
        temperature: float = 0.0,
        seed: int | None = None,
    ) -> str:
        key = self.api_key or os.environ.get(API_KEY_ENV)
        if not key:
            raise LlmError(f"no API key: set {API_KEY_ENV} or pass api_key")
        payload = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": self.system_preamble},
                {"role": "user", "content": prompt},
            ],
            "temperature": temperature,
            "max_tokens": max_tokens,
        }
        if seed is not None:
            payload["seed"] = seed
        headers = {
            "Content-Type": "application/json",
            "Authorization": f"Bearer {key}",
        }
        url = self.base_url.rstrip("/") + "/chat/completions"
        last_error: LlmError | None = None
        for attempt in range(self.max_retries + 1):
            try:
                resp = self.transport(url, payload, headers, self.timeout_s)
                try:
                    text = resp["choices"][0]["message"]["content"]
                except (KeyError, IndexError, TypeError) as exc:
                    raise LlmError(f"malformed chat-completions response: {resp!r}") from exc
                return str(text)
            except LlmError as exc:
                last_error = exc
                if attempt < self.max_retries and self.retry_wait_s > 0:
                    time.sleep(self.retry_wait_s * (attempt + 1))
        assert last_error is not None
        raise last_error


def make_client(kind: str, **kwargs) -> LlmClient:
    if kind == "mock":
        return MockLlmClient()
    if kind == "http":
        return HttpLlmClient(**kwargs)
    raise ValueError(f"unknown client kind {kind!r} (expected 'mock' or 'http')")
