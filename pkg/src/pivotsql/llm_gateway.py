"""Chat-completion access with live, record, and replay modes.

The wire protocol is OpenAI-compatible chat completions. Every call is keyed
by a content hash over (model, temperature, max_tokens, sample_index, system,
user); record mode persists one JSON line per completion under that key and
replay mode serves calls from the store without touching the network, which
makes whole pipeline runs reproducible bit for bit.
"""
from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .prompt_forge import PromptText

DEFAULT_MAX_TOKENS = 4096
DEFAULT_TEMPERATURE = 0.0
DEFAULT_TIMEOUT_S = 120.0
DEFAULT_RETRIES = 3


class GatewayError(Exception):
    pass


class FixtureMissError(GatewayError):
    """Replay mode was asked for a prompt that was never recorded."""


class ProviderError(GatewayError):
    """The upstream provider answered with an error status."""


@dataclass
class ProviderConfig:
    endpoint: str = ""
    model_name: str = "stub-model"
    temperature: float = DEFAULT_TEMPERATURE
    max_tokens: int = DEFAULT_MAX_TOKENS
    timeout: float = DEFAULT_TIMEOUT_S
    api_key_env: str = "PIVOTSQL_API_KEY"
    mode: str = "replay"  # live | record | replay
    fixture_path: Optional[Path] = None
    retries: int = DEFAULT_RETRIES
    backoff_s: float = 0.5

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be > 0")
        if self.mode not in ("live", "record", "replay"):
            raise ValueError(f"unknown provider mode: {self.mode!r}")
        if self.mode in ("record", "replay") and self.fixture_path is None:
            raise ValueError(f"{self.mode} mode requires a fixture store path")


@dataclass
class CompletionRecord:
    prompt_hash: str
    reply: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    elapsed: float = 0.0


def completion_key(
    model_name: str,
    temperature: float,
    max_tokens: int,
    sample_index: int,
    system: str,
    user: str,
) -> str:
    """Lowercase hex SHA-256 over the canonical newline-joined call identity.

    Temperature is rendered as the repr of its float value ("0.0", "0.5") so
    the same setting always hashes the same way.
    """
    payload = "\n".join([
        model_name,
        repr(float(temperature)),
        str(int(max_tokens)),
        str(int(sample_index)),
        system,
        user,
    ])
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class FixtureStore:
    """JSON-lines completion store: concurrent reads, serialized appends."""

    def __init__(self, path: Path | str):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._records: dict[str, CompletionRecord] = {}
        if self.path.exists():
            self._load()

    def _load(self) -> None:
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                doc = json.loads(line)
                self._records[doc["key"]] = CompletionRecord(
                    prompt_hash=doc["key"],
                    reply=doc["reply"],
                    prompt_tokens=doc.get("prompt_tokens", 0),
                    completion_tokens=doc.get("completion_tokens", 0),
                    elapsed=doc.get("elapsed_s", 0.0),
                )

    def get(self, key: str) -> Optional[CompletionRecord]:
        return self._records.get(key)

    def put(self, record: CompletionRecord) -> None:
        with self._lock:
            self._records[record.prompt_hash] = record
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps({
                    "key": record.prompt_hash,
                    "reply": record.reply,
                    "prompt_tokens": record.prompt_tokens,
                    "completion_tokens": record.completion_tokens,
                    "elapsed_s": record.elapsed,
                }, sort_keys=True) + "\n")

    def keys(self) -> list[str]:
        return list(self._records)

    def __len__(self) -> int:
        return len(self._records)


class Gateway:
    """One configured model endpoint, optionally backed by a fixture store."""

    def __init__(self, config: ProviderConfig):
        self.config = config
        self.store = (FixtureStore(config.fixture_path)
                      if config.fixture_path is not None else None)

    def complete(
        self,
        prompt: PromptText,
        sample_index: int = 0,
        temperature: Optional[float] = None,
        max_tokens: Optional[int] = None,
    ) -> CompletionRecord:
        """One chat completion; replayed from the store when configured."""
        cfg = self.config
        temp = cfg.temperature if temperature is None else temperature
        tokens = cfg.max_tokens if max_tokens is None else max_tokens
        key = completion_key(cfg.model_name, temp, tokens, sample_index,
                             prompt.system, prompt.user)
        if cfg.mode == "replay":
            record = self.store.get(key)
            if record is None:
                raise FixtureMissError(
                    f"no recorded completion for key {key} "
                    f"(kind={prompt.kind}, sample={sample_index})")
            return record
        record = self._call_live(prompt, temp, tokens, key)
        if cfg.mode == "record" and self.store is not None:
            self.store.put(record)
        return record

    def _call_live(self, prompt: PromptText, temperature: float,
                   max_tokens: int, key: str) -> CompletionRecord:
        import requests

        cfg = self.config
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(cfg.api_key_env, "")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        body = {
            "model": cfg.model_name,
            "messages": [
                {"role": "system", "content": prompt.system},
                {"role": "user", "content": prompt.user},
            ],
            "temperature": temperature,
            "max_tokens": max_tokens,
        }
        last_exc: Optional[Exception] = None
        for attempt in range(cfg.retries + 1):
            start = time.perf_counter()
            try:
                resp = requests.post(cfg.endpoint, json=body, headers=headers,
                                     timeout=cfg.timeout)
            except requests.RequestException as exc:
                last_exc = exc
                if attempt < cfg.retries:
                    time.sleep(cfg.backoff_s * (2 ** attempt))
                continue
            if resp.status_code >= 500 and attempt < cfg.retries:
                last_exc = ProviderError(f"status {resp.status_code}: {resp.text[:200]}")
                time.sleep(cfg.backoff_s * (2 ** attempt))
                continue
            if resp.status_code != 200:
                raise ProviderError(f"status {resp.status_code}: {resp.text[:500]}")
            elapsed = time.perf_counter() - start
            doc = resp.json()
            try:
                reply = doc["choices"][0]["message"]["content"] or ""
            except (KeyError, IndexError, TypeError) as exc:
                raise ProviderError(f"malformed completion response: {doc}") from exc
            usage = doc.get("usage") or {}
            return CompletionRecord(
                prompt_hash=key,
                reply=reply,
                prompt_tokens=int(usage.get("prompt_tokens", 0)),
                completion_tokens=int(usage.get("completion_tokens", 0)),
                elapsed=elapsed,
            )
        raise GatewayError(f"completion failed after {cfg.retries + 1} attempts: {last_exc}")


@dataclass
class UsageSummary:
    n: int
    avg_input: int
    avg_output: int
    groups: dict[str, tuple[int, int, int]] = field(default_factory=dict)  # name -> (n, in, out)


def usage_report(
    records: list[CompletionRecord],
    grouping: str = "overall",
    difficulties: Optional[list[str]] = None,
) -> UsageSummary:
    """Average input/output tokens, rounded to integers, overall and per group.

    For ``by_difficulty`` grouping the caller supplies one difficulty label
    per record (the records themselves do not know which task they served).
    """
    def avg(pairs: list[CompletionRecord]) -> tuple[int, int]:
        if not pairs:
            return 0, 0
        return (round(sum(r.prompt_tokens for r in pairs) / len(pairs)),
                round(sum(r.completion_tokens for r in pairs) / len(pairs)))

    overall_in, overall_out = avg(records)
    summary = UsageSummary(n=len(records), avg_input=overall_in, avg_output=overall_out)
    if grouping == "by_difficulty":
        if difficulties is None or len(difficulties) != len(records):
            raise ValueError("by_difficulty grouping needs one difficulty per record")
        buckets: dict[str, list[CompletionRecord]] = {}
        for diff, rec in zip(difficulties, records):
            buckets.setdefault(diff, []).append(rec)
        for diff in sorted(buckets):
            a_in, a_out = avg(buckets[diff])
            summary.groups[diff] = (len(buckets[diff]), a_in, a_out)
    return summary
