"""Generation interface, prompt rendering, and the mock / HTTP backends.

Wire protocol of the HTTP backend::

    GET  {base}/capabilities -> {"modes": ["greedy", "top_k", ...]}
    POST {base}/generate     <- {"prompt", "mode", "top_k", "temperature",
                                 "dropout_rate", "seed", "max_new_tokens"}
                             -> {"text": str, "token_logprobs": [float] | absent}
"""

from __future__ import annotations

import json
import logging
import re
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable, Mapping, Protocol, Sequence, runtime_checkable

from tsas.core import DECODE_MODES, CapabilityError, ConfigError, TrainConfig, TsasError

log = logging.getLogger(__name__)

DEFAULT_TEMPLATE = "Read this and answer the question\n{context}\n{question}"
_PLACEHOLDER = re.compile(r"\{context\}|\{question\}")


class BackendError(TsasError):
    retryable = False


class RetryableBackendError(BackendError):
    retryable = True

    def __init__(self, message: str, attempts: int = 1):
        super().__init__(f"{message} (after {attempts} attempt(s))")
        self.attempts = attempts


class ResponseDecodeError(BackendError):
    pass


def render_prompt(template: str, document: str, question: str) -> str:
    for ph in ("{context}", "{question}"):
        if template.count(ph) != 1:
            raise ConfigError(f"prompt template must contain {ph} exactly once")
    # Single pass so braces inside the document are never re-substituted.
    return _PLACEHOLDER.sub(
        lambda m: document if m.group(0) == "{context}" else question, template
    )


@dataclass(frozen=True)
class DecodeSpec:
    mode: str
    top_k: int = 40
    temperature: float = 0.7
    dropout_rate: float = 0.1
    mask_seed: int | None = None
    sampling_seed: int | None = None
    max_new_tokens: int = 16

    def __post_init__(self) -> None:
        if self.mode not in DECODE_MODES:
            raise ConfigError(f"unknown decode mode {self.mode!r}")
        if (self.mask_seed is not None) != (self.mode == "mc_dropout"):
            raise ConfigError("mask_seed must be given exactly for mc_dropout")
        if (self.sampling_seed is not None) != (self.mode == "top_k"):
            raise ConfigError("sampling_seed must be given exactly for top_k")
        if self.max_new_tokens < 1:
            raise ConfigError("max_new_tokens must be >= 1")

    @property
    def seed(self) -> int | None:
        return self.mask_seed if self.mode == "mc_dropout" else self.sampling_seed

    def to_wire(self, prompt: str) -> dict[str, Any]:
        return {
            "prompt": prompt,
            "mode": self.mode,
            "top_k": self.top_k,
            "temperature": self.temperature,
            "dropout_rate": self.dropout_rate,
            "seed": self.seed,
            "max_new_tokens": self.max_new_tokens,
        }

    @classmethod
    def from_wire(cls, body: Mapping[str, Any]) -> tuple[str, DecodeSpec]:
        mode = body["mode"]
        seed = body.get("seed")
        spec = cls(
            mode=mode,
            top_k=int(body.get("top_k", 40)),
            temperature=float(body.get("temperature", 0.7)),
            dropout_rate=float(body.get("dropout_rate", 0.1)),
            mask_seed=seed if mode == "mc_dropout" else None,
            sampling_seed=seed if mode == "top_k" else None,
            max_new_tokens=int(body.get("max_new_tokens", 16)),
        )
        return body["prompt"], spec


@dataclass(frozen=True)
class Generation:
    text: str
    token_logprobs: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.token_logprobs is not None:
            object.__setattr__(self, "token_logprobs", tuple(float(x) for x in self.token_logprobs))

    @property
    def seq_logprob(self) -> float | None:
        if self.token_logprobs is None:
            return None
        return min(0.0, float(sum(self.token_logprobs)))


@dataclass(frozen=True)
class TrainRecord:
    prompt: str
    target: str
    weight: float = 1.0


@runtime_checkable
class Backend(Protocol):
    trainable: bool

    def capabilities(self) -> frozenset[str]: ...

    def generate(self, prompt: str, spec: DecodeSpec) -> Generation: ...


class TrainableBackend(Backend, Protocol):
    def snapshot(self) -> Any: ...

    def restore(self, snap: Any) -> None: ...

    def train(self, records: Sequence[TrainRecord], cfg: TrainConfig) -> list[float]: ...


def require_mode(backend: Backend, mode: str) -> None:
    if mode not in backend.capabilities():
        raise CapabilityError(f"backend does not advertise decode mode {mode!r}")


class MockBackend:
    """Scripted backend. Records every call for later inspection."""

    trainable = False

    def __init__(
        self,
        script: Mapping[str, str] | Callable[[str, DecodeSpec], str] | None = None,
        default: str | None = None,
        modes: Sequence[str] = DECODE_MODES,
        logprob: float | None = None,
    ):
        self.script = script or {}
        self.default = default
        self.modes = frozenset(modes)
        self.logprob = logprob
        self.calls: list[tuple[str, DecodeSpec]] = []
        self._lock = threading.Lock()

    def capabilities(self) -> frozenset[str]:
        return self.modes

    def generate(self, prompt: str, spec: DecodeSpec) -> Generation:
        require_mode(self, spec.mode)
        with self._lock:
            self.calls.append((prompt, spec))
        if callable(self.script):
            text = self.script(prompt, spec)
        elif prompt in self.script:
            text = self.script[prompt]
        elif self.default is not None:
            text = self.default
        else:
            raise BackendError(f"mock backend has no scripted answer for prompt {prompt[:40]!r}")
        lps = None if self.logprob is None else (self.logprob,)
        return Generation(text, lps)

    def count_calls(self, prompt: str) -> int:
        return sum(1 for p, _ in self.calls if p == prompt)


_RETRYABLE_STATUS = frozenset({408, 425, 429, 500, 502, 503, 504})


class HttpBackend:
    """Client for an external generation server speaking the JSON protocol above."""

    trainable = False

    def __init__(
        self,
        base_url: str,
        timeout: float = 30.0,
        max_retries: int = 3,
        backoff: float = 0.25,
        max_in_flight: int = 8,
        token: str | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self.token = token
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._caps: frozenset[str] | None = None
        self.requests_sent = 0

    def _request(self, path: str, body: dict[str, Any] | None = None) -> Any:
        url = self.base_url + path
        data = None if body is None else json.dumps(body).encode("utf-8")
        headers = {"Accept": "application/json"}
        if data is not None:
            headers["Content-Type"] = "application/json"
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        attempts = 0
        while True:
            attempts += 1
            req = urllib.request.Request(url, data=data, headers=headers, method="GET" if data is None else "POST")
            try:
                with self._slots:
                    self.requests_sent += 1
                    with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                        raw = resp.read()
                break
            except urllib.error.HTTPError as exc:
                excerpt = exc.read()[:200].decode("utf-8", "replace")
                if exc.code not in _RETRYABLE_STATUS:
                    raise BackendError(f"HTTP {exc.code} from {url}: {excerpt}") from exc
                err: Exception = exc
            except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
                err = exc
            if attempts > self.max_retries:
                raise RetryableBackendError(f"request to {url} failed: {err}", attempts)
            delay = self.backoff * 2 ** (attempts - 1)
            log.warning("retrying %s in %.2fs after %s", url, delay, err)
            time.sleep(delay)
        try:
            return json.loads(raw)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise ResponseDecodeError(f"malformed JSON from {url}: {raw[:200]!r}") from exc

    def capabilities(self) -> frozenset[str]:
        if self._caps is None:
            body = self._request("/capabilities")
            if not isinstance(body, dict) or not isinstance(body.get("modes"), list):
                raise ResponseDecodeError(f"capability response lacks a 'modes' list: {body!r}")
            self._caps = frozenset(m for m in body["modes"] if m in DECODE_MODES)
        return self._caps

    def generate(self, prompt: str, spec: DecodeSpec) -> Generation:
        require_mode(self, spec.mode)
        body = self._request("/generate", spec.to_wire(prompt))
        if not isinstance(body, dict) or not isinstance(body.get("text"), str):
            raise ResponseDecodeError(f"generate response lacks a 'text' string: {body!r}")
        lps = body.get("token_logprobs")
        if lps is not None and not (isinstance(lps, list) and all(isinstance(x, (int, float)) for x in lps)):
            raise ResponseDecodeError(f"token_logprobs must be a list of numbers: {lps!r}")
        return Generation(body["text"], None if lps is None else tuple(lps))


def make_server(backend: Backend, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """Expose any backend over the JSON protocol; ``port=0`` picks a free port."""

    class Handler(BaseHTTPRequestHandler):
        def _send(self, code: int, payload: Any) -> None:
            out = json.dumps(payload).encode("utf-8")
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(out)))
            self.end_headers()
            self.wfile.write(out)

        def do_GET(self) -> None:
            if self.path.rstrip("/").endswith("/capabilities"):
                self._send(200, {"modes": sorted(backend.capabilities())})
            else:
                self._send(404, {"error": "not found"})

        def do_POST(self) -> None:
            if not self.path.rstrip("/").endswith("/generate"):
                self._send(404, {"error": "not found"})
                return
            length = int(self.headers.get("Content-Length", 0))
            try:
                prompt, spec = DecodeSpec.from_wire(json.loads(self.rfile.read(length)))
                gen = backend.generate(prompt, spec)
            except (KeyError, ValueError, TsasError) as exc:
                self._send(400, {"error": str(exc)})
                return
            payload: dict[str, Any] = {"text": gen.text}
            if gen.token_logprobs is not None:
                payload["token_logprobs"] = list(gen.token_logprobs)
            self._send(200, payload)

        def log_message(self, format: str, *args: Any) -> None:
            log.debug(format, *args)

    return ThreadingHTTPServer((host, port), Handler)
