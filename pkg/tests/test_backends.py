from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from tsas.backends import (
    BackendError,
    DecodeSpec,
    Generation,
    HttpBackend,
    MockBackend,
    ResponseDecodeError,
    RetryableBackendError,
    make_server,
    render_prompt,
)
from tsas.core import CapabilityError, ConfigError

TEMPLATE = "Read this and answer the question\n{context}\n{question}"


def test_render_prompt():
    assert render_prompt(TEMPLATE, "D", "Q") == "Read this and answer the question\nD\nQ"
    assert render_prompt("{context} {question}", "D", "Q") == "D Q"
    assert render_prompt("{context}|{question}", "{question}", "Q") == "{question}|Q"
    for bad in ("{context} only", "{question} {question} {context}"):
        with pytest.raises(ConfigError):
            render_prompt(bad, "D", "Q")


def test_decode_spec_invariants():
    with pytest.raises(ConfigError):
        DecodeSpec("mc_dropout")
    with pytest.raises(ConfigError):
        DecodeSpec("greedy", mask_seed=1)
    with pytest.raises(ConfigError):
        DecodeSpec("top_k")
    spec = DecodeSpec("top_k", sampling_seed=5)
    prompt, back = DecodeSpec.from_wire(spec.to_wire("p"))
    assert (prompt, back) == ("p", spec)
    assert set(spec.to_wire("p")) == {"prompt", "mode", "top_k", "temperature", "dropout_rate", "seed", "max_new_tokens"}


def test_generation_logprob():
    assert Generation("x").seq_logprob is None
    assert Generation("x", [-0.5, -0.25]).seq_logprob == -0.75


def test_mock_backend():
    mock = MockBackend({"p": "sony"})
    assert mock.generate("p", DecodeSpec("mc_dropout", mask_seed=1)).text == "sony"
    assert mock.generate("p", DecodeSpec("greedy")).text == "sony"
    assert mock.count_calls("p") == 2
    with pytest.raises(BackendError):
        mock.generate("other", DecodeSpec("greedy"))
    with pytest.raises(CapabilityError):
        MockBackend(default="x", modes=("greedy",)).generate("p", DecodeSpec("top_k", sampling_seed=1))


class Scripted(BaseHTTPRequestHandler):
    """Replays a queue of (status, body) per path and records what it saw."""

    plan: dict = {}
    seen: list = []
    headers_seen: list = []

    def _reply(self):
        queue = self.plan.get(self.path, [])
        status, body = queue.pop(0) if len(queue) > 1 else queue[0]
        raw = body if isinstance(body, bytes) else json.dumps(body).encode()
        self.send_response(status)
        self.send_header("Content-Length", str(len(raw)))
        self.end_headers()
        self.wfile.write(raw)

    def do_GET(self):
        self.seen.append(("GET", self.path, None))
        self._reply()

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        self.seen.append(("POST", self.path, body))
        self.headers_seen.append(self.headers.get("Authorization"))
        self._reply()

    def log_message(self, *args):
        pass


@pytest.fixture
def scripted():
    Scripted.seen = []
    Scripted.headers_seen = []
    server = ThreadingHTTPServer(("127.0.0.1", 0), Scripted)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    yield server, f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()
    server.server_close()


ALL_MODES = (200, {"modes": ["greedy", "top_k", "mc_dropout"]})


def test_http_passthrough(scripted):
    _, url = scripted
    Scripted.plan = {"/capabilities": [ALL_MODES], "/generate": [(200, {"text": "sony"})]}
    gen = HttpBackend(url, token="tok").generate("p", DecodeSpec("mc_dropout", mask_seed=9))
    assert gen == Generation("sony")
    body = Scripted.seen[-1][2]
    assert body == {"prompt": "p", "mode": "mc_dropout", "top_k": 40, "temperature": 0.7, "dropout_rate": 0.1, "seed": 9, "max_new_tokens": 16}
    assert Scripted.headers_seen == ["Bearer tok"]


def test_http_retry_503_then_200(scripted):
    _, url = scripted
    Scripted.plan = {"/capabilities": [ALL_MODES], "/generate": [(503, {"error": "busy"}), (200, {"text": "ok", "token_logprobs": [-0.5]})]}
    client = HttpBackend(url, backoff=0.01)
    gen = client.generate("p", DecodeSpec("greedy"))
    assert gen.text == "ok" and gen.seq_logprob == -0.5
    assert [s[1] for s in Scripted.seen].count("/generate") == 2


def test_http_retries_are_bounded(scripted):
    _, url = scripted
    Scripted.plan = {"/capabilities": [ALL_MODES], "/generate": [(503, {"error": "busy"})]}
    with pytest.raises(RetryableBackendError) as info:
        HttpBackend(url, backoff=0.001, max_retries=2).generate("p", DecodeSpec("greedy"))
    assert info.value.attempts == 3


def test_http_client_error_not_retried(scripted):
    _, url = scripted
    Scripted.plan = {"/capabilities": [ALL_MODES], "/generate": [(400, {"error": "bad prompt"})]}
    with pytest.raises(BackendError, match="bad prompt") as info:
        HttpBackend(url, backoff=0.001).generate("p", DecodeSpec("greedy"))
    assert not info.value.retryable
    assert [s[1] for s in Scripted.seen].count("/generate") == 1


def test_http_capability_gate(scripted):
    _, url = scripted
    Scripted.plan = {"/capabilities": [(200, {"modes": ["greedy", "top_k"]})], "/generate": [(200, {"text": "x"})]}
    with pytest.raises(CapabilityError):
        HttpBackend(url).generate("p", DecodeSpec("mc_dropout", mask_seed=1))
    assert all(method == "GET" for method, _, _ in Scripted.seen)


def test_http_malformed_json(scripted):
    _, url = scripted
    Scripted.plan = {"/capabilities": [ALL_MODES], "/generate": [(200, b"{not json")]}
    with pytest.raises(ResponseDecodeError):
        HttpBackend(url).generate("p", DecodeSpec("greedy"))
    Scripted.plan["/generate"] = [(200, {"txt": "x"})]
    with pytest.raises(ResponseDecodeError):
        HttpBackend(url).generate("p", DecodeSpec("greedy"))


def test_http_timeout_is_retryable():
    # nothing listens on this port once the socket is closed
    import socket

    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    with pytest.raises(RetryableBackendError):
        HttpBackend(f"http://127.0.0.1:{port}", timeout=0.5, max_retries=1, backoff=0.001).capabilities()


def test_reference_server_roundtrip():
    mock = MockBackend({"p": "sony"}, logprob=-0.25)
    server = make_server(mock)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    try:
        client = HttpBackend(f"http://127.0.0.1:{server.server_address[1]}")
        assert client.capabilities() == mock.capabilities()
        gen = client.generate("p", DecodeSpec("top_k", sampling_seed=4))
        assert gen == Generation("sony", (-0.25,))
        assert mock.calls[0][1] == DecodeSpec("top_k", sampling_seed=4)
    finally:
        server.shutdown()
        server.server_close()


def test_http_in_flight_bound(scripted):
    _, url = scripted
    Scripted.plan = {"/capabilities": [ALL_MODES], "/generate": [(200, {"text": "x"})]}
    client = HttpBackend(url, max_in_flight=2)
    client.capabilities()
    active = []
    peak = []
    orig = client._slots

    class Probe:
        def __enter__(self):
            orig.acquire()
            active.append(1)
            peak.append(len(active))

        def __exit__(self, *exc):
            active.pop()
            orig.release()

    client._slots = Probe()
    threads = [threading.Thread(target=client.generate, args=("p", DecodeSpec("greedy"))) for _ in range(10)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert max(peak) <= 2 and client.requests_sent == 11
