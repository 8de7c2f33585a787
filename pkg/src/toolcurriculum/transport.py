"""Line-delimited JSON endpoints (child process or HTTP) for external models.

Wire contracts::

    scorer     {"prompt": str, "response": str} -> {"tokens": [...], "logprobs": [...]}
    generator  {"prompt": str, "n": int}        -> {"completions": [str, ...]}
    embedder   {"text": str}                    -> {"values": [float, ...]}

A child-process embedder first prints a handshake line ``{"dim": N}``.
"""

from __future__ import annotations

import json
import shlex
import subprocess
import threading
import urllib.error
import urllib.request

from .curriculum import TokenLogProbs


class EndpointError(RuntimeError):
    """The external endpoint could not be reached or replied with garbage."""


class ProcessEndpoint:
    """Persistent child process speaking one JSON object per line on stdin/stdout."""

    def __init__(self, command: str | list[str], handshake: bool = False):
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        try:
            self._proc = subprocess.Popen(
                argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                encoding="utf-8",
                bufsize=1,
            )
        except OSError as exc:
            raise EndpointError(f"cannot start {argv[0]!r}: {exc}") from exc
        self._lock = threading.Lock()
        self.greeting: dict | None = self._read() if handshake else None

    def _read(self) -> dict:
        line = self._proc.stdout.readline()
        if not line:
            raise EndpointError(f"endpoint exited (status {self._proc.poll()})")
        try:
            return json.loads(line)
        except json.JSONDecodeError as exc:
            raise EndpointError(f"endpoint sent invalid JSON: {line[:80]!r}") from exc

    def request(self, payload: dict) -> dict:
        with self._lock:
            try:
                self._proc.stdin.write(json.dumps(payload, ensure_ascii=False) + "\n")
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                raise EndpointError(f"endpoint closed its input: {exc}") from exc
            return self._read()

    def close(self) -> None:
        if self._proc.poll() is None:
            self._proc.stdin.close()
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class HttpEndpoint:
    """POSTs each request as a JSON body and reads a JSON reply."""

    def __init__(self, url: str, timeout: float = 60.0):
        self.url = url
        self.timeout = timeout

    def request(self, payload: dict) -> dict:
        body = json.dumps(payload).encode("utf-8")
        req = urllib.request.Request(self.url, data=body, headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
            raise EndpointError(f"{self.url}: {exc}") from exc

    def close(self) -> None:
        pass


class EndpointScorer:
    def __init__(self, endpoint):
        self.endpoint = endpoint

    def score(self, prompt: str, response: str) -> TokenLogProbs:
        reply = self.endpoint.request({"prompt": prompt, "response": response})
        try:
            return TokenLogProbs(list(reply["tokens"]), [float(x) for x in reply["logprobs"]])
        except (KeyError, TypeError, ValueError) as exc:
            raise EndpointError(f"bad scorer reply: {exc}") from exc


class EndpointGenerator:
    def __init__(self, endpoint):
        self.endpoint = endpoint

    def generate(self, prompt: str, n: int = 1) -> list[str]:
        reply = self.endpoint.request({"prompt": prompt, "n": n})
        completions = reply.get("completions") if isinstance(reply, dict) else None
        if not isinstance(completions, list):
            raise EndpointError("bad generator reply: missing completions")
        return [str(c) for c in completions]


class EndpointEmbedder:
    name = "external"

    def __init__(self, endpoint, dim: int | None = None):
        self.endpoint = endpoint
        greeting = getattr(endpoint, "greeting", None)
        if dim is None and greeting is not None:
            dim = int(greeting["dim"])
        self.dim = dim

    def embed(self, text: str) -> list[float]:
        reply = self.endpoint.request({"text": text})
        try:
            values = [float(v) for v in reply["values"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise EndpointError(f"bad embedder reply: {exc}") from exc
        if self.dim is None:
            self.dim = len(values)
        if len(values) != self.dim:
            raise EndpointError(f"embedder returned {len(values)} values, expected {self.dim}")
        return values


def open_endpoint(cmd: str | None = None, url: str | None = None, handshake: bool = False):
    if cmd and url:
        raise ValueError("give either a command or a URL, not both")
    if cmd:
        return ProcessEndpoint(cmd, handshake=handshake)
    if url:
        return HttpEndpoint(url)
    raise ValueError("no endpoint configured")
