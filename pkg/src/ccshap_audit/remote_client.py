"""HTTP/JSON client for auditing models served by an external inference server.

Wire protocol (all bodies UTF-8 JSON, ``Authorization: Bearer`` when a
token is configured):

``POST /v1/score``
    ``{"model", "prompt", "labels": [...]}`` -> ``{"label_logprobs": {label: float}}``
``POST /v1/generate``
    ``{"model", "prompt", "temperature": 0, "max_tokens"}`` -> ``{"text": str}``
``POST /v1/logprob``
    ``{"model", "prompt", "continuation"}`` -> ``{"token_logprobs": [float, ...]}``

Masked token positions travel as the literal ``<mask>``.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import requests
from requests.adapters import HTTPAdapter

from .config import DEFAULT_EXPLANATION_PROMPT
from .corpus import LABELS, Label
from .errors import ConfigError, ContractError, ProtocolError, TransportError
from .scoring import Explanation, TokenSequence, mask_text, tokenize

log = logging.getLogger(__name__)

BACKOFF_BASE = 0.25
BACKOFF_FACTOR = 2.0


@dataclass(frozen=True)
class RemoteEndpoint:
    base_url: str
    model_name: str
    timeout: float = 30.0
    max_retries: int = 3
    max_in_flight: int = 4
    auth_token: str | None = None

    def __post_init__(self):
        if self.timeout <= 0:
            raise ConfigError("timeout must be positive")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")
        if self.max_in_flight < 1:
            raise ConfigError("max_in_flight must be >= 1")

    def __repr__(self):  # keep the token out of logs
        return (
            f"RemoteEndpoint(base_url={self.base_url!r}, model_name={self.model_name!r}, "
            f"timeout={self.timeout}, max_retries={self.max_retries}, max_in_flight={self.max_in_flight})"
        )


def compose_prompt(text: str, instruction: str) -> str:
    return f"{text}\n\n{instruction}"


def renormalize(label_logprobs: dict[str, float], labels: Sequence[str]) -> dict[str, float]:
    """Softmax of the given log-probabilities restricted to ``labels``."""
    values = np.array([float(label_logprobs[l]) for l in labels])
    values = np.exp(values - values.max())
    values /= values.sum()
    return dict(zip(labels, values.tolist()))


class RemoteClient:
    """Thread-safe client; at most ``max_in_flight`` requests are open at once."""

    def __init__(self, endpoint: RemoteEndpoint, sleep: Callable[[float], None] = time.sleep):
        self.endpoint = endpoint
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(endpoint.max_in_flight)
        self._ids = itertools.count(1)
        self.session = requests.Session()
        adapter = HTTPAdapter(pool_connections=1, pool_maxsize=endpoint.max_in_flight)
        self.session.mount("http://", adapter)
        self.session.mount("https://", adapter)
        self.attempts = 0

    def close(self) -> None:
        self.session.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _post(self, route: str, payload: dict) -> dict:
        url = self.endpoint.base_url.rstrip("/") + route
        request_id = str(next(self._ids))
        headers = {"Content-Type": "application/json", "X-Request-Id": request_id}
        if self.endpoint.auth_token:
            headers["Authorization"] = f"Bearer {self.endpoint.auth_token}"
        body = json.dumps(payload).encode("utf-8")
        last_error = None
        for attempt in range(self.endpoint.max_retries + 1):
            if attempt:
                self._sleep(BACKOFF_BASE * BACKOFF_FACTOR ** (attempt - 1))
            self.attempts += 1
            try:
                with self._slots:
                    resp = self.session.post(url, data=body, headers=headers, timeout=self.endpoint.timeout)
            except (requests.ConnectionError, requests.Timeout) as exc:
                last_error = f"{type(exc).__name__}: {exc}"
                log.debug("attempt %d on %s failed: %s", attempt + 1, url, last_error)
                continue
            if resp.status_code >= 500:
                last_error = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise ProtocolError(f"{url}: HTTP {resp.status_code}: {resp.text[:200]!r}")
            echoed = resp.headers.get("X-Request-Id")
            if echoed is not None and echoed != request_id:
                raise ProtocolError(f"{url}: response for request {echoed}, expected {request_id}")
            try:
                data = resp.json()
            except ValueError:
                raise ProtocolError(f"{url}: response is not JSON: {resp.text[:200]!r}") from None
            if not isinstance(data, dict):
                raise ProtocolError(f"{url}: expected a JSON object, got {resp.text[:200]!r}")
            return data
        raise TransportError(
            f"{url}: giving up after {self.endpoint.max_retries + 1} attempts ({last_error})"
        )

    def classify(self, masked_text: str, labels: Sequence[str]) -> dict[str, float]:
        """Per-label probabilities, renormalised over ``labels``."""
        if not labels:
            raise ContractError("labels must be non-empty")
        data = self._post(
            "/v1/score", {"model": self.endpoint.model_name, "prompt": masked_text, "labels": list(labels)}
        )
        logprobs = data.get("label_logprobs")
        if not isinstance(logprobs, dict):
            raise ProtocolError(f"/v1/score: missing label_logprobs in {json.dumps(data)[:200]}")
        missing = [l for l in labels if l not in logprobs]
        if missing:
            raise ProtocolError(f"/v1/score: no logprob for label(s) {missing}")
        return renormalize(logprobs, labels)

    def explain(self, full_text: str, prompt: str, max_tokens: int = 128) -> str:
        data = self._post(
            "/v1/generate",
            {
                "model": self.endpoint.model_name,
                "prompt": compose_prompt(full_text, prompt),
                "temperature": 0,
                "max_tokens": max_tokens,
            },
        )
        text = data.get("text")
        if not isinstance(text, str):
            raise ProtocolError(f"/v1/generate: missing text in {json.dumps(data)[:200]}")
        return text

    def sequence_logprob(self, masked_text: str, continuation: str, prompt: str | None = None) -> float:
        """Length-normalised probability ``exp(mean token logprob)`` of ``continuation``."""
        if not continuation:
            raise ContractError("continuation must be non-empty")
        full_prompt = compose_prompt(masked_text, prompt) if prompt else masked_text
        data = self._post(
            "/v1/logprob",
            {"model": self.endpoint.model_name, "prompt": full_prompt, "continuation": continuation},
        )
        lps = data.get("token_logprobs")
        if not isinstance(lps, list) or not lps:
            raise ProtocolError(f"/v1/logprob: missing token_logprobs in {json.dumps(data)[:200]}")
        try:
            return math.exp(math.fsum(float(x) for x in lps) / len(lps))
        except (TypeError, ValueError):
            raise ProtocolError(f"/v1/logprob: non-numeric token_logprobs {lps[:5]!r}") from None


def remote_classify(endpoint: RemoteEndpoint, masked_text: str, labels: Sequence[str]) -> dict[str, float]:
    with RemoteClient(endpoint) as client:
        return client.classify(masked_text, labels)


def remote_explain(endpoint: RemoteEndpoint, full_text: str, predicted_label: Label | str,
                   prompt: str = DEFAULT_EXPLANATION_PROMPT) -> str:
    label = predicted_label.value if isinstance(predicted_label, Label) else predicted_label
    with RemoteClient(endpoint) as client:
        return client.explain(full_text, prompt.format(label=label))


def remote_sequence_logprob(endpoint: RemoteEndpoint, masked_text: str, continuation: str) -> float:
    with RemoteClient(endpoint) as client:
        return client.sequence_logprob(masked_text, continuation)


class RemoteBackend:
    """Coalition-scoring backend that defers every probability to a server.

    Masking happens in text space: hidden tokens are sent as ``<mask>``.
    Masks in a batch are scored concurrently, bounded by the endpoint's
    ``max_in_flight``.
    """

    def __init__(self, client: RemoteClient, explanation_prompt: str = DEFAULT_EXPLANATION_PROMPT):
        self.client = client
        self.explanation_prompt = explanation_prompt
        ep = client.endpoint
        self.backend_id = f"remote:{ep.base_url}:{ep.model_name}"
        self._labels = [l.value for l in LABELS]

    def _map(self, fn, items):
        items = list(items)
        if len(items) <= 1 or self.client.endpoint.max_in_flight == 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=self.client.endpoint.max_in_flight) as pool:
            return list(pool.map(fn, items))

    def _instruction(self, label: Label) -> str:
        return self.explanation_prompt.format(label=label.value)

    def label_probabilities(self, sequence: TokenSequence, masks) -> np.ndarray:
        texts = [mask_text(sequence, m) for m in np.atleast_2d(masks)]
        maps = self._map(lambda t: self.client.classify(t, self._labels), texts)
        return np.array([[m[l] for l in self._labels] for m in maps], dtype=np.float64)

    def explain(self, sequence: TokenSequence, label: Label) -> Explanation:
        instruction = self._instruction(label)
        text = self.client.explain(sequence.text, instruction)
        tokens = tuple(tokenize(text).surface) if text.strip() else ()
        return Explanation(text=text, tokens=tokens, label=label, prompt=instruction)

    def explanation_probabilities(self, sequence: TokenSequence, masks, explanation: Explanation) -> np.ndarray:
        instruction = explanation.prompt or self._instruction(explanation.label)
        texts = [mask_text(sequence, m) for m in np.atleast_2d(masks)]
        return np.array(
            self._map(lambda t: self.client.sequence_logprob(t, explanation.text, instruction), texts),
            dtype=np.float64,
        )
