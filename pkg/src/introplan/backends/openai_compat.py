"""Client for OpenAI-compatible completion/chat and embedding endpoints."""
from __future__ import annotations

import logging
import os
import threading
import time
from dataclasses import dataclass
from typing import Any, Callable

import httpx

from introplan.backends.base import (
    BackendError,
    Completion,
    CompletionRequest,
    CredentialError,
    EmbeddingVector,
    MalformedResponseError,
    RateLimitError,
    StatusError,
    TransportError,
)

logger = logging.getLogger(__name__)

API_KEY_ENV = "INTROPLAN_API_KEY"


@dataclass
class EndpointConfig:
    base_url: str
    model: str
    api_key: str | None = None
    # "completions" (legacy, prompt + logprobs=k) or "chat" (messages + top_logprobs)
    api_style: str = "chat"
    embedding_model: str | None = None
    timeout: float = 60.0
    max_retries: int = 3
    backoff: float = 1.0
    max_in_flight: int = 4

    def resolved_key(self) -> str | None:
        return os.environ.get(API_KEY_ENV) or self.api_key


class OpenAICompatibleClient:
    """Synchronous client with bounded retries and an in-flight cap.

    ``transport`` lets tests inject an ``httpx.MockTransport``.
    """

    def __init__(
        self,
        config: EndpointConfig,
        *,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if config.api_style not in ("chat", "completions"):
            raise ValueError(f"unknown api_style {config.api_style!r}")
        self.config = config
        self.name = f"openai:{config.model}"
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(max(1, config.max_in_flight))
        self._http = httpx.Client(
            base_url=config.base_url.rstrip("/") + "/",
            timeout=config.timeout,
            transport=transport,
        )
        self._dim: int | None = None

    def close(self) -> None:
        self._http.close()

    def _headers(self) -> dict[str, str]:
        key = self.config.resolved_key()
        if not key:
            raise CredentialError(f"no API key configured; set {API_KEY_ENV}")
        return {"Authorization": f"Bearer {key}"}

    def _post(self, path: str, payload: dict[str, Any]) -> dict[str, Any]:
        headers = self._headers()
        attempt = 0
        while True:
            try:
                with self._slots:
                    return self._post_once(path, payload, headers)
            except BackendError as exc:
                if not exc.retryable or attempt >= self.config.max_retries:
                    raise
                delay = self.config.backoff * (2**attempt)
                attempt += 1
                logger.warning("retrying %s after %s (attempt %d)", path, exc, attempt)
                self._sleep(delay)

    def _post_once(self, path: str, payload: dict[str, Any], headers: dict[str, str]) -> dict[str, Any]:
        try:
            resp = self._http.post(path, json=payload, headers=headers)
        except httpx.TransportError as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code == 429:
            raise RateLimitError(resp.text)
        if resp.status_code in (401, 403):
            raise CredentialError(f"provider rejected credentials (HTTP {resp.status_code})")
        if resp.status_code >= 400:
            raise StatusError(resp.status_code, resp.text)
        try:
            body = resp.json()
        except ValueError as exc:
            raise MalformedResponseError(f"response is not JSON: {resp.text[:200]}") from exc
        if not isinstance(body, dict):
            raise MalformedResponseError("response body is not an object")
        return body

    def complete(self, req: CompletionRequest) -> Completion:
        if self.config.api_style == "chat":
            return self._complete_chat(req)
        return self._complete_legacy(req)

    def _complete_legacy(self, req: CompletionRequest) -> Completion:
        payload: dict[str, Any] = {
            "model": self.config.model,
            "prompt": req.prompt,
            "max_tokens": req.max_tokens,
            "temperature": req.temperature,
        }
        if req.logprob_top_k:
            payload["logprobs"] = req.logprob_top_k
        if req.stop:
            payload["stop"] = list(req.stop)
        body = self._post("completions", payload)
        try:
            choice = body["choices"][0]
            text = choice["text"]
            top = ()
            if req.logprob_top_k:
                top = tuple(dict(p or {}) for p in choice["logprobs"]["top_logprobs"])
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedResponseError(f"unexpected completions body: {exc!r}") from exc
        return Completion(text=text, top_logprobs=top)

    def _complete_chat(self, req: CompletionRequest) -> Completion:
        payload: dict[str, Any] = {
            "model": self.config.model,
            "messages": [{"role": "user", "content": req.prompt}],
            "max_tokens": req.max_tokens,
            "temperature": req.temperature,
        }
        if req.logprob_top_k:
            payload["logprobs"] = True
            payload["top_logprobs"] = req.logprob_top_k
        if req.stop:
            payload["stop"] = list(req.stop)
        body = self._post("chat/completions", payload)
        try:
            choice = body["choices"][0]
            text = choice["message"]["content"] or ""
            top = ()
            if req.logprob_top_k:
                top = tuple(
                    {alt["token"]: float(alt["logprob"]) for alt in pos["top_logprobs"]}
                    for pos in choice["logprobs"]["content"]
                )
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedResponseError(f"unexpected chat body: {exc!r}") from exc
        return Completion(text=text, top_logprobs=top)


class OpenAIEmbedder:
    """Embeddings from the ``/embeddings`` endpoint of the same provider."""

    def __init__(self, client: OpenAICompatibleClient, model: str, dim: int | None = None):
        self.client = client
        self.model = model
        self.name = f"openai-embed:{model}"
        self.dim = dim or 0

    def embed(self, text: str) -> EmbeddingVector:
        if not text:
            raise ValueError("cannot embed empty text")
        body = self.client._post("embeddings", {"model": self.model, "input": text})
        try:
            values = body["data"][0]["embedding"]
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedResponseError(f"unexpected embeddings body: {exc!r}") from exc
        vec = EmbeddingVector(tuple(values))
        if not self.dim:
            self.dim = vec.dim
        elif vec.dim != self.dim:
            raise MalformedResponseError(f"embedding dim {vec.dim} != declared {self.dim}")
        return vec


class SentenceTransformerEmbedder:
    """Local sentence-embedding model (requires the optional sentence-transformers extra)."""

    def __init__(self, model_name: str = "all-MiniLM-L6-v2"):
        from sentence_transformers import SentenceTransformer

        self._model = SentenceTransformer(model_name)
        self.name = f"sbert:{model_name}"
        self.dim = int(self._model.get_sentence_embedding_dimension())

    def embed(self, text: str) -> EmbeddingVector:
        if not text:
            raise ValueError("cannot embed empty text")
        vec = self._model.encode([text], convert_to_numpy=True)[0]
        return EmbeddingVector(tuple(float(v) for v in vec))
