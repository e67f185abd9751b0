"""Text-generation, label-confidence and embedding providers."""
from introplan.backends.base import (
    BackendError,
    Completion,
    CompletionRequest,
    CredentialError,
    DegenerateDistributionError,
    EmbeddingBackend,
    EmbeddingVector,
    LabelConfidences,
    MalformedResponseError,
    RateLimitError,
    StatusError,
    TextBackend,
    TransportError,
    confidences_from_logprobs,
    cosine_similarity,
    score_labels,
)
from introplan.backends.cassette import CassetteBackend, CassetteMiss, request_hash
from introplan.backends.openai_compat import EndpointConfig, OpenAICompatibleClient, OpenAIEmbedder
from introplan.backends.synthetic import (
    HashEmbedder,
    ScriptedLLM,
    SyntheticLLM,
    SyntheticModelParams,
    keyed_rng,
    synth_confidences,
    synth_dataset,
    synth_set_confidences,
)

__all__ = [
    "BackendError",
    "CassetteBackend",
    "CassetteMiss",
    "Completion",
    "CompletionRequest",
    "CredentialError",
    "DegenerateDistributionError",
    "EmbeddingBackend",
    "EmbeddingVector",
    "EndpointConfig",
    "HashEmbedder",
    "LabelConfidences",
    "MalformedResponseError",
    "OpenAICompatibleClient",
    "OpenAIEmbedder",
    "RateLimitError",
    "ScriptedLLM",
    "StatusError",
    "SyntheticLLM",
    "SyntheticModelParams",
    "TextBackend",
    "TransportError",
    "confidences_from_logprobs",
    "cosine_similarity",
    "keyed_rng",
    "request_hash",
    "score_labels",
    "synth_confidences",
    "synth_dataset",
    "synth_set_confidences",
]
