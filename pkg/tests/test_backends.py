from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import replace

import httpx
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import make_scenario
from introplan.backends import (
    CassetteBackend,
    CassetteMiss,
    Completion,
    CompletionRequest,
    CredentialError,
    DegenerateDistributionError,
    EndpointConfig,
    HashEmbedder,
    LabelConfidences,
    MalformedResponseError,
    OpenAICompatibleClient,
    OpenAIEmbedder,
    RateLimitError,
    ScriptedLLM,
    StatusError,
    SyntheticModelParams,
    TransportError,
    confidences_from_logprobs,
    cosine_similarity,
    score_labels,
    synth_confidences,
    synth_dataset,
    synth_set_confidences,
)
from introplan.backends.openai_compat import API_KEY_ENV
from introplan.backends.synthetic import allocate_counts, sample_true_label_confidences
from introplan.domain import ScenarioKind, validate_scenario

# ---------------------------------------------------------------- label confidences


def test_softmax_two_labels():
    conf = confidences_from_logprobs({"A": -0.1, "B": -2.3}, ["A", "B"])
    assert conf["A"] == pytest.approx(0.900, abs=1e-3)
    assert conf["B"] == pytest.approx(0.100, abs=1e-3)


def test_single_label_gets_all_mass():
    assert confidences_from_logprobs({"A": -3.0, "x": -0.1}, ["A"]).entries == {"A": 1.0}


def test_absent_label_gets_zero():
    conf = confidences_from_logprobs({"A": -0.5, "C": -1.0, "the": -0.2}, ["A", "B", "C"])
    assert conf["B"] == 0.0
    assert set(conf.labels) == {"A", "B", "C"}
    assert math.fsum(conf.entries.values()) == pytest.approx(1.0, abs=1e-9)


def test_token_variants_take_max():
    conf = confidences_from_logprobs({" A": -2.0, "A": -0.5, "B ": -0.5}, ["A", "B"])
    assert conf["A"] == pytest.approx(0.5)


def test_no_label_present_is_degenerate():
    with pytest.raises(DegenerateDistributionError):
        confidences_from_logprobs({"yes": -0.1}, ["A", "B"])


@given(
    st.lists(st.floats(-30, 0), min_size=1, max_size=6),
    st.floats(-50, 50),
)
def test_softmax_sums_to_one_and_is_shift_invariant(logprobs, shift):
    labels = [chr(ord("A") + i) for i in range(len(logprobs))]
    base = confidences_from_logprobs(dict(zip(labels, logprobs)), labels)
    shifted = confidences_from_logprobs({l: v + shift for l, v in zip(labels, logprobs)}, labels)
    assert math.fsum(base.entries.values()) == pytest.approx(1.0, abs=1e-9)
    for l in labels:
        assert shifted[l] == pytest.approx(base[l], abs=1e-12)


def test_label_confidences_validation():
    with pytest.raises(ValueError):
        LabelConfidences({"A": 1.2})
    with pytest.raises(DegenerateDistributionError):
        LabelConfidences.normalized({"A": 0.0, "B": 0.0})


def test_score_labels_uses_first_position():
    seen = []

    def respond(req):
        seen.append(req)
        return Completion(text="A", top_logprobs=({"A": math.log(0.6), "B": math.log(0.2)},))

    conf = score_labels(ScriptedLLM(respond), "prompt", ["A", "B"])
    assert conf["A"] == pytest.approx(0.75)
    assert seen[0].max_tokens == 1 and seen[0].logprob_top_k > 0 and seen[0].temperature == 0.0


def test_completion_request_defaults_and_validation():
    req = CompletionRequest(prompt="p")
    assert req.temperature == 0.0
    with pytest.raises(ValueError):
        CompletionRequest(prompt="p", max_tokens=0)
    with pytest.raises(ValueError):
        CompletionRequest(prompt="p", temperature=-1)


def test_cosine_similarity():
    assert cosine_similarity([1, 0], [1, 0]) == pytest.approx(1.0)
    assert cosine_similarity([1, 0], [-1, 0]) == pytest.approx(-1.0)
    with pytest.raises(ValueError):
        cosine_similarity([0, 0], [1, 0])


# ---------------------------------------------------------------- HTTP client


def _client(handler, *, key="sk-test", style="chat", max_retries=3, sleeps=None, monkeypatch=None):
    if monkeypatch is not None:
        monkeypatch.delenv(API_KEY_ENV, raising=False)
    cfg = EndpointConfig(base_url="http://stub/v1", model="m", api_key=key, api_style=style, max_retries=max_retries)
    sleep = (sleeps.append if sleeps is not None else (lambda _s: None))
    return OpenAICompatibleClient(cfg, transport=httpx.MockTransport(handler), sleep=sleep)


def _chat_body(text, top=None):
    choice = {"message": {"content": text}}
    if top is not None:
        choice["logprobs"] = {
            "content": [{"token": text, "top_logprobs": [{"token": t, "logprob": lp} for t, lp in top.items()]}]
        }
    return {"choices": [choice]}


def test_chat_completion_say_ok(monkeypatch):
    def handler(request):
        body = json.loads(request.content)
        assert request.url.path == "/v1/chat/completions"
        assert request.headers["authorization"] == "Bearer sk-test"
        assert body["messages"][0]["content"] == "say OK" and body["max_tokens"] == 2
        return httpx.Response(200, json=_chat_body("OK"))

    client = _client(handler, monkeypatch=monkeypatch)
    assert client.complete(CompletionRequest(prompt="say OK", max_tokens=2)).text == "OK"


def test_chat_logprobs(monkeypatch):
    def handler(request):
        body = json.loads(request.content)
        assert body["logprobs"] is True and body["top_logprobs"] == 5
        return httpx.Response(200, json=_chat_body("A", {"A": -0.1, "B": -2.3}))

    client = _client(handler, monkeypatch=monkeypatch)
    conf = score_labels(client, "q", ["A", "B"], top_k=5)
    assert conf["A"] == pytest.approx(0.9, abs=1e-3)


def test_legacy_completion_logprobs(monkeypatch):
    def handler(request):
        body = json.loads(request.content)
        assert request.url.path == "/v1/completions" and body["logprobs"] == 3
        return httpx.Response(
            200, json={"choices": [{"text": " A", "logprobs": {"top_logprobs": [{" A": -0.2, " B": -1.8}]}}]}
        )

    client = _client(handler, style="completions", monkeypatch=monkeypatch)
    conf = score_labels(client, "q", ["A", "B"], top_k=3)
    assert conf["A"] == pytest.approx(math.exp(-0.2) / (math.exp(-0.2) + math.exp(-1.8)))


def test_missing_credential_fails_before_network(monkeypatch):
    calls = []

    def handler(request):
        calls.append(request)
        return httpx.Response(200, json=_chat_body("OK"))

    client = _client(handler, key=None, monkeypatch=monkeypatch)
    with pytest.raises(CredentialError):
        client.complete(CompletionRequest(prompt="say OK"))
    assert calls == []


def test_env_var_overrides_config_key(monkeypatch):
    def handler(request):
        assert request.headers["authorization"] == "Bearer from-env"
        return httpx.Response(200, json=_chat_body("OK"))

    client = _client(handler, monkeypatch=monkeypatch)
    monkeypatch.setenv(API_KEY_ENV, "from-env")
    assert client.complete(CompletionRequest(prompt="x")).text == "OK"


def test_rate_limit_is_retryable_and_budgeted(monkeypatch):
    calls = []
    sleeps = []

    def handler(request):
        calls.append(request)
        return httpx.Response(429, text="slow down")

    client = _client(handler, max_retries=2, sleeps=sleeps, monkeypatch=monkeypatch)
    with pytest.raises(RateLimitError) as info:
        client.complete(CompletionRequest(prompt="x"))
    assert info.value.retryable and info.value.status == 429
    assert len(calls) == 3
    assert sleeps == [1.0, 2.0]


def test_retry_then_success(monkeypatch):
    responses = iter([httpx.Response(503), httpx.Response(200, json=_chat_body("OK"))])
    client = _client(lambda r: next(responses), monkeypatch=monkeypatch)
    assert client.complete(CompletionRequest(prompt="x")).text == "OK"


@pytest.mark.parametrize(
    "response, error, retryable",
    [
        (httpx.Response(400, text="bad"), StatusError, False),
        (httpx.Response(401), CredentialError, False),
        (httpx.Response(500), StatusError, True),
        (httpx.Response(200, text="<html>"), MalformedResponseError, False),
        (httpx.Response(200, json={"choices": []}), MalformedResponseError, False),
    ],
)
def test_error_mapping(monkeypatch, response, error, retryable):
    calls = []

    def handler(request):
        calls.append(1)
        return response

    client = _client(handler, max_retries=1, monkeypatch=monkeypatch)
    with pytest.raises(error) as info:
        client.complete(CompletionRequest(prompt="x"))
    assert info.value.retryable is retryable
    assert len(calls) == (2 if retryable else 1)


def test_transport_error_is_retryable(monkeypatch):
    def handler(request):
        raise httpx.ConnectError("down")

    client = _client(handler, max_retries=0, monkeypatch=monkeypatch)
    with pytest.raises(TransportError) as info:
        client.complete(CompletionRequest(prompt="x"))
    assert info.value.retryable


def test_openai_embedder(monkeypatch):
    def handler(request):
        assert request.url.path == "/v1/embeddings"
        return httpx.Response(200, json={"data": [{"embedding": [0.6, 0.8]}]})

    emb = OpenAIEmbedder(_client(handler, monkeypatch=monkeypatch), "e")
    assert emb.embed("hi").values == (0.6, 0.8) and emb.dim == 2
    with pytest.raises(ValueError):
        emb.embed("")


# ---------------------------------------------------------------- cassette


def test_cassette_record_and_replay(tmp_path):
    path = tmp_path / "c.jsonl"
    inner = ScriptedLLM(lambda req: Completion(text="OK", top_logprobs=({"OK": -0.01},)))
    rec = CassetteBackend(path, inner, record=True)
    req = CompletionRequest(prompt="say OK", max_tokens=2)
    first = rec.complete(req)
    replay = CassetteBackend(path)
    assert replay.complete(req) == first
    assert len(inner.requests) == 1
    with pytest.raises(CassetteMiss):
        replay.complete(CompletionRequest(prompt="other"))


# ---------------------------------------------------------------- embeddings


def _hash_oracle(text, dim=64, seed=0):
    tokens = re.findall(r"[a-z0-9']+", text.lower()) or [text]
    total = np.zeros(dim)
    for t in tokens:
        key = int.from_bytes(hashlib.sha256(f"{seed}:{t}".encode()).digest()[:8], "little")
        total += np.random.Generator(np.random.Philox(key)).standard_normal(dim)
    return total / np.linalg.norm(total)


def test_hash_embedder_matches_documented_procedure():
    emb = HashEmbedder(dim=64, seed=0)
    vec = np.array(emb.embed("abc").values)
    np.testing.assert_array_equal(vec, _hash_oracle("abc"))
    assert np.linalg.norm(vec) == pytest.approx(1.0)


def test_hash_embedder_deterministic_and_rejects_empty():
    a = HashEmbedder(dim=16).embed("Bring me a Coke")
    b = HashEmbedder(dim=16).embed("Bring me a Coke")
    assert a == b and a.dim == 16
    with pytest.raises(ValueError):
        HashEmbedder().embed("")


# ---------------------------------------------------------------- synthetic model


def _four(id="s", valid="A"):
    return make_scenario(id, ["w", "x", "y", "an option not listed here"], valid, valid[0])


def test_synth_confidences_deterministic():
    s = _four()
    p = SyntheticModelParams(seed=7)
    assert synth_confidences(s, p) == synth_confidences(s, p)
    assert synth_confidences(s, p) != synth_confidences(s, replace(p, seed=8))


def test_synth_confidences_exchangeable_means():
    p = SyntheticModelParams(seed=1, valid_concentration=1.0, invalid_concentration=1.0)
    rows = np.array([[synth_confidences(_four(f"s{i}"), p)[l] for l in "ABCD"] for i in range(10_000)])
    np.testing.assert_allclose(rows.mean(axis=0), 0.25, atol=0.02)


def test_synth_confidences_concentration_limit():
    p = SyntheticModelParams(seed=3, valid_concentration=1e6, invalid_concentration=0.5)
    conf = synth_confidences(_four(valid="AB"), p)
    assert conf["A"] + conf["B"] > 1 - 1e-4


def test_synth_confidences_permutation_equality():
    p = SyntheticModelParams(seed=5)
    s = _four(valid="B")
    perm = [2, 0, 3, 1]
    shuffled = make_scenario("s", [s.options[i].text for i in perm], "ABCD"[perm.index(1)], "ABCD"[perm.index(1)])
    a, b = synth_confidences(s, p), synth_confidences(shuffled, p)
    for new_pos, old_pos in enumerate(perm):
        assert b["ABCD"[new_pos]] == a["ABCD"[old_pos]]


def test_synth_confidences_needs_ground_truth():
    from introplan.domain import Scenario

    with pytest.raises(ValueError):
        synth_confidences(Scenario("x", "s", "t"), SyntheticModelParams())


def test_escape_mass():
    p = SyntheticModelParams(seed=2, escape_mass=0.5)
    conf = synth_confidences(_four(), p)
    assert conf["D"] >= 0.5


def test_synth_set_confidences_domain():
    s = make_scenario("m", ["a", "b", "c"], "AB", "A")
    h = synth_set_confidences(s, SyntheticModelParams(seed=0))
    assert len(h) == 7 and all(0 <= v <= 1 for v in h.values())


def test_vectorised_sampler_matches_per_scenario_law():
    p = SyntheticModelParams()
    draws = sample_true_label_confidences(np.random.default_rng(0), 20_000, p)
    # single valid option under Dirichlet(4, .5, .5, .5): mean 4 / 5.5
    assert draws.mean() == pytest.approx(4 / 5.5, abs=0.01)


def test_synth_dataset_unambiguous_mix():
    data = synth_dataset(100, {"unambiguous": 1.0}, seed=0)
    assert len(data) == 100
    assert all(len(s.valid_labels) == 1 and s.kind is ScenarioKind.UNAMBIGUOUS for s in data)


def test_synth_dataset_half_half():
    data = synth_dataset(200, {"unambiguous": 0.5, "multi_label": 0.5}, seed=1)
    kinds = [s.kind for s in data]
    assert kinds.count(ScenarioKind.UNAMBIGUOUS) == 100 and kinds.count(ScenarioKind.MULTI_LABEL) == 100


def test_synth_dataset_empty_and_invalid():
    assert synth_dataset(0) == []
    with pytest.raises(ValueError):
        synth_dataset(10, {"unambiguous": 0.7})


def test_synth_dataset_valid_unique_and_reproducible():
    data = synth_dataset(300, seed=4)
    assert all(validate_scenario(s) == [] for s in data)
    assert all(s.intent in s.valid_labels for s in data)
    assert len({(s.scene, s.instruction) for s in data}) == 300
    assert len({s.id for s in data}) == 300
    assert synth_dataset(300, seed=4) == data


def test_allocate_counts_sums():
    counts = allocate_counts(7, {ScenarioKind.UNAMBIGUOUS: 1 / 3, ScenarioKind.UNSAFE: 1 / 3, ScenarioKind.WINOGRAD: 1 / 3})
    assert sum(counts.values()) == 7 and max(counts.values()) - min(counts.values()) <= 1


def test_ambiguous_intents_are_spread():
    data = synth_dataset(400, {"multi_label": 1.0}, seed=9)
    firsts = sum(1 for s in data if s.intent == min(s.valid_labels))
    assert 0.3 < firsts / len(data) < 0.7


def test_scripted_llm_sequence():
    llm = ScriptedLLM(["one", Completion(text="two")])
    assert llm.complete(CompletionRequest(prompt="a")).text == "one"
    assert llm.complete(CompletionRequest(prompt="b")).text == "two"
    assert [r.prompt for r in llm.requests] == ["a", "b"]
