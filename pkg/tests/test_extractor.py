import json

import pytest

from src.config.settings import ExtractorConfig
from src.exceptions.base import ConfigError, ContractViolation, ExternalServiceError, ExtractionError
from src.services.extractor_service import (LocalKeywordExtractor, SemanticExtractor, TokenCluster,
                                            build_token_clusters, read_semantics, render_extraction_prompt,
                                            sample_cluster, write_semantics)
from src.services.semantic_api_service import SemanticAPIService, parse_semantics_response
from src.services.sid_service import Vocabulary
from src.utils.semantics_cache import SemanticsCache, member_hash
from tests.conftest import make_catalog


class FakeResponse:
    def __init__(self, status_code, body):
        self.status_code = status_code
        self._body = body
        self.text = body if isinstance(body, str) else json.dumps(body)

    def json(self):
        if isinstance(self._body, str):
            raise ValueError("not json")
        return self._body


class FakeSession:
    """Replays queued responses and records request bodies."""

    def __init__(self, responses):
        self.responses = list(responses)
        self.requests = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.requests.append({"url": url, "json": json, "headers": headers})
        return self.responses.pop(0)

    def close(self):
        pass


def _remote_cfg(**kwargs):
    values = dict(backend="remote", endpoint="https://llm.example/v1/chat/completions", max_retries=2,
                  backoff=0.0, api_key_env="TEST_EXTRACTOR_KEY", max_in_flight=1)
    values.update(kwargs)
    return ExtractorConfig(**values)


def _chat(content):
    return {"choices": [{"message": {"content": content}}]}


@pytest.fixture
def api_key(monkeypatch):
    monkeypatch.setenv("TEST_EXTRACTOR_KEY", "secret")


def test_clusters_cover_every_level():
    sids = {"i0": (0, 1), "i1": (0, 0), "i2": (1, 1)}
    vocab = Vocabulary.build([], ["<a_0>", "<a_1>", "<a_2>", "<b_0>", "<b_1>"])
    clusters = {c.token: c for c in build_token_clusters(sids, vocab)}
    assert clusters["<a_0>"].member_items == ("i0", "i1")
    assert clusters["<b_1>"].member_items == ("i0", "i2")
    assert clusters["<a_2>"].is_empty

    with pytest.raises(ContractViolation):
        build_token_clusters({"i0": (5, 0)}, vocab)


def test_sample_is_seeded_and_capped():
    cluster = TokenCluster(token="<a_3>", member_items=tuple(f"i{n:02d}" for n in range(40)))
    first = sample_cluster(cluster, 8, seed=7)
    assert len(first) == 8 and first == sorted(first)
    assert first == sample_cluster(cluster, 8, seed=7)
    assert sample_cluster(TokenCluster("<a_1>", ("x", "y")), 8, seed=7) == ["x", "y"]


def test_prompt_lists_optional_fields_only_when_present():
    catalog = make_catalog(2)
    prompt = render_extraction_prompt(["i0", "i1"], catalog, "general merchandise")
    assert "red widget 0" in prompt and "red widget 1" in prompt
    assert prompt.count("acme") == 1
    assert "tools" in prompt


def test_extraction_prompt_matches_golden(golden):
    prompt = render_extraction_prompt(["i0", "i1"], make_catalog(2), "general merchandise")
    assert prompt == golden("semantic_extraction.txt")
    assert prompt.endswith("Description: a sturdy widget number 1")
    assert "JSON" not in prompt


def test_extraction_prompt_falls_back_to_default_category():
    catalog = make_catalog(3)
    prompt = render_extraction_prompt(["i1", "i2"], catalog, "general merchandise")
    assert "expertise in general merchandise product classification" in prompt
    assert "Categories:" not in prompt.split("Items:")[1]


def test_local_keywords_are_deterministic_and_normalized():
    catalog = make_catalog(6)
    local = LocalKeywordExtractor(catalog, top_terms=4)
    first = local.extract(TokenCluster("<a_0>", ("i0", "i3")))
    assert first == local.extract(TokenCluster("<a_0>", ("i3", "i0")))
    assert 0 < len(first["keywords"]) <= 4
    assert all(k == k.lower() for k in first["keywords"])
    assert first["description"]


def test_local_extraction_skips_empty_clusters():
    extractor = SemanticExtractor(make_catalog(3), ExtractorConfig())
    result = extractor.extract_all([TokenCluster("<a_0>", ("i0",)), TokenCluster("<a_1>", ())])
    assert [s.token for s in result] == ["<a_0>"]
    assert extractor.report()["skipped_empty"] == 1


def test_parse_plain_and_fenced_chat_bodies():
    plain = parse_semantics_response({"description": " Boots ", "keywords": ["Hiking", "hiking", " Trail "]})
    assert plain == {"description": "Boots", "keywords": ["hiking", "trail"]}
    fenced = parse_semantics_response(_chat('```json\n{"description": "d", "keywords": ["k"]}\n```'))
    assert fenced == {"description": "d", "keywords": ["k"]}
    with pytest.raises(ExternalServiceError):
        parse_semantics_response({"description": "", "keywords": []})
    with pytest.raises(ExternalServiceError):
        parse_semantics_response(_chat("not json at all"))


def test_remote_requires_api_key(monkeypatch):
    monkeypatch.delenv("TEST_EXTRACTOR_KEY", raising=False)
    with pytest.raises(ConfigError):
        SemanticAPIService(_remote_cfg())


def test_remote_retries_then_succeeds(api_key):
    session = FakeSession([
        FakeResponse(500, "busy"),
        FakeResponse(200, _chat('{"description": "Widgets", "keywords": ["Red"]}')),
    ])
    service = SemanticAPIService(_remote_cfg(), session=session)
    assert service.extract("prompt", token="<a_0>") == {"description": "Widgets", "keywords": ["red"]}
    assert service.calls == 2
    body = session.requests[0]["json"]
    assert [m["role"] for m in body["messages"]] == ["system", "user"]
    assert body["messages"][1]["content"] == "prompt"
    assert "JSON" in body["messages"][0]["content"]
    assert session.requests[0]["headers"]["Authorization"] == "Bearer secret"


def test_remote_gives_up_after_retries(api_key):
    session = FakeSession([FakeResponse(503, "down")] * 3)
    service = SemanticAPIService(_remote_cfg(max_retries=2), session=session)
    with pytest.raises(ExtractionError):
        service.extract("prompt", token="<a_0>")
    assert service.calls == 3


def test_completion_endpoint_sends_prompt_field(api_key):
    session = FakeSession([FakeResponse(200, {"description": "d", "keywords": ["k"]})])
    service = SemanticAPIService(_remote_cfg(endpoint="https://llm.example/extract"), session=session)
    service.extract("hello")
    sent = session.requests[0]["json"]["prompt"]
    assert sent.startswith("hello\n\n") and "\"keywords\"" in sent


class CountingClient:
    def __init__(self, fail=False):
        self.calls = 0
        self.fail = fail

    def extract(self, prompt, token=""):
        self.calls += 1
        if self.fail:
            raise ExtractionError("boom")
        return {"description": f"about {token}", "keywords": ["Red", "widget"]}


def test_remote_results_are_cached_on_disk(tmp_path):
    catalog = make_catalog(4)
    clusters = [TokenCluster("<a_0>", ("i0", "i1")), TokenCluster("<a_1>", ("i2", "i3"))]
    client = CountingClient()
    first = SemanticExtractor(catalog, _remote_cfg(), cache_dir=str(tmp_path), client=client).extract_all(clusters)
    assert client.calls == 2

    again = CountingClient()
    extractor = SemanticExtractor(catalog, _remote_cfg(), cache_dir=str(tmp_path), client=again)
    second = extractor.extract_all(clusters)
    assert again.calls == 0
    assert second == first
    assert extractor.report()["cache_hits"] == 2

    # A changed member set is a different cache entry
    extractor.extract_all([TokenCluster("<a_0>", ("i0", "i2"))])
    assert again.calls == 1


def test_remote_failure_falls_back_to_local(tmp_path):
    catalog = make_catalog(4)
    extractor = SemanticExtractor(catalog, _remote_cfg(), cache_dir=str(tmp_path), client=CountingClient(fail=True))
    result = extractor.extract(TokenCluster("<a_0>", ("i0", "i1")))
    assert result.keywords
    assert extractor.report()["fallback_tokens"] == ["<a_0>"]

    strict = SemanticExtractor(catalog, _remote_cfg(fallback_local=False), cache_dir=str(tmp_path),
                               client=CountingClient(fail=True))
    with pytest.raises(ExtractionError):
        strict.extract(TokenCluster("<a_1>", ("i2",)))


def test_cache_survives_reopen(tmp_path):
    cache = SemanticsCache(str(tmp_path))
    digest = member_hash(["b", "a"])
    assert digest == member_hash(["a", "b"])
    assert cache.get("<a_0>", digest, "local") is None
    cache.put("<a_0>", digest, "local", {"description": "d", "keywords": ["k"]})
    reopened = SemanticsCache(str(tmp_path))
    assert reopened.get("<a_0>", digest, "local") == {"description": "d", "keywords": ["k"]}
    assert reopened.get("<a_0>", digest, "remote") is None


def test_semantics_file_round_trip(tmp_path):
    extractor = SemanticExtractor(make_catalog(3), ExtractorConfig())
    semantics = extractor.extract_all([TokenCluster("<a_0>", ("i0", "i1"))])
    write_semantics(tmp_path / "s.jsonl", semantics)
    assert read_semantics(tmp_path / "s.jsonl") == semantics
