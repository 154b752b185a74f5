"""HTTP wire contract: /chat, /health, /config."""

import pytest
from fastapi.testclient import TestClient

from retgen.ensemble import Ensemble, EnsembleConfig
from retgen.service import create_app


@pytest.fixture(scope="module")
def client(desk):
    config = EnsembleConfig.from_file(desk["paths"]["config"])
    app = create_app(Ensemble.load(config))
    with TestClient(app, raise_server_exceptions=False) as client:
        yield client


class TestChatEndpoint:
    def test_happy_path_schema(self, client, desk):
        query = " ".join(desk["pairs"][0].query)
        resp = client.post("/chat", json={"query": query})
        assert resp.status_code == 200
        assert resp.headers["content-type"].startswith("application/json")
        assert "charset=utf-8" in resp.headers["content-type"]
        body = resp.json()
        assert body["provenance"] in ("retrieved", "generated")
        assert isinstance(body["reply"], str) and body["reply"]
        assert len(body["candidates"]) in (1, 2)
        for cand in body["candidates"]:
            assert set(cand) >= {"text", "provenance", "score"}
        assert set(body["timings_ms"]) == {"retrieve", "generate", "rerank", "total"}
        assert "model_versions" in body

    def test_reply_matches_chosen_candidate(self, client, desk):
        resp = client.post("/chat", json={"query": " ".join(desk["pairs"][3].query)})
        body = resp.json()
        chosen = [c for c in body["candidates"]
                  if c["provenance"] == body["provenance"]]
        assert body["reply"] in [c["text"] for c in chosen]

    def test_mode_override(self, client, desk):
        query = " ".join(desk["pairs"][1].query)
        retrieved = client.post("/chat", json={"query": query,
                                               "mode": "retrieval_only"}).json()
        generated = client.post("/chat", json={"query": query,
                                               "mode": "generation_only"}).json()
        assert retrieved["provenance"] == "retrieved"
        assert generated["provenance"] == "generated"

    def test_blank_query_is_400(self, client):
        resp = client.post("/chat", json={"query": "   "})
        assert resp.status_code == 400
        body = resp.json()
        assert body["error"] == "empty_query"
        assert "detail" in body

    def test_bad_mode_is_422(self, client):
        resp = client.post("/chat", json={"query": "hi", "mode": "bogus"})
        assert resp.status_code == 422
        assert resp.json()["error"] == "validation_error"

    def test_missing_query_is_422(self, client):
        assert client.post("/chat", json={}).status_code == 422

    def test_bad_decode_overrides_rejected(self, client):
        resp = client.post("/chat", json={"query": "hi", "max_len": 0})
        assert resp.status_code == 422

    def test_decode_override_applies(self, client, desk):
        query = " ".join(desk["pairs"][2].query)
        resp = client.post("/chat", json={"query": query,
                                          "mode": "generation_only",
                                          "max_len": 1})
        assert resp.status_code == 200
        body = resp.json()
        generated = [c for c in body["candidates"] if c["provenance"] == "generated"]
        if generated:
            assert len(generated[0]["text"].split()) <= 1

    def test_unicode_query(self, client):
        resp = client.post("/chat", json={"query": "héllo wörld ομιλία 話す"})
        assert resp.status_code == 200


class TestHealthAndConfig:
    def test_health(self, client):
        body = client.get("/health").json()
        assert body["status"] == "ok"
        assert body["uptime_s"] >= 0.0

    def test_config_exposes_artifacts_and_checksums(self, client):
        body = client.get("/config").json()
        assert body["mode"] == "ensemble"
        assert set(body["checksums"]) >= {"pairs", "index", "matcher",
                                          "generator", "generator_payload"}
        for digest in body["checksums"].values():
            assert len(digest) == 64

    def test_checksums_stable_across_requests(self, client):
        first = client.get("/config").json()["checksums"]
        for _ in range(3):
            client.post("/chat", json={"query": "what does the cat"})
        assert client.get("/config").json()["checksums"] == first


class TestCors:
    def test_cors_headers_present(self, client):
        resp = client.options("/chat", headers={
            "Origin": "http://example.com",
            "Access-Control-Request-Method": "POST",
        })
        assert resp.headers.get("access-control-allow-origin") == "*"

    def test_cors_disabled(self, desk):
        config = EnsembleConfig.from_file(desk["paths"]["config"])
        app = create_app(Ensemble.load(config), cors=False)
        with TestClient(app) as client:
            resp = client.post("/chat", json={"query": "hello"},
                               headers={"Origin": "http://example.com"})
            assert "access-control-allow-origin" not in resp.headers


class TestFuzz:
    def test_no_5xx_over_random_queries(self, client, desk):
        """Smoke-scale fuzz; the 1000-query run lives in the acceptance suite."""
        import numpy as np
        rng = np.random.default_rng(0)
        words = [t for p in desk["pairs"] for t in p.query]
        junk = ["", "   ", "zzz", "🤖🤖", "a" * 200, "\t\n", "'; drop; --"]
        for _ in range(60):
            if rng.random() < 0.2:
                query = junk[int(rng.integers(len(junk)))]
            else:
                query = " ".join(words[int(rng.integers(len(words)))]
                                 for _ in range(int(rng.integers(1, 6))))
            resp = client.post("/chat", json={"query": query})
            assert resp.status_code < 500
            if resp.status_code == 200:
                body = resp.json()
                assert len(body["candidates"]) in (1, 2)
