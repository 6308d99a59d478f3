import json
import math
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import mk_token, mk_token_topk
from cotpilot.embeddings import HashedProjectionProvider, HttpEmbeddingProvider
from cotpilot.features import (EmptyStep, EmptyTopK, ProviderDimensionMismatch,
                               SEM_DIM, TokenFeatureTracker, UNC_DIM, Z_DIM,
                               from_parts, fuse, pool_step, token_features)
from cotpilot.segmenter import TokenMeta


def uniform_topk(n, total_mass=1.0):
    p = total_mass / n
    return [(f"t{i}", math.log(p)) for i in range(n)]


def test_uniform_five_way_closed_form():
    tok = mk_token_topk("t0", uniform_topk(5))
    f = token_features(tok, None, [])
    assert f.entropy == pytest.approx(math.log(5), abs=1e-9)
    assert f.margin == pytest.approx(0.0, abs=1e-12)
    assert f.logit_gap == pytest.approx(0.0, abs=1e-12)
    assert f.topk_mass_5 == pytest.approx(1.0, abs=1e-9)
    assert f.topk_mass_10 == pytest.approx(1.0, abs=1e-9)


def test_two_point_closed_form():
    tok = mk_token_topk("a", [("a", math.log(0.9)), ("b", math.log(0.05))])
    f = token_features(tok, None, [])
    assert f.margin == pytest.approx(0.85, abs=1e-12)
    assert f.logit_gap == pytest.approx(math.log(0.9) - math.log(0.05), abs=1e-12)
    assert f.logit_gap == pytest.approx(2.89037175789616, abs=1e-9)
    # raw (non-renormalized) entropy keeps the tail-mass signal
    expected = -(0.9 * math.log(0.9) + 0.05 * math.log(0.05))
    assert f.entropy == pytest.approx(expected, abs=1e-12)


def test_constant_window_zero_zscore():
    tok = mk_token_topk("x", [("x", -1.0), ("y", -3.0)])
    f = token_features(tok, None, [-1.0] * 10)
    assert f.z_logp == 0.0


def test_zscore_known_value():
    tok = mk_token_topk("x", [("x", -1.0), ("y", -3.0)])
    # window mean -2, population std 1
    f = token_features(tok, None, [-1.0, -3.0])
    assert f.z_logp == pytest.approx(1.0, abs=1e-12)


def test_zscore_needs_two_entries():
    tok = mk_token_topk("x", [("x", -1.0), ("y", -3.0)])
    assert token_features(tok, None, []).z_logp == 0.0
    assert token_features(tok, None, [-5.0]).z_logp == 0.0


def test_dynamic_features_zero_at_start():
    f = token_features(mk_token("a", -0.7), None, [])
    assert (f.d_logp, f.d_entropy, f.d_margin) == (0.0, 0.0, 0.0)


def test_dynamic_features_are_differences():
    t1 = mk_token("a", -0.7)
    t2 = mk_token("b", -1.9)
    f1 = token_features(t1, None, [])
    f2 = token_features(t2, f1, [t1.logprob])
    assert f2.d_logp == pytest.approx(t2.logprob - t1.logprob, abs=1e-12)
    assert f2.d_entropy == pytest.approx(f2.entropy - f1.entropy, abs=1e-12)
    assert f2.d_margin == pytest.approx(f2.margin - f1.margin, abs=1e-12)


def test_rank_passthrough():
    f = token_features(mk_token("a", -0.7, rank=4), None, [])
    assert f.selected_rank == 4.0


def test_empty_topk():
    tok = TokenMeta("a", -0.5, 1, ())
    with pytest.raises(EmptyTopK):
        token_features(tok, None, [])


def test_tracker_crosses_step_boundaries():
    # the z-score window keeps filling across steps within a session
    tracker = TokenFeatureTracker(window=3)
    lps = [-1.0, -2.0, -3.0, -1.5]
    feats = [tracker.push(mk_token(f"t{i}", lp)) for i, lp in enumerate(lps)]
    # 4th token sees window [-1, -2, -3]: mean -2, std sqrt(2/3)
    expected = (-1.5 + 2.0) / math.sqrt(2.0 / 3.0)
    assert feats[3].z_logp == pytest.approx(expected, rel=1e-12)


def test_tracker_d_logp_matches_direct_difference_oracle():
    tracker = TokenFeatureTracker()
    lps = [-0.3, -1.2, -0.8, -2.5, -0.1]
    toks = [mk_token(f"t{i}", lp) for i, lp in enumerate(lps)]
    feats = [tracker.push(t) for t in toks]
    for i in range(1, len(toks)):
        assert feats[i].d_logp == pytest.approx(
            toks[i].logprob - toks[i - 1].logprob, abs=1e-12)


def test_pool_mean_and_identity():
    f1 = token_features(mk_token_topk("a", uniform_topk(4)), None, [])
    f2 = token_features(mk_token_topk("b", uniform_topk(2)), None, [])
    pooled = pool_step([f1, f2])
    assert pooled[2] == pytest.approx((math.log(4) + math.log(2)) / 2, abs=1e-9)
    single = pool_step([f1])
    assert np.allclose(single, f1.as_array())


def test_pool_empty_raises():
    with pytest.raises(EmptyStep):
        pool_step([])


@settings(max_examples=100)
@given(st.lists(st.floats(min_value=1e-6, max_value=1.0), min_size=2, max_size=20))
def test_mass_ordering_and_entropy_bound(weights):
    total = sum(weights)
    probs = sorted((w / total for w in weights), reverse=True)
    pairs = [(f"t{i}", math.log(p)) for i, p in enumerate(probs)]
    f = token_features(mk_token_topk("t0", pairs), None, [])
    assert 0.0 <= f.topk_mass_5 <= f.topk_mass_10 <= 1.0 + 1e-9
    assert f.entropy <= math.log(len(probs)) + 1e-9
    assert f.entropy >= 0.0
    assert f.logit_gap >= 0.0
    assert 0.0 <= f.margin <= 1.0


def test_entropy_equality_at_exact_uniform():
    for k in (2, 5, 10, 20):
        f = token_features(mk_token_topk("t0", uniform_topk(k)), None, [])
        assert f.entropy == pytest.approx(math.log(k), abs=1e-9)


@settings(max_examples=50)
@given(st.permutations(range(6)))
def test_pooling_commutes_with_permutation(perm):
    feats = [token_features(mk_token(f"t{i}", -0.2 - 0.3 * i), None, [])
             for i in range(6)]
    base = pool_step(feats)
    shuffled = pool_step([feats[i] for i in perm])
    assert np.allclose(base, shuffled, atol=1e-12)


def test_fuse_zeros_and_slices(provider):
    fv = from_parts(np.zeros(UNC_DIM), np.zeros(SEM_DIM))
    assert fv.z.shape == (Z_DIM,)
    assert np.all(fv.z == 0.0)

    h_unc = np.arange(UNC_DIM, dtype=float)
    fv = fuse(h_unc, provider, "some step text")
    assert np.array_equal(fv.z[:UNC_DIM], h_unc)
    assert np.array_equal(fv.z[UNC_DIM:], fv.h_sem)
    assert fv.z.shape == (Z_DIM,)


def test_fuse_dimension_mismatch():
    class Bad:
        def embed(self, text):
            return np.zeros(SEM_DIM - 1)

    with pytest.raises(ProviderDimensionMismatch):
        fuse(np.zeros(UNC_DIM), Bad(), "text")


def test_fuse_rejects_non_finite():
    class Bad:
        def embed(self, text):
            v = np.zeros(SEM_DIM)
            v[3] = np.nan
            return v

    with pytest.raises(ProviderDimensionMismatch):
        fuse(np.zeros(UNC_DIM), Bad(), "text")


def test_hashed_provider_deterministic_and_unit_norm():
    p1 = HashedProjectionProvider(seed=3)
    p2 = HashedProjectionProvider(seed=3)
    a = p1.embed("the same text")
    b = p2.embed("the same text")
    assert np.array_equal(a, b)
    assert a.shape == (SEM_DIM,)
    assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-9)
    assert not np.array_equal(a, p1.embed("different text"))
    assert not np.array_equal(a, HashedProjectionProvider(seed=4).embed("the same text"))


class _EmbedHandler(BaseHTTPRequestHandler):
    last_headers = None

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        _EmbedHandler.last_headers = dict(self.headers)
        vec = [float(len(body["text"]))] * SEM_DIM
        payload = json.dumps({"embedding": vec}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture
def embed_server():
    server = HTTPServer(("127.0.0.1", 0), _EmbedHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}/embed"
    server.shutdown()


def test_http_provider(embed_server, monkeypatch):
    monkeypatch.setenv("COTPILOT_EMBED_TOKEN", "sekrit")
    provider = HttpEmbeddingProvider(embed_server)
    vec = provider.embed("hello")
    assert vec.shape == (SEM_DIM,)
    assert np.all(vec == 5.0)
    assert _EmbedHandler.last_headers["Authorization"] == "Bearer sekrit"
