import json
import math
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eegtext.classifier import ClassPrediction
from eegtext.textgen import (DEFAULT_CORPUS, EOS, EOS_TOKEN, BackendError, BackendSpec,
                             GenerationResult, NgramBackend, NoLogprobs, PromptTemplate,
                             RemoteBackend, TemplateError, bpc, build_prompt,
                             cross_entropy_perplexity, generate, ngram_train, perplexity,
                             ppl_table_csv, score_predictions, summarize_ppl, uniform_model)

from oracles import ngram_logprob_loop

BOS = "\x02"


def pred(label=0, names=("Dog", "Cat")):
    p = np.full(len(names), 0.1 / (len(names) - 1))
    p[label] = 0.9
    return ClassPrediction.from_probs(p, list(names))


# ----------------------------------------------------------------------
# prompts

def test_template_substitution():
    t = PromptTemplate("Describe [CLASS] please")
    assert t.render("Dog") == "Describe Dog please"
    assert build_prompt(t, pred(1)) == "Describe Cat please"
    assert "Dog" in build_prompt(PromptTemplate(), pred(0))


def test_template_needs_exactly_one_placeholder():
    for bad in ("no slot", "[CLASS] and [CLASS]"):
        with pytest.raises(TemplateError):
            PromptTemplate(bad)


def test_class_name_containing_placeholder_is_not_reexpanded():
    assert PromptTemplate("<[CLASS]>").render("[CLASS]") == "<[CLASS]>"


# ----------------------------------------------------------------------
# n-gram model

def test_bigram_probability_on_a_tiny_corpus():
    m = ngram_train("abab", order=2, smoothing=1.0)
    assert m.V == 3                          # a, b and the end marker
    assert m.prob("b", "a") == pytest.approx(0.6)
    assert m.prob("a", BOS) == pytest.approx(2 / 4)


@given(st.integers(1, 4), st.floats(0.1, 3.0), st.text("abc ", min_size=0, max_size=6))
def test_distributions_normalize(order, alpha, history):
    m = ngram_train(["abc cab", "bca"], order, alpha)
    assert m.distribution(m.context(history)).sum() == pytest.approx(1.0, abs=1e-12)


@given(st.integers(1, 4), st.floats(0.1, 2.0), st.text("abcdz ", min_size=0, max_size=10))
def test_sequence_logprob_matches_recount_oracle(order, alpha, text):
    lines = ["abc cab", "bca b", "cc a"]
    m = ngram_train(lines, order, alpha)
    got = sum(m.symbol_logprobs(text))
    want, count = ngram_logprob_loop(lines, text, order, alpha, BOS, EOS)
    assert len(m.symbol_logprobs(text)) == count
    assert got == pytest.approx(want, abs=1e-10)


def test_training_rejects_bad_input():
    with pytest.raises(ValueError):
        ngram_train("")
    with pytest.raises(ValueError):
        ngram_train("ab", order=3)
    with pytest.raises(ValueError):
        ngram_train("a\x03b")


@pytest.mark.parametrize("v", [2, 27, 256])
def test_uniform_model_perplexity_is_vocabulary_size(v):
    m = uniform_model(v)
    assert m.V == v
    lp = m.symbol_logprobs("hello there")
    assert abs(perplexity(lp) - v) <= 1e-9 * v
    assert abs(bpc(perplexity(lp)) - math.log2(v)) <= 1e-9


def test_perplexity_forms_agree():
    m = ngram_train(DEFAULT_CORPUS, 3)
    text = "the dog ran"
    lp = m.symbol_logprobs(text)
    # empirical distribution over the (context, symbol) events of this text
    p = np.full(len(lp), 1 / len(lp))
    assert cross_entropy_perplexity(p, np.exp(lp)) == pytest.approx(perplexity(lp), rel=1e-12)
    assert perplexity([0.0, 0.0]) == 1.0
    with pytest.raises(ValueError):
        perplexity([])
    with pytest.raises(ValueError):
        perplexity([0.1])


def test_in_domain_text_scores_better_than_foreign_alphabet():
    m = ngram_train(DEFAULT_CORPUS, 3)
    home = perplexity(m.symbol_logprobs("The cat sat by the window."))
    away = perplexity(m.symbol_logprobs("Ωψβ ΔΞ ζλμ"))
    assert home < away


# ----------------------------------------------------------------------
# builtin backend

def test_builtin_generation_is_seeded_per_prompt():
    b = NgramBackend(ngram_train(DEFAULT_CORPUS, 3), seed=4)
    r1, r2 = b.complete("prompt A", 40), b.complete("prompt A", 40)
    assert r1.tokens == r2.tokens and r1.logprobs == r2.logprobs
    assert len(r1.tokens) <= 40
    others = [b.complete(f"prompt {i}", 40).tokens for i in range(5)]
    assert any(o != r1.tokens for o in others)


def test_builtin_generation_differs_across_trial_streams():
    b = NgramBackend(ngram_train(DEFAULT_CORPUS, 3), seed=4)
    assert b.complete("p", 40, stream=3).tokens == b.complete("p", 40, stream=3).tokens
    assert len({tuple(b.complete("p", 40, stream=i).tokens) for i in range(6)}) > 1


def test_builtin_logprobs_are_model_probabilities():
    m = ngram_train(DEFAULT_CORPUS, 3)
    r = NgramBackend(m, seed=1, temperature=0.5).complete("x", 30)
    syms = [EOS if t == EOS_TOKEN else t for t in r.tokens]
    hist = ""
    for s, lp in zip(syms, r.logprobs):
        assert lp == pytest.approx(math.log(m.prob(s, m.context(hist))), abs=1e-12)
        hist += s


def test_generate_attaches_prediction_and_respects_concurrency():
    b = BackendSpec.parse("builtin").build()
    preds = [pred(i % 2) for i in range(6)]
    serial = generate(preds, b, max_tokens=20)
    threaded = generate(preds, b, max_tokens=20, concurrency=3)
    assert [r.tokens for r in serial] == [r.tokens for r in threaded]
    assert serial[1].class_name == "Cat" and serial[1].label == 1
    rec = json.loads(serial[0].to_json(trial=0))
    assert set(rec) >= {"prompt", "class", "label", "probs", "tokens", "logprobs", "backend"}
    assert rec["probs"] == pytest.approx([0.9, 0.1])


def test_generation_result_validates_logprobs():
    with pytest.raises(ValueError):
        GenerationResult("p", ["a"], [0.5], "x")
    with pytest.raises(ValueError):
        GenerationResult("p", ["a", "b"], [-0.5], "x")
    assert not GenerationResult("p", ["a"], None, "x").has_logprobs


def test_score_predictions_with_references():
    b = BackendSpec.parse("uniform:30").build()
    seqs = score_predictions([pred(0), pred(1)], b, references={"Dog": "woof", "Cat": "mew"})
    assert [len(s) for s in seqs] == [5, 4]
    row = summarize_ppl(2, seqs)
    assert row.mean_ppl == pytest.approx(30, abs=1e-9)
    assert row.mean_bpc == pytest.approx(math.log2(30), abs=1e-12)
    assert ppl_table_csv([row]).splitlines()[0] == "n_classes,mean_ppl,mean_bpc,n_sequences"
    with pytest.raises(KeyError):
        score_predictions([pred(0)], b, references={"Cat": "mew"})


def test_backend_spec_parsing(tmp_path):
    assert BackendSpec.parse("builtin").kind == "builtin-ngram"
    corpus = tmp_path / "c.txt"
    corpus.write_text("zzz yyy\n")
    b = BackendSpec.parse(f"builtin:{corpus}").build()
    assert b.model.V == 4
    assert BackendSpec.parse("uniform:12").vocab_size == 12
    assert BackendSpec.parse("remote:http://h/x").url == "http://h/x"
    assert "token" not in BackendSpec.parse("remote:http://h", token="s3cret").to_dict()
    for bad in ("remote", "uniform:abc", "gpt"):
        with pytest.raises(ValueError):
            BackendSpec.parse(bad)


# ----------------------------------------------------------------------
# remote backend against a local server

class _Handler(BaseHTTPRequestHandler):
    mode = "ok"
    seen = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).seen.append((body, self.headers.get("Authorization")))
        if self.mode == "error":
            self.send_response(503)
            self.end_headers()
            return
        payload = {"tokens": ["Hi", " there"]}
        if self.mode == "ok":
            payload["logprobs"] = [-0.5, -1.25]
        data = json.dumps(payload).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    srv = HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    _Handler.seen = []
    yield f"http://127.0.0.1:{srv.server_address[1]}/v1/complete"
    srv.shutdown()
    srv.server_close()


def test_remote_completion_roundtrip(server):
    _Handler.mode = "ok"
    b = RemoteBackend(server, model="m1", token="tok")
    r = b.complete("hello", 7)
    assert r.tokens == ["Hi", " there"] and r.logprobs == [-0.5, -1.25]
    body, auth = _Handler.seen[0]
    assert body == {"model": "m1", "prompt": "hello", "max_tokens": 7, "temperature": 1.0,
                    "logprobs": True}
    assert auth == "Bearer tok"


def test_remote_without_logprobs_cannot_be_scored(server):
    _Handler.mode = "nolp"
    b = RemoteBackend(server)
    assert not b.complete("x").has_logprobs
    with pytest.raises(NoLogprobs):
        score_predictions([pred()], b)
    with pytest.raises(NoLogprobs):
        score_predictions([pred()], b, references={"Dog": "x"})


def test_remote_http_error(server):
    _Handler.mode = "error"
    with pytest.raises(BackendError, match="503"):
        RemoteBackend(server).complete("x")


def test_remote_unreachable():
    with pytest.raises(BackendError, match="cannot reach"):
        RemoteBackend("http://127.0.0.1:9/none", timeout=2).complete("x")
