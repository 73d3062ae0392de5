"""Prompt construction, completion backends and perplexity scoring.

Two backends live in-process: a character n-gram model with Laplace
smoothing, and a uniform model that assigns ``1/V`` to every symbol. A third
talks to a remote completion endpoint over HTTP.
"""

from __future__ import annotations

import json
import math
import urllib.error
import urllib.request
import zlib
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .classifier import ClassPrediction

PLACEHOLDER = "[CLASS]"
DEFAULT_TEMPLATE = ("Based on EEG signals classified as [CLASS], "
                    "generate a relevant descriptive sentence: ")
BOS = "\x02"
EOS = "\x03"
EOS_TOKEN = "</s>"


class TemplateError(ValueError):
    pass


class BackendError(RuntimeError):
    pass


class NoLogprobs(BackendError):
    pass


# ----------------------------------------------------------------------
# prompts

@dataclass(frozen=True)
class PromptTemplate:
    text: str = DEFAULT_TEMPLATE

    def __post_init__(self):
        n = self.text.count(PLACEHOLDER)
        if n != 1:
            raise TemplateError(f"template must contain {PLACEHOLDER} exactly once (found {n})")

    def render(self, class_name: str) -> str:
        # split once so a class name containing the placeholder is not re-expanded
        head, tail = self.text.split(PLACEHOLDER)
        return head + class_name + tail


def build_prompt(template: PromptTemplate | str, prediction: ClassPrediction) -> str:
    if isinstance(template, str):
        template = PromptTemplate(template)
    if prediction.class_name is None:
        raise ValueError("prediction carries no class name")
    return template.render(prediction.class_name)


# ----------------------------------------------------------------------
# n-gram model

@dataclass
class NgramModel:
    order: int
    smoothing: float
    vocab: list[str]                          # predictable symbols, EOS included
    counts: dict[str, Counter] = field(default_factory=dict)

    def __post_init__(self):
        self._index = {s: i for i, s in enumerate(self.vocab)}
        self._totals = {ctx: sum(c.values()) for ctx, c in self.counts.items()}

    @property
    def V(self) -> int:
        return len(self.vocab)

    def context(self, history: str) -> str:
        """Conditioning context for the next symbol after ``history``."""
        if self.order == 1:
            return ""
        padded = BOS * (self.order - 1) + history
        return padded[-(self.order - 1):]

    def prob(self, symbol: str, context: str) -> float:
        if symbol not in self._index:
            raise KeyError(f"symbol {symbol!r} outside the vocabulary")
        seen = self.counts.get(context)
        c = seen[symbol] if seen else 0
        return (c + self.smoothing) / (self._totals.get(context, 0) + self.smoothing * self.V)

    def distribution(self, context: str) -> np.ndarray:
        seen = self.counts.get(context, {})
        c = np.array([seen.get(s, 0) for s in self.vocab], dtype=np.float64)
        return (c + self.smoothing) / (c.sum() + self.smoothing * self.V)

    def symbol_logprobs(self, text: str, history: str = "", end: bool = True) -> list[float]:
        """Natural-log probability of every symbol of ``text`` (then EOS if ``end``).

        Symbols the model has never seen are mapped onto the smoothing floor
        of their context, ``alpha / (n + alpha V)``.
        """
        out, hist = [], history
        for ch in list(text) + ([EOS] if end else []):
            ctx = self.context(hist)
            if ch in self._index:
                p = self.prob(ch, ctx)
            else:
                p = self.smoothing / (self._totals.get(ctx, 0) + self.smoothing * self.V)
            out.append(math.log(p))
            hist += ch
        return out


def ngram_train(corpus: str | Iterable[str], order: int = 3, smoothing: float = 1.0) -> NgramModel:
    """Character-level counts over sentences, each wrapped in BOS/EOS sentinels.

    The vocabulary is the corpus alphabet plus EOS; BOS is only ever
    conditioned on, never predicted, so it holds no probability mass.
    """
    lines = corpus.splitlines() if isinstance(corpus, str) else list(corpus)
    lines = [ln for ln in lines if ln]
    if not lines:
        raise ValueError("empty corpus")
    if sum(len(ln) for ln in lines) < order:
        raise ValueError(f"corpus shorter than the model order {order}")
    if order < 1 or smoothing <= 0:
        raise ValueError("order must be >= 1 and smoothing > 0")
    if any(BOS in ln or EOS in ln for ln in lines):
        raise ValueError("corpus contains reserved sentinel characters")
    counts: dict[str, Counter] = defaultdict(Counter)
    for ln in lines:
        seq = BOS * (order - 1) + ln + EOS
        for i in range(order - 1, len(seq)):
            counts[seq[i - order + 1:i]][seq[i]] += 1
    vocab = sorted(set("".join(lines))) + [EOS]
    return NgramModel(order, float(smoothing), vocab, dict(counts))


def uniform_model(vocab_size: int) -> NgramModel:
    """Every symbol has probability ``1 / vocab_size`` in every context."""
    if vocab_size < 2:
        raise ValueError("vocabulary needs at least two symbols")
    # printable symbols first, then the Latin-1 supplement and beyond
    symbols = [chr(c) for c in range(32, 127)] + [chr(c) for c in range(0xA1, 0xA1 + vocab_size)]
    return NgramModel(1, 1.0, symbols[:vocab_size - 1] + [EOS], {})


# ----------------------------------------------------------------------
# backends

@dataclass
class GenerationResult:
    prompt: str
    tokens: list[str]
    logprobs: list[float] | None
    backend: str
    probs: list[float] = field(default_factory=list)
    label: int = -1
    class_name: str | None = None
    has_logprobs: bool = True

    def __post_init__(self):
        if self.logprobs is None:
            self.has_logprobs = False
        elif len(self.logprobs) != len(self.tokens):
            raise ValueError("tokens and logprobs differ in length")
        elif any(lp > 0 or not math.isfinite(lp) for lp in self.logprobs):
            raise ValueError("log-probabilities must be finite and <= 0")

    @property
    def text(self) -> str:
        return "".join(t for t in self.tokens if t != EOS_TOKEN)

    def to_json(self, **extra) -> str:
        rec = {"prompt": self.prompt, "class": self.class_name, "label": self.label,
               "probs": list(map(float, self.probs)), "tokens": self.tokens,
               "logprobs": self.logprobs, "backend": self.backend, **extra}
        return json.dumps(rec, ensure_ascii=False)


class Backend(Protocol):
    identifier: str
    scores_references: bool

    def complete(self, prompt: str, max_tokens: int, stream: int = 0) -> GenerationResult: ...

    def score(self, prompt: str, text: str) -> list[float]: ...


class NgramBackend:
    """Seeded sampling from an :class:`NgramModel`.

    Every completion is a fresh sentence (the model has no notion of the
    prompt's words). The sampling stream is keyed on
    ``(seed, crc32(prompt), stream)``, so a given prompt and trial index
    always draw the same text while different trials differ.
    """

    scores_references = True

    def __init__(self, model: NgramModel, seed: int = 0, temperature: float = 1.0,
                 name: str = "builtin-ngram"):
        if temperature <= 0:
            raise ValueError("temperature must be > 0")
        self.model, self.seed, self.temperature = model, seed, temperature
        self.identifier = f"{name}:order={model.order}:V={model.V}"

    def complete(self, prompt: str, max_tokens: int = 64, stream: int = 0) -> GenerationResult:
        rng = np.random.default_rng([self.seed, zlib.crc32(prompt.encode("utf-8")), stream])
        hist, tokens, logprobs = "", [], []
        for _ in range(max_tokens):
            p = self.model.distribution(self.model.context(hist))
            q = p ** (1.0 / self.temperature)
            i = int(rng.choice(len(q), p=q / q.sum()))
            sym = self.model.vocab[i]
            logprobs.append(math.log(p[i]))
            if sym == EOS:
                tokens.append(EOS_TOKEN)
                break
            tokens.append(sym)
            hist += sym
        return GenerationResult(prompt, tokens, logprobs, self.identifier)

    def score(self, prompt: str, text: str) -> list[float]:
        return self.model.symbol_logprobs(text, end=True)


@dataclass
class RemoteBackend:
    """JSON completion endpoint: POST ``{model, prompt, max_tokens, temperature, logprobs}``,
    expecting ``{tokens: [...], logprobs: [...]}`` back."""

    url: str
    model: str = ""
    token: str | None = None
    timeout: float = 30.0
    temperature: float = 1.0
    scores_references = False

    def __post_init__(self):
        if not self.url:
            raise ValueError("remote backend needs an endpoint URL")
        self.identifier = f"remote:{self.url}"

    def _post(self, body: dict) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        req = urllib.request.Request(self.url, json.dumps(body).encode("utf-8"), headers,
                                     method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                raw = resp.read()
        except urllib.error.HTTPError as exc:
            raise BackendError(f"{self.url} returned HTTP {exc.code}") from None
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            reason = getattr(exc, "reason", exc)
            raise BackendError(f"cannot reach {self.url}: {reason}") from None
        try:
            return json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise BackendError(f"{self.url} sent a non-JSON response") from None

    def complete(self, prompt: str, max_tokens: int = 64, stream: int = 0) -> GenerationResult:
        # the endpoint samples on its own; stream only matters for local backends
        out = self._post({"model": self.model, "prompt": prompt, "max_tokens": max_tokens,
                          "temperature": self.temperature, "logprobs": True})
        tokens = out.get("tokens")
        if not isinstance(tokens, list):
            raise BackendError(f"{self.url} response lacks a token list")
        logprobs = out.get("logprobs")
        if logprobs is not None:
            logprobs = [float(v) for v in logprobs]
        return GenerationResult(prompt, [str(t) for t in tokens], logprobs, self.identifier)

    def score(self, prompt: str, text: str) -> list[float]:
        raise NoLogprobs("the remote protocol has no reference-scoring call")


@dataclass
class BackendSpec:
    kind: str = "builtin-ngram"
    url: str = ""
    token: str | None = None
    model: str = ""
    timeout: float = 30.0
    max_tokens: int = 64
    temperature: float = 1.0
    seed: int = 0
    order: int = 3
    smoothing: float = 1.0
    corpus: str | None = None     # path; None selects the built-in sentences
    vocab_size: int = 256         # uniform backend only

    @classmethod
    def parse(cls, text: str, **defaults) -> "BackendSpec":
        """``builtin``, ``builtin:CORPUS_PATH``, ``uniform:V`` or ``remote:URL``."""
        kind, _, arg = text.partition(":")
        if kind in ("builtin", "builtin-ngram", "ngram"):
            return cls(kind="builtin-ngram", **{**defaults, **({"corpus": arg} if arg else {})})
        if kind == "uniform":
            try:
                v = int(arg) if arg else defaults.pop("vocab_size", 256)
            except ValueError:
                raise ValueError(f"bad vocabulary size in {text!r}") from None
            defaults.pop("vocab_size", None)
            return cls(kind="uniform", vocab_size=v, **defaults)
        if kind == "remote":
            url = arg or defaults.pop("url", "")
            defaults.pop("url", None)
            if not url:
                raise ValueError("remote backend needs an endpoint URL")
            return cls(kind="remote", url=url, **defaults)
        raise ValueError(f"unknown backend {text!r}")

    def build(self) -> Backend:
        if self.kind == "builtin-ngram":
            corpus = (Path(self.corpus).read_text(encoding="utf-8") if self.corpus
                      else DEFAULT_CORPUS)
            return NgramBackend(ngram_train(corpus, self.order, self.smoothing), self.seed,
                                self.temperature)
        if self.kind == "uniform":
            return NgramBackend(uniform_model(self.vocab_size), self.seed, self.temperature,
                                name="uniform")
        if self.kind == "remote":
            return RemoteBackend(self.url, self.model, self.token, self.timeout, self.temperature)
        raise ValueError(f"unknown backend kind {self.kind!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("token")  # never persisted
        return d


# ----------------------------------------------------------------------
# perplexity

def perplexity(logprobs: Sequence[float]) -> float:
    """``exp(-mean(logprobs))`` over natural-log token probabilities."""
    lp = np.asarray(list(logprobs), dtype=np.float64)
    if lp.size == 0:
        raise ValueError("perplexity of an empty sequence")
    if (lp > 0).any():
        raise ValueError("log-probabilities must be <= 0")
    return float(np.exp(-lp.mean()))


def bpc(ppl: float) -> float:
    if ppl < 1:
        raise ValueError("perplexity must be >= 1")
    return math.log2(ppl)


def cross_entropy_perplexity(p: Sequence[float], q: Sequence[float]) -> float:
    """``exp(-sum p log q)`` for an empirical distribution ``p`` over events scored by ``q``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or abs(p.sum() - 1) > 1e-9:
        raise ValueError("p must be a distribution aligned with q")
    return float(np.exp(-np.sum(p * np.log(q))))


# ----------------------------------------------------------------------
# class-conditioned generation and evaluation

def generate(predictions: Sequence[ClassPrediction], backend: Backend,
             template: PromptTemplate | None = None, max_tokens: int = 64,
             concurrency: int = 1) -> list[GenerationResult]:
    """One completion per prediction, prompted with the argmax class name.

    The full probability vector is kept on the result, not in the prompt.
    """
    template = template or PromptTemplate()

    def one(item) -> GenerationResult:
        i, pred = item
        res = backend.complete(build_prompt(template, pred), max_tokens, stream=i)
        res.probs, res.label, res.class_name = list(map(float, pred.probs)), pred.label, pred.class_name
        return res

    if concurrency > 1:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            return list(pool.map(one, enumerate(predictions)))
    return [one(item) for item in enumerate(predictions)]


@dataclass
class PplRow:
    n_classes: int
    mean_ppl: float
    mean_bpc: float
    n_sequences: int


def summarize_ppl(n_classes: int, sequences: Sequence[Sequence[float]]) -> PplRow:
    """Mean per-sequence perplexity; the BPC column is ``log2`` of that mean."""
    if not sequences:
        raise ValueError("no sequences to score")
    mean = float(np.mean([perplexity(s) for s in sequences]))
    return PplRow(n_classes, mean, bpc(mean), len(sequences))


def score_predictions(predictions: Sequence[ClassPrediction], backend: Backend,
                      template: PromptTemplate | None = None,
                      references: dict[str, str] | None = None,
                      max_tokens: int = 64) -> list[list[float]]:
    """Per-trial logprob sequences: generated continuations, or reference sentences
    keyed by class name when ``references`` is given."""
    template = template or PromptTemplate()
    out = []
    if references is not None:
        if not backend.scores_references:
            raise NoLogprobs(f"{backend.identifier} cannot score reference text")
        for pred in predictions:
            if pred.class_name not in references:
                raise KeyError(f"no reference sentence for class {pred.class_name!r}")
            out.append(backend.score(build_prompt(template, pred), references[pred.class_name]))
        return out
    for res in generate(predictions, backend, template, max_tokens):
        if not res.has_logprobs:
            raise NoLogprobs(f"{backend.identifier} returned no log-probabilities")
        out.append(res.logprobs)
    return out


def ppl_table_csv(rows: Sequence[PplRow]) -> str:
    lines = ["n_classes,mean_ppl,mean_bpc,n_sequences"]
    lines += [f"{r.n_classes},{r.mean_ppl!r},{r.mean_bpc!r},{r.n_sequences}" for r in rows]
    return "\n".join(lines) + "\n"


# Short plain sentences about the stimulus categories; a small training set
# for the built-in backend.
DEFAULT_CORPUS = """\
The dog ran across the wet grass to fetch a red ball.
A small brown dog sleeps in a patch of morning sun.
The cat watches the window from the top of the bookshelf.
A grey cat stretches slowly and walks toward its bowl.
A bird lands on the fence and sings before flying away.
Two birds share a branch high in the old oak tree.
The fish drift in slow circles around the weeds of the pond.
A silver fish flashes near the surface of the clear water.
A goose leads a line of goslings down to the river bank.
The geese fly south in a loose and noisy formation.
The car waits at the crossing while the light turns green.
A blue car is parked beside the bakery on the corner.
The truck carries a load of timber along the coast road.
A heavy truck climbs the hill with its engine humming.
The airplane rises above the clouds as the sun sets.
An airplane crosses the sky and leaves a thin white trail.
The aircraft taxis slowly toward the end of the runway.
A ship moves out of the harbor under a grey sky.
The old ship rests at anchor in the calm bay.
A bicycle leans against the wall near the garden gate.
She rides her bicycle along the path beside the canal.
The animals gather at the water hole in the evening.
Many animals in the park are resting in the shade.
Vehicles fill the street during the morning rush.
The vehicles move slowly through the busy town square.
"""
