"""
From a predicted class to a sentence, and scoring it
====================================================

The classifier's top class is substituted into a prompt template and sent
to a completion backend. The built-in backend is a character trigram model
with add-one smoothing. Perplexity is ``exp`` of the mean negative
log-probability per character, and bits per character is its base-2 log.
"""

import math

from eegtext.classifier import ClassPrediction
from eegtext.textgen import (DEFAULT_CORPUS, NgramBackend, PromptTemplate, bpc, generate,
                             ngram_train, perplexity, summarize_ppl, uniform_model)

lm = ngram_train(DEFAULT_CORPUS, order=3)
print(f"alphabet of {lm.V - 1} characters plus an end marker")

###############################################################################
# Prompting

template = PromptTemplate()
preds = [ClassPrediction.from_probs(p, ["Animals", "Vehicles"])
         for p in ([0.8, 0.2], [0.3, 0.7], [0.55, 0.45])]
backend = NgramBackend(lm, seed=7)
for res in generate(preds, backend, template, max_tokens=60):
    print(f"[{res.class_name}] {res.prompt!r}")
    print("   ->", res.text)

###############################################################################
# Add-one smoothing over ~30 symbols flattens a model trained on 25 short
# sentences, so samples are mostly noise. Lighter smoothing and a lower
# sampling temperature give recognisable fragments.

sharp = NgramBackend(ngram_train(DEFAULT_CORPUS, order=3, smoothing=0.02), seed=7,
                     temperature=0.7)
for res in generate(preds[:2], sharp, template, max_tokens=60):
    print(f"[{res.class_name}] ->", res.text)

###############################################################################
# Perplexity of text the model has and has not seen the like of

for text in ("The dog ran across the grass.", "A red car waits at the light.",
             "Zyxq vwpt kjh."):
    lp = lm.symbol_logprobs(text)
    ppl = perplexity(lp)
    print(f"{text!r:38s} ppl {ppl:7.2f}  bpc {bpc(ppl):.3f}")

###############################################################################
# Sanity anchor: a uniform model over V symbols always scores exactly V.

print("uniform(50):", perplexity(uniform_model(50).symbol_logprobs("anything at all")))
row = summarize_ppl(2, [r.logprobs for r in generate(preds, backend, template, 60)])
print(row, "2**bpc =", 2 ** row.mean_bpc)
assert math.isclose(2 ** row.mean_bpc, row.mean_ppl, rel_tol=1e-12)
