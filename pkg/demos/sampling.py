"""
Sampling text
=============

Train briefly, then draw paragraphs with the end-of-line and unknown tokens
excluded.
"""

import rlm
from rlm.corpus import Corpus
from rlm.generator import SamplerConfig, generate, moses_detokenize
from rlm.trainer import TrainConfig, train

with open(rlm.tiny_corpus_path(), encoding="utf-8") as fh:
    corpus = Corpus.from_text(fh.read())

cfg = TrainConfig(hidden_size=32, batch_size=5, lr0=5.0, max_epochs=20, dp=0.0, dp_h=0.0,
                  alpha=0.0, beta=0.0)
model = train(cfg, corpus).model

for temperature in (1.0, 0.5):
    words = generate(model, corpus.vocab, SamplerConfig(num_words=30, temperature=temperature, seed=7))
    print(f"T={temperature}:", moses_detokenize(words))
    print()

# markers left by Moses-style tokenisation are joined back up
print(moses_detokenize("a high @-@ quality mill made 4 @.@ 9 tons".split()))
