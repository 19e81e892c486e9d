"""
Training on the bundled corpus with and without AR/TAR
======================================================

A few epochs of a small LSTM language model, then a look at how the
regularizers changed the final-layer activations.
"""

import numpy as np

import rlm
from rlm import autodiff as ad
from rlm.corpus import Corpus, batchify, bptt_slice
from rlm.trainer import TrainConfig, train

with open(rlm.tiny_corpus_path(), encoding="utf-8") as fh:
    text = fh.read()
lines = text.splitlines()
corpus = Corpus.from_text("\n".join(lines[:80]), valid="\n".join(lines[80:]))
print("vocabulary", len(corpus.vocab), "train tokens", corpus.train.size)


def activation_stats(model, ids):
    data = batchify(ids, 5)
    hidden = model.init_state(5)
    norms, moves = [], []
    with ad.no_grad():
        for off in data.offsets(35):
            x, _ = bptt_slice(data, off, 35)
            _, out = model.forward(x, hidden)
            hidden = out.state
            h = out.raw.data
            norms.append(np.linalg.norm(h, axis=-1).mean())
            moves.append(np.linalg.norm(h[1:] - h[:-1], axis=-1).mean())
    return np.mean(norms), np.mean(moves)


###############################################################################
# Same seed, same data; only alpha and beta differ
for alpha, beta in [(0.0, 0.0), (2.0, 1.0)]:
    cfg = TrainConfig(hidden_size=32, batch_size=5, lr0=5.0, max_epochs=15,
                      dp=0.1, dp_h=0.1, alpha=alpha, beta=beta, seed=3)
    result = train(cfg, corpus)
    norm, move = activation_stats(result.model, corpus.train)
    print(f"alpha={alpha} beta={beta}: best valid ppl {result.best_valid_ppl:.2f}, "
          f"mean |h| {norm:.3f}, mean |h_t+1 - h_t| {move:.3f}")
