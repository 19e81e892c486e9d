"""Acceptance criteria, one marked group per criterion.

Run ``pytest tests/test_acceptance.py -v``; the terminal summary lists one
PASS/FAIL/SKIP line per criterion.
"""

import math
import os
import statistics
import time
from pathlib import Path

import numpy as np
import pytest

from rlm import autodiff as ad
from rlm.autodiff import Tensor
from rlm.checkpoint import load_checkpoint, save_checkpoint
from rlm.corpus import EOS, UNK, batchify, bptt_slice, build_vocabulary, read_lines, tokenize_lines
from rlm.errors import CheckpointError
from rlm.generator import SamplerConfig, generate, moses_detokenize
from rlm.gradcheck import COMPOSITE_TOL, PRIMITIVE_TOL, run_suite
from rlm.layers import LanguageModel, ModelConfig, embedding_lookup, param_shapes
from rlm.regularizers import ar_loss, tar_loss
from rlm.trainer import (TrainConfig, TrainState, clip_gradients, global_norm, load_model,
                         make_manifest, run_epoch, train)

from conftest import small_model
from test_regularizers import brute_tar


def overfit_config(**kw):
    base = dict(hidden_size=32, dp=0.0, dp_h=0.0, alpha=0.0, beta=0.0, batch_size=5, lr0=5.0,
                bptt=35)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------

@pytest.mark.criterion(1, "gradient suite")
def test_gradient_suite(note):
    start = time.perf_counter()
    results = run_suite()
    elapsed = time.perf_counter() - start
    names = {r.component for r in results}
    assert {"matmul", "add", "sub", "mul", "sigmoid", "tanh", "exp", "log", "l2_norm",
            "cross_entropy", "gather_rows", "ar+tar"} <= names
    assert {f"cell:{k}" for k in ("lstm", "gru", "tanh")} <= names
    assert {f"model:{k}" for k in ("lstm", "gru", "tanh")} <= names
    for r in results:
        want = COMPOSITE_TOL if r.component.startswith(("cell:", "model:")) else PRIMITIVE_TOL
        assert r.tolerance == want
        assert r.passed, f"{r.component}: {r.error:.3e}"
    note(f"criterion 1: worst relative error {max(r.error for r in results):.2e}, {elapsed:.1f}s")
    assert elapsed < 30


# ---------------------------------------------------------------------------

@pytest.mark.criterion(2, "regularizer oracle values and properties")
class TestRegularizerOracles:
    def test_worked_examples(self, rng):
        ar = ar_loss(Tensor(np.array([[[3.0, 4.0]]])), 2.0).item()
        assert abs(ar - 10.0) < 1e-10
        dropped = np.array([[[2.0, -2.0, 1.0]]]) * np.array([[[1.5, 0.0, 1.5]]])
        assert abs(ar_loss(Tensor(dropped), 2.0).item() - 2 * math.sqrt(11.25)) < 1e-10
        assert ar_loss(Tensor(np.zeros((2, 3, 4))), 3.0).item() == 0.0
        tar = tar_loss(Tensor(np.array([[[1.0, 1.0]], [[4.0, 5.0]]])), 2.0).item()
        assert abs(tar - 10.0) < 1e-10
        assert tar_loss(Tensor(np.tile(rng.normal(size=(1, 2, 3)), (4, 1, 1))), 2.0).item() == 0.0
        x = rng.normal(size=(4, 2, 5))
        assert abs(tar_loss(Tensor(x), 1.5).item() - brute_tar(x, 1.5)) < 1e-10

    def test_properties(self):
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            T, B, H = rng.integers(1, 6), rng.integers(1, 4), rng.integers(1, 5)
            x = rng.normal(size=(T, B, H))
            c = rng.uniform(-4, 4)
            ar = ar_loss(Tensor(x), 1.0).item()
            tar = tar_loss(Tensor(x), 1.0).item()
            assert abs(ar_loss(Tensor(c * x), 1.0).item() - abs(c) * ar) < 1e-10
            shift = rng.normal(size=(1, B, H))
            assert abs(tar_loss(Tensor(x + shift), 1.0).item() - tar) < 1e-10
            assert abs(tar_loss(Tensor(x[::-1].copy()), 1.0).item() - tar) < 1e-12
            assert ar > 0 and tar >= 0
            assert (tar > 0) == (T > 1)


# ---------------------------------------------------------------------------

def _regularizer_grads(model, ids, alpha=3.0, beta=2.0, seed=0):
    model.zero_grad()
    _, out = model.forward(ids, model.init_state(ids.shape[1]), training=True,
                           rng=np.random.default_rng(seed))
    ad.backward(ad.add(ar_loss(out.dropped, alpha), tar_loss(out.raw, beta)))
    return {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
            for k, p in model.params.items()}


@pytest.mark.criterion(3, "final-layer-only regularization")
@pytest.mark.parametrize("cell", ["lstm", "gru", "tanh"])
class TestFinalLayerOnly:
    ids = np.random.default_rng(5).integers(0, 11, size=(6, 3))

    def test_gradient_reaches_lower_layer(self, cell):
        g = _regularizer_grads(small_model(cell, dp=0.3, dp_h=0.2), self.ids)
        assert np.abs(g["rnn.0.U"]).sum() > 0 and np.abs(g["embedding"]).sum() > 0

    def test_only_through_layer2_input(self, cell):
        m = small_model(cell, dp=0.3, dp_h=0.2)
        m.params["rnn.1.W"].data[:] = 0.0
        # a nonzero bias keeps layer-2 outputs away from zero, so the
        # regularizers still have a gradient to send somewhere
        m.params["rnn.1.b"].data[:] = np.random.default_rng(1).uniform(-1, 1, m.params["rnn.1.b"].shape)
        g = _regularizer_grads(m, self.ids)
        for name in ("embedding", "rnn.0.W", "rnn.0.U", "rnn.0.b"):
            assert np.all(g[name] == 0.0), name
        assert np.abs(g["rnn.1.U"]).sum() > 0

    def test_zero_layer2_zero_gradients(self, cell):
        m = small_model(cell, dp=0.3, dp_h=0.2)
        for name in ("rnn.1.W", "rnn.1.U", "rnn.1.b"):
            m.params[name].data[:] = 0.0
        g = _regularizer_grads(m, self.ids)
        for name, grad in g.items():
            assert np.all(grad == 0.0), name


# ---------------------------------------------------------------------------

@pytest.mark.criterion(4, "overfit sanity")
@pytest.mark.slow
def test_overfit(tiny_corpus, note):
    cfg = overfit_config()
    model = LanguageModel.create(cfg.model_config(len(tiny_corpus.vocab)), 0)
    data = batchify(tiny_corpus.train, cfg.batch_size)
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    ppl = math.inf
    for epoch in range(1, 201):
        ppl = run_epoch(model, data, cfg, TrainState(lr=cfg.lr0), rng)
        if ppl < 1.5:
            break
    elapsed = time.perf_counter() - start
    note(f"criterion 4: {len(tiny_corpus.train)} tokens, train ppl {ppl:.4f} after {epoch} epochs, {elapsed:.1f}s")
    assert ppl < 1.5
    assert elapsed < 120


# ---------------------------------------------------------------------------

def _activation_stats(model, data, bptt=35):
    norms, diffs = [], []
    hidden = model.init_state(data.batch_size)
    with ad.no_grad():
        for offset in data.offsets(bptt):
            x, _ = bptt_slice(data, offset, bptt)
            _, out = model.forward(x, hidden, training=False)
            hidden = out.state
            h = out.raw.data
            norms.append(np.linalg.norm(h, axis=-1).ravel())
            diffs.append(np.linalg.norm(h[:-1] - h[1:], axis=-1).ravel())
    return float(np.concatenate(norms).mean()), float(np.concatenate(diffs).mean())


def _trained_stats(corpus, seed, epochs=40, **kw):
    cfg = overfit_config(**kw)
    model = LanguageModel.create(cfg.model_config(len(corpus.vocab)), seed)
    data = batchify(corpus.train, cfg.batch_size)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        ppl = run_epoch(model, data, cfg, TrainState(lr=cfg.lr0), rng)
    return (*_activation_stats(model, data), ppl)


@pytest.mark.criterion(5, "directional regularization effects")
@pytest.mark.slow
def test_directional_effects(tiny_corpus, note):
    runs = {name: [_trained_stats(tiny_corpus, seed, **kw) for seed in (0, 1, 2)]
            for name, kw in [("base", {}), ("ar", {"alpha": 5.0}), ("tar", {"beta": 5.0})]}
    med = {name: [statistics.median(r[i] for r in rs) for i in range(3)] for name, rs in runs.items()}
    for name, (norm, diff, ppl) in med.items():
        note(f"criterion 5: {name:>4} mean |h| {norm:.4g}, mean |h_t - h_t+1| {diff:.4g}, train ppl {ppl:.4g}")
    note("criterion 5: train perplexity with AR is " + ("lower" if med["ar"][2] < med["base"][2] else "higher")
         + " than without; with TAR " + ("lower" if med["tar"][2] < med["base"][2] else "higher")
         + " (direction recorded, not gated)")
    assert med["ar"][0] <= 0.8 * med["base"][0]
    assert med["tar"][1] <= 0.8 * med["base"][1]


# ---------------------------------------------------------------------------

@pytest.mark.criterion(6, "trainer protocol")
class TestTrainerProtocol:
    def test_clip_invariant(self):
        rng = np.random.default_rng(6)
        for _ in range(1000):
            grads = {str(i): rng.normal(scale=rng.uniform(0.01, 100), size=rng.integers(1, 5, size=2))
                     for i in range(rng.integers(1, 6))}
            clip_gradients(grads, 10.0)
            assert global_norm(grads) <= 10.0 + 1e-9

    def test_lr_sequence_under_plateaus(self, tiny_corpus, monkeypatch):
        import rlm.trainer as tr
        monkeypatch.setattr(tr, "evaluate_perplexity", lambda *a, **k: 100.0)
        res = train(overfit_config(hidden_size=4, lr0=20.0, max_epochs=4), tiny_corpus)
        # the first epoch sets the best; every later one is a plateau
        assert [r.lr for r in res.state.history] == [20.0, 20.0, 5.0, 1.25]

    def test_reported_perplexity_ignores_regularizers(self, tiny_corpus):
        data = batchify(tiny_corpus.train, 5)
        cfg0 = overfit_config(hidden_size=8, weight_decay=0.0)
        model = LanguageModel.create(cfg0.model_config(len(tiny_corpus.vocab)), 1)
        # independent token-weighted CE with the same frozen parameters
        total, n = 0.0, 0
        hidden = model.init_state(5)
        with ad.no_grad():
            for off in data.offsets(35):
                x, y = bptt_slice(data, off, 35)
                logits, out = model.forward(x, hidden, training=False)
                hidden = out.state
                total += ad.cross_entropy(logits, y.reshape(-1)).item() * y.size
                n += y.size
        expected = math.exp(total / n)
        for a, b in [(0.0, 0.0), (5.0, 2.0), (1e4, 1e4)]:
            cfg = overfit_config(hidden_size=8, weight_decay=0.0, alpha=a, beta=b)
            got = run_epoch(model, data, cfg, TrainState(lr=0.0), np.random.default_rng(0))
            assert abs(got - expected) <= 1e-9 * expected

    def test_full_run_determinism(self, tiny_corpus):
        cfg = overfit_config(hidden_size=8, max_epochs=3, dp=0.5, dp_h=0.4, alpha=5.0, beta=2.0)
        a, b = train(cfg, tiny_corpus), train(cfg, tiny_corpus)
        assert a.state.history == b.state.history
        for k in a.model.params:
            assert a.model.params[k].data.tobytes() == b.model.params[k].data.tobytes()


# ---------------------------------------------------------------------------

@pytest.mark.criterion(7, "weight tying")
class TestTying:
    def test_shared_weight(self):
        m = small_model(V=7, H=3)
        ids = np.array([[2]])
        emb_before = embedding_lookup(m.embedding, ids).data.copy()
        logits_before, _ = m.forward(np.array([[0]]), m.init_state(1))
        m.embedding.data[2, 1] += 0.25
        assert not np.array_equal(embedding_lookup(m.embedding, ids).data, emb_before)
        logits_after, _ = m.forward(np.array([[0]]), m.init_state(1))
        changed = np.flatnonzero(logits_after.data[0] != logits_before.data[0])
        # input token 0 is untouched, so only the decoder row for id 2 moves
        assert changed.tolist() == [2]

    def test_parameter_count(self, note):
        V, H = 10_000, 650
        # embeddings V*H (shared with the decoder) + 2 LSTM layers of
        # 4*(2H*H + H) + decoder bias V
        formula = V * H + 2 * 4 * (2 * H * H + H) + V
        shapes = param_shapes(ModelConfig(vocab_size=V, hidden_size=H))
        count = sum(math.prod(s) for s in shapes.values())
        assert count == formula == 13_275_200
        note(f"criterion 7: h=650, V=10000 count {count:,}, relative gap to 13M {abs(count - 13e6) / 13e6:.3%}")
        assert abs(count - 13e6) / 13e6 <= 0.02


# ---------------------------------------------------------------------------

def _ptb_train_path():
    env = os.environ.get("RLM_PTB_TRAIN")
    if env:
        return Path(env)
    for cand in (Path("ptb.train.txt"), Path("data/ptb.train.txt"),
                 Path(__file__).resolve().parents[1] / "data" / "ptb.train.txt"):
        if cand.exists():
            return cand
    return None


@pytest.mark.criterion(8, "corpus and batching")
class TestBatching:
    def test_randomized_coverage_and_alignment(self):
        rng = np.random.default_rng(8)
        for _ in range(1000):
            ids = rng.integers(0, 30, size=rng.integers(2, 400))
            bs = int(rng.integers(1, min(len(ids), 25) + 1))
            bc = batchify(ids, bs)
            n = len(ids) // bs
            if n < 2:
                continue
            np.testing.assert_array_equal(bc.data.T.reshape(-1), ids[: n * bs])
            bptt = int(rng.integers(1, 40))
            covered = []
            for off in bc.offsets(bptt):
                x, y = bptt_slice(bc, off, bptt)
                assert x.shape == y.shape
                np.testing.assert_array_equal(y, bc.data[off + 1: off + 1 + len(y)])
                np.testing.assert_array_equal(x, bc.data[off: off + len(x)])
                covered.extend(range(off + 1, off + 1 + len(y)))
            assert covered == list(range(1, n))

    def test_ptb_vocabulary(self):
        path = _ptb_train_path()
        if path is None or not path.exists():
            pytest.skip("PTB train split not supplied (set RLM_PTB_TRAIN)")
        assert len(build_vocabulary(tokenize_lines(read_lines(path)))) == 10_000


# ---------------------------------------------------------------------------

@pytest.mark.criterion(9, "sampler")
class TestSampler:
    def test_exclusion_over_10k_tokens(self):
        vocab = build_vocabulary("one two three four five".split())
        model = small_model(V=len(vocab), H=6)
        # make the excluded ids by far the most likely, so exclusion does the work
        model.params["decoder.bias"].data[[vocab.eos_id, vocab.unk_id]] = 20.0
        words = generate(model, vocab, SamplerConfig(num_words=10_000, seed=9))
        assert len(words) == 10_000
        assert words.count(EOS) == 0 and words.count(UNK) == 0

    def test_detokenizer(self):
        assert moses_detokenize("4 @.@ 9 million viewers".split()) == "4.9 million viewers"
        assert moses_detokenize(["high", "@-@", "quality"]) == "high-quality"


# ---------------------------------------------------------------------------

@pytest.mark.criterion(10, "checkpoint")
class TestCheckpointContract:
    def _save(self, path, H):
        vocab = build_vocabulary("a b c d".split())
        cfg = TrainConfig(hidden_size=H)
        model = LanguageModel.create(cfg.model_config(len(vocab)), 3)
        save_checkpoint(path, make_manifest(model, vocab, cfg, TrainState(epoch=2, lr=5.0)))

    def test_save_load_save(self, tmp_path):
        self._save(tmp_path / "a.ckpt", 8)
        save_checkpoint(tmp_path / "b.ckpt", load_checkpoint(tmp_path / "a.ckpt"))
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_cross_config_rejected(self, tmp_path):
        self._save(tmp_path / "a.ckpt", 8)
        with pytest.raises(CheckpointError, match="hidden_size"):
            load_model(tmp_path / "a.ckpt", ModelConfig(vocab_size=6, hidden_size=16))
