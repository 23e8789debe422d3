"""End-to-end acceptance criteria.

Each test carries ``@pytest.mark.criterion(name)``; the conftest prints one
PASS/FAIL/SKIP line per criterion at the end of the run (MET or NOT MET
for the ungated soft check).
"""

import json
import os
import time
import zlib

import numpy as np
import pytest

from aesim import layers as L
from aesim import tensor as T
from aesim.checkpoint import load_checkpoint, read_manifest, save_checkpoint
from aesim.data import SequenceBatch, Vocab, load_glove_text, load_snli_jsonl, make_batches, random_embeddings
from aesim.diagnostics import THRESHOLD, run_grad_checks
from aesim.model import EsimConfig, EsimModel, similarity_matrix, soft_align
from aesim.synthetic import toy_corpus, toy_vocabulary
from aesim.tensor import Tensor
from aesim.train import TrainConfig, evaluate, train
from test_model import soft_align_oracle
from test_tensor import PRIMITIVES, _random_inputs, _readout

TOY_BATCH = 4


@pytest.mark.criterion("published full-scale accuracy (not desk-reproducible)")
def test_published_scale_accuracy():
    pytest.skip("full-corpus GPU-scale training; replaced by the property suite below")


@pytest.mark.criterion("gradient oracle")
def test_gradient_oracle(request):
    started = time.perf_counter()
    errors = {}
    for name, op in PRIMITIVES.items():
        a, b = _random_inputs(np.random.default_rng(zlib.crc32(name.encode())))
        loss = (lambda: op(a, b)) if name == "cross_entropy" else (lambda: _readout(op(a, b)))
        errors[f"op:{name}"] = T.grad_check(loss, [a, b], eps=1e-5)
    errors.update(run_grad_checks(seed=0, eps=1e-5))
    elapsed = time.perf_counter() - started
    worst = max(errors, key=errors.get)
    request.node.criterion_detail = f"worst {worst}={errors[worst]:.2e}, {len(errors)} checks, {elapsed:.1f}s"
    assert errors[worst] < THRESHOLD, errors
    assert elapsed < 60


@pytest.mark.criterion("normalization suite")
def test_normalization_suite(request):
    started = time.perf_counter()
    gen = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        b, lp, lq, d = (int(gen.integers(1, k)) for k in (4, 9, 9, 6))
        p_mask = np.arange(lp)[None, :] < gen.integers(1, lp + 1, size=b)[:, None]
        q_mask = np.arange(lq)[None, :] < gen.integers(1, lq + 1, size=b)[:, None]
        p_bar, q_bar = Tensor(gen.normal(size=(b, lp, d)) * 3), Tensor(gen.normal(size=(b, lq, d)) * 3)

        alpha = L.attention_weights(p_bar, p_mask, L.WordAttentionParams.init(d, d, gen)).data
        sim = similarity_matrix(p_bar, q_bar)
        to_q = T.masked_softmax(sim, q_mask[:, None, :]).data
        to_p = T.masked_softmax(T.transpose(sim), p_mask[:, None, :]).data
        for weights, mask, rows in ((alpha, p_mask, None), (to_q, q_mask, p_mask), (to_p, p_mask, q_mask)):
            assert (weights >= 0).all()
            full_mask = mask if rows is None else np.broadcast_to(mask[:, None, :], weights.shape)
            assert (weights[~full_mask] == 0).all()
            sums = weights.sum(axis=-1)
            valid = np.ones(sums.shape, bool) if rows is None else rows
            worst = max(worst, float(np.abs(sums[valid] - 1.0).max()))
    elapsed = time.perf_counter() - started
    request.node.criterion_detail = f"max |sum-1|={worst:.1e}, {elapsed:.2f}s"
    assert worst < 1e-6
    assert elapsed < 10


@pytest.mark.criterion("brute-force equivalence")
def test_brute_force_soft_align(request):
    gen = np.random.default_rng(11)
    worst_align = worst_sym = 0.0
    for _ in range(20):
        p, q = gen.normal(size=(3, 6)), gen.normal(size=(4, 6))
        sim = similarity_matrix(Tensor(p[None]), Tensor(q[None]))
        p_tilde, q_tilde = soft_align(sim, Tensor(p[None]), Tensor(q[None]), np.ones((1, 3), bool), np.ones((1, 4), bool))
        ref_p, ref_q = soft_align_oracle(sim.data[0].tolist(), p.tolist(), q.tolist())
        worst_align = max(worst_align, np.abs(p_tilde.data[0] - ref_p).max(), np.abs(q_tilde.data[0] - ref_q).max())
        flipped = similarity_matrix(Tensor(q[None]), Tensor(p[None])).data[0]
        worst_sym = max(worst_sym, np.abs(sim.data[0] - flipped.T).max())
    request.node.criterion_detail = f"align err {worst_align:.1e}, symmetry err {worst_sym:.1e}"
    assert worst_align < 1e-12
    assert worst_sym < 1e-12


def _with_padding(ids, extra, gen, vocab_size):
    """Batch of one sentence followed by ``extra`` masked junk tokens."""
    n = len(ids)
    indices = np.concatenate([ids, gen.integers(0, vocab_size, size=extra)])[None, :]
    mask = (np.arange(n + extra) < n)[None, :]
    return SequenceBatch(indices.astype(np.int64), mask, np.array([n]))


@pytest.mark.criterion("padding invariance")
def test_padding_invariance(request):
    gen = np.random.default_rng(5)
    worst = 0.0
    models = {
        v: EsimModel(EsimConfig(variant=v, embed_dim=8, hidden_dim=8, classifier_hidden=8), vocab_size=30, seed=2)
        for v in ("esim", "aesim")
    }
    for trial in range(50):
        model = models["aesim" if trial % 2 else "esim"]
        p = gen.integers(2, 30, size=gen.integers(1, 8))
        q = gen.integers(2, 30, size=gen.integers(1, 8))
        ref = model.forward(_with_padding(p, 0, gen, 30), _with_padding(q, 0, gen, 30)).data
        k_p, k_q = int(gen.integers(0, 6)), int(gen.integers(0, 6))
        if k_p + k_q == 0:
            k_p = 1
        out = model.forward(_with_padding(p, k_p, gen, 30), _with_padding(q, k_q, gen, 30)).data
        worst = max(worst, float(np.abs(out - ref).max()))
    request.node.criterion_detail = f"max logit change {worst:.1e} over 50 trials"
    assert worst < 1e-9


def _toy_run(variant, seed, epochs):
    pairs = toy_corpus(64, vocab_size=40, seed=seed)
    cfg = EsimConfig(variant=variant, embed_dim=32, hidden_dim=32, classifier_hidden=32)
    model = EsimModel(cfg, vocab=Vocab(toy_vocabulary(40)), seed=seed)
    config = TrainConfig(epochs=epochs, batch_size=TOY_BATCH, lr=0.0005, patience=None, seed=seed)
    report, _ = train(model, pairs, pairs, config)
    return report


@pytest.fixture(scope="module")
def toy_reports():
    started = time.perf_counter()
    runs = {(v, 0): _toy_run(v, 0, 50) for v in ("esim", "aesim")}
    for seed in range(1, 5):
        for v in ("esim", "aesim"):
            runs[(v, seed)] = _toy_run(v, seed, 10)
    return runs, time.perf_counter() - started


@pytest.mark.criterion("toy convergence")
@pytest.mark.slow
def test_toy_convergence(request, toy_reports):
    runs, elapsed = toy_reports
    first = {}
    for v in ("esim", "aesim"):
        acc = runs[(v, 0)].dev_accuracy
        first[v] = next((i + 1 for i, a in enumerate(acc) if a == 1.0), None)
    request.node.criterion_detail = (
        f"epochs to 100%: esim={first['esim']} aesim={first['aesim']}, batch {TOY_BATCH}, {elapsed:.0f}s"
    )
    assert first["esim"] is not None and first["aesim"] is not None
    assert elapsed < 300


@pytest.mark.criterion("toy convergence soft check (reported, not gated)")
@pytest.mark.slow
def test_toy_loss_comparison(request, toy_reports):
    runs, _ = toy_reports
    wins = [s for s in range(5) if runs[("aesim", s)].train_loss[9] <= runs[("esim", s)].train_loss[9]]
    request.node.criterion_verdict = "MET" if len(wins) >= 3 else "NOT MET"
    request.node.criterion_detail = f"aESIM epoch-10 loss <= ESIM on {len(wins)}/5 seeds {wins}, target 3/5"


@pytest.mark.criterion("parameter accounting")
def test_parameter_accounting(request, tmp_path):
    totals = {}
    for variant in ("esim", "aesim"):
        model = EsimModel(EsimConfig(variant=variant), vocab_size=10)
        manifest = save_checkpoint(model, None, tmp_path / f"{variant}.ckpt")
        assert read_manifest(tmp_path / f"{variant}.ckpt") == manifest
        totals[variant] = sum(e.size for e in manifest)
        assert totals[variant] == model.parameter_count()
    surplus = totals["aesim"] - totals["esim"]
    request.node.criterion_detail = f"surplus {surplus:,}"
    assert surplus == 723_600


@pytest.mark.criterion("data fidelity")
def test_data_fidelity(request, tmp_path):
    records = [
        {"gold_label": "entailment", "sentence1": "A man sleeps.", "sentence2": "A person rests."},
        {"gold_label": "-", "sentence1": "Two dogs.", "sentence2": "Animals."},
        {"gold_label": "neutral", "sentence1": "A girl runs.", "sentence2": "A girl runs fast."},
        {"gold_label": "-", "sentence1": "Rain.", "sentence2": "Sun."},
        {"gold_label": "contradiction", "sentence1": "It is day.", "sentence2": "It is night."},
    ]
    path = tmp_path / "snli_dev.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    pairs = load_snli_jsonl(path)
    assert [p.label for p in pairs] == ["entailment", "neutral", "contradiction"]

    gen = np.random.default_rng(3)
    vectors = {w: gen.normal(size=5) for w in ("a", "man", "girl", "runs")}
    glove = tmp_path / "vectors.txt"
    glove.write_text("".join(f"{w} " + " ".join(repr(float(x)) for x in v) + "\n" for w, v in vectors.items()))
    vocab = Vocab.build(pairs)
    table = load_glove_text(glove, vocab, dim=5, seed=7)
    for w, v in vectors.items():
        assert table[vocab.index(w)].tobytes() == v.tobytes()
    again = load_glove_text(glove, vocab, dim=5, seed=7)
    assert table.tobytes() == again.tobytes()
    missing = [w for w in vocab.itos[2:] if w not in vectors]
    request.node.criterion_detail = f"dropped 2 unlabeled, {len(vectors)} rows bitwise, {len(missing)} OOV rows reproducible"


@pytest.mark.criterion("checkpoint round-trip")
def test_checkpoint_round_trip(request, tmp_path):
    vocab = Vocab(toy_vocabulary(40))
    cfg = EsimConfig(variant="aesim", embed_dim=8, hidden_dim=8, classifier_hidden=8)
    model = EsimModel(cfg, vocab=vocab, embeddings=random_embeddings(vocab, 8, seed=1), seed=3)
    pairs = toy_corpus(20, seed=6)
    train(model, pairs, None, TrainConfig(epochs=1, batch_size=4))
    save_checkpoint(model, None, tmp_path / "m.ckpt")
    restored, _ = load_checkpoint(tmp_path / "m.ckpt")
    (premise, hypothesis, _), = make_batches(pairs, vocab, 20)
    before = model.forward(premise, hypothesis).data
    after = restored.forward(premise, hypothesis).data
    request.node.criterion_detail = f"{len(pairs)} inputs, max diff {np.abs(before - after).max():.1e}"
    assert before.tobytes() == after.tobytes()


@pytest.mark.criterion("optional scaled SNLI run (not gating)")
@pytest.mark.skipif(not os.environ.get("AESIM_SNLI_DIR"), reason="set AESIM_SNLI_DIR to a folder with SNLI jsonl files")
def test_scaled_snli_run(request):
    from aesim.data import find_split

    root = os.environ["AESIM_SNLI_DIR"]
    train_pairs = load_snli_jsonl(find_split(root, "train")[0])[:10_000]
    dev_pairs = load_snli_jsonl(find_split(root, "dev")[0])
    vocab = Vocab.build(train_pairs)
    glove = os.environ.get("AESIM_GLOVE")
    dim = int(os.environ.get("AESIM_GLOVE_DIM", "300" if glove else "100"))
    table = load_glove_text(glove, vocab, dim=dim) if glove else random_embeddings(vocab, dim)
    counts = np.bincount([["entailment", "neutral", "contradiction"].index(p.label) for p in dev_pairs], minlength=3)
    majority = counts.max() / counts.sum()
    accs = {}
    for variant in ("esim", "aesim"):
        cfg = EsimConfig(variant=variant, embed_dim=dim, hidden_dim=100, classifier_hidden=100)
        model = EsimModel(cfg, vocab=vocab, embeddings=table, seed=0)
        train(model, train_pairs, dev_pairs, TrainConfig(epochs=int(os.environ.get("AESIM_EPOCHS", "3")), batch_size=32))
        accs[variant] = evaluate(model, dev_pairs)
    request.node.criterion_detail = f"majority {majority:.3f}, " + ", ".join(f"{k}={v:.3f}" for k, v in accs.items())
    assert accs["aesim"] >= majority + 0.20
