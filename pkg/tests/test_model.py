import dataclasses
import math

import numpy as np
import pytest

from polarenc import data, model as M, tensor as T, training
from polarenc.geometry import BinningConfig, RelativeBins
from polarenc.model import ModelConfig
from polarenc.tensor import Tensor


def tiny_cfg(**kw):
    base = dict(vocab_size=11, n_layers=2, n_heads=2, d_model=8, d_ff=16, max_seq_len=16)
    base.update(kw)
    return ModelConfig(**base)


def random_doc(rng, n_tokens, page=1000):
    tokens = []
    for _ in range(n_tokens):
        x, y = int(rng.integers(0, 900)), int(rng.integers(0, 900))
        tokens.append(data.DocToken(f"t{int(rng.integers(0, 5))}", (x, y, x + 50, y + 30)))
    return data.Document(f"d{rng.integers(1e6)}", page, page, tokens)


def small_vocab():
    return data.Vocab.from_list(list(data.SPECIAL_TOKENS) + [f"t{i}" for i in range(6)])


def shift_document(doc, rng):
    """Shift every token box by one random offset that keeps all in range."""
    boxes = np.array([t.bbox for t in doc.tokens])
    lo_x, hi_x = -int(boxes[:, 0].min()), doc.page_width - int(boxes[:, 2].max())
    lo_y, hi_y = -int(boxes[:, 1].min()), doc.page_height - int(boxes[:, 3].max())
    dx = int(rng.integers(lo_x, hi_x + 1))
    dy = int(rng.integers(lo_y, hi_y + 1))
    tokens = [
        data.DocToken(t.text, (t.bbox[0] + dx, t.bbox[1] + dy, t.bbox[2] + dx, t.bbox[3] + dy))
        for t in doc.tokens
    ]
    return data.Document(doc.id, doc.page_width, doc.page_height, tokens, doc.labels)


def encode_batch(cfg, seed=0, n_docs=2, n_tokens=6):
    rng = T.make_rng(seed, "docs")
    vocab = small_vocab()
    docs = [random_doc(rng, n_tokens) for _ in range(n_docs)]
    enc = [data.encode(d, vocab, cfg) for d in docs]
    return data.collate(enc), enc, docs, vocab


class TestConfig:
    def test_head_divisibility_enforced(self):
        with pytest.raises(ValueError):
            ModelConfig(vocab_size=10, d_model=10, n_heads=3)

    def test_bad_bias_mode(self):
        with pytest.raises(ValueError):
            ModelConfig(vocab_size=10, bias_mode="spherical")

    def test_text_roundtrip(self):
        cfg = tiny_cfg(bias_mode="cartesian", use_abs_2d=True, dropout=0.25,
                       binning=BinningConfig(rho_max=320.0, n_dist_bins=5, n_angle_bins=12))
        assert M.config_from_text(M.config_to_text(cfg)) == cfg

    def test_hash_changes_with_config(self):
        assert M.config_hash(tiny_cfg()) != M.config_hash(tiny_cfg(n_layers=3))


class TestEmbedInputs:
    def test_independent_of_boxes_without_abs2d(self):
        cfg = tiny_cfg(use_abs_2d=False)
        store = M.init_params(cfg, 0)
        ids = np.array([1, 2, 3])
        b1 = np.array([[0, 0, 10, 10]] * 3)
        b2 = np.array([[500, 500, 900, 900]] * 3)
        out1 = M.embed_inputs(ids, b1, cfg, store).values
        out2 = M.embed_inputs(ids, b2, cfg, store).values
        assert np.array_equal(out1, out2)

    def test_boxes_matter_iff_discretized_coords_differ(self):
        cfg = tiny_cfg(use_abs_2d=True)
        store = M.init_params(cfg, 0)
        ids = np.array([4, 4])
        pos = np.array([0, 0])
        same = M.embed_inputs(ids, np.array([[1, 2, 3, 4]] * 2), cfg, store, pos_ids=pos).values
        assert np.array_equal(same[0], same[1])
        mixed = M.embed_inputs(ids, np.array([[1, 2, 3, 4], [1, 2, 3, 5]]), cfg, store, pos_ids=pos).values
        assert not np.array_equal(mixed[0], mixed[1])

    def test_zeroed_tables_give_zero_output(self):
        cfg = tiny_cfg()
        store = M.init_params(cfg, 0)
        store["embed.tok"].values[...] = 0.0
        store["embed.pos1d"].values[...] = 0.0
        out = M.embed_inputs(np.array([1, 2]), np.zeros((2, 4), int), cfg, store).values
        assert np.allclose(out, 0.0)  # layer norm of a zero vector stays at the zero bias

    def test_too_long_rejected(self):
        cfg = tiny_cfg(max_seq_len=4)
        store = M.init_params(cfg, 0)
        with pytest.raises(ValueError, match="max_seq_len"):
            M.embed_inputs(np.zeros(5, int), np.zeros((5, 4), int), cfg, store)


class TestPolarAttention:
    def attention_inputs(self, cfg, n=5, seed=0):
        rng = T.make_rng(seed, "attn")
        h = Tensor(rng.normal(0, 1, (n, cfg.d_model)))
        bins = RelativeBins(
            rng.integers(0, cfg.binning.n_dist_bins, (n, n)),
            rng.integers(0, cfg.binning.n_angle_bins, (n, n)),
        )
        mask = np.ones(n, dtype=bool)
        return h, bins, mask

    def test_zero_tables_equal_bias_free_path(self):
        cfg = tiny_cfg()
        store = M.init_params(cfg, 3)
        h, bins, mask = self.attention_inputs(cfg)
        layer = M.layer_params(store, 0)
        layer.dist.values[...] = 0.0
        layer.angle.values[...] = 0.0
        biased = M.polar_attention(h, bins, mask, layer, cfg).values
        plain = M.polar_attention(h, None, mask, layer, dataclasses.replace(cfg, bias_mode="none")).values
        assert np.abs(biased - plain).max() < 1e-12

    def test_single_token_is_projected_value(self):
        cfg = tiny_cfg()
        store = M.init_params(cfg, 4)
        layer = M.layer_params(store, 0)
        h, bins, _ = self.attention_inputs(cfg, n=1)
        out = M.polar_attention(h, bins, np.ones(1, bool), layer, cfg).values
        v = h.values @ layer.wv.values + layer.vb.values
        expect = v @ layer.wo.values + layer.ob.values
        assert np.abs(out - expect).max() < 1e-12

    def test_two_token_scalar_oracle(self):
        # single head, d_head 2: recompute scores and output by hand
        cfg = tiny_cfg(n_heads=1, d_model=2, d_ff=4)
        store = M.init_params(cfg, 5)
        layer = M.layer_params(store, 0)
        h, bins, mask = self.attention_inputs(cfg, n=2, seed=9)
        out = M.polar_attention(h, bins, mask, layer, cfg).values

        hv = h.values
        q = hv @ layer.wq.values + layer.qb.values
        k = hv @ layer.wk.values + layer.kb.values
        v = hv @ layer.wv.values + layer.vb.values
        expect = np.zeros((2, 2))
        for i in range(2):
            scores = []
            for j in range(2):
                s = float(q[j] @ k[i])
                s += float(q[j] @ layer.dist.values[bins.dist[i, j]])
                s += float(q[j] @ layer.angle.values[bins.angle[i, j]])
                scores.append(s / math.sqrt(cfg.d_head))
            m = max(scores)
            exps = [math.exp(s - m) for s in scores]
            w = [e / sum(exps) for e in exps]
            ctx = w[0] * v[0] + w[1] * v[1]
            expect[i] = ctx @ layer.wo.values + layer.ob.values
        assert np.abs(out - expect).max() < 1e-12

    def test_standard_qk_transposes_roles(self):
        cfg = tiny_cfg()
        store = M.init_params(cfg, 6)
        layer = M.layer_params(store, 0)
        h, bins, mask = self.attention_inputs(cfg, n=4, seed=10)
        paper = M.polar_attention(h, bins, mask, layer, cfg).values
        flipped = M.polar_attention(
            h, bins, mask, layer, dataclasses.replace(cfg, standard_qk=True)
        ).values
        assert not np.allclose(paper, flipped)

    def test_all_masked_rejected(self):
        cfg = tiny_cfg()
        store = M.init_params(cfg, 7)
        h, bins, _ = self.attention_inputs(cfg, n=3)
        with pytest.raises(ValueError):
            M.polar_attention(h, bins, np.zeros(3, bool), M.layer_params(store, 0), cfg)

    def test_weights_rows_sum_to_one(self):
        cfg = tiny_cfg()
        store = M.init_params(cfg, 8)
        batch, *_ = encode_batch(cfg, seed=11, n_docs=2, n_tokens=5)
        collect = {}
        M.encoder_forward(batch, cfg, store, collect=collect)
        for i in range(cfg.n_layers):
            w = collect[i]["weights"]
            sums = w.sum(axis=-1)
            assert np.abs(sums - 1.0).max() < 1e-6


class TestEncoderForward:
    def test_zero_layers_equals_embedding(self):
        cfg = tiny_cfg(n_layers=0)
        store = M.init_params(cfg, 12)
        batch, *_ = encode_batch(cfg, seed=13)
        out = M.encoder_forward(batch, cfg, store).values
        emb = M.embed_inputs(batch.token_ids, batch.bboxes, cfg, store, pos_ids=batch.pos_ids).values
        assert np.array_equal(out, emb)

    def test_translation_invariance_bitwise(self):
        cfg = tiny_cfg()
        store = M.init_params(cfg, 14)
        batch, enc, docs, vocab = encode_batch(cfg, seed=15, n_docs=3, n_tokens=6)
        out1 = M.encoder_forward(batch, cfg, store).values
        rng = T.make_rng(16)
        shifted = [data.encode(shift_document(d, rng), vocab, cfg) for d in docs]
        out2 = M.encoder_forward(data.collate(shifted), cfg, store).values
        assert np.array_equal(out1, out2)

    def test_repeat_run_bitwise_identical(self):
        cfg = tiny_cfg()
        store = M.init_params(cfg, 17)
        batch, *_ = encode_batch(cfg, seed=18)
        a = M.encoder_forward(batch, cfg, store).values
        b = M.encoder_forward(batch, cfg, store).values
        assert np.array_equal(a, b)

    def test_padding_invariance(self):
        cfg = tiny_cfg()
        store = M.init_params(cfg, 19)
        _, enc, docs, vocab = encode_batch(cfg, seed=20, n_docs=2, n_tokens=4)
        short = data.collate([enc[0]])
        out_short = M.encoder_forward(short, cfg, store).values
        padded = data.collate(enc)  # second doc pads the batch width
        out_padded = M.encoder_forward(padded, cfg, store).values
        n = enc[0].n
        assert np.abs(out_padded[0, :n] - out_short[0]).max() < 1e-10

    def test_bias_locality_none_mode_ignores_boxes(self):
        cfg = tiny_cfg(bias_mode="none")
        store = M.init_params(cfg, 21)
        _, enc, docs, vocab = encode_batch(cfg, seed=22, n_docs=1, n_tokens=5)
        out1 = M.encoder_forward(data.collate(enc), cfg, store).values
        moved = enc[0].bboxes.copy()
        moved[2] = [0, 0, 40, 40]
        enc2 = dataclasses.replace(enc[0], bboxes=moved)
        out2 = M.encoder_forward(data.collate([enc2]), cfg, store).values
        assert np.array_equal(out1, out2)

    def test_bias_locality_polar(self):
        # moving token j's box only changes attention rows/columns through j
        cfg = tiny_cfg(n_layers=1)
        store = M.init_params(cfg, 23)
        _, enc, docs, vocab = encode_batch(cfg, seed=24, n_docs=1, n_tokens=6)
        from polarenc import geometry

        it = enc[0]
        collect1 = {}
        M.encoder_forward(data.collate([it]), cfg, store, collect=collect1)
        j = 3
        boxes = it.bboxes.copy()
        boxes[j] = [5, 5, 30, 30]
        bins2 = geometry.relative_bins(geometry.centers_of(boxes), cfg.binning)
        it2 = dataclasses.replace(it, bboxes=boxes, bins=bins2)
        collect2 = {}
        M.encoder_forward(data.collate([it2]), cfg, store, collect=collect2)
        w1, w2 = collect1[0]["weights"][0], collect2[0]["weights"][0]
        keep = [i for i in range(it.n) if i != j]
        sub1 = w1[:, keep][:, :, keep]
        sub2 = w2[:, keep][:, :, keep]
        # rows not involving j change only via the softmax denominator over j;
        # the unnormalized scores (bias grids) must be identical off-j
        b1 = collect1[0]["bias_dist"][0][:, keep][:, :, keep]
        b2 = collect2[0]["bias_dist"][0][:, keep][:, :, keep]
        assert np.array_equal(b1, b2)
        assert sub1.shape == sub2.shape


class TestHeads:
    def test_mlm_tied_projection(self):
        cfg = tiny_cfg()
        store = M.init_params(cfg, 25)
        hidden = Tensor(T.make_rng(26).normal(0, 1, (3, cfg.d_model)))
        logits = M.mlm_head(hidden, store, cfg).values
        t = T.gelu(T.add(T.matmul(hidden, store["mlm.w"]), store["mlm.b"]))
        t = T.layer_norm(t, store["mlm.ln_g"], store["mlm.ln_b"], cfg.ln_eps)
        expect = t.values @ store["embed.tok"].values.T + store["mlm.out_b"].values
        assert np.abs(logits - expect).max() < 1e-12

    def test_gradient_reaches_token_table_via_both_paths(self):
        cfg = tiny_cfg(n_layers=1)
        store = M.init_params(cfg, 27)
        batch, *_ = encode_batch(cfg, seed=28, n_docs=1, n_tokens=4)
        targets = np.full(batch.token_ids.size, -100)
        targets[2] = int(batch.token_ids.reshape(-1)[2])

        def f():
            hidden = M.encoder_forward(batch, cfg, store)
            b, n, _ = hidden.shape
            logits = M.mlm_head(T.reshape(hidden, (b * n, cfg.d_model)), store, cfg)
            return T.cross_entropy(logits, targets)

        report = T.grad_check(f, {"embed.tok": store["embed.tok"]}, max_entries=24)
        assert report.ok, report.summary()

    def test_lop_no_masked_positions_zero_loss(self):
        cfg = tiny_cfg()
        store = M.init_params(cfg, 29)
        hidden = Tensor(T.make_rng(30).normal(0, 1, (4, cfg.d_model)))
        logits = M.lop_head(hidden, store)
        loss = T.cross_entropy(logits, np.full(4, -100))
        assert loss.item() == 0.0

    def test_lop_forced_one_hot_loss_vanishes(self):
        cfg = tiny_cfg()
        store = M.init_params(cfg, 31)
        store["lop.w"].values[...] = 0.0
        store["lop.b"].values[...] = 0.0
        store["lop.b"].values[5] = 200.0  # logits one-hot at index 5
        hidden = Tensor(np.zeros((1, cfg.d_model)))
        loss = T.cross_entropy(M.lop_head(hidden, store), np.array([5]))
        assert loss.item() < 1e-12

    def test_ner_all_padding_zero_loss(self):
        cfg = tiny_cfg()
        store = M.init_params(cfg, 32)
        M.add_ner_params(store, cfg, 3, 0)
        hidden = Tensor(T.make_rng(33).normal(0, 1, (4, cfg.d_model)))
        loss = T.cross_entropy(M.ner_head(hidden, store, cfg), np.full(4, -100))
        assert loss.item() == 0.0

    def test_ner_single_label_constant_prediction(self):
        cfg = tiny_cfg()
        store = M.init_params(cfg, 34)
        M.add_ner_params(store, cfg, 1, 0)
        hidden = Tensor(T.make_rng(35).normal(0, 1, (6, cfg.d_model)))
        pred = M.ner_head(hidden, store, cfg).values.argmax(-1)
        assert (pred == 0).all()


class TestCountParameters:
    def test_paper_preset_near_125m(self):
        count = M.count_parameters(M.paper_config())
        assert abs(count - 125e6) / 125e6 < 0.05

    def test_matches_actual_store(self):
        for cfg in (
            tiny_cfg(),
            tiny_cfg(bias_mode="cartesian"),
            tiny_cfg(bias_mode="none"),
            tiny_cfg(use_abs_2d=True),
        ):
            store = M.init_params(cfg, 0)
            assert M.count_parameters(cfg) == store.total_size()

    def test_hand_counted_toy(self):
        cfg = ModelConfig(vocab_size=1, n_layers=0, n_heads=1, d_model=1, d_ff=1,
                          max_seq_len=1, bias_mode="none")
        # tok 1 + pos 2 + embed ln 2 + mlm (1+1+2+1) + lop (1+1) = 12
        assert M.count_parameters(cfg) == 12

    def test_layer_additivity(self):
        one = M.count_parameters(tiny_cfg(n_layers=1))
        two = M.count_parameters(tiny_cfg(n_layers=2))
        four = M.count_parameters(tiny_cfg(n_layers=4))
        per_layer = two - one
        assert four == two + 2 * per_layer


class TestGradCheckNovelParameters:
    def test_all_groups_small_encoder(self):
        cfg = tiny_cfg()
        store = M.init_params(cfg, 36)
        vocab = small_vocab()
        rng = T.make_rng(37, "docs")
        docs = [random_doc(rng, 5) for _ in range(2)]
        enc = [data.encode(d, vocab, cfg) for d in docs]
        batch = training.build_pretrain_batch(enc, range(2), vocab, cfg, seed=38, step=0)

        def f():
            loss, _ = training.pretrain_loss(batch, cfg, store)
            return loss

        params = {n: t for n, t in store.items() if "attn.dist" in n or "attn.angle" in n}
        assert params, "polar tables missing"
        report = T.grad_check(f, params, max_entries=16)
        assert report.ok, report.summary()
