"""Tests for batch assembly and full-model encoding paths."""

import numpy as np
import pytest

from mcvqg.autodiff import Tensor
from mcvqg.data import BOS, EOS, PAD, synth_generate
from mcvqg.model import MultiCueModel, dropout_override, make_batch
from mcvqg.rng import RngStream

IMAGE_DIM = 24
PLACE_DIM = 8


def small_dataset(n=6, seed=11):
    return synth_generate(n, seed, image_dim=IMAGE_DIM, place_dim=PLACE_DIM)


def small_model(cues=("image", "caption"), combiner="moderator", p=0.3,
                kind="bernoulli", seed=5, vocab_size=61, **kw):
    return MultiCueModel(cues=cues, combiner=combiner, image_dim=IMAGE_DIM,
                         place_dim=PLACE_DIM, embed_dim=5, enc_dim=6,
                         hidden_dim=7, vocab_size=vocab_size, dropout_rate=p,
                         dropout_kind=kind, rng=RngStream(seed).child("m"), **kw)


class TestMakeBatch:
    def test_shapes_and_ids(self):
        ds = small_dataset()
        batch = make_batch(ds, [0, 2, 4])
        assert batch.size == 3
        assert batch.ids == [ds.bundles[i].id for i in (0, 2, 4)]
        assert batch.image.shape == (3, IMAGE_DIM)
        assert batch.place.shape == (3, PLACE_DIM)
        assert batch.tag_ids.shape == (3, 15)
        assert batch.caption_ids.shape[0] == 3
        assert batch.gold.shape[0] == 3

    def test_gold_rows_are_bos_question_padded(self):
        ds = small_dataset()
        batch = make_batch(ds, [0, 1])
        for row, idx in enumerate((0, 1)):
            q = ds.bundles[idx].questions[0]
            assert batch.gold[row, 0] == BOS
            assert list(batch.gold[row, 1:1 + len(q)]) == list(q)
            assert q[-1] == EOS
            assert np.all(batch.gold[row, 1 + len(q):] == PAD)
        assert batch.gold.shape[1] == 1 + max(len(ds.bundles[i].questions[0])
                                              for i in (0, 1))

    def test_caption_padding_and_lengths(self):
        ds = small_dataset()
        batch = make_batch(ds, range(4))
        for row in range(4):
            n = batch.caption_lengths[row]
            assert list(batch.caption_ids[row, :n]) == list(ds.bundles[row].caption)
            assert np.all(batch.caption_ids[row, n:] == PAD)

    def test_question_choice_wraps_by_length(self):
        ds = small_dataset()
        nq = len(ds.bundles[0].questions)
        a = make_batch(ds, [0], question_choice=[1])
        b = make_batch(ds, [0], question_choice=[1 + nq])
        np.testing.assert_array_equal(a.gold, b.gold)
        q = ds.bundles[0].questions[1]
        assert list(a.gold[0, 1:1 + len(q)]) == list(q)

    def test_default_choice_is_first_question(self):
        ds = small_dataset()
        a = make_batch(ds, [3])
        b = make_batch(ds, [3], question_choice=[0])
        np.testing.assert_array_equal(a.gold, b.gold)

    def test_empty_batch_rejected(self):
        ds = small_dataset()
        with pytest.raises(ValueError):
            make_batch(ds, [])


class TestConstruction:
    def test_unknown_cue_rejected(self):
        with pytest.raises(ValueError, match="unknown cues"):
            small_model(cues=("image", "meme"))

    def test_multi_cue_requires_image(self):
        with pytest.raises(ValueError, match="image"):
            small_model(cues=("caption", "tag"))

    def test_empty_cues_rejected(self):
        with pytest.raises(ValueError):
            small_model(cues=())

    def test_bad_combiner_rejected(self):
        with pytest.raises(ValueError, match="combiner"):
            small_model(combiner="blender")

    def test_cue_order_is_canonical(self):
        m = small_model(cues=("tag", "image", "caption"))
        assert m.cues == ("image", "caption", "tag")
        assert m.fused_cues == ("caption", "tag")

    def test_single_cue_has_no_fusion_stack(self):
        m = small_model(cues=("caption",))
        assert m.fusion is None and m.moderator is None and m.mixture is None

    def test_mixture_combiner_swaps_out_moderator(self):
        m = small_model(combiner="mixture")
        assert m.moderator is None and m.mixture is not None


class TestEncode:
    def test_single_cue_weights_identically_one(self):
        ds = small_dataset()
        m = small_model(cues=("caption",))
        enc = m.encode(make_batch(ds, [0, 1]), None, stochastic=False)
        np.testing.assert_array_equal(enc.pi.data, np.ones((2, 1)))
        assert enc.mus == {}
        assert enc.order == ("caption",)
        assert enc.g_enc is enc.g_cues["caption"]

    def test_moderator_weights_lie_on_simplex(self):
        ds = small_dataset()
        m = small_model(cues=("image", "caption", "tag"))
        enc = m.encode(make_batch(ds, range(4)), None, stochastic=False)
        assert enc.order == ("caption", "tag")
        assert enc.pi.data.shape == (4, 2)
        assert np.all(enc.pi.data >= 0)
        np.testing.assert_allclose(enc.pi.data.sum(axis=1), 1.0, atol=1e-12)
        assert enc.g_enc.data.shape == (4, 6)

    def test_mixture_path_has_no_weights(self):
        ds = small_dataset()
        m = small_model(cues=("image", "caption", "tag"), combiner="mixture")
        enc = m.encode(make_batch(ds, [0]), None, stochastic=False)
        assert enc.pi is None
        assert enc.g_enc.data.shape == (1, 6)

    def test_same_rng_child_reproduces_encoding_bitwise(self):
        ds = small_dataset()
        m = small_model()
        batch = make_batch(ds, range(3))
        root = RngStream(9)
        a = m.encode(batch, root.child("enc"), stochastic=True)
        b = m.encode(batch, root.child("enc"), stochastic=True)
        np.testing.assert_array_equal(a.g_enc.data, b.g_enc.data)

    def test_stochastic_pass_differs_from_deterministic(self):
        ds = small_dataset()
        m = small_model()
        batch = make_batch(ds, range(3))
        sto = m.encode(batch, RngStream(9).child("enc"), stochastic=True)
        det = m.encode(batch, None, stochastic=False)
        assert not np.allclose(sto.g_enc.data, det.g_enc.data)

    def test_zero_rate_stochastic_equals_deterministic(self):
        ds = small_dataset()
        m = small_model(p=0.0, kind="none")
        batch = make_batch(ds, range(3))
        sto = m.encode(batch, RngStream(9).child("enc"), stochastic=True)
        det = m.encode(batch, None, stochastic=False)
        np.testing.assert_array_equal(sto.g_enc.data, det.g_enc.data)


class TestNamedParams:
    def test_shared_embedding_appears_once(self):
        m = small_model(share_embedding=True)
        params = m.named_params()
        assert "embedding.weight" in params
        assert not any(k.startswith("dec.emb") for k in params)
        assert m.decoder.embedding is m.embedding

    def test_unshared_embedding_is_a_second_table(self):
        m = small_model(share_embedding=False)
        params = m.named_params()
        assert "embedding.weight" in params
        assert "dec.emb.weight" in params
        assert params["dec.emb.weight"] is not params["embedding.weight"]

    def test_no_tensor_registered_twice(self):
        for kw in ({"share_embedding": True}, {"share_embedding": False}):
            params = small_model(**kw).named_params()
            ids = [id(t) for t in params.values()]
            assert len(set(ids)) == len(ids)

    def test_moderator_and_mixture_register_their_params(self):
        with_mod = small_model().named_params()
        with_mix = small_model(combiner="mixture").named_params()
        assert any(k.startswith("moderator") for k in with_mod)
        assert any(k.startswith("mixture") for k in with_mix)
        assert not any(k.startswith("mixture") for k in with_mod)


class TestDropoutOverride:
    def test_forces_and_restores_every_component(self):
        m = small_model(cues=("image", "place", "caption", "tag"), p=0.0, kind="none")
        comps = m.dropout_components()
        before = [(c.p, c.kind) for c in comps]
        with dropout_override(m, 0.4, "bernoulli"):
            assert all(c.p == 0.4 and c.kind == "bernoulli" for c in comps)
        assert [(c.p, c.kind) for c in comps] == before

    def test_restores_after_exception(self):
        m = small_model(p=0.1)
        comps = m.dropout_components()
        before = [(c.p, c.kind) for c in comps]
        with pytest.raises(RuntimeError):
            with dropout_override(m, 0.5, "gaussian"):
                raise RuntimeError("boom")
        assert [(c.p, c.kind) for c in comps] == before

    def test_override_makes_dropout_free_model_stochastic(self):
        ds = small_dataset()
        m = small_model(p=0.0, kind="none")
        batch = make_batch(ds, [0, 1])
        det = m.encode(batch, None, stochastic=False).g_enc.data
        with dropout_override(m, 0.4, "bernoulli"):
            sto = m.encode(batch, RngStream(3).child("e"), stochastic=True).g_enc.data
        assert not np.allclose(sto, det)
        after = m.encode(batch, RngStream(3).child("e"), stochastic=True).g_enc.data
        np.testing.assert_array_equal(after, det)
