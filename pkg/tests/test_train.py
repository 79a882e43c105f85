"""Tests for the training harness: the two-pass uncertainty step, the epoch
loop, evaluation, and the variance analysis."""

import numpy as np
import pytest

from mcvqg.config import RunConfig, config_from_dict
from mcvqg.data import EOS, synth_generate
from mcvqg.model import make_batch
from mcvqg.nn import load_checkpoint, restore_params
from mcvqg.rng import RngStream
from mcvqg.train import (TrainingDiverged, build_model, curve_to_csv,
                         evaluate_model, make_optimizer, run_step, split_indices,
                         teacher_loss, tokens_to_words, train_and_save,
                         train_model, variance_csv, variance_records)

IMAGE_DIM = 24
PLACE_DIM = 8

DS = synth_generate(10, 7, image_dim=IMAGE_DIM, place_dim=PLACE_DIM)


def tiny_config(**overrides) -> RunConfig:
    data = {"cues": ["image", "caption"], "enc_dim": 6, "embed_dim": 5,
            "hidden_dim": 7, "image_dim": IMAGE_DIM, "place_dim": PLACE_DIM,
            "seed": 3, "val_fraction": 0.2,
            "optimizer": {"epochs": 2, "batch_size": 4, "learning_rate": 0.05},
            "mumc": {"mc_samples": 3}}
    data.update(overrides)
    return config_from_dict(data)


def capture_grads(model, batch, cfg, seed=17):
    params = model.named_params()
    for p in params.values():
        p.zero_grad()
    losses = run_step(model, batch, cfg, RngStream(seed).child("step"))
    grads = {k: (None if p.grad is None else p.grad.copy())
             for k, p in params.items()}
    return losses, grads


class TestSplitIndices:
    def test_partition_covers_everything_sorted(self):
        train, val = split_indices(20, 0.25, RngStream(0).child("s"))
        assert sorted(train + val) == list(range(20))
        assert train == sorted(train) and val == sorted(val)
        assert len(val) == 5

    def test_deterministic_per_seed(self):
        a = split_indices(30, 0.2, RngStream(4).child("s"))
        b = split_indices(30, 0.2, RngStream(4).child("s"))
        c = split_indices(30, 0.2, RngStream(5).child("s"))
        assert a == b
        assert a != c

    def test_validation_never_consumes_everything(self):
        train, val = split_indices(2, 0.9, RngStream(1).child("s"))
        assert len(train) == 1 and len(val) == 1
        train, val = split_indices(1, 0.5, RngStream(1).child("s"))
        assert train == [0] and val == []

    def test_zero_fraction_gives_empty_validation(self):
        train, val = split_indices(8, 0.0, RngStream(2).child("s"))
        assert val == [] and len(train) == 8


class TestRunStep:
    def test_loss_parts_are_consistent(self):
        cfg = tiny_config()
        model = build_model(cfg, DS)
        batch = make_batch(DS, range(4))
        losses, grads = capture_grads(model, batch, cfg)
        lam = cfg.mumc.uncertainty_weight
        assert losses["total"] == losses["l_gen"] + lam * losses["l_u"]
        assert all(np.isfinite(v) for v in losses.values())
        assert all(g is not None for g in grads.values())

    def test_frozen_noise_gamma_zero_reproduces_plain_loss(self):
        # pass 2 re-derives the dropout draws of pass 1, so an inert
        # refinement must reproduce the plain cross-entropy bitwise
        cfg = tiny_config(mumc={"mc_samples": 3, "gamma": 0.0})
        model = build_model(cfg, DS)
        losses, _ = capture_grads(model, make_batch(DS, range(4)), cfg)
        assert losses["l_gen"] == losses["l_plain"]

    def test_active_refinement_changes_the_decode(self):
        cfg = tiny_config(mumc={"mc_samples": 3, "gamma": 1.0})
        model = build_model(cfg, DS)
        losses, _ = capture_grads(model, make_batch(DS, range(4)), cfg)
        assert losses["l_gen"] != losses["l_plain"]

    def test_inert_uncertainty_term_matches_single_pass_step(self):
        cfg_plain = tiny_config(mumc_enabled=False)
        cfg_inert = tiny_config(mumc={"mc_samples": 3, "gamma": 0.0,
                                      "uncertainty_weight": 0.0})
        model = build_model(cfg_plain, DS)
        batch = make_batch(DS, range(4))
        plain_losses, plain_grads = capture_grads(model, batch, cfg_plain)
        inert_losses, inert_grads = capture_grads(model, batch, cfg_inert)
        assert inert_losses["l_gen"] == plain_losses["l_gen"]
        assert inert_losses["total"] == plain_losses["total"]
        for name in plain_grads:
            if plain_grads[name] is None:
                # params only the (zero-weighted) uncertainty term touches
                assert not np.any(inert_grads[name])
            else:
                np.testing.assert_array_equal(plain_grads[name],
                                              inert_grads[name])

    def test_variance_head_gradient_rides_the_uncertainty_weight(self):
        # l_gen never touches the variance head, so its gradient exists
        # exactly when the weighted pass-1 gradient survives
        batch = make_batch(DS, range(4))
        cfg0 = tiny_config(mumc={"mc_samples": 3, "uncertainty_weight": 0.0})
        cfg1 = tiny_config(mumc={"mc_samples": 3, "uncertainty_weight": 1.0})
        model = build_model(cfg0, DS)
        w_var = [k for k in model.named_params() if k.endswith("w_var")]
        assert w_var
        _, g0 = capture_grads(model, batch, cfg0)
        _, g1 = capture_grads(model, batch, cfg1)
        for name in w_var:
            assert np.all(g0[name] == 0.0)
            assert np.any(g1[name] != 0.0)

    def test_gradients_are_affine_in_the_uncertainty_weight(self):
        batch = make_batch(DS, range(4))
        model = build_model(tiny_config(), DS)
        grads = {}
        for lam in (0.0, 1.0, 2.0):
            cfg = tiny_config(mumc={"mc_samples": 3, "uncertainty_weight": lam})
            _, grads[lam] = capture_grads(model, batch, cfg)
        for name in grads[0.0]:
            left = grads[2.0][name] - grads[0.0][name]
            right = 2.0 * (grads[1.0][name] - grads[0.0][name])
            np.testing.assert_allclose(left, right, rtol=1e-9, atol=1e-12)

    def test_same_stream_reproduces_the_step_bitwise(self):
        cfg = tiny_config()
        model = build_model(cfg, DS)
        batch = make_batch(DS, range(4))
        la, ga = capture_grads(model, batch, cfg, seed=5)
        lb, gb = capture_grads(model, batch, cfg, seed=5)
        assert la == lb
        for name in ga:
            np.testing.assert_array_equal(ga[name], gb[name])

    def test_single_pass_step_reports_zero_uncertainty(self):
        cfg = tiny_config(mumc_enabled=False)
        model = build_model(cfg, DS)
        losses, _ = capture_grads(model, make_batch(DS, range(3)), cfg)
        assert losses["l_u"] == 0.0
        assert losses["total"] == losses["l_gen"]


class TestOptimizers:
    def test_sgd_moves_against_the_gradient(self):
        cfg = tiny_config()
        model = build_model(cfg, DS)
        params = model.named_params()
        opt = make_optimizer(cfg, params)
        before = {k: p.data.copy() for k, p in params.items()}
        opt.zero()
        run_step(model, make_batch(DS, range(4)), cfg, RngStream(0).child("s"))
        grads = {k: p.grad.copy() for k, p in params.items()}
        opt.step()
        for k, p in params.items():
            np.testing.assert_array_equal(p.data,
                                          before[k] - 0.05 * grads[k])

    def test_adam_is_selected_and_updates(self):
        cfg = tiny_config(optimizer={"algorithm": "adam", "learning_rate": 0.01,
                                     "epochs": 2, "batch_size": 4})
        model = build_model(cfg, DS)
        params = model.named_params()
        opt = make_optimizer(cfg, params)
        assert type(opt).__name__ == "AdamOptimizer"
        before = {k: p.data.copy() for k, p in params.items()}
        opt.zero()
        run_step(model, make_batch(DS, range(4)), cfg, RngStream(0).child("s"))
        opt.step()
        assert any(not np.array_equal(p.data, before[k])
                   for k, p in params.items())


class TestTrainModel:
    def test_curve_shape_and_determinism(self):
        cfg = tiny_config()
        a = train_model(cfg, DS)
        b = train_model(cfg, DS)
        assert len(a.curve) == cfg.optimizer.epochs
        assert a.curve == b.curve
        pa, pb = a.model.named_params(), b.model.named_params()
        for name in pa:
            np.testing.assert_array_equal(pa[name].data, pb[name].data)

    def test_seed_changes_the_run(self):
        a = train_model(tiny_config(seed=1), DS)
        b = train_model(tiny_config(seed=2), DS)
        assert a.curve != b.curve

    def test_best_epoch_params_are_restored(self):
        cfg = tiny_config(optimizer={"epochs": 4, "batch_size": 4,
                                     "learning_rate": 0.3})
        result = train_model(cfg, DS)
        assert result.best_val_loss == min(r["val_loss"] for r in result.curve)
        assert result.curve[result.best_epoch]["val_loss"] == result.best_val_loss
        params = result.model.named_params()
        for name, t in params.items():
            np.testing.assert_array_equal(t.data, result.best_params[name])
        val_losses, weights = [], []
        bs = cfg.optimizer.batch_size
        for start in range(0, len(result.val_indices), bs):
            rows = result.val_indices[start:start + bs]
            val_losses.append(teacher_loss(result.model, make_batch(DS, rows)))
            weights.append(len(rows))
        recomputed = float(sum(v * w for v, w in zip(val_losses, weights))
                           / sum(weights))
        assert recomputed == result.best_val_loss

    def test_loss_decreases_on_tiny_data(self):
        cfg = tiny_config(val_fraction=0.0,
                          optimizer={"epochs": 8, "batch_size": 5,
                                     "learning_rate": 0.3})
        result = train_model(cfg, DS)
        assert result.curve[-1]["val_loss"] < result.curve[0]["val_loss"]

    def test_exploding_learning_rate_raises_diverged(self):
        # one enormous step overflows weight products on the next forward
        cfg = tiny_config(val_fraction=0.0, mumc_enabled=False,
                          optimizer={"epochs": 3, "batch_size": 5,
                                     "learning_rate": 1e155})
        with np.errstate(all="ignore"), pytest.raises(TrainingDiverged):
            train_model(cfg, DS)

    def test_val_bleu_tracking_adds_a_column(self):
        cfg = tiny_config(track_val_bleu=True,
                          optimizer={"epochs": 1, "batch_size": 4})
        result = train_model(cfg, DS)
        assert "val_bleu1" in result.curve[0]
        assert 0.0 <= result.curve[0]["val_bleu1"] <= 100.0


class TestCurveCsv:
    def test_header_and_rows(self):
        curve = [{"epoch": 0, "train_loss": 1.5, "val_loss": 1.25,
                  "l_gen": 1.0, "l_u": -0.125}]
        text = curve_to_csv(curve)
        lines = text.strip().split("\n")
        assert lines[0] == "epoch,train_loss,val_loss,l_gen,l_u"
        assert lines[1] == "0,1.5,1.25,1.0,-0.125"

    def test_floats_round_trip_exactly(self):
        cfg = tiny_config()
        result = train_model(cfg, DS)
        lines = curve_to_csv(result.curve).strip().split("\n")
        cols = lines[0].split(",")
        for row, line in zip(result.curve, lines[1:]):
            fields = dict(zip(cols, line.split(",")))
            assert float(fields["train_loss"]) == row["train_loss"]
            assert float(fields["val_loss"]) == row["val_loss"]

    def test_empty_curve_is_header_only(self):
        assert curve_to_csv([]) == "epoch,train_loss,val_loss,l_gen,l_u\n"

    def test_bleu_column_appended_when_tracked(self):
        curve = [{"epoch": 0, "train_loss": 1.0, "val_loss": 1.0,
                  "l_gen": 1.0, "l_u": 0.0, "val_bleu1": 12.5}]
        lines = curve_to_csv(curve).strip().split("\n")
        assert lines[0].endswith(",val_bleu1")
        assert lines[1].endswith(",12.5")


class TestTrainAndSave:
    def test_artifacts_restore_the_trained_model(self, tmp_path):
        cfg = tiny_config()
        out = tmp_path / "run"
        result = train_and_save(cfg, DS, str(out))
        assert (out / "checkpoint.json").exists()
        assert (out / "curve.csv").exists()
        arrays, meta = load_checkpoint(out / "checkpoint.json")
        assert meta["best_epoch"] == result.best_epoch
        assert meta["config"]["seed"] == cfg.seed
        clone = build_model(cfg, DS)
        restore_params(clone.named_params(), arrays)
        batch = make_batch(DS, range(4))
        assert teacher_loss(clone, batch) == teacher_loss(result.model, batch)

    def test_rerun_writes_identical_artifacts(self, tmp_path):
        cfg = tiny_config()
        train_and_save(cfg, DS, str(tmp_path / "a"))
        train_and_save(cfg, DS, str(tmp_path / "b"))
        for name in ("checkpoint.json", "curve.csv"):
            assert (tmp_path / "a" / name).read_bytes() == \
                (tmp_path / "b" / name).read_bytes()


class TestEvaluateModel:
    def test_deterministic_records(self):
        cfg = tiny_config()
        model = build_model(cfg, DS)
        report, records = evaluate_model(model, DS, [0, 1, 2], cfg=cfg)
        assert len(records) == 3
        for idx, rec in zip((0, 1, 2), records):
            assert rec["id"] == DS.bundles[idx].id
            assert rec["epistemic"] == 0.0
            assert rec["samples"] == [rec["tokens"]]
            assert rec["words"] == tokens_to_words(rec["tokens"], DS.vocab)
            assert rec["predictive"] >= 0.0
        assert 0.0 <= report.bleu[1] <= 100.0
        assert 0.0 <= report.rouge_l <= 100.0

    def test_mc_mode_draws_a_committee(self):
        cfg = tiny_config(decision_mode="mc", eval_mc_samples=3)
        model = build_model(cfg, DS)
        rng = RngStream(2).child("eval")
        _, records = evaluate_model(model, DS, [0, 1], cfg=cfg, rng=rng)
        for rec in records:
            assert len(rec["samples"]) == 3
            assert rec["epistemic"] >= 0.0
            assert rec["predictive"] == pytest.approx(
                rec["epistemic"] + rec["aleatoric"])
        _, again = evaluate_model(model, DS, [0, 1], cfg=cfg,
                                  rng=RngStream(2).child("eval"))
        assert records == again

    def test_mc_request_downgrades_without_inference_sampling(self):
        cfg = tiny_config(decision_mode="mc", mc_inference=False)
        model = build_model(cfg, DS)
        _, records = evaluate_model(model, DS, [0], cfg=cfg)
        assert records[0]["epistemic"] == 0.0
        assert len(records[0]["samples"]) == 1

    def test_empty_indices_rejected(self):
        cfg = tiny_config()
        model = build_model(cfg, DS)
        with pytest.raises(ValueError):
            evaluate_model(model, DS, [], cfg=cfg)

    def test_tokens_to_words_cuts_at_eos(self):
        words = tokens_to_words([4, 5, EOS, 6], DS.vocab)
        assert words == [DS.vocab.token(4), DS.vocab.token(5)]
        assert tokens_to_words([EOS], DS.vocab) == []


class TestVarianceRecords:
    def test_needs_at_least_two_samples(self):
        cfg = tiny_config()
        model = build_model(cfg, DS)
        with pytest.raises(ValueError, match="T >= 2"):
            variance_records(model, DS, [0], T=1, rng=RngStream(0).child("v"))

    def test_dropout_free_model_has_exactly_zero_variance(self):
        cfg = tiny_config(dropout={"rate": 0.0, "kind": "none"})
        model = build_model(cfg, DS)
        records = variance_records(model, DS, [0, 1, 2], T=4,
                                   rng=RngStream(0).child("v"))
        assert [r.normalized_variance for r in records] == [0.0, 0.0, 0.0]
        for r in records:
            np.testing.assert_array_equal(r.mc_mean, r.deterministic)

    def test_rate_override_probes_and_restores(self):
        cfg = tiny_config(dropout={"rate": 0.0, "kind": "none"})
        model = build_model(cfg, DS)
        records = variance_records(model, DS, [0, 1], T=4,
                                   rng=RngStream(0).child("v"), sample_rate=0.4)
        assert all(r.normalized_variance > 0.0 for r in records)
        assert all(c.p == 0.0 and c.kind == "none"
                   for c in model.dropout_components())

    def test_deterministic_per_stream(self):
        cfg = tiny_config()
        model = build_model(cfg, DS)
        a = variance_records(model, DS, [0, 1], T=3, rng=RngStream(4).child("v"))
        b = variance_records(model, DS, [0, 1], T=3, rng=RngStream(4).child("v"))
        assert [r.normalized_variance for r in a] == \
            [r.normalized_variance for r in b]

    def test_csv_round_trips(self):
        cfg = tiny_config()
        model = build_model(cfg, DS)
        records = variance_records(model, DS, [0, 1], T=3,
                                   rng=RngStream(4).child("v"))
        lines = variance_csv(records).strip().split("\n")
        assert lines[0] == "id,normalized_variance"
        for rec, line in zip(records, lines[1:]):
            rid, nv = line.split(",")
            assert rid == rec.id
            assert float(nv) == rec.normalized_variance
