"""Training and evaluation harness.

The MUMC training step runs two decoding passes per batch: pass 1 computes
the plain and aleatoric losses, backpropagates the distorted uncertainty
loss, and reads the gradient at the mixed encoding; pass 2 rebuilds the
forward computation under the same dropout draws, refines the encoding with
the reversed, cue-weighted gradient, and backpropagates the refined
cross-entropy. Parameter gradients from the two passes accumulate (the
uncertainty term scaled by its loss weight) and one optimizer step follows.

Everything is driven by counter-based RNG streams, so a (config, seed) pair
reproduces losses, checkpoints, and reports bitwise.
"""

import os
from contextlib import nullcontext
from dataclasses import dataclass

import numpy as np

from .autodiff import NonFiniteError, Tape
from .config import RunConfig, config_to_dict
from .data import Dataset
from .decoder import (aleatoric_mc_loss, decode_teacher_forced, distorted_loss,
                      gen_loss, generate_greedy, generate_mc, mumc_refine,
                      targets_and_mask)
from .metrics import EvalReport, evaluate_corpus
from .model import Batch, MultiCueModel, dropout_override, make_batch
from .nn import mc_predict, save_checkpoint
from .rng import RngStream


class TrainingDiverged(RuntimeError):
    """Raised when a step produces a non-finite loss."""


def build_model(cfg: RunConfig, dataset: Dataset, rng: RngStream = None) -> MultiCueModel:
    if rng is None:
        rng = RngStream(cfg.seed).child("model")
    return MultiCueModel(
        cues=cfg.cues, combiner=cfg.combiner, image_dim=dataset.image_dim,
        place_dim=dataset.place_dim, embed_dim=cfg.embed_dim,
        enc_dim=cfg.enc_dim, hidden_dim=cfg.hidden_dim,
        vocab_size=len(dataset.vocab.tokens), dropout_rate=cfg.dropout.rate,
        dropout_kind=cfg.dropout.kind, rng=rng,
        share_embedding=cfg.share_embedding,
        share_caption_tag_out=cfg.share_caption_tag_out,
        per_category_tags=cfg.per_category_tags, temperature=cfg.temperature)


# ---------------------------------------------------------------------------
# optimizers

class SgdOptimizer:
    def __init__(self, params: dict, lr: float):
        self.params = params
        self.lr = float(lr)

    def zero(self):
        for t in self.params.values():
            t.zero_grad()

    def step(self):
        for t in self.params.values():
            if t.grad is not None:
                t.data -= self.lr * t.grad


class AdamOptimizer:
    def __init__(self, params: dict, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def zero(self):
        for t in self.params.values():
            t.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1 ** self.t)
            v_hat = self.v[name] / (1 - b2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(cfg: RunConfig, params: dict):
    if cfg.optimizer.algorithm == "adam":
        return AdamOptimizer(params, cfg.optimizer.learning_rate)
    return SgdOptimizer(params, cfg.optimizer.learning_rate)


# ---------------------------------------------------------------------------
# one training step

def run_step(model: MultiCueModel, batch: Batch, cfg: RunConfig,
             rng: RngStream) -> dict:
    """Accumulate gradients for one batch; returns the step's loss parts.

    The caller zeroes gradients before and applies the optimizer after.
    Pass 2 re-derives every dropout draw from the same child streams as
    pass 1, so the refined decode differs only through the refinement term.
    """
    targets, mask = targets_and_mask(batch.gold)
    masks = model.decoder.cell.sample_masks(batch.size, rng.child("dec_masks"),
                                            stochastic=True)
    if not cfg.mumc_enabled:
        with Tape() as tape:
            enc = model.encode(batch, rng.child("enc"), stochastic=True)
            logits, _ = decode_teacher_forced(model.decoder, enc.g_enc,
                                              batch.gold, masks=masks)
            loss = gen_loss(logits, targets, mask)
        tape.backward(loss)
        value = loss.item()
        return {"total": value, "l_gen": value, "l_u": 0.0, "l_aleatoric": value}

    mumc = cfg.mumc
    with Tape() as tape1:
        enc1 = model.encode(batch, rng.child("enc"), stochastic=True)
        logits, variances = decode_teacher_forced(model.decoder, enc1.g_enc,
                                                  batch.gold, masks=masks)
        l_plain = gen_loss(logits, targets, mask)
        l_alea = aleatoric_mc_loss(logits, variances, targets, mask,
                                   T=mumc.mc_samples, rng=rng.child("lrt"))
        l_u = distorted_loss(l_plain, l_alea, mumc.alpha)
    tape1.backward(l_u)
    grad_enc = enc1.g_enc.grad
    grad_enc = np.zeros_like(enc1.g_enc.data) if grad_enc is None else grad_enc.copy()
    # the refinement consumes the raw uncertainty gradient; the parameter
    # gradients carry the loss weight
    lam = mumc.uncertainty_weight
    for p in model.named_params().values():
        if p.grad is not None:
            p.grad *= lam

    with Tape() as tape2:
        enc2 = model.encode(batch, rng.child("enc"), stochastic=True)
        refined = mumc_refine(enc2.g_enc, enc2.mus, grad_enc, mumc.gamma)
        logits2, _ = decode_teacher_forced(model.decoder, refined,
                                           batch.gold, masks=masks)
        l_gen = gen_loss(logits2, targets, mask)
    tape2.backward(l_gen)
    return {"total": l_gen.item() + lam * l_u.item(), "l_gen": l_gen.item(),
            "l_u": l_u.item(), "l_aleatoric": l_alea.item(),
            "l_plain": l_plain.item()}


def teacher_loss(model: MultiCueModel, batch: Batch) -> float:
    """Deterministic (dropout-off) cross-entropy in nats per token."""
    targets, mask = targets_and_mask(batch.gold)
    enc = model.encode(batch, None, stochastic=False)
    logits, _ = decode_teacher_forced(model.decoder, enc.g_enc, batch.gold,
                                      stochastic=False)
    return gen_loss(logits, targets, mask).item()


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    model: MultiCueModel
    curve: list                 # per-epoch dict rows
    best_epoch: int
    best_val_loss: float
    best_params: dict           # name -> ndarray snapshot at the best epoch
    train_indices: list
    val_indices: list


def split_indices(n: int, val_fraction: float, rng: RngStream):
    """Seeded shuffle split; validation rounds down and never consumes the
    whole dataset."""
    perm = rng.shuffled(range(n))
    val_count = min(int(round(val_fraction * n)), n - 1)
    val = sorted(perm[:val_count])
    train = sorted(perm[val_count:])
    return train, val


def _epoch_mean(values, weights):
    return float(sum(v * w for v, w in zip(values, weights)) / sum(weights))


def train_model(cfg: RunConfig, dataset: Dataset, log=None) -> TrainResult:
    cfg.validate()
    root = RngStream(cfg.seed)
    model = build_model(cfg, dataset, root.child("model"))
    params = model.named_params()
    optimizer = make_optimizer(cfg, params)
    train_idx, val_idx = split_indices(len(dataset.bundles), cfg.val_fraction,
                                       root.child("split"))
    run_rng = root.child("train")
    curve = []
    best_val = np.inf
    best_epoch = -1
    best_params = {k: t.data.copy() for k, t in params.items()}
    batch_size = cfg.optimizer.batch_size
    for epoch in range(cfg.optimizer.epochs):
        epoch_rng = run_rng.child(("epoch", epoch))
        order = epoch_rng.child("order").shuffled(train_idx)
        qdraws = epoch_rng.child("questions").integers(0, 1 << 30, len(order))
        totals, gens, uncs, weights = [], [], [], []
        for start in range(0, len(order), batch_size):
            rows = order[start:start + batch_size]
            choice = [int(k) for k in qdraws[start:start + len(rows)]]
            batch = make_batch(dataset, rows, question_choice=choice)
            optimizer.zero()
            try:
                step = run_step(model, batch, cfg, epoch_rng.child(("step", start)))
            except NonFiniteError as e:
                raise TrainingDiverged(
                    f"non-finite values at epoch {epoch}, batch ids "
                    f"{batch.ids}: {e}") from e
            if not np.isfinite(step["total"]):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch ids {batch.ids}: "
                    f"total={step['total']} l_gen={step['l_gen']} l_u={step['l_u']}")
            optimizer.step()
            totals.append(step["total"])
            gens.append(step["l_gen"])
            uncs.append(step["l_u"])
            weights.append(len(rows))
        row = {
            "epoch": epoch,
            "train_loss": _epoch_mean(totals, weights),
            "val_loss": np.nan,
            "l_gen": _epoch_mean(gens, weights),
            "l_u": _epoch_mean(uncs, weights),
        }
        eval_idx = val_idx if val_idx else train_idx
        val_losses, val_weights = [], []
        for start in range(0, len(eval_idx), batch_size):
            rows = eval_idx[start:start + batch_size]
            try:
                val_losses.append(teacher_loss(model, make_batch(dataset, rows)))
            except NonFiniteError as e:
                raise TrainingDiverged(
                    f"non-finite validation pass at epoch {epoch}: {e}") from e
            val_weights.append(len(rows))
        row["val_loss"] = _epoch_mean(val_losses, val_weights)
        if cfg.track_val_bleu:
            report, _ = evaluate_model(model, dataset, eval_idx, cfg=cfg,
                                       decision_mode="deterministic")
            row["val_bleu1"] = report.bleu[1]
        curve.append(row)
        if row["val_loss"] < best_val:
            best_val = row["val_loss"]
            best_epoch = epoch
            best_params = {k: t.data.copy() for k, t in params.items()}
        if log is not None:
            log(f"epoch {epoch}: train {row['train_loss']:.4f} "
                f"val {row['val_loss']:.4f}")
    for name, t in params.items():
        t.data = best_params[name].copy()
    return TrainResult(model=model, curve=curve, best_epoch=best_epoch,
                       best_val_loss=best_val, best_params=best_params,
                       train_indices=train_idx, val_indices=val_idx)


def curve_to_csv(curve) -> str:
    if not curve:
        return "epoch,train_loss,val_loss,l_gen,l_u\n"
    cols = ["epoch", "train_loss", "val_loss", "l_gen", "l_u"]
    if "val_bleu1" in curve[0]:
        cols.append("val_bleu1")
    lines = [",".join(cols)]
    for row in curve:
        lines.append(",".join(repr(row[c]) if c != "epoch" else str(row[c])
                              for c in cols))
    return "\n".join(lines) + "\n"


def train_and_save(cfg: RunConfig, dataset: Dataset, out_dir: str,
                   log=None) -> TrainResult:
    result = train_model(cfg, dataset, log=log)
    os.makedirs(out_dir, exist_ok=True)
    meta = {"config": config_to_dict(cfg), "best_epoch": result.best_epoch,
            "best_val_loss": result.best_val_loss}
    save_checkpoint(os.path.join(out_dir, "checkpoint.json"),
                    result.model.named_params(), meta=meta)
    with open(os.path.join(out_dir, "curve.csv"), "w") as fh:
        fh.write(curve_to_csv(result.curve))
    return result


# ---------------------------------------------------------------------------
# evaluation

def tokens_to_words(tokens, vocab) -> list:
    """Token ids up to (excluding) the first EOS, as vocabulary words."""
    from .data import EOS
    words = []
    for t in tokens:
        if t == EOS:
            break
        words.append(vocab.token(int(t)))
    return words


def evaluate_model(model: MultiCueModel, dataset: Dataset, indices, *,
                   cfg: RunConfig, decision_mode: str = None,
                   rng: RngStream = None):
    """Greedy generation over `indices` followed by corpus scoring against
    each example's full reference set. Returns (EvalReport, generation
    records)."""
    indices = list(indices)
    if not indices:
        raise ValueError("evaluation needs at least one example")
    mode = decision_mode if decision_mode is not None else cfg.decision_mode
    if mode == "mc" and not cfg.mc_inference:
        mode = "deterministic"   # dropout-off-at-inference variants
    if mode == "mc" and rng is None:
        rng = RngStream(cfg.seed).child("eval")
    vocab = dataset.vocab
    candidates, references, records = [], [], []
    for idx in indices:
        bundle = dataset.bundles[idx]
        batch = make_batch(dataset, [idx])
        if mode == "deterministic":
            enc = model.encode(batch, None, stochastic=False)
            sample = generate_greedy(model.decoder, enc.g_enc, cfg.max_len)
            tokens = sample.tokens
            record = {"id": bundle.id, "tokens": list(tokens),
                      "samples": [list(tokens)],
                      "epistemic": 0.0,
                      "aleatoric": sample.predictive_uncertainty,
                      "predictive": sample.predictive_uncertainty}
        else:
            def producer(r, batch=batch):
                return model.encode(batch, r, stochastic=True).g_enc
            samples, _, unc = generate_mc(model.decoder, producer,
                                          T=cfg.eval_mc_samples,
                                          max_len=cfg.max_len,
                                          rng=rng.child(int(idx)))
            tokens = unc["committee_tokens"]
            record = {"id": bundle.id, "tokens": list(tokens),
                      "samples": [list(s.tokens) for s in samples],
                      "epistemic": unc["epistemic"],
                      "aleatoric": unc["aleatoric"],
                      "predictive": unc["predictive"]}
        candidates.append(tokens_to_words(tokens, vocab))
        references.append([tokens_to_words(q, vocab) for q in bundle.questions])
        record["words"] = candidates[-1]
        records.append(record)
    report = evaluate_corpus(candidates, references, bleu_mode=cfg.bleu_mode,
                             smooth=cfg.smooth_bleu)
    return report, records


# ---------------------------------------------------------------------------
# variance analysis

@dataclass
class VarianceRecord:
    """Per-example Monte-Carlo summary of the mixed encoding."""
    id: str
    mc_mean: np.ndarray
    deterministic: np.ndarray
    normalized_variance: float


def variance_records(model: MultiCueModel, dataset: Dataset, indices, *,
                     T: int, rng: RngStream, sample_rate: float = None,
                     sample_kind: str = "bernoulli"):
    """T stochastic encoding passes per example vs the deterministic pass.

    normalized variance = mean |MC mean - deterministic| / input feature scale,
    where the scale is the mean |value| of the example's image and place
    features. The denominator is model-independent on purpose: encoder weight
    magnitudes vary wildly between combiner variants, so dividing by the
    encoding's own magnitude would make the numbers incomparable across models.
    sample_rate, when given, temporarily forces that dropout rate on every
    component so no-dropout configurations still produce Monte-Carlo spread.
    """
    if T < 2:
        raise ValueError(f"variance analysis needs T >= 2, got {T}")
    override = (dropout_override(model, sample_rate, sample_kind)
                if sample_rate is not None else nullcontext())
    records = []
    with override:
        for idx in indices:
            batch = make_batch(dataset, [idx])
            det = model.encode(batch, None, stochastic=False).g_enc.data[0].copy()
            stats = mc_predict(
                lambda r, batch=batch: model.encode(batch, r, stochastic=True).g_enc,
                T, rng.child(("var", int(idx))))
            mc_mean = stats.mean[0]
            bundle = dataset.bundles[idx]
            feats = np.concatenate([bundle.image_feat, bundle.place_feat])
            scale = float(np.mean(np.abs(feats))) + 1e-12
            nv = float(np.mean(np.abs(mc_mean - det)) / scale)
            records.append(VarianceRecord(id=dataset.bundles[idx].id,
                                          mc_mean=mc_mean.copy(),
                                          deterministic=det,
                                          normalized_variance=nv))
    return records


def variance_csv(records) -> str:
    lines = ["id,normalized_variance"]
    lines += [f"{r.id},{r.normalized_variance!r}" for r in records]
    return "\n".join(lines) + "\n"
