"""Uncertainty-aware question decoder.

An LSTM consumes the mixed cue encoding at step -1 and the gold tokens under
teacher forcing; every step emits logits plus a softplus variance head. The
aleatoric loss perturbs the logits with the reparameterization trick
(y + eps*sqrt(v)) and averages the resulting likelihoods over T Monte-Carlo
draws; the distorted uncertainty loss compares it against the plain
cross-entropy; and the refinement step pushes the reversed uncertainty
gradient, weighted by each fused cue, back onto the encoding before the
second decoding pass.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import BOS, EOS, PAD
from .nn import BayesianLSTMCell, EmbeddingTable, init_bias, init_matrix
from .rng import RngStream


@dataclass
class MumcConfig:
    """Knobs for the uncertainty objective and the two-pass refinement."""
    mc_samples: int = 20          # T logit draws inside the aleatoric loss
    alpha: float = 1.0            # exponential-branch scale of the distorted loss
    gamma: float = 1.0            # gradient-reversal scale driving the refinement
    uncertainty_weight: float = 1.0   # lambda on the distorted loss in the total

    def validate(self):
        if self.mc_samples < 1:
            raise ValueError(f"mc_samples must be >= 1, got {self.mc_samples}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be nonnegative, got {self.gamma}")


class Decoder:
    """Parameters: input projection (enc dim -> embed dim), LSTM cell,
    logit head, and variance head."""

    def __init__(self, enc_dim: int, embed_dim: int, hidden_dim: int,
                 vocab_size: int, p: float, kind: str, rng: RngStream,
                 embedding: EmbeddingTable):
        self.enc_dim = int(enc_dim)
        self.embed_dim = int(embed_dim)
        self.hidden_dim = int(hidden_dim)
        self.vocab_size = int(vocab_size)
        self.embedding = embedding
        self.in_proj_w = init_matrix(enc_dim, embed_dim, rng.child("in_proj"))
        self.in_proj_b = init_bias(embed_dim)
        self.cell = BayesianLSTMCell(embed_dim, hidden_dim, p, kind, rng.child("cell"))
        self.w_out = init_matrix(hidden_dim, vocab_size, rng.child("w_out"))
        self.b_out = init_bias(vocab_size)
        self.w_var = init_matrix(hidden_dim, vocab_size, rng.child("w_var"))
        self.b_var = init_bias(vocab_size)

    def project_encoding(self, g_enc: Tensor) -> Tensor:
        return ad.affine(g_enc, self.in_proj_w, self.in_proj_b)

    def heads(self, h: Tensor):
        """(logits, aleatoric variance) for one hidden state."""
        y = ad.affine(h, self.w_out, self.b_out)
        v = ad.softplus(ad.affine(h, self.w_var, self.b_var))
        return y, v

    def named_params(self, prefix: str = "dec", include_embedding: bool = False):
        out = {
            f"{prefix}.in_proj.w": self.in_proj_w,
            f"{prefix}.in_proj.b": self.in_proj_b,
            f"{prefix}.w_out": self.w_out,
            f"{prefix}.b_out": self.b_out,
            f"{prefix}.w_var": self.w_var,
            f"{prefix}.b_var": self.b_var,
        }
        out.update(self.cell.named_params(f"{prefix}.cell"))
        if include_embedding:
            out.update(self.embedding.named_params(f"{prefix}.emb"))
        return out


def check_gold(gold: np.ndarray):
    gold = np.asarray(gold, dtype=np.int64)
    if gold.ndim != 2 or gold.shape[1] < 2:
        raise ValueError(f"gold must be (B, L>=2), got {gold.shape}")
    if np.any(gold[:, 0] != BOS):
        raise ValueError("gold sequences must begin with BOS")
    for row in gold:
        real = row[row != PAD]
        if real[-1] != EOS:
            raise ValueError("gold sequences must end with EOS (before padding)")
    return gold


def targets_and_mask(gold: np.ndarray):
    """Shift-by-one targets and the PAD mask (PAD steps leave both the loss
    sum and the normalizing count)."""
    gold = np.asarray(gold, dtype=np.int64)
    targets = gold[:, 1:]
    mask = (targets != PAD).astype(np.float64)
    return targets, mask


def decode_teacher_forced(dec: Decoder, g_enc: Tensor, gold: np.ndarray,
                          rng: RngStream = None, stochastic: bool = True,
                          masks=None):
    """Step -1 consumes the encoding, step t the embedding of gold[t]; the
    hidden state after gold[t] scores gold[t+1]. Returns per-step (logits,
    variances), each a list of (B, V) tensors of length L-1."""
    gold = check_gold(gold)
    batch, length = gold.shape
    if masks is None:
        masks = dec.cell.sample_masks(batch, rng.child("cell") if rng else None, stochastic)
    h, c = dec.cell.initial_state(batch)
    x = dec.project_encoding(g_enc)
    h, c = dec.cell.step(x, h, c, masks)
    logits, variances = [], []
    for t in range(length - 1):
        x = dec.embedding.lookup(gold[:, t])
        h, c = dec.cell.step(x, h, c, masks)
        y, v = dec.heads(h)
        logits.append(y)
        variances.append(v)
    return logits, variances


def _neg_masked_mean(step_values, mask: np.ndarray) -> Tensor:
    """-(sum of masked per-step (B,) values) / (number of unmasked steps).

    Both likelihood losses reduce through this exact code path so their
    zero-variance degeneracy is bitwise, not just close.
    """
    count = float(mask.sum())
    if count <= 0:
        raise ValueError("loss mask is empty: nothing to average")
    total = None
    for t, vals in enumerate(step_values):
        term = ad.sum_all(ad.mul(vals, Tensor(mask[:, t])))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, -1.0 / count)


def gen_loss(logits, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood per unmasked token (nats/token)."""
    steps = []
    for t, y in enumerate(logits):
        lp = ad.sub(ad.gather_cols(y, targets[:, t]), ad.row_logsumexp(y))
        steps.append(lp)
    return _neg_masked_mean(steps, mask)


def lrt_sample(y: Tensor, sigma: Tensor, eps: np.ndarray) -> Tensor:
    """Logit reparameterization: y + eps * sigma for one noise draw."""
    if eps.shape != y.data.shape:
        raise ad.ShapeError(f"lrt: eps {eps.shape} does not match logits {y.data.shape}")
    return ad.add(y, ad.mul(Tensor(eps), sigma))


def aleatoric_mc_loss(logits, variances, targets: np.ndarray, mask: np.ndarray,
                      T: int, rng: RngStream) -> Tensor:
    """-mean log[(1/T) sum_t softmax(y + eps_t * sqrt(v))[gold]] per token.

    The T draws ride a row-tiled batch, and the MC average is a log-mean-exp,
    so v == 0 reproduces gen_loss exactly (identical rows collapse without
    rounding).
    """
    if T < 1:
        raise ValueError(f"aleatoric loss needs T >= 1, got {T}")
    batch = targets.shape[0]
    steps = []
    for t, (y, v) in enumerate(zip(logits, variances)):
        sigma = ad.sqrt(v)
        eps = rng.child(("eps", t)).normal((T * batch, y.data.shape[1]))
        y_hat = ad.add(ad.tile_rows(y, T), ad.mul(Tensor(eps), ad.tile_rows(sigma, T)))
        tiled_targets = np.tile(targets[:, t], T)
        lp = ad.sub(ad.gather_cols(y_hat, tiled_targets), ad.row_logsumexp(y_hat))
        lp_mc = ad.log_mean_exp_rows(ad.reshape(lp, (T, batch)))
        steps.append(lp_mc)
    return _neg_masked_mean(steps, mask)


def distorted_loss(l_plain: Tensor, l_aleatoric: Tensor, alpha: float = 1.0) -> Tensor:
    """Piecewise uncertainty loss on the gap delta = L_plain - L_aleatoric:
    alpha*(exp(delta) - 1) when delta < 0, else delta (0 exactly at 0)."""
    delta = ad.sub(l_plain, l_aleatoric)
    if delta.item() < 0:
        return ad.scale(ad.sub(ad.exp(delta), Tensor(np.asarray(1.0))), alpha)
    return delta


def mumc_refine(g_enc: Tensor, mus: dict, grad_wrt_enc: np.ndarray,
                gamma: float) -> Tensor:
    """Residual refinement of the mixed encoding.

    direction = sum_B (-gamma * dLu/dg_enc) * mu_B, with the incoming
    gradient treated as a constant (stop-gradient) and the mu_B factors left
    live; returns g_enc + direction * g_enc. With no fused cues the
    refinement is inert and g_enc passes through unchanged.
    """
    if gamma < 0:
        raise ValueError(f"gamma must be nonnegative, got {gamma}")
    if not mus:
        return g_enc
    grad_wrt_enc = np.asarray(grad_wrt_enc, dtype=np.float64)
    if grad_wrt_enc.shape != g_enc.data.shape:
        raise ad.ShapeError(f"refine: grad {grad_wrt_enc.shape} does not match "
                            f"encoding {g_enc.data.shape}")
    reversed_grad = Tensor(-gamma * grad_wrt_enc)
    direction = None
    for mu in mus.values():
        term = ad.mul(reversed_grad, mu)
        direction = term if direction is None else ad.add(direction, term)
    return ad.add(g_enc, ad.mul(direction, g_enc))


def total_loss(l_gen_refined: Tensor, l_uncertainty: Tensor,
               uncertainty_weight: float) -> Tensor:
    return ad.add(l_gen_refined, ad.scale(l_uncertainty, uncertainty_weight))


# ---------------------------------------------------------------------------
# generation

@dataclass
class QuestionSample:
    """One decoded question: token ids (EOS-terminated unless cut at
    max_len), per-step logits and predicted variances, and the mean
    predicted variance at the chosen tokens as a single-pass uncertainty
    summary."""
    tokens: list
    logits: list
    variances: list
    predictive_uncertainty: float = 0.0


def _mc_variance(values):
    """Unbiased variance of a list of floats; exactly 0 for identical values."""
    n = len(values)
    if n < 2:
        return 0.0
    base = values[0]
    mean = base + sum(v - base for v in values) / n
    return sum((v - mean) ** 2 for v in values) / (n - 1)


def generate_greedy(dec: Decoder, g_enc: Tensor, max_len: int = 16,
                    rng: RngStream = None, stochastic: bool = False,
                    masks=None) -> QuestionSample:
    """Argmax decoding (ties resolve to the lowest token id) until EOS or
    max_len tokens. Stochastic mode draws one mask set for the whole
    sequence."""
    with ad.no_grad():
        batch = g_enc.data.shape[0]
        if batch != 1:
            raise ad.ShapeError(f"generate_greedy decodes one example, got batch {batch}")
        if masks is None:
            masks = dec.cell.sample_masks(1, rng.child("cell") if rng else None, stochastic)
        h, c = dec.cell.initial_state(1)
        h, c = dec.cell.step(dec.project_encoding(g_enc), h, c, masks)
        token = BOS
        tokens, all_logits, all_vars = [], [], []
        for _ in range(max_len):
            x = dec.embedding.lookup(np.array([token]))
            h, c = dec.cell.step(x, h, c, masks)
            y, v = dec.heads(h)
            all_logits.append(y.data[0].copy())
            all_vars.append(v.data[0].copy())
            token = int(np.argmax(y.data[0]))
            tokens.append(token)
            if token == EOS:
                break
        chosen_var = float(np.mean([v[t] for v, t in zip(all_vars, tokens)]))
        return QuestionSample(tokens=tokens, logits=all_logits, variances=all_vars,
                              predictive_uncertainty=chosen_var)


def generate_mc(dec: Decoder, enc_producer, T: int, max_len: int = 16,
                rng: RngStream = None):
    """T free-running stochastic decodes plus a committee pass.

    enc_producer(rng) -> (1, enc_dim) encoding tensor for one mask draw.
    Sample t uses stream rng.child(t) end to end. The committee pass keeps
    the T decoders in lockstep — each step's token is the argmax of the
    committee-mean logits — so the per-step Monte-Carlo logit sets stay
    aligned: epistemic = mean over steps of the MC variance of the chosen
    token's logit, aleatoric = mean over steps of the MC-mean predicted
    variance at that token, predictive = epistemic + aleatoric.

    Returns (samples, first_step_stats, uncertainty dict).
    """
    from .nn import McStatistics  # local import avoids a cycle at module load

    if T < 1:
        raise ValueError(f"generate_mc needs T >= 1, got {T}")
    with ad.no_grad():
        samples = []
        draws = []
        for t in range(T):
            r = rng.child(t)
            g_enc = enc_producer(r.child("enc"))
            masks = dec.cell.sample_masks(1, r.child("dec"), stochastic=True)
            samples.append(generate_greedy(dec, g_enc, max_len, masks=masks))
            draws.append((g_enc, masks))

        # unbiased per-coordinate stats over the aligned first-step logits
        first_logits = [s.logits[0] for s in samples]
        base = first_logits[0]
        shift = np.zeros_like(base)
        for s in first_logits:
            shift += s - base
        mean = base + shift / T
        if T == 1:
            var = np.zeros_like(base)
        else:
            var = np.zeros_like(base)
            for s in first_logits:
                d = s - mean
                var += d * d
            var /= (T - 1)
        first_step_stats = McStatistics(count=T, mean=mean, variance=var,
                                        degenerate=(T == 1))

        # committee decode: one shared token stream, T parallel states
        states = []
        for g_enc, masks in draws:
            h, c = dec.cell.initial_state(1)
            h, c = dec.cell.step(dec.project_encoding(g_enc), h, c, masks)
            states.append((h, c, masks))
        token = BOS
        epi_terms, alea_terms = [], []
        committee_tokens = []
        for _ in range(max_len):
            x = dec.embedding.lookup(np.array([token]))
            step_logits, step_vars = [], []
            next_states = []
            for h, c, masks in states:
                h, c = dec.cell.step(x, h, c, masks)
                y, v = dec.heads(h)
                step_logits.append(y.data[0])
                step_vars.append(v.data[0])
                next_states.append((h, c, masks))
            states = next_states
            base = step_logits[0].copy()
            for s in step_logits[1:]:
                base += s
            mean_logits = base / T
            token = int(np.argmax(mean_logits))
            committee_tokens.append(token)
            epi_terms.append(_mc_variance([s[token] for s in step_logits]))
            alea_terms.append(float(np.mean([v[token] for v in step_vars])))
            if token == EOS:
                break
        epistemic = float(np.mean(epi_terms))
        aleatoric = float(np.mean(alea_terms))
        uncertainty = {
            "epistemic": epistemic,
            "aleatoric": aleatoric,
            "predictive": epistemic + aleatoric,
            "committee_tokens": committee_tokens,
        }
        return samples, first_step_stats, uncertainty
