"""Full model assembly: shared embedding, per-cue Bayesian encoders, image-
conditioned fusion, a moderator (gated mixture) or plain mixture combiner,
and the uncertainty-aware decoder.

Cue-set semantics: a single cue decodes straight from its encoder output
(mixture weights are identically 1); two or more cues require the image cue,
whose encoding multiplies into every fused embedding and whose raw features
drive the moderator gate.
"""

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .cues import CUE_NAMES, CueEncoders
from .data import BOS, PAD, Dataset
from .decoder import Decoder
from .fusion import CueFusion, MixtureCombiner, Moderator, mix_encoding
from .nn import EmbeddingTable
from .rng import RngStream

COMBINERS = ("moderator", "mixture")


@dataclass
class Batch:
    """Dense arrays for one mini-batch; text fields are right-PAD-padded."""
    ids: list
    image: np.ndarray            # (B, D_i)
    place: np.ndarray            # (B, D_p)
    caption_ids: np.ndarray      # (B, L_c)
    caption_lengths: np.ndarray  # (B,)
    tag_ids: np.ndarray          # (B, 15)
    gold: np.ndarray             # (B, L_q), BOS + question tokens + EOS

    @property
    def size(self) -> int:
        return len(self.ids)


def make_batch(dataset: Dataset, indices, question_choice=None) -> Batch:
    """Assemble a batch from dataset rows.

    question_choice: per-row index into each bundle's question list (wrapped
    by its length); defaults to the first question everywhere.
    """
    indices = list(indices)
    if not indices:
        raise ValueError("batch needs at least one example")
    bundles = [dataset.bundles[i] for i in indices]
    if question_choice is None:
        question_choice = [0] * len(bundles)
    questions = [b.questions[int(k) % len(b.questions)]
                 for b, k in zip(bundles, question_choice)]
    cap_len = max(len(b.caption) for b in bundles)
    caption_ids = np.full((len(bundles), cap_len), PAD, dtype=np.int64)
    for row, b in enumerate(bundles):
        caption_ids[row, :len(b.caption)] = b.caption
    gold_len = 1 + max(len(q) for q in questions)
    gold = np.full((len(bundles), gold_len), PAD, dtype=np.int64)
    gold[:, 0] = BOS
    for row, q in enumerate(questions):
        gold[row, 1:1 + len(q)] = q
    return Batch(
        ids=[b.id for b in bundles],
        image=np.stack([b.image_feat for b in bundles]),
        place=np.stack([b.place_feat for b in bundles]),
        caption_ids=caption_ids,
        caption_lengths=np.array([len(b.caption) for b in bundles], dtype=np.int64),
        tag_ids=np.array([b.tags.sequence() for b in bundles], dtype=np.int64),
        gold=gold,
    )


@dataclass
class FusedEncoding:
    """One encoding pass: raw cue encodings, fused per-cue embeddings,
    mixture weights (None for the concat combiner), and the mixed
    encoding."""
    g_cues: dict
    mus: dict
    pi: Tensor | None
    order: tuple
    g_enc: Tensor


class MultiCueModel:
    def __init__(self, *, cues, combiner: str, image_dim: int, place_dim: int,
                 embed_dim: int, enc_dim: int, hidden_dim: int, vocab_size: int,
                 dropout_rate: float, dropout_kind: str, rng: RngStream,
                 share_embedding: bool = True, share_caption_tag_out: bool = False,
                 per_category_tags: bool = False, temperature: float = 1.0):
        self.cues = tuple(c for c in CUE_NAMES if c in set(cues))
        if not self.cues:
            raise ValueError("cue set must be nonempty")
        if set(cues) - set(CUE_NAMES):
            raise ValueError(f"unknown cues: {sorted(set(cues) - set(CUE_NAMES))}")
        if len(self.cues) >= 2 and "image" not in self.cues:
            raise ValueError("multi-cue fusion requires the image cue")
        if combiner not in COMBINERS:
            raise ValueError(f"combiner must be one of {COMBINERS}, got {combiner!r}")
        self.combiner = combiner
        self.enc_dim = int(enc_dim)
        self.embedding = EmbeddingTable(vocab_size, embed_dim, rng.child("embedding"))
        self.encoders = CueEncoders(self.cues, image_dim, place_dim, embed_dim,
                                    enc_dim, vocab_size, dropout_rate, dropout_kind,
                                    rng.child("encoders"), embedding=self.embedding,
                                    per_category_tags=per_category_tags)
        self.fused_cues = tuple(c for c in self.cues if c != "image")
        self.fusion = self.moderator = self.mixture = None
        if len(self.cues) >= 2:
            self.fusion = CueFusion(enc_dim, self.fused_cues, dropout_rate,
                                    dropout_kind, rng.child("fusion"),
                                    share_caption_tag_out=share_caption_tag_out)
            if combiner == "moderator":
                self.moderator = Moderator(image_dim, enc_dim, dropout_rate,
                                           dropout_kind, rng.child("moderator"),
                                           temperature=temperature)
            else:
                self.mixture = MixtureCombiner(len(self.fused_cues), enc_dim,
                                               rng.child("mixture"))
        self.share_embedding = bool(share_embedding)
        dec_embedding = self.embedding if self.share_embedding else \
            EmbeddingTable(vocab_size, embed_dim, rng.child("decoder_embedding"))
        self.decoder = Decoder(enc_dim, embed_dim, hidden_dim, vocab_size,
                               dropout_rate, dropout_kind, rng.child("decoder"),
                               dec_embedding)

    def encode(self, batch: Batch, rng: RngStream = None,
               stochastic: bool = True) -> FusedEncoding:
        sub = (lambda tag: rng.child(tag)) if rng is not None else (lambda tag: None)
        g_cues = self.encoders.encode(batch, sub("encoders"), stochastic)
        if len(self.cues) == 1:
            only = self.cues[0]
            g = g_cues[only]
            pi = Tensor(np.ones((g.data.shape[0], 1)))
            return FusedEncoding(g_cues=g_cues, mus={}, pi=pi, order=(only,), g_enc=g)
        mus = self.fusion.fuse_all(g_cues, sub("fusion"), stochastic)
        if self.moderator is not None:
            pi, order = self.moderator.gate(mus, Tensor(batch.image),
                                            sub("moderator"), stochastic)
            g_enc = mix_encoding(pi, mus, order)
        else:
            order = tuple(mus.keys())
            g_enc = self.mixture.combine([mus[c] for c in order])
            pi = None
        return FusedEncoding(g_cues=g_cues, mus=mus, pi=pi, order=order, g_enc=g_enc)

    def named_params(self) -> dict:
        out = {"embedding.weight": self.embedding.weight}
        out.update(self.encoders.named_params("enc"))
        if self.fusion is not None:
            out.update(self.fusion.named_params("fusion"))
        if self.moderator is not None:
            out.update(self.moderator.named_params("moderator"))
        if self.mixture is not None:
            out.update(self.mixture.named_params("mixture"))
        out.update(self.decoder.named_params("dec", include_embedding=False))
        if not self.share_embedding:
            out.update(self.decoder.embedding.named_params("dec.emb"))
        return out

    def dropout_components(self):
        """Every module holding a live (p, kind) dropout setting."""
        comps = []
        enc = self.encoders
        comps += [c for c in (enc.image_net, enc.place_net, enc.caption_cell,
                              enc.tag_cell) if c is not None]
        if self.fusion is not None:
            comps.append(self.fusion)
        if self.moderator is not None:
            comps.append(self.moderator.gate_net)
        comps.append(self.decoder.cell)
        return comps


@contextmanager
def dropout_override(model: MultiCueModel, rate: float, kind: str):
    """Temporarily force one dropout setting on every component — used by
    the variance analysis so configurations trained without dropout can
    still be probed with Monte-Carlo noise at a common rate."""
    comps = model.dropout_components()
    saved = [(c.p, c.kind) for c in comps]
    try:
        for c in comps:
            c.p = float(rate)
            c.kind = kind
        yield model
    finally:
        for c, (p, k) in zip(comps, saved):
            c.p = p
            c.kind = k
