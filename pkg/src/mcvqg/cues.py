"""Cue encoders: MC-dropout MLPs for image/place features, variational
LSTMs over caption and tag token sequences. Every encoder maps its cue into
the shared d-dimensional embedding space."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import TAG_SLOTS
from .nn import BayesianLSTMCell, BayesianMLP, EmbeddingTable
from .rng import RngStream

CUE_NAMES = ("image", "place", "caption", "tag")
FUSED_CUES = ("place", "caption", "tag")


def encode_image(net: BayesianMLP, feats: Tensor, rng: RngStream = None,
                 stochastic: bool = True) -> Tensor:
    return net.forward(feats, rng=rng, stochastic=stochastic)


def encode_place(net: BayesianMLP, feats: Tensor, rng: RngStream = None,
                 stochastic: bool = True) -> Tensor:
    return net.forward(feats, rng=rng, stochastic=stochastic)


def encode_caption(cell: BayesianLSTMCell, embedding: EmbeddingTable, ids: np.ndarray,
                   lengths: np.ndarray = None, rng: RngStream = None,
                   stochastic: bool = True) -> Tensor:
    """Final hidden state over the caption tokens; `ids` is (B, L) with PAD
    right-padding and `lengths` the true lengths (padded steps leave the
    state untouched)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2 or ids.shape[1] == 0:
        raise ValueError(f"caption ids must be (B, L>=1), got {ids.shape}")
    inputs = [embedding.lookup(ids[:, t]) for t in range(ids.shape[1])]
    step_mask = None
    if lengths is not None:
        lengths = np.asarray(lengths, dtype=np.int64)
        step_mask = (np.arange(ids.shape[1])[None, :] < lengths[:, None]).astype(np.float64)
    _, final = cell.sequence(inputs, rng=rng, stochastic=stochastic, step_mask=step_mask)
    return final


def encode_tags(cell: BayesianLSTMCell, embedding: EmbeddingTable, tag_ids: np.ndarray,
                rng: RngStream = None, stochastic: bool = True,
                per_category: bool = False) -> Tensor:
    """Final hidden state over the 15-token tag sequence (noun||verb||question).
    With per_category=True each 5-token category runs separately through the
    cell and the three final states are averaged."""
    tag_ids = np.asarray(tag_ids, dtype=np.int64)
    if tag_ids.ndim != 2 or tag_ids.shape[1] != 3 * TAG_SLOTS:
        raise ValueError(f"tag ids must be (B, {3 * TAG_SLOTS}), got {tag_ids.shape}")
    if not per_category:
        inputs = [embedding.lookup(tag_ids[:, t]) for t in range(tag_ids.shape[1])]
        _, final = cell.sequence(inputs, rng=rng, stochastic=stochastic)
        return final
    batch = tag_ids.shape[0]
    masks = cell.sample_masks(batch, rng, stochastic)
    finals = []
    for c in range(3):
        block = tag_ids[:, c * TAG_SLOTS:(c + 1) * TAG_SLOTS]
        inputs = [embedding.lookup(block[:, t]) for t in range(TAG_SLOTS)]
        _, final = cell.sequence(inputs, masks=masks)
        finals.append(final)
    acc = ad.add(finals[0], finals[1])
    acc = ad.add(acc, finals[2])
    return ad.scale(acc, 1.0 / 3.0)


class CueEncoders:
    """Owns the per-cue encoder networks for the configured cue set."""

    def __init__(self, cues, image_dim: int, place_dim: int, embed_dim: int,
                 hidden_dim: int, vocab_size: int, p: float, kind: str,
                 rng: RngStream, embedding: EmbeddingTable = None,
                 per_category_tags: bool = False):
        unknown = set(cues) - set(CUE_NAMES)
        if unknown:
            raise ValueError(f"unknown cues: {sorted(unknown)}")
        self.cues = tuple(c for c in CUE_NAMES if c in set(cues))
        self.per_category_tags = per_category_tags
        self.embedding = embedding
        self.image_net = self.place_net = None
        self.caption_cell = self.tag_cell = None
        if "image" in self.cues:
            self.image_net = BayesianMLP([image_dim, hidden_dim, hidden_dim], p, kind,
                                         rng.child("image_net"))
        if "place" in self.cues:
            self.place_net = BayesianMLP([place_dim, hidden_dim, hidden_dim], p, kind,
                                         rng.child("place_net"))
        needs_text = {"caption", "tag"} & set(self.cues)
        if needs_text and self.embedding is None:
            raise ValueError("caption/tag encoders need an embedding table")
        if "caption" in self.cues:
            self.caption_cell = BayesianLSTMCell(embed_dim, hidden_dim, p, kind,
                                                 rng.child("caption_cell"))
        if "tag" in self.cues:
            self.tag_cell = BayesianLSTMCell(embed_dim, hidden_dim, p, kind,
                                             rng.child("tag_cell"))

    def encode(self, batch, rng: RngStream = None, stochastic: bool = True) -> dict:
        """batch carries .image (B,Di), .place (B,Dp), .caption_ids (B,L),
        .caption_lengths (B,), .tag_ids (B,15); returns cue -> (B,d)."""
        sub = (lambda tag: rng.child(tag)) if rng is not None else (lambda tag: None)
        out = {}
        if self.image_net is not None:
            out["image"] = encode_image(self.image_net, Tensor(batch.image),
                                        sub("image"), stochastic)
        if self.place_net is not None:
            out["place"] = encode_place(self.place_net, Tensor(batch.place),
                                        sub("place"), stochastic)
        if self.caption_cell is not None:
            out["caption"] = encode_caption(self.caption_cell, self.embedding,
                                            batch.caption_ids, batch.caption_lengths,
                                            sub("caption"), stochastic)
        if self.tag_cell is not None:
            out["tag"] = encode_tags(self.tag_cell, self.embedding, batch.tag_ids,
                                     sub("tag"), stochastic,
                                     per_category=self.per_category_tags)
        return out

    def named_params(self, prefix: str = "enc"):
        out = {}
        if self.image_net is not None:
            out.update(self.image_net.named_params(f"{prefix}.image"))
        if self.place_net is not None:
            out.update(self.place_net.named_params(f"{prefix}.place"))
        if self.caption_cell is not None:
            out.update(self.caption_cell.named_params(f"{prefix}.caption"))
        if self.tag_cell is not None:
            out.update(self.tag_cell.named_params(f"{prefix}.tag"))
        return out
