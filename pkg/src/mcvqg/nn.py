"""Bayesian building blocks: MC-dropout MLPs, variational LSTM cells,
embedding tables, Monte-Carlo predictive statistics, and checkpoint I/O.

"Stochastic" mode keeps dropout active (each call is one posterior sample);
"deterministic" mode disables it. LSTM dropout is variational: the four gate
masks and the output mask are drawn once per sequence and reused at every
timestep.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .autodiff import reverse_grad as gradient_reversal  # noqa: F401  (re-export)
from .rng import RngStream


def init_matrix(rows: int, cols: int, rng: RngStream) -> Tensor:
    """Uniform +/- 1/sqrt(fan_in); inputs arrive as row @ W so fan_in = rows."""
    bound = 1.0 / np.sqrt(rows)
    return Tensor(rng.uniform((rows, cols)) * (2 * bound) - bound, requires_grad=True)


def init_bias(n: int) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True)


def _wants_dropout(p: float, kind: str, stochastic: bool) -> bool:
    return stochastic and p > 0.0 and kind != "none"


class BayesianMLP:
    """Linear stack with a dropout applied before every layer.

    tanh between layers, linear output. p=0 (or kind "none") collapses to a
    plain deterministic MLP; two stochastic calls with equal RngStream state
    produce identical outputs (masks are counter-derived).
    """

    def __init__(self, widths, p: float, kind: str, rng: RngStream):
        if len(widths) < 2:
            raise ValueError("BayesianMLP needs at least input and output widths")
        if not (0.0 <= p < 1.0):
            raise ValueError(f"dropout rate must be in [0, 1), got {p}")
        self.widths = [int(w) for w in widths]
        self.p = float(p)
        self.kind = kind
        self.weights = []
        self.biases = []
        for i, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            self.weights.append(init_matrix(a, b, rng.child(("w", i))))
            self.biases.append(init_bias(b))

    def forward(self, x: Tensor, rng: RngStream = None, stochastic: bool = True) -> Tensor:
        if x.shape[-1] != self.widths[0]:
            raise ad.ShapeError(f"mlp: input {x.shape} does not match width {self.widths[0]}")
        use_dropout = _wants_dropout(self.p, self.kind, stochastic)
        if use_dropout and rng is None:
            raise ValueError("stochastic forward needs an RngStream")
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if use_dropout:
                h = ad.dropout(h, self.p, self.kind, rng.child(("drop", i)))
            h = ad.affine(h, w, b)
            if i < last:
                h = ad.tanh(h)
        return h

    def named_params(self, prefix: str):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.w{i}"] = w
            out[f"{prefix}.b{i}"] = b
        return out


@dataclass
class LstmMasks:
    """Per-sequence variational dropout masks; None means no dropout."""
    gates: np.ndarray | None   # (B, 4h), multiplies the packed gate preactivations
    out: np.ndarray | None     # (B, h), multiplies the step output


class BayesianLSTMCell:
    """LSTM cell with tied per-sequence dropout on the four gate
    preactivations (packed order: input, forget, output, candidate) and on
    the step output."""

    def __init__(self, input_size: int, hidden_size: int, p: float, kind: str,
                 rng: RngStream):
        if not (0.0 <= p < 1.0):
            raise ValueError(f"dropout rate must be in [0, 1), got {p}")
        self.input_size = int(input_size)
        self.hidden_size = int(hidden_size)
        self.p = float(p)
        self.kind = kind
        h = self.hidden_size
        self.wx = init_matrix(self.input_size, 4 * h, rng.child("wx"))
        self.wh = init_matrix(h, 4 * h, rng.child("wh"))
        self.b = init_bias(4 * h)
        # forget gate starts open so early-step inputs survive to later steps
        self.b.data[h:2 * h] = 1.0

    def sample_masks(self, batch: int, rng: RngStream = None,
                     stochastic: bool = True) -> LstmMasks:
        if not _wants_dropout(self.p, self.kind, stochastic):
            return LstmMasks(None, None)
        if rng is None:
            raise ValueError("stochastic masks need an RngStream")
        h = self.hidden_size
        return LstmMasks(
            gates=ad.dropout_mask((batch, 4 * h), self.p, self.kind, rng.child("gates")),
            out=ad.dropout_mask((batch, h), self.p, self.kind, rng.child("out")),
        )

    def step(self, x: Tensor, h: Tensor, c: Tensor, masks: LstmMasks):
        """One timestep; (x, h, c) are (B, *) rows, returns (h', c')."""
        n = self.hidden_size
        pre = ad.add(ad.affine(x, self.wx, self.b), ad.matmul(h, self.wh))
        if masks.gates is not None:
            pre = ad.dropout(pre, self.p, self.kind, masks.gates)
        gi = ad.sigmoid(ad.slice_cols(pre, 0, n))
        gf = ad.sigmoid(ad.slice_cols(pre, n, 2 * n))
        go = ad.sigmoid(ad.slice_cols(pre, 2 * n, 3 * n))
        gc = ad.tanh(ad.slice_cols(pre, 3 * n, 4 * n))
        c_next = ad.add(ad.mul(gf, c), ad.mul(gi, gc))
        h_next = ad.mul(go, ad.tanh(c_next))
        if masks.out is not None:
            h_next = ad.dropout(h_next, self.p, self.kind, masks.out)
        return h_next, c_next

    def initial_state(self, batch: int):
        z = np.zeros((batch, self.hidden_size))
        return Tensor(z), Tensor(z.copy())

    def sequence(self, inputs, rng: RngStream = None, stochastic: bool = True,
                 masks: LstmMasks = None, state=None, step_mask=None):
        """Run the cell over a list of (B, input) tensors with one mask draw.

        step_mask: optional (B, T) 0/1 array; steps flagged 0 leave (h, c)
        unchanged for that row, so right-padded sequences end at their true
        final state (the padded arithmetic is exact: 1*new + 0*old).
        Returns (per-step hidden states, final hidden state).
        """
        inputs = list(inputs)
        if not inputs:
            raise ValueError("lstm sequence: empty input")
        batch = inputs[0].shape[0]
        if masks is None:
            masks = self.sample_masks(batch, rng, stochastic)
        h, c = state if state is not None else self.initial_state(batch)
        outputs = []
        for t, x in enumerate(inputs):
            h_new, c_new = self.step(x, h, c, masks)
            if step_mask is not None:
                keep = np.repeat(step_mask[:, t:t + 1].astype(np.float64),
                                 self.hidden_size, axis=1)
                keep_t = Tensor(keep)
                drop_t = Tensor(1.0 - keep)
                h = ad.add(ad.mul(h_new, keep_t), ad.mul(h, drop_t))
                c = ad.add(ad.mul(c_new, keep_t), ad.mul(c, drop_t))
            else:
                h, c = h_new, c_new
            outputs.append(h)
        return outputs, h

    def named_params(self, prefix: str):
        return {f"{prefix}.wx": self.wx, f"{prefix}.wh": self.wh, f"{prefix}.b": self.b}


class EmbeddingTable:
    """Token id -> row of a (V, dim) matrix; lookup equals one-hot matmul."""

    def __init__(self, vocab_size: int, dim: int, rng: RngStream):
        self.vocab_size = int(vocab_size)
        self.dim = int(dim)
        self.weight = init_matrix(self.vocab_size, self.dim, rng)

    def lookup(self, ids) -> Tensor:
        return ad.gather_rows(self.weight, ids)

    def named_params(self, prefix: str):
        return {f"{prefix}.weight": self.weight}


@dataclass
class McStatistics:
    """Per-coordinate mean and unbiased variance of T Monte-Carlo samples."""
    count: int
    mean: np.ndarray
    variance: np.ndarray
    degenerate: bool            # True when count == 1 (variance forced to 0)
    samples: list | None = None


def mc_predict(f, T: int, rng: RngStream, keep_samples: bool = False) -> McStatistics:
    """Run stochastic `f` T times on sibling streams and summarize.

    Sample t always sees stream rng.child(t), so the result does not depend
    on evaluation order. The mean is accumulated relative to the first
    sample, which makes T identical samples yield an exactly-zero variance.
    """
    if T < 1:
        raise ValueError(f"mc_predict needs T >= 1, got {T}")
    samples = []
    for t in range(T):
        out = f(rng.child(t))
        data = out.data if isinstance(out, Tensor) else np.asarray(out, dtype=np.float64)
        samples.append(np.array(data, dtype=np.float64))
    base = samples[0]
    shift = np.zeros_like(base)
    for s in samples:
        shift += s - base
    mean = base + shift / T
    if T == 1:
        variance = np.zeros_like(base)
    else:
        variance = np.zeros_like(base)
        for s in samples:
            d = s - mean
            variance += d * d
        variance /= (T - 1)
    return McStatistics(count=T, mean=mean, variance=variance,
                        degenerate=(T == 1), samples=samples if keep_samples else None)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = "mcvqg-checkpoint-v1"


def save_checkpoint(path, params: dict, meta: dict = None):
    """Write a name -> {shape, data} map as JSON; float64 repr round-trips
    exactly, so save/load is bitwise."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "meta": meta or {},
        "params": {
            name: {"shape": list(t.data.shape), "data": t.data.ravel().tolist()}
            for name, t in params.items()
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path):
    """Read a checkpoint; returns (name -> ndarray, meta)."""
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a recognized checkpoint file: {path}")
    arrays = {}
    for name, rec in payload["params"].items():
        arr = np.asarray(rec["data"], dtype=np.float64).reshape(rec["shape"])
        arrays[name] = arr
    return arrays, payload.get("meta", {})


def restore_params(params: dict, arrays: dict):
    """Copy loaded arrays into model parameters; any name or shape mismatch
    raises with a full diff of expected vs found shapes."""
    problems = []
    for name, t in params.items():
        if name not in arrays:
            problems.append(f"missing parameter {name} (expected shape {tuple(t.data.shape)})")
        elif tuple(arrays[name].shape) != tuple(t.data.shape):
            problems.append(f"{name}: expected shape {tuple(t.data.shape)}, "
                            f"found {tuple(arrays[name].shape)}")
    for name in arrays:
        if name not in params:
            problems.append(f"unexpected parameter {name} with shape {tuple(arrays[name].shape)}")
    if problems:
        raise ValueError("checkpoint does not match model:\n  " + "\n  ".join(problems))
    for name, t in params.items():
        t.data = arrays[name].copy()
