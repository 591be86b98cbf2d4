"""Block classifier: linear embedding, stacked BiLSTM, multi-head attention,
linear softmax classifier.

All math is plain numpy in float64. Sequences are processed in batches of
right-padded pages; a boolean mask guards every recurrent step and the
attention softmax so that results for a page are identical whether it is
run alone or inside a padded batch.

Weight layout conventions (fixed, also the checkpoint order):

* embedding ``W_e (l_I, 8)``, ``b_e (l_I,)``; rows act on feature vectors.
* per BiLSTM layer and direction: ``W_ih (4*l_h, in)``, ``W_hh (4*l_h, l_h)``
  and one bias ``b (4*l_h,)``, gate order [input, forget, cell, output].
  Layer 0 consumes the embedding (in = l_I), deeper layers the previous
  layer's concatenated output (in = 2*l_h).
* attention projections ``W_q/W_k/W_v (l_A, 2*l_h)`` with biases, output
  projection ``W_o (l_A, l_A)`` with bias.
* classifier ``W_cls (4, l_A)``, ``b_cls (4,)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .geometry import FEATURE_DIM, NUM_CLASSES, Page, featurize_page

GATE_ORDER = ("input", "forget", "cell", "output")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``embed_dim`` defaults to ``hidden_size``; that tie is what reproduces
    the reference parameter counts. ``attention_out`` must be divisible by
    ``num_heads``.
    """

    hidden_size: int = 128
    num_layers: int = 8
    num_heads: int = 4
    attention_out: int = 128
    embed_dim: int | None = None
    input_dim: int = FEATURE_DIM
    num_classes: int = NUM_CLASSES

    def __post_init__(self) -> None:
        if self.embed_dim is None:
            object.__setattr__(self, "embed_dim", self.hidden_size)
        for name in ("hidden_size", "num_layers", "num_heads", "attention_out", "embed_dim"):
            v = getattr(self, name)
            if not (isinstance(v, int) and v >= 1):
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.input_dim != FEATURE_DIM:
            raise ValueError(f"input_dim is fixed at {FEATURE_DIM}, got {self.input_dim}")
        if self.num_classes != NUM_CLASSES:
            raise ValueError(f"num_classes is fixed at {NUM_CLASSES}, got {self.num_classes}")
        if self.attention_out % self.num_heads != 0:
            raise ValueError(
                f"num_heads ({self.num_heads}) must divide "
                f"attention_out ({self.attention_out})"
            )

    @property
    def head_dim(self) -> int:
        return self.attention_out // self.num_heads


def tensor_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical (name -> shape) map; iteration order is the checkpoint order."""
    l_h, l_a, l_i = config.hidden_size, config.attention_out, config.embed_dim
    shapes: dict[str, tuple[int, ...]] = {
        "embed.w": (l_i, config.input_dim),
        "embed.b": (l_i,),
    }
    for layer in range(config.num_layers):
        in_dim = l_i if layer == 0 else 2 * l_h
        for direction in ("fwd", "bwd"):
            prefix = f"lstm.{layer}.{direction}"
            shapes[f"{prefix}.w_ih"] = (4 * l_h, in_dim)
            shapes[f"{prefix}.w_hh"] = (4 * l_h, l_h)
            shapes[f"{prefix}.b"] = (4 * l_h,)
    for proj in ("q", "k", "v"):
        shapes[f"attn.w_{proj}"] = (l_a, 2 * l_h)
        shapes[f"attn.b_{proj}"] = (l_a,)
    shapes["attn.w_o"] = (l_a, l_a)
    shapes["attn.b_o"] = (l_a,)
    shapes["cls.w"] = (config.num_classes, l_a)
    shapes["cls.b"] = (config.num_classes,)
    return shapes


def param_count(config: ModelConfig) -> int:
    """Exact number of scalar parameters under the canonical shapes."""
    return sum(int(np.prod(s)) for s in tensor_shapes(config).values())


class ModelWeights:
    """Ordered named parameter tensors (the order is the checkpoint order)."""

    def __init__(self, tensors: dict[str, np.ndarray]):
        self._tensors = dict(tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if name not in self._tensors:
            raise KeyError(name)
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._tensors[name].shape:
            raise ValueError(
                f"shape mismatch for {name}: expected "
                f"{self._tensors[name].shape}, got {value.shape}"
            )
        self._tensors[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def keys(self):
        return self._tensors.keys()

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self._tensors.items())

    def copy(self) -> "ModelWeights":
        return ModelWeights({k: v.copy() for k, v in self._tensors.items()})

    def num_params(self) -> int:
        return sum(v.size for v in self._tensors.values())

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self._tensors.values())

    @classmethod
    def zeros(cls, config: ModelConfig) -> "ModelWeights":
        return cls({k: np.zeros(s) for k, s in tensor_shapes(config).items()})


# fan_in per tensor: second axis for matrices; a bias shares its layer's fan_in.
def _fan_in(name: str, shape: tuple[int, ...], config: ModelConfig) -> int:
    if len(shape) == 2:
        return shape[1]
    if name == "embed.b":
        return config.input_dim
    if name.startswith("lstm."):
        return config.hidden_size
    if name in ("attn.b_q", "attn.b_k", "attn.b_v"):
        return 2 * config.hidden_size
    return config.attention_out  # attn.b_o, cls.b


def init_weights(config: ModelConfig, seed: int) -> ModelWeights:
    """Initialize every tensor i.i.d. uniform in +-1/sqrt(fan_in).

    Deterministic given (config, seed); tensors are drawn in canonical
    order from a single PCG64 stream.
    """
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in tensor_shapes(config).items():
        bound = 1.0 / math.sqrt(_fan_in(name, shape, config))
        tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ModelWeights(tensors)


@dataclass
class ForwardTrace:
    """Intermediate activations retained for backprop and inspection.

    All arrays are batched (B leading axis, T padded length). ``attention``
    is populated only when the forward pass is asked to retain it; the
    backward pass recomputes per-head scores from q/k/v instead of storing
    the (B, heads, T, T) tensor.
    """

    mask: np.ndarray                 # (B, T) bool
    lengths: np.ndarray              # (B,) int
    features: np.ndarray             # (B, T, 8)
    embeddings: np.ndarray           # (B, T, l_I)
    layer_inputs: list[np.ndarray]   # per layer: (B, T, in_dim)
    gates: list[dict[str, np.ndarray]]    # per layer: dir -> (B, T, 4*l_h)
    cell_states: list[dict[str, np.ndarray]]   # running c per step
    hidden_states: list[dict[str, np.ndarray]]  # running h per step
    tanh_cells: list[dict[str, np.ndarray]]     # tanh of the fresh cell
    encoder_out: np.ndarray          # (B, T, 2*l_h), zero at padding
    q: np.ndarray                    # (B, T, l_A)
    k: np.ndarray
    v: np.ndarray
    head_concat: np.ndarray          # (B, T, l_A)
    attention_out: np.ndarray        # (B, T, l_A)
    logits: np.ndarray               # (B, T, C)
    probabilities: np.ndarray        # (B, T, C)
    attention: np.ndarray | None = None   # (B, heads, T, T) when retained


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax; -inf entries get probability zero.

    A row that is entirely -inf (every key masked) yields all zeros
    instead of NaN; such rows only arise for zero-length batch entries.
    """
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    s = np.sum(e, axis=axis, keepdims=True)
    return e / np.where(s == 0.0, 1.0, s)


def _lstm_direction(
    inputs: np.ndarray,
    mask: np.ndarray,
    w_ih: np.ndarray,
    w_hh: np.ndarray,
    b: np.ndarray,
    reverse: bool,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """One direction of one LSTM layer over a padded batch.

    Returns (outputs, gates, cell_states, hidden_states, tanh_cells), each
    indexed by true position t. ``hidden_states``/``cell_states`` hold the
    running state AFTER step t; at masked steps the state is carried
    through unchanged and the output is zero, which makes right-padding
    invisible in both directions.
    """
    batch, steps, _ = inputs.shape
    l_h = w_hh.shape[1]
    outputs = np.zeros((batch, steps, l_h))
    gates = np.zeros((batch, steps, 4 * l_h))
    cells = np.zeros((batch, steps, l_h))
    hiddens = np.zeros((batch, steps, l_h))
    tanh_cells = np.zeros((batch, steps, l_h))

    h = np.zeros((batch, l_h))
    c = np.zeros((batch, l_h))
    input_proj = inputs @ w_ih.T + b  # hoisted out of the recurrence
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        z = input_proj[:, t] + h @ w_hh.T
        gi = _sigmoid(z[:, :l_h])
        gf = _sigmoid(z[:, l_h : 2 * l_h])
        gg = np.tanh(z[:, 2 * l_h : 3 * l_h])
        go = _sigmoid(z[:, 3 * l_h :])
        c_new = gf * c + gi * gg
        tc = np.tanh(c_new)
        h_new = go * tc

        valid = mask[:, t : t + 1].astype(np.float64)
        h = valid * h_new + (1.0 - valid) * h
        c = valid * c_new + (1.0 - valid) * c

        gates[:, t] = np.concatenate([gi, gf, gg, go], axis=1)
        tanh_cells[:, t] = tc
        cells[:, t] = c
        hiddens[:, t] = h
        outputs[:, t] = valid * h_new
    return outputs, gates, cells, hiddens, tanh_cells


def _attention_scores(
    q: np.ndarray, k: np.ndarray, mask: np.ndarray, head: int, config: ModelConfig
) -> np.ndarray:
    """Softmax attention matrix (B, T, T) of one head; padded keys masked out."""
    d = config.head_dim
    lo, hi = head * d, (head + 1) * d
    logits = q[..., lo:hi] @ k[..., lo:hi].transpose(0, 2, 1) / math.sqrt(d)
    logits = np.where(mask[:, None, :], logits, -np.inf)
    return softmax(logits, axis=-1)


def forward_batch(
    features: np.ndarray,
    lengths: np.ndarray,
    weights: ModelWeights,
    config: ModelConfig,
    retain_attention: bool = False,
) -> ForwardTrace:
    """Full forward pass over a right-padded batch of feature sequences."""
    batch, steps, _ = features.shape
    mask = np.arange(steps)[None, :] < np.asarray(lengths)[:, None]

    emb = features @ weights["embed.w"].T + weights["embed.b"]
    emb = np.where(mask[:, :, None], emb, 0.0)

    layer_inputs: list[np.ndarray] = []
    gates: list[dict[str, np.ndarray]] = []
    cells: list[dict[str, np.ndarray]] = []
    hiddens: list[dict[str, np.ndarray]] = []
    tanh_cells: list[dict[str, np.ndarray]] = []
    current = emb
    for layer in range(config.num_layers):
        layer_inputs.append(current)
        outs: dict[str, np.ndarray] = {}
        g: dict[str, np.ndarray] = {}
        cs: dict[str, np.ndarray] = {}
        hs: dict[str, np.ndarray] = {}
        tc: dict[str, np.ndarray] = {}
        for direction in ("fwd", "bwd"):
            prefix = f"lstm.{layer}.{direction}"
            outs[direction], g[direction], cs[direction], hs[direction], tc[direction] = (
                _lstm_direction(
                    current,
                    mask,
                    weights[f"{prefix}.w_ih"],
                    weights[f"{prefix}.w_hh"],
                    weights[f"{prefix}.b"],
                    reverse=(direction == "bwd"),
                )
            )
        gates.append(g)
        cells.append(cs)
        hiddens.append(hs)
        tanh_cells.append(tc)
        current = np.concatenate([outs["fwd"], outs["bwd"]], axis=2)
    encoder_out = current

    q = encoder_out @ weights["attn.w_q"].T + weights["attn.b_q"]
    k = encoder_out @ weights["attn.w_k"].T + weights["attn.b_k"]
    v = encoder_out @ weights["attn.w_v"].T + weights["attn.b_v"]

    d = config.head_dim
    head_concat = np.zeros((batch, steps, config.attention_out))
    attention = (
        np.zeros((batch, config.num_heads, steps, steps)) if retain_attention else None
    )
    if steps > 0:
        for head in range(config.num_heads):
            lo, hi = head * d, (head + 1) * d
            scores = _attention_scores(q, k, mask, head, config)
            head_concat[..., lo:hi] = scores @ v[..., lo:hi]
            if attention is not None:
                attention[:, head] = scores
    attn_out = head_concat @ weights["attn.w_o"].T + weights["attn.b_o"]

    logits = attn_out @ weights["cls.w"].T + weights["cls.b"]
    probs = softmax(logits, axis=-1)

    return ForwardTrace(
        mask=mask,
        lengths=np.asarray(lengths),
        features=features,
        embeddings=emb,
        layer_inputs=layer_inputs,
        gates=gates,
        cell_states=cells,
        hidden_states=hiddens,
        tanh_cells=tanh_cells,
        encoder_out=encoder_out,
        q=q,
        k=k,
        v=v,
        head_concat=head_concat,
        attention_out=attn_out,
        logits=logits,
        probabilities=probs,
        attention=attention,
    )


def _single_batch(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return x[None, ...], np.array([x.shape[0]])


def bilstm_forward(
    embeddings: np.ndarray, weights: ModelWeights, config: ModelConfig
) -> np.ndarray:
    """Encode one sequence (n, l_I) -> (n, 2*l_h) through the stacked BiLSTM."""
    if embeddings.shape[0] == 0:
        return np.zeros((0, 2 * config.hidden_size))
    batched, lengths = _single_batch(embeddings)
    mask = np.ones((1, embeddings.shape[0]), dtype=bool)
    current = batched
    for layer in range(config.num_layers):
        outs = []
        for direction in ("fwd", "bwd"):
            prefix = f"lstm.{layer}.{direction}"
            out, *_ = _lstm_direction(
                current,
                mask,
                weights[f"{prefix}.w_ih"],
                weights[f"{prefix}.w_hh"],
                weights[f"{prefix}.b"],
                reverse=(direction == "bwd"),
            )
            outs.append(out)
        current = np.concatenate(outs, axis=2)
    return current[0]


def mha_forward(
    encoded: np.ndarray, weights: ModelWeights, config: ModelConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Multi-head attention over one sequence (n, 2*l_h).

    Returns (output (n, l_A), per-head attention scores (heads, n, n)).
    """
    n = encoded.shape[0]
    if n == 0:
        return (
            np.zeros((0, config.attention_out)),
            np.zeros((config.num_heads, 0, 0)),
        )
    enc = encoded[None, ...]
    mask = np.ones((1, n), dtype=bool)
    q = enc @ weights["attn.w_q"].T + weights["attn.b_q"]
    k = enc @ weights["attn.w_k"].T + weights["attn.b_k"]
    v = enc @ weights["attn.w_v"].T + weights["attn.b_v"]
    d = config.head_dim
    concat = np.zeros((1, n, config.attention_out))
    scores = np.zeros((config.num_heads, n, n))
    for head in range(config.num_heads):
        lo, hi = head * d, (head + 1) * d
        s = _attention_scores(q, k, mask, head, config)
        scores[head] = s[0]
        concat[..., lo:hi] = s @ v[..., lo:hi]
    out = concat @ weights["attn.w_o"].T + weights["attn.b_o"]
    return out[0], scores


def forward(
    page: Page,
    weights: ModelWeights,
    config: ModelConfig,
    retain_attention: bool = False,
) -> tuple[np.ndarray, ForwardTrace]:
    """Per-block class probabilities (n, 4) for a block-ordered page."""
    features = featurize_page(page)
    n = features.shape[0]
    if n == 0:
        trace = forward_batch(
            np.zeros((1, 0, config.input_dim)), np.array([0]), weights, config
        )
        return np.zeros((0, config.num_classes)), trace
    batched, lengths = _single_batch(features)
    trace = forward_batch(batched, lengths, weights, config, retain_attention)
    return trace.probabilities[0], trace
