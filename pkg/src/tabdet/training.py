"""Loss, hand-derived gradients, Adam with warmup + cosine decay, the epoch
loop, and finite-difference gradient verification.

The backward pass is exact reverse-mode differentiation of the forward
graph: fused softmax + cross-entropy at the logits, linear-layer
transposes, attention backward through the softmax Jacobian and the
1/sqrt(d) scaling, and backprop through time over every BiLSTM layer and
direction. Per-head attention scores are recomputed from q/k/v instead of
being stored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .geometry import LABEL_INDEX, BlockLabel, Page, featurize_page, order_blocks
from .model import (
    ForwardTrace,
    ModelConfig,
    ModelWeights,
    _attention_scores,
    forward_batch,
    init_weights,
)


class UndefinedLossError(ValueError):
    """Loss requested over an all-masked (empty) set of blocks."""


class NanGradientError(FloatingPointError):
    """A gradient tensor contains NaN; carries the tensor name."""


class EmptyDatasetError(ValueError):
    """Training requires at least one non-empty page."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 256
    base_lr: float = 1e-3
    warmup_fraction: float = 0.10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError(f"warmup_fraction must be in [0, 1), got {self.warmup_fraction}")
        if self.base_lr < 0.0:
            raise ValueError(f"base_lr must be non-negative, got {self.base_lr}")


def labels_to_indices(labels: Sequence[BlockLabel | int]) -> np.ndarray:
    """Map BlockLabel values (or already-int indices) to class indices."""
    return np.array(
        [LABEL_INDEX[lab] if isinstance(lab, BlockLabel) else int(lab) for lab in labels],
        dtype=np.intp,
    )


def cross_entropy(
    probabilities: np.ndarray,
    labels: Sequence[BlockLabel | int],
    mask: np.ndarray | None = None,
) -> float:
    """Mean negative log-likelihood over the masked blocks.

    ``probabilities`` is (n, C) with rows summing to 1; ``mask`` marks the
    real (non-padded) blocks and defaults to all-true.
    """
    probs = np.asarray(probabilities, dtype=np.float64)
    idx = labels_to_indices(labels)
    if mask is None:
        mask = np.ones(len(idx), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise UndefinedLossError("cross entropy over zero unmasked blocks is undefined")
    picked = probs[np.arange(len(idx)), idx]
    return float(-np.sum(np.log(np.maximum(picked, 1e-300))[mask]) / count)


def _gradients_from_dlogits(
    trace: ForwardTrace,
    dlogits: np.ndarray,
    weights: ModelWeights,
    config: ModelConfig,
) -> ModelWeights:
    """Reverse-mode pass from a logits gradient down to every parameter."""
    grads = ModelWeights.zeros(config)
    l_h = config.hidden_size

    # classifier
    grads["cls.w"] = np.einsum("btc,bta->ca", dlogits, trace.attention_out)
    grads["cls.b"] = dlogits.sum(axis=(0, 1))
    d_attn = dlogits @ weights["cls.w"]

    # attention output projection
    grads["attn.w_o"] = np.einsum("bta,btk->ak", d_attn, trace.head_concat)
    grads["attn.b_o"] = d_attn.sum(axis=(0, 1))
    d_concat = d_attn @ weights["attn.w_o"]

    # per-head scaled dot-product attention (scores recomputed)
    dq = np.zeros_like(trace.q)
    dk = np.zeros_like(trace.k)
    dv = np.zeros_like(trace.v)
    d = config.head_dim
    if trace.features.shape[1] > 0:
        for head in range(config.num_heads):
            lo, hi = head * d, (head + 1) * d
            scores = _attention_scores(trace.q, trace.k, trace.mask, head, config)
            d_head = d_concat[..., lo:hi]
            d_scores = d_head @ trace.v[..., lo:hi].transpose(0, 2, 1)
            dv[..., lo:hi] = scores.transpose(0, 2, 1) @ d_head
            # softmax Jacobian, rowwise
            d_z = scores * (d_scores - np.sum(d_scores * scores, axis=-1, keepdims=True))
            d_z /= math.sqrt(d)
            dq[..., lo:hi] = d_z @ trace.k[..., lo:hi]
            dk[..., lo:hi] = d_z.transpose(0, 2, 1) @ trace.q[..., lo:hi]

    d_enc = np.zeros_like(trace.encoder_out)
    for proj, dmat in (("q", dq), ("k", dk), ("v", dv)):
        grads[f"attn.w_{proj}"] = np.einsum("bta,bth->ah", dmat, trace.encoder_out)
        grads[f"attn.b_{proj}"] = dmat.sum(axis=(0, 1))
        d_enc += dmat @ weights[f"attn.w_{proj}"]

    # BiLSTM layers, top down
    d_out = d_enc
    for layer in range(config.num_layers - 1, -1, -1):
        inputs = trace.layer_inputs[layer]
        d_inputs = np.zeros_like(inputs)
        for direction, d_half in (("fwd", d_out[..., :l_h]), ("bwd", d_out[..., l_h:])):
            prefix = f"lstm.{layer}.{direction}"
            dz_buf, dh_prev_extra = _bptt_direction(
                d_half,
                trace.gates[layer][direction],
                trace.cell_states[layer][direction],
                trace.hidden_states[layer][direction],
                trace.tanh_cells[layer][direction],
                trace.mask,
                weights[f"{prefix}.w_hh"],
                reverse=(direction == "bwd"),
            )
            h_prev_all = _shift_states(
                trace.hidden_states[layer][direction], reverse=(direction == "bwd")
            )
            grads[f"{prefix}.w_ih"] = np.einsum("btz,bti->zi", dz_buf, inputs)
            grads[f"{prefix}.w_hh"] = np.einsum("btz,bth->zh", dz_buf, h_prev_all)
            grads[f"{prefix}.b"] = dz_buf.sum(axis=(0, 1))
            d_inputs += dz_buf @ weights[f"{prefix}.w_ih"]
            del dh_prev_extra  # initial-state gradient, not a parameter
        d_out = d_inputs

    # embedding
    grads["embed.w"] = np.einsum("bti,btf->if", d_out, trace.features)
    grads["embed.b"] = d_out.sum(axis=(0, 1))
    return grads


def _shift_states(states: np.ndarray, reverse: bool) -> np.ndarray:
    """Previous-step running state per position (zero before the first step)."""
    prev = np.zeros_like(states)
    if reverse:
        prev[:, :-1] = states[:, 1:]
    else:
        prev[:, 1:] = states[:, :-1]
    return prev


def _bptt_direction(
    d_half: np.ndarray,
    gates: np.ndarray,
    cells: np.ndarray,
    hiddens: np.ndarray,
    tanh_cells: np.ndarray,
    mask: np.ndarray,
    w_hh: np.ndarray,
    reverse: bool,
) -> tuple[np.ndarray, np.ndarray]:
    """Backprop through time for one direction of one layer.

    Returns the per-step pre-activation gradients (B, T, 4*l_h) and the
    gradient reaching the initial state. Mirrors the forward masking: at
    padded steps the state update was an identity, so the carried
    gradients pass through untouched and no gate gradient is produced.
    """
    batch, steps, l_h = tanh_cells.shape
    dz_buf = np.zeros((batch, steps, 4 * l_h))
    dh_carry = np.zeros((batch, l_h))
    dc_carry = np.zeros((batch, l_h))
    cells_prev = _shift_states(cells, reverse)

    order = range(steps) if reverse else range(steps - 1, -1, -1)
    for t in order:
        valid = mask[:, t : t + 1].astype(np.float64)
        gi = gates[:, t, :l_h]
        gf = gates[:, t, l_h : 2 * l_h]
        gg = gates[:, t, 2 * l_h : 3 * l_h]
        go = gates[:, t, 3 * l_h :]
        tc = tanh_cells[:, t]
        c_prev = cells_prev[:, t]

        dh_new = valid * (dh_carry + d_half[:, t])
        dc_new = valid * dc_carry
        dh_pass = (1.0 - valid) * dh_carry
        dc_pass = (1.0 - valid) * dc_carry

        d_go = dh_new * tc
        dc_new = dc_new + dh_new * go * (1.0 - tc * tc)
        d_gi = dc_new * gg
        d_gg = dc_new * gi
        d_gf = dc_new * c_prev
        dc_prev = dc_new * gf

        dz = np.concatenate(
            [
                d_gi * gi * (1.0 - gi),
                d_gf * gf * (1.0 - gf),
                d_gg * (1.0 - gg * gg),
                d_go * go * (1.0 - go),
            ],
            axis=1,
        )
        dz_buf[:, t] = dz
        dh_carry = dz @ w_hh + dh_pass
        dc_carry = dc_prev + dc_pass
    return dz_buf, dh_carry


def backward(
    trace: ForwardTrace,
    labels: Sequence[BlockLabel | int],
    mask: np.ndarray,
    weights: ModelWeights,
    config: ModelConfig,
) -> ModelWeights:
    """Gradients of the single-page cross entropy w.r.t. every parameter.

    ``trace`` must come from :func:`tabdet.model.forward` on the same
    weights; ``labels`` and ``mask`` are flat over the page's blocks. The
    loss differentiated is the mean of -log p[y] over masked blocks.
    """
    if trace is None:
        raise ValueError("backward requires the forward trace")
    if trace.features.shape[0] != 1:
        raise ValueError("backward takes a single-page trace; batches use train()")
    idx = labels_to_indices(labels)
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise UndefinedLossError("gradient over zero unmasked blocks is undefined")
    n = trace.features.shape[1]
    onehot = np.zeros((n, len(LABEL_INDEX)))
    onehot[np.arange(n), idx] = 1.0
    dlogits = (trace.probabilities[0] - onehot) * (mask[:, None] / count)
    return _gradients_from_dlogits(trace, dlogits[None, ...], weights, config)


def lr_at_step(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Learning rate: linear warmup from 0, then cosine decay to 0."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = int(round(cfg.warmup_fraction * total_steps))
    if step < warmup:
        return cfg.base_lr * step / warmup
    if total_steps == warmup:
        return cfg.base_lr
    progress = (step - warmup) / (total_steps - warmup)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    m: ModelWeights
    v: ModelWeights
    t: int = 0

    @classmethod
    def zeros(cls, config: ModelConfig) -> "OptimizerState":
        return cls(m=ModelWeights.zeros(config), v=ModelWeights.zeros(config))


def adam_step(
    weights: ModelWeights,
    gradients: ModelWeights,
    state: OptimizerState,
    lr: float,
    cfg: TrainConfig,
) -> tuple[ModelWeights, OptimizerState]:
    """One Adam update with bias-corrected moments. Mutates in place."""
    state.t += 1
    bc1 = 1.0 - cfg.beta1**state.t
    bc2 = 1.0 - cfg.beta2**state.t
    for name in weights.keys():
        g = gradients[name]
        if np.isnan(g).any():
            raise NanGradientError(f"NaN gradient in parameter group {name!r} at step {state.t}")
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        weights[name] = weights[name] - lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
    return weights, state


@dataclass
class _PreparedPage:
    features: np.ndarray   # (n, 8)
    labels: np.ndarray     # (n,) int


def _prepare_pages(pages: Sequence[Page], require_labels: bool) -> list[_PreparedPage]:
    prepared = []
    for page in pages:
        page = order_blocks(page)
        if page.num_blocks == 0:
            continue
        if require_labels and any(b.label is None for b in page.blocks):
            raise ValueError(f"page {page.page_id!r} has unlabeled blocks")
        labels = labels_to_indices([b.label for b in page.blocks]) if require_labels else None
        prepared.append(_PreparedPage(featurize_page(page), labels))
    return prepared


def _bucket_key(n: int) -> int:
    return 1 << (n - 1).bit_length() if n > 1 else 1


def _make_batches(
    order: np.ndarray, pages: list[_PreparedPage], batch_size: int
) -> list[list[int]]:
    """Chunk page indices into length-bucketed batches (power-of-two bounds)."""
    buckets: dict[int, list[int]] = {}
    for i in order:
        buckets.setdefault(_bucket_key(pages[i].features.shape[0]), []).append(int(i))
    batches = []
    for key in sorted(buckets):
        members = buckets[key]
        for start in range(0, len(members), batch_size):
            batches.append(members[start : start + batch_size])
    return batches


def _pad_batch(pages: list[_PreparedPage]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Right-pad a list of pages into (features, lengths, labels) arrays."""
    lengths = np.array([p.features.shape[0] for p in pages])
    t_max = int(lengths.max())
    feats = np.zeros((len(pages), t_max, pages[0].features.shape[1]))
    labels = np.zeros((len(pages), t_max), dtype=np.intp)
    for i, p in enumerate(pages):
        n = p.features.shape[0]
        feats[i, :n] = p.features
        if p.labels is not None:
            labels[i, :n] = p.labels
    return feats, lengths, labels


def _batch_loss_and_dlogits(
    trace: ForwardTrace, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean over pages of per-page cross entropy, and the matching dlogits.

    Each page's blocks are weighted by 1/(B * n_page) so the batched loss
    equals the mean of the losses the pages would get when run alone.
    """
    batch = trace.mask.shape[0]
    probs_y = np.take_along_axis(trace.probabilities, labels[..., None], axis=2)[..., 0]
    per_block = -np.log(np.maximum(probs_y, 1e-300)) * trace.mask
    lengths = np.maximum(trace.lengths, 1)
    per_page = per_block.sum(axis=1) / lengths
    loss = float(per_page.mean())

    onehot = np.zeros_like(trace.probabilities)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=2)
    block_w = trace.mask / (batch * lengths)[:, None]
    dlogits = (trace.probabilities - onehot) * block_w[..., None]
    return loss, dlogits


def train(
    train_set: Sequence[Page],
    val_set: Sequence[Page],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
) -> tuple[ModelWeights, list[dict]]:
    """Train the classifier; returns (best-validation weights, metrics log).

    Pages are shuffled each epoch with a seeded RNG, bucketed by length
    into right-padded batches, and stepped with Adam under the warmup +
    cosine schedule (evaluated at the 1-based optimizer step). The metrics
    log has one record per epoch: epoch, train_loss, val_loss, val_acc,
    lr. Deterministic given (configs, seed) in single-threaded mode.
    """
    train_pages = _prepare_pages(train_set, require_labels=True)
    if not train_pages:
        raise EmptyDatasetError("training set has no non-empty pages")
    val_pages = _prepare_pages(val_set, require_labels=True)

    weights = init_weights(model_cfg, train_cfg.seed)
    state = OptimizerState.zeros(model_cfg)
    rng = np.random.default_rng(train_cfg.seed)

    steps_per_epoch = len(_make_batches(np.arange(len(train_pages)), train_pages, train_cfg.batch_size))
    total_steps = steps_per_epoch * train_cfg.epochs

    best_val = math.inf
    best_weights = weights.copy()
    log: list[dict] = []
    for epoch in range(train_cfg.epochs):
        order = rng.permutation(len(train_pages))
        epoch_loss = 0.0
        lr = 0.0
        for batch_idx in _make_batches(order, train_pages, train_cfg.batch_size):
            members = [train_pages[i] for i in batch_idx]
            feats, lengths, labels = _pad_batch(members)
            trace = forward_batch(feats, lengths, weights, model_cfg)
            loss, dlogits = _batch_loss_and_dlogits(trace, labels)
            grads = _gradients_from_dlogits(trace, dlogits, weights, model_cfg)
            lr = lr_at_step(state.t + 1, total_steps, train_cfg)
            weights, state = adam_step(weights, grads, state, lr, train_cfg)
            epoch_loss += loss * len(members)
        train_loss = epoch_loss / len(train_pages)

        val_loss, val_acc = evaluate_classifier(val_pages, weights, model_cfg, train_cfg.batch_size)
        record = {
            "epoch": epoch,
            "train_loss": train_loss,
            "val_loss": val_loss,
            "val_acc": val_acc,
            "lr": lr,
        }
        log.append(record)

        selector = val_loss if val_loss is not None else train_loss
        if selector < best_val:
            best_val = selector
            best_weights = weights.copy()
    return best_weights, log


def evaluate_classifier(
    pages: list[_PreparedPage] | Sequence[Page],
    weights: ModelWeights,
    model_cfg: ModelConfig,
    batch_size: int = 256,
) -> tuple[float | None, float | None]:
    """(mean per-page loss, block accuracy) of the classifier on pages."""
    if pages and isinstance(pages[0], Page):
        pages = _prepare_pages(pages, require_labels=True)
    if not pages:
        return None, None
    total_loss = 0.0
    correct = 0
    total = 0
    order = np.arange(len(pages))
    for batch_idx in _make_batches(order, pages, batch_size):
        members = [pages[i] for i in batch_idx]
        feats, lengths, labels = _pad_batch(members)
        trace = forward_batch(feats, lengths, weights, model_cfg)
        loss, _ = _batch_loss_and_dlogits(trace, labels)
        total_loss += loss * len(members)
        pred = trace.probabilities.argmax(axis=2)
        correct += int(((pred == labels) & trace.mask).sum())
        total += int(trace.mask.sum())
    return total_loss / len(pages), correct / total


@dataclass
class GradCheckReport:
    """Per-parameter-group max relative error of analytic vs. FD gradients."""

    errors: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]


def compare_gradients(
    loss_fn: Callable[[ModelWeights], float],
    weights: ModelWeights,
    analytic: ModelWeights,
    eps: float,
    tol: float,
    samples_per_tensor: int = 8,
) -> GradCheckReport:
    """Check analytic gradients against central finite differences.

    For each parameter group, checks the ``samples_per_tensor``
    coordinates with the largest analytic magnitude and reports max
    |analytic - fd| / max(|analytic|, |fd|, 1e-8). Near-zero coordinates
    are skipped deliberately: at step 1e-5 the finite difference there is
    dominated by float64 roundoff (~1e-11), which would swamp any real
    comparison.
    """
    errors: dict[str, float] = {}
    for name in weights.keys():
        tensor = weights[name]
        flat_size = tensor.size
        count = min(samples_per_tensor, flat_size)
        coords = np.argsort(np.abs(analytic[name]).ravel())[::-1][:count]
        worst = 0.0
        for c in coords:
            idx = np.unravel_index(int(c), tensor.shape)
            original = tensor[idx]
            tensor[idx] = original + eps
            plus = loss_fn(weights)
            tensor[idx] = original - eps
            minus = loss_fn(weights)
            tensor[idx] = original
            fd = (plus - minus) / (2.0 * eps)
            a = analytic[name][idx]
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            worst = max(worst, rel)
        errors[name] = worst
    return GradCheckReport(errors=errors, tolerance=tol)


def grad_check(
    model_cfg: ModelConfig,
    seed: int = 0,
    eps: float = 1e-5,
    tol: float = 1e-4,
    num_blocks: int = 4,
    samples_per_tensor: int = 8,
) -> GradCheckReport:
    """Verify the full backward pass on a random small instance.

    Builds a random page of ``num_blocks`` blocks and random weights from
    ``seed``, then compares :func:`backward` against central finite
    differences of the cross entropy for every parameter group.
    """
    rng = np.random.default_rng(seed)
    weights = init_weights(model_cfg, seed)
    features = rng.uniform(0.0, 1.0, size=(num_blocks, model_cfg.input_dim))
    labels = rng.integers(0, model_cfg.num_classes, size=num_blocks)
    mask = np.ones(num_blocks, dtype=bool)

    def loss_fn(w: ModelWeights) -> float:
        trace = forward_batch(features[None, ...], np.array([num_blocks]), w, model_cfg)
        probs_y = trace.probabilities[0, np.arange(num_blocks), labels]
        return float(-np.log(np.maximum(probs_y, 1e-300)).mean())

    trace = forward_batch(features[None, ...], np.array([num_blocks]), weights, model_cfg)
    analytic = _gradients_from_dlogits(
        trace,
        _single_page_dlogits(trace, labels, mask),
        weights,
        model_cfg,
    )
    return compare_gradients(loss_fn, weights, analytic, eps, tol, samples_per_tensor)


def _single_page_dlogits(
    trace: ForwardTrace, labels: np.ndarray, mask: np.ndarray
) -> np.ndarray:
    n = trace.features.shape[1]
    onehot = np.zeros((1, n, trace.probabilities.shape[2]))
    onehot[0, np.arange(n), labels] = 1.0
    weight = mask.astype(np.float64) / mask.sum()
    return (trace.probabilities - onehot) * weight[None, :, None]
