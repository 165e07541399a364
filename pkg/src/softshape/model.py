"""Network assembly, losses, training/evaluation loops and checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
from torch import nn

from .attention import GatedAttentionHead
from .data import Dataset, SplitSpec, TimeSeriesRecord, batch_size
from .embedding import ShapeEmbedding
from .moe import GateStats, IntraShapeMoe, aux_losses
from .shared_expert import SharedConvExpert
from .sparsify import keep_count, select_top_eta, sparsify

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    """Every training hyperparameter, with small-dataset defaults baked in.

    `window` (the per-shape subsequence length) may be left unset and chosen
    on the validation set via `select_shape_length`.
    """

    window: int | None = None
    stride: int = 4
    dim: int = 64
    eta: float = 0.5
    top_k: int = 1
    num_experts: int | None = None
    depth: int = 2
    aux_weight: float = 0.001
    attn_dim: int = 8
    lr: float = 0.001
    max_epochs: int = 500
    warmup_epochs: int = 150
    patience: int = 50
    seed: int = 0
    inter_kernel_sizes: tuple[int, ...] = (3, 5, 9)
    inter_bottleneck: bool = True
    no_soft_sparse: bool = False
    no_intra: bool = False
    no_inter: bool = False
    linear_embed: bool = False

    def validate(self):
        if not 0.0 < self.eta <= 1.0:
            raise ValueError(f"eta must be in (0, 1], got {self.eta}")
        if self.warmup_epochs > self.max_epochs:
            raise ValueError("warmup_epochs must not exceed max_epochs")
        if self.depth < 1:
            raise ValueError("depth must be at least 1")
        if self.stride < 1:
            raise ValueError("stride must be positive")
        if self.window is not None and self.window < 2:
            raise ValueError("window must be at least 2")
        if self.patience < 1:
            raise ValueError("patience must be positive")


class MaskCache:
    """Record-and-replay store for the discrete routing decisions.

    The first forward pass records every top-k expert mask and every top-eta
    keep/drop split; later passes replay them. Finite-difference probes then
    see a locally smooth function of the parameters.
    """

    def __init__(self):
        self._topk: list[torch.Tensor] = []
        self._kept: list[tuple[torch.Tensor, torch.Tensor]] = []
        self._ti = 0
        self._ki = 0

    def begin_forward(self):
        self._ti = 0
        self._ki = 0

    def next_topk_mask(self) -> torch.Tensor | None:
        if self._ti < len(self._topk):
            mask = self._topk[self._ti]
            self._ti += 1
            return mask
        return None

    def store_topk_mask(self, mask: torch.Tensor):
        self._topk.append(mask.detach())
        self._ti += 1

    def next_selection(self) -> tuple[torch.Tensor, torch.Tensor] | None:
        if self._ki < len(self._kept):
            sel = self._kept[self._ki]
            self._ki += 1
            return sel
        return None

    def store_selection(self, kept: torch.Tensor, dropped: torch.Tensor):
        self._kept.append((kept.detach(), dropped.detach()))
        self._ki += 1


@dataclass
class BlockTrace:
    scores: torch.Tensor
    kept: torch.Tensor
    has_fused: bool
    sparsified: torch.Tensor
    intra: torch.Tensor | None
    inter: torch.Tensor | None
    output: torch.Tensor


@dataclass
class ForwardTrace:
    input_embeddings: torch.Tensor | None = None
    blocks: list[BlockTrace] = field(default_factory=list)
    final_scores: torch.Tensor | None = None


class SoftShapeNet(nn.Module):
    """Stack of soft shape learning blocks over windowed series embeddings.

    Each block normalizes its rows, scores them with the shared attention
    head, soft-sparsifies (past warm-up), adds the routed intra-shape and
    shared inter-shape terms, and applies a GeLU. The attention head, router,
    experts and shared expert are single instances used by every block.
    """

    def __init__(self, series_length: int, num_classes: int, config: TrainConfig):
        super().__init__()
        config.validate()
        if config.window is None:
            raise ValueError("config.window must be set; use select_shape_length first")
        if config.window > series_length:
            raise ValueError(
                f"window {config.window} exceeds series length {series_length}"
            )
        if config.stride > config.window:
            raise ValueError("stride must not exceed window")
        self.config = config
        self.series_length = series_length
        self.num_classes = num_classes
        self.num_experts = config.num_experts or num_classes
        self.embedding = ShapeEmbedding(
            series_length, config.window, config.stride, config.dim, config.linear_embed
        )
        self.attention = GatedAttentionHead(config.dim, config.attn_dim)
        self.moe = IntraShapeMoe(config.dim, self.num_experts, config.top_k)
        self.shared_expert = SharedConvExpert(
            config.dim, config.inter_kernel_sizes, config.inter_bottleneck
        )
        self.norms = nn.ModuleList(nn.LayerNorm(config.dim) for _ in range(config.depth))
        self.classifier = nn.Linear(config.dim, num_classes)
        self.trained_epoch = 0

    def sparsify_active(self, epoch: int) -> bool:
        return epoch >= self.config.warmup_epochs

    def _block(self, rows, block, epoch, stats, mask_cache, want_trace):
        cfg = self.config
        h = self.norms[block](rows)
        scores = self.attention(h)
        eta = cfg.eta if self.sparsify_active(epoch) else 1.0
        selection = None
        if mask_cache is not None:
            selection = mask_cache.next_selection()
            if selection is None:
                selection = select_top_eta(scores, eta)
                mask_cache.store_selection(*selection)
        sp = sparsify(h, scores, eta, drop_fused=cfg.no_soft_sparse, selection=selection)
        total = sp.matrix
        intra = inter = None
        if not cfg.no_intra:
            flat = sp.matrix.reshape(-1, cfg.dim)
            frozen = mask_cache.next_topk_mask() if mask_cache is not None else None
            gates, truncated, mask = self.moe.router(flat, mask=frozen)
            if mask_cache is not None and frozen is None:
                mask_cache.store_topk_mask(mask)
            if stats is not None:
                stats.update(truncated, gates, mask)
            intra = self.moe.experts(flat, gates, mask).reshape(sp.matrix.shape)
            total = total + intra
        if not cfg.no_inter:
            inter = self.shared_expert(sp.matrix)
            total = total + inter
        out = torch.nn.functional.gelu(total)
        trace = None
        if want_trace:
            trace = BlockTrace(
                scores=scores.detach(),
                kept=sp.kept.detach(),
                has_fused=sp.has_fused,
                sparsified=sp.matrix.detach(),
                intra=None if intra is None else intra.detach(),
                inter=None if inter is None else inter.detach(),
                output=out.detach(),
            )
        return out, trace

    def forward(
        self,
        series: torch.Tensor,
        epoch: int | None = None,
        stats: GateStats | None = None,
        trace: ForwardTrace | None = None,
        mask_cache: MaskCache | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, T) -> per-shape outputs (B, Num, d) and their scores (B, Num)."""
        epoch = self.trained_epoch if epoch is None else epoch
        if mask_cache is not None:
            mask_cache.begin_forward()
        squeeze = series.dim() == 1
        if squeeze:
            series = series.unsqueeze(0)
        x = self.embedding(series)
        if trace is not None:
            trace.input_embeddings = x.detach()
        for block in range(self.config.depth):
            x, block_trace = self._block(
                x, block, epoch, stats, mask_cache, want_trace=trace is not None
            )
            if trace is not None:
                trace.blocks.append(block_trace)
        final_scores = self.attention(x)
        if trace is not None:
            trace.final_scores = final_scores.detach()
        if squeeze:
            return x.squeeze(0), final_scores.squeeze(0)
        return x, final_scores


def conjunctive_pool(
    outputs: torch.Tensor, scores: torch.Tensor, classifier: nn.Linear
) -> torch.Tensor:
    """Score-weighted mean of the per-shape class logits, softmaxed.

    outputs (.., Num, d) with scores (.., Num) -> probabilities (.., C)
    summing to 1.
    """
    per_shape = outputs @ classifier.weight.t() + classifier.bias
    logits = (scores.unsqueeze(-1) * per_shape).mean(dim=-2)
    return torch.softmax(logits, dim=-1)


def cross_entropy(probabilities: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    num_classes = probabilities.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label out of range [0, {num_classes})")
    picked = probabilities.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    return -picked.clamp(PROB_FLOOR, 1.0).log().mean()


def total_loss(
    probabilities: torch.Tensor,
    labels: torch.Tensor,
    stats: GateStats | None,
    aux_weight: float,
):
    """Cross entropy plus weighted balancing losses; returns (total, parts)."""
    ce = cross_entropy(probabilities, labels)
    if stats is not None and stats.shapes_routed > 0:
        imp, load = aux_losses(stats)
    else:
        imp = torch.zeros((), dtype=probabilities.dtype)
        load = torch.zeros((), dtype=probabilities.dtype)
    return ce + aux_weight * (imp + load), (ce, imp, load)


def block_row_counts(num_shapes: int, config: TrainConfig, epoch: int) -> tuple[int, ...]:
    """Row count leaving each block at the given epoch (fusion compounds)."""
    rows = num_shapes
    counts = []
    for _ in range(config.depth):
        if epoch >= config.warmup_epochs:
            kept = keep_count(rows, config.eta)
            fused = 1 if (kept < rows and not config.no_soft_sparse) else 0
            rows = kept + fused
        counts.append(rows)
    return tuple(counts)


def row_provenance(trace: ForwardTrace, sample: int = 0) -> list[list[int | None]]:
    """Original shape index of each row after every block; None marks fusion."""
    if trace.input_embeddings is None:
        raise ValueError("trace is empty")
    labels: list[int | None] = list(range(trace.input_embeddings.shape[-2]))
    history = []
    for block in trace.blocks:
        kept = block.kept if block.kept.dim() == 1 else block.kept[sample]
        labels = [labels[i] for i in kept.tolist()]
        if block.has_fused:
            labels = labels + [None]
        history.append(labels)
    return history


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    ce: float
    importance_loss: float
    load_loss: float
    expert_importance_share: tuple[float, ...]
    expert_load_share: tuple[float, ...]
    shape_counts: tuple[int, ...]


def _chunks(indices, size):
    for start in range(0, len(indices), size):
        yield indices[start : start + size]


def predict_probabilities(net: SoftShapeNet, values: np.ndarray, chunk: int = 256) -> np.ndarray:
    """(N, T) array -> (N, C) class probabilities under the trained regime."""
    dtype = next(net.parameters()).dtype
    x = torch.as_tensor(np.asarray(values), dtype=dtype)
    if x.dim() == 1:
        x = x.unsqueeze(0)
    probs = []
    with torch.no_grad():
        for idx in _chunks(range(len(x)), chunk):
            out, scores = net(x[list(idx)])
            probs.append(conjunctive_pool(out, scores, net.classifier))
    return torch.cat(probs).numpy()


def _validation_metrics(net, x, y, indices, epoch, aux_weight):
    with torch.no_grad():
        stats = GateStats(net.num_experts, dtype=x.dtype)
        probs = []
        for idx in _chunks(indices, 256):
            out, scores = net(x[list(idx)], epoch, stats=stats)
            probs.append(conjunctive_pool(out, scores, net.classifier))
        probs = torch.cat(probs)
        labels = y[list(indices)]
        loss, _ = total_loss(probs, labels, stats, aux_weight)
        accuracy = (probs.argmax(dim=-1) == labels).double().mean()
    return float(loss), float(accuracy)


def train(dataset: Dataset, split: SplitSpec, config: TrainConfig):
    """Adam training with warm-up, early stopping and best-checkpoint restore.

    Returns the network restored to its lowest-validation-loss state and the
    per-epoch metrics stream.
    """
    config.validate()
    if len(split.train) == 0:
        raise ValueError("empty training split")
    if len(split.val) == 0:
        raise ValueError("empty validation split")
    values, labels = dataset.to_arrays()
    if np.isnan(values).any():
        raise ValueError("dataset contains missing values; run impute_missing first")

    torch.manual_seed(config.seed)
    net = SoftShapeNet(dataset.series_length, dataset.num_classes, config)
    optimizer = torch.optim.Adam(net.parameters(), lr=config.lr)
    x = torch.tensor(values, dtype=torch.float32)
    y = torch.tensor(labels, dtype=torch.long)
    bsz = batch_size(len(split.train))
    rng = np.random.default_rng(config.seed)
    train_idx = np.asarray(split.train)

    best_val = math.inf
    best_state = None
    best_epoch = 0
    bad_epochs = 0
    metrics: list[EpochMetrics] = []

    for epoch in range(config.max_epochs):
        order = train_idx[rng.permutation(len(train_idx))]
        sums = {"total": 0.0, "ce": 0.0, "imp": 0.0, "load": 0.0}
        importance_total = torch.zeros(net.num_experts)
        hard_total = torch.zeros(net.num_experts, dtype=torch.long)
        num_batches = 0
        for batch in _chunks(order, bsz):
            stats = GateStats(net.num_experts, dtype=x.dtype)
            out, scores = net(x[batch], epoch, stats=stats)
            probs = conjunctive_pool(out, scores, net.classifier)
            loss, (ce, imp, load) = total_loss(probs, y[batch], stats, config.aux_weight)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            sums["total"] += float(loss)
            sums["ce"] += float(ce)
            sums["imp"] += float(imp)
            sums["load"] += float(load)
            importance_total += stats.importance.detach()
            hard_total += stats.hard_load
            num_batches += 1

        val_loss, val_accuracy = _validation_metrics(
            net, x, y, split.val, epoch, config.aux_weight
        )
        imp_mass = float(importance_total.sum())
        hard_mass = int(hard_total.sum())
        metrics.append(
            EpochMetrics(
                epoch=epoch,
                train_loss=sums["total"] / num_batches,
                val_loss=val_loss,
                val_accuracy=val_accuracy,
                ce=sums["ce"] / num_batches,
                importance_loss=sums["imp"] / num_batches,
                load_loss=sums["load"] / num_batches,
                expert_importance_share=tuple(
                    float(v) / imp_mass if imp_mass > 0 else 0.0 for v in importance_total
                ),
                expert_load_share=tuple(
                    int(v) / hard_mass if hard_mass > 0 else 0.0 for v in hard_total
                ),
                shape_counts=block_row_counts(net.embedding.num_shapes, config, epoch),
            )
        )
        if val_loss < best_val:
            best_val = val_loss
            best_state = {k: v.clone() for k, v in net.state_dict().items()}
            best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                logger.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break

    net.load_state_dict(best_state)
    net.trained_epoch = best_epoch
    return net, metrics


def evaluate(net: SoftShapeNet, records: list[TimeSeriesRecord]) -> float:
    """Fraction of records whose pooled argmax matches the label."""
    if not records:
        raise ValueError("records must be nonempty")
    values = np.stack([r.values for r in records])
    labels = np.array([r.label for r in records])
    probs = predict_probabilities(net, values)
    return float((probs.argmax(axis=-1) == labels).mean())


def shape_length_candidates(series_length: int, stride: int) -> list[int]:
    """Window candidates: the fixed grid plus 10% and 80% of the length."""
    base = {4, 8, 16, 24, 32, 48, 64}
    base.add(int(math.floor(0.1 * series_length + 1e-9)))
    base.add(int(math.floor(0.8 * series_length + 1e-9)))
    valid = sorted(m for m in base if 2 <= m <= series_length - 1 and m >= stride)
    if not valid:
        raise ValueError(
            f"no valid window candidates for series length {series_length}, stride {stride}"
        )
    return valid


def select_shape_length(dataset: Dataset, split: SplitSpec, config: TrainConfig) -> int:
    """Train one model per window candidate; best validation accuracy wins.

    Ties go to the smaller window.
    """
    best_window = None
    best_accuracy = -1.0
    val_records = [dataset.records[i] for i in split.val]
    for window in shape_length_candidates(dataset.series_length, config.stride):
        candidate = replace(config, window=window)
        net, _ = train(dataset, split, candidate)
        accuracy = evaluate(net, val_records)
        logger.info("window %d: val accuracy %.4f", window, accuracy)
        if accuracy > best_accuracy:
            best_accuracy = accuracy
            best_window = window
    return best_window


def save_checkpoint(
    path,
    net: SoftShapeNet,
    timestep_means: np.ndarray | None = None,
    normalize: bool = True,
):
    """Versioned JSON record of the config and every parameter array."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(net.config),
        "series_length": net.series_length,
        "num_classes": net.num_classes,
        "trained_epoch": net.trained_epoch,
        "normalize": normalize,
        "timestep_means": None if timestep_means is None else list(map(float, timestep_means)),
        "params": {
            name: tensor.detach().cpu().numpy().tolist()
            for name, tensor in net.state_dict().items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_checkpoint(path) -> tuple[SoftShapeNet, dict]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    cfg_dict = dict(payload["config"])
    cfg_dict["inter_kernel_sizes"] = tuple(cfg_dict["inter_kernel_sizes"])
    config = TrainConfig(**cfg_dict)
    net = SoftShapeNet(payload["series_length"], payload["num_classes"], config)
    state = {
        name: torch.tensor(values, dtype=torch.float32)
        for name, values in payload["params"].items()
    }
    net.load_state_dict(state)
    net.trained_epoch = payload["trained_epoch"]
    meta = {
        "timestep_means": None
        if payload["timestep_means"] is None
        else np.array(payload["timestep_means"]),
        "normalize": payload["normalize"],
    }
    return net, meta
