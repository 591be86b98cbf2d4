"""Turn per-block class labels into table boundary boxes.

Step 1 clusters in-table blocks into preliminary regions by proximity:
two blocks connect when their boxes, each expanded by a margin of 1% of
the page height in both axes, intersect (closed boxes, so a gap of
exactly twice the margin still touches). Step 2 walks each region's text
lines top to bottom and starts a new table at every all-header line that
appears below content, splitting stacked tables that clustering alone
cannot separate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import (
    LABEL_ORDER,
    BlockLabel,
    Box,
    Page,
    TextBlock,
    group_lines,
    order_blocks,
    union_box,
)
from .model import ModelConfig, ModelWeights, forward

# expansion margin for the proximity rule, as a fraction of page height
CLUSTER_MARGIN_FRACTION = 0.01


@dataclass(frozen=True)
class LabeledBlock:
    """A text block plus its predicted class and class probabilities."""

    block: TextBlock
    label: BlockLabel
    probabilities: tuple[float, float, float, float]

    def __post_init__(self) -> None:
        probs = np.asarray(self.probabilities, dtype=np.float64)
        if probs.shape != (len(LABEL_ORDER),):
            raise ValueError(f"expected {len(LABEL_ORDER)} probabilities, got {probs.shape}")
        if abs(float(probs.sum()) - 1.0) > 1e-6:
            raise ValueError(f"probabilities sum to {probs.sum()}, not 1")
        if self.label is not LABEL_ORDER[int(probs.argmax())]:
            raise ValueError("label must be the argmax of the probabilities")

    @property
    def confidence(self) -> float:
        return float(max(self.probabilities))


@dataclass(frozen=True)
class TableRegion:
    """A cluster of in-table blocks: preliminary result of step 1, and the
    final per-table result after step 2."""

    box: Box
    members: tuple[int, ...]
    confidence: float


@dataclass(frozen=True)
class Detection:
    box: Box
    confidence: float


@dataclass(frozen=True)
class DetectionResult:
    """Detected tables plus the per-block classification behind them.

    ``block_labels`` and ``block_probabilities`` follow the page's raster
    reading order (the order the model consumed). ``attention`` is
    (heads, n, n) when retained, else None.
    """

    page_id: str
    detections: tuple[Detection, ...]
    block_labels: tuple[BlockLabel, ...]
    block_probabilities: np.ndarray | None = None
    attention: np.ndarray | None = None

    def to_json_dict(self) -> dict:
        out = {
            "page_id": self.page_id,
            "detections": [
                {"box": list(d.box), "confidence": d.confidence} for d in self.detections
            ],
            "block_labels": [lab.value for lab in self.block_labels],
        }
        if self.attention is not None:
            out["attention"] = self.attention.tolist()
        return out


def _expanded_intersects(a: TextBlock, b: TextBlock, m: float) -> bool:
    return (
        a.x1 - b.x2 <= 2 * m
        and b.x1 - a.x2 <= 2 * m
        and a.y1 - b.y2 <= 2 * m
        and b.y1 - a.y2 <= 2 * m
    )


def _region_from_members(members: list[int], blocks: Sequence[LabeledBlock]) -> TableRegion:
    members = sorted(members)
    box = union_box([blocks[i].block.box for i in members])
    confidence = float(np.mean([blocks[i].confidence for i in members]))
    return TableRegion(box=box, members=tuple(members), confidence=confidence)


def cluster_regions(blocks: Sequence[LabeledBlock], page: Page) -> list[TableRegion]:
    """Connected components of in-table blocks under the proximity rule.

    Regions come back sorted by box position (top-to-bottom, then
    left-to-right), so the result does not depend on block input order.
    Outside blocks never join a region; zero in-table blocks give [].
    """
    m = CLUSTER_MARGIN_FRACTION * page.height
    idx = [i for i, lb in enumerate(blocks) if lb.label.in_table]
    parent = {i: i for i in idx}

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a_pos, a in enumerate(idx):
        for b in idx[a_pos + 1 :]:
            if _expanded_intersects(blocks[a].block, blocks[b].block, m):
                parent[find(a)] = find(b)

    components: dict[int, list[int]] = {}
    for i in idx:
        components.setdefault(find(i), []).append(i)
    regions = [_region_from_members(mem, blocks) for mem in components.values()]
    regions.sort(key=lambda r: (r.box[1], r.box[0], r.box[3], r.box[2]))
    return regions


def split_by_headers(
    region: TableRegion, blocks: Sequence[LabeledBlock], page: Page
) -> list[TableRegion]:
    """Split a region at header lines that sit below content.

    Member blocks are grouped into text lines (same tie band as reading
    order). Walking top to bottom, a line made entirely of header blocks
    that appears after a content-bearing line starts a new table; the cut
    falls at the vertical midpoint between it and the preceding line. The
    content tracker resets at each cut, so a multi-row header of the new
    table does not trigger a second split. Each output box is the tight
    union of its member blocks.
    """
    member_blocks = [blocks[i].block for i in region.members]
    lines = group_lines(member_blocks, page.height)

    segments: list[list[int]] = [[]]
    content_seen = False
    for line in lines:
        labels = [blocks[region.members[j]].label for j in line]
        all_header = all(lab.is_header for lab in labels)
        if all_header and content_seen and segments[-1]:
            segments.append([])
            content_seen = False
        segments[-1].extend(region.members[j] for j in line)
        if any(lab is BlockLabel.CONTENT_CELL for lab in labels):
            content_seen = True

    return [_region_from_members(seg, blocks) for seg in segments if seg]


def detect_tables(
    page: Page,
    weights: ModelWeights | None = None,
    config: ModelConfig | None = None,
    oracle_labels: bool = False,
    retain_attention: bool = False,
) -> DetectionResult:
    """Full per-page pipeline: classify blocks, cluster, split, box.

    With ``oracle_labels`` the model is skipped entirely and the page's
    gold labels drive post-processing (probabilities become one-hot), so
    the result is a pure function of geometry. Otherwise ``weights`` and
    ``config`` are required. A page with zero blocks yields an empty
    result.
    """
    ordered = order_blocks(page)
    n = ordered.num_blocks
    if n == 0:
        return DetectionResult(page.page_id, (), ())

    attention = None
    if oracle_labels:
        labeled = []
        for block in ordered.blocks:
            if block.label is None:
                raise ValueError(f"page {page.page_id!r} has unlabeled blocks in oracle mode")
            probs = tuple(1.0 if lab is block.label else 0.0 for lab in LABEL_ORDER)
            labeled.append(LabeledBlock(block, block.label, probs))
        probabilities = np.array([lb.probabilities for lb in labeled])
    else:
        if weights is None or config is None:
            raise ValueError("weights and config are required unless oracle_labels is set")
        probabilities, trace = forward(ordered, weights, config, retain_attention=retain_attention)
        labeled = [
            LabeledBlock(
                block,
                LABEL_ORDER[int(probabilities[i].argmax())],
                tuple(probabilities[i]),
            )
            for i, block in enumerate(ordered.blocks)
        ]
        if retain_attention:
            attention = trace.attention[0]

    final: list[TableRegion] = []
    for region in cluster_regions(labeled, ordered):
        final.extend(split_by_headers(region, labeled, ordered))
    final.sort(key=lambda r: (r.box[1], r.box[0]))

    return DetectionResult(
        page_id=page.page_id,
        detections=tuple(Detection(r.box, r.confidence) for r in final),
        block_labels=tuple(lb.label for lb in labeled),
        block_probabilities=probabilities,
        attention=attention,
    )
