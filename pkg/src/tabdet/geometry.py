"""Text blocks, pages, block labels, geometric features, and box arithmetic.

Coordinates follow the PDF/image convention: origin at the top-left corner,
x grows rightward, y grows downward. A box is the 4-tuple (x1, y1, x2, y2)
with (x1, y1) the upper-left and (x2, y2) the lower-right corner.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

Box = tuple[float, float, float, float]

# Fraction of page height used to decide that two blocks sit on one text line.
LINE_BAND_FRACTION = 0.005

FEATURE_DIM = 8


class InvalidPageError(ValueError):
    """Page dimensions are degenerate (width or height <= 0)."""


class InvalidBlockError(ValueError):
    """Block has no area (possibly after clipping to the page)."""


class InvalidBoxError(ValueError):
    """Box coordinates do not describe a positive-area rectangle."""


class BlockLabel(enum.Enum):
    """Semantic role of a text block with respect to tables on its page."""

    ROW_HEADER = "RowHeader"
    COLUMN_HEADER = "ColumnHeader"
    CONTENT_CELL = "ContentCell"
    OUTSIDE = "Outside"

    @property
    def in_table(self) -> bool:
        return self is not BlockLabel.OUTSIDE

    @property
    def is_header(self) -> bool:
        return self in (BlockLabel.ROW_HEADER, BlockLabel.COLUMN_HEADER)


# Fixed class order used for one-hot labels, logits and probabilities.
LABEL_ORDER: tuple[BlockLabel, ...] = (
    BlockLabel.ROW_HEADER,
    BlockLabel.COLUMN_HEADER,
    BlockLabel.CONTENT_CELL,
    BlockLabel.OUTSIDE,
)
LABEL_INDEX: dict[BlockLabel, int] = {lab: i for i, lab in enumerate(LABEL_ORDER)}
NUM_CLASSES = len(LABEL_ORDER)


@dataclass(frozen=True)
class TextBlock:
    """Axis-aligned text bounding box, optionally carrying a gold label."""

    x1: float
    y1: float
    x2: float
    y2: float
    label: BlockLabel | None = None

    def __post_init__(self) -> None:
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise InvalidBlockError(
                f"block must have positive width and height, got "
                f"({self.x1}, {self.y1}, {self.x2}, {self.y2})"
            )

    @property
    def box(self) -> Box:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1


@dataclass(frozen=True)
class Page:
    """A document page: dimensions, text blocks, and ground-truth table boxes."""

    page_id: str
    width: float
    height: float
    blocks: tuple[TextBlock, ...] = ()
    tables: tuple[Box, ...] = ()

    def __post_init__(self) -> None:
        if not (self.width > 0 and self.height > 0):
            raise InvalidPageError(
                f"page {self.page_id!r} has degenerate size "
                f"{self.width} x {self.height}"
            )
        object.__setattr__(self, "blocks", tuple(self.blocks))
        object.__setattr__(self, "tables", tuple(tuple(map(float, t)) for t in self.tables))
        for t in self.tables:
            validate_box(t)
            if not (0 <= t[0] and 0 <= t[1] and t[2] <= self.width and t[3] <= self.height):
                raise InvalidBoxError(
                    f"page {self.page_id!r}: table box {t} exceeds page bounds"
                )

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)


def validate_box(box: Box) -> Box:
    """Check that ``box`` has strictly positive width and height."""
    x1, y1, x2, y2 = box
    if not (x1 < x2 and y1 < y2):
        raise InvalidBoxError(f"zero-area or inverted box {box}")
    return box


def clip_block(block: TextBlock, page: Page) -> TextBlock:
    """Clip a block to the page rectangle.

    Blocks from real parsers regularly overshoot margins, so out-of-bounds
    coordinates are clamped rather than rejected. A block left with zero
    area raises :class:`InvalidBlockError`.
    """
    x1 = min(max(block.x1, 0.0), page.width)
    x2 = min(max(block.x2, 0.0), page.width)
    y1 = min(max(block.y1, 0.0), page.height)
    y2 = min(max(block.y2, 0.0), page.height)
    if not (x1 < x2 and y1 < y2):
        raise InvalidBlockError(
            f"block {block.box} has zero area after clipping to "
            f"{page.width} x {page.height}"
        )
    if (x1, y1, x2, y2) == block.box:
        return block
    return replace(block, x1=x1, y1=y1, x2=x2, y2=y2)


def featurize(block: TextBlock, page: Page) -> np.ndarray:
    """8-dimensional geometric feature vector of a block on its page.

    Returns ``[x1, y1, x2, y2, xc, yc, w, h]`` where (xc, yc) is the block
    midpoint and every value is normalized by the page width (x, w) or page
    height (y, h), then clamped to [0, 1] to absorb rounding.
    """
    if not (page.width > 0 and page.height > 0):
        raise InvalidPageError(f"degenerate page size {page.width} x {page.height}")
    block = clip_block(block, page)
    x1, y1, x2, y2 = block.box
    x3 = (x1 + x2) / 2.0
    y3 = (y1 + y2) / 2.0
    w = x2 - x1
    h = y2 - y1
    feats = np.array(
        [
            x1 / page.width,
            y1 / page.height,
            x2 / page.width,
            y2 / page.height,
            x3 / page.width,
            y3 / page.height,
            w / page.width,
            h / page.height,
        ],
        dtype=np.float64,
    )
    return np.clip(feats, 0.0, 1.0)


def featurize_page(page: Page) -> np.ndarray:
    """Feature matrix (n, 8) for all blocks of a page, in block order."""
    if not page.blocks:
        return np.zeros((0, FEATURE_DIM), dtype=np.float64)
    return np.stack([featurize(b, page) for b in page.blocks])


def group_lines(
    blocks: Sequence[TextBlock], page_height: float
) -> list[list[int]]:
    """Group block indices into text lines by a y1 tie band.

    Blocks are sorted by (y1, x1, x2, y2); a block joins the current line
    while its y1 is within ``LINE_BAND_FRACTION * page_height`` of the
    line's first (lowest-y1) block. The grouping is insensitive to the
    input order of ``blocks``.
    """
    band = LINE_BAND_FRACTION * page_height
    order = sorted(
        range(len(blocks)),
        key=lambda i: (blocks[i].y1, blocks[i].x1, blocks[i].x2, blocks[i].y2),
    )
    lines: list[list[int]] = []
    anchor_y = None
    for i in order:
        y = blocks[i].y1
        if anchor_y is None or y - anchor_y >= band:
            lines.append([i])
            anchor_y = y
        else:
            lines[-1].append(i)
    return lines


def order_blocks(page: Page) -> Page:
    """Return the page with blocks in raster reading order.

    Lines are formed top-to-bottom with the y1 tie band of
    :func:`group_lines`; blocks within a line are ordered left to right.
    Idempotent, and any permutation of the same block set yields the same
    output order.
    """
    if len(page.blocks) <= 1:
        return page
    lines = group_lines(page.blocks, page.height)
    ordered: list[TextBlock] = []
    for line in lines:
        line.sort(key=lambda i: (page.blocks[i].x1, page.blocks[i].y1, page.blocks[i].x2))
        ordered.extend(page.blocks[i] for i in line)
    return replace(page, blocks=tuple(ordered))


def intersection_area(a: Box, b: Box) -> float:
    """Overlap area of two boxes; 0.0 when they are disjoint."""
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def box_area(box: Box) -> float:
    return (box[2] - box[0]) * (box[3] - box[1])


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    validate_box(a)
    validate_box(b)
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    union = box_area(a) + box_area(b) - inter
    return inter / union


def union_box(boxes: Iterable[Box]) -> Box:
    """Tight bounding box of a non-empty collection of boxes."""
    boxes = list(boxes)
    if not boxes:
        raise InvalidBoxError("union of zero boxes is undefined")
    return (
        min(b[0] for b in boxes),
        min(b[1] for b in boxes),
        max(b[2] for b in boxes),
        max(b[3] for b in boxes),
    )
