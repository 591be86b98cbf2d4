"""Seeded synthetic page generator for two table-style domains.

Pages are abstract geometry: labeled rectangles, no glyphs. Layout flows
top to bottom; each flow item is a table grid, a stacked pair of tables
sharing one column layout, or a paragraph of Outside blocks. All
randomness comes from a counter-based Philox generator keyed by the page
seed, so corpora are reproducible across platforms.

The bundled styles sit on opposite sides of the clustering margin's
failure modes: "dense-scientific" packs tight grids with narrow gaps,
"sparse-financial" spreads columns wide (mean inter-column gap at least
three times the dense style's), drops cells, favors left header columns,
and frequently stacks two same-format tables with a vertical gap below
the clustering threshold so only the header-split rule can separate
them.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .geometry import BlockLabel, Box, Page, TextBlock, intersection_area, union_box
from .io import write_pages

# fixed page furniture, as fractions of the page dimensions
MARGIN_X_FRACTION = 0.09
MARGIN_Y_FRACTION = 0.07
# proximity margin mirrored from postprocess: m = 1% of page height
_MARGIN_FRACTION = 0.01

MAX_LAYOUT_ATTEMPTS = 25


class LayoutError(RuntimeError):
    """Raised when a page cannot be laid out within the attempt budget."""


class PageValidationError(ValueError):
    """A generated page violates a generator invariant."""


@dataclass(frozen=True)
class StyleProfile:
    """Parameter ranges defining one style domain.

    Ranges are inclusive (lo, hi) pairs; gap and size ranges are
    fractions of the page dimension they apply to (row values of height,
    column values of width). ``col_gap_multiplier`` scales the sampled
    column gap and is the single knob separating sparse from dense
    column spacing.
    """

    name: str
    page_size: tuple[float, float]
    table_count_range: tuple[int, int]
    rows_range: tuple[int, int]
    cols_range: tuple[int, int]
    header_rows_range: tuple[int, int]
    row_gap_range: tuple[float, float]
    col_gap_range: tuple[float, float]
    col_gap_multiplier: float
    left_header_prob: float
    cell_dropout: float
    paragraph_count_range: tuple[int, int]
    stack_prob: float
    row_height_range: tuple[float, float]
    table_width_range: tuple[float, float]

    def __post_init__(self) -> None:
        for field in (
            "table_count_range",
            "rows_range",
            "cols_range",
            "header_rows_range",
            "paragraph_count_range",
        ):
            lo, hi = getattr(self, field)
            if not (0 <= lo <= hi):
                raise ValueError(f"{field} must be a non-empty range, got ({lo}, {hi})")
        for field in (
            "row_gap_range",
            "col_gap_range",
            "row_height_range",
            "table_width_range",
        ):
            lo, hi = getattr(self, field)
            if not (0.0 <= lo <= hi):
                raise ValueError(f"{field} must be a non-empty range, got ({lo}, {hi})")
        for field in ("left_header_prob", "cell_dropout", "stack_prob"):
            v = getattr(self, field)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{field} must be in [0, 1], got {v}")
        if self.rows_range[0] < 1 or self.cols_range[0] < 2:
            raise ValueError("tables need at least 1 content row and 2 content columns")
        if self.header_rows_range[0] < 1:
            raise ValueError("the top header row is not optional")
        w, h = self.page_size
        if not (w > 0 and h > 0):
            raise ValueError(f"page_size must be positive, got {self.page_size}")


DENSE_SCIENTIFIC = StyleProfile(
    name="dense-scientific",
    page_size=(612.0, 792.0),
    table_count_range=(1, 2),
    rows_range=(4, 8),
    cols_range=(3, 6),
    header_rows_range=(1, 2),
    row_gap_range=(0.002, 0.006),
    col_gap_range=(0.003, 0.005),
    col_gap_multiplier=1.0,
    left_header_prob=0.3,
    cell_dropout=0.05,
    paragraph_count_range=(2, 5),
    stack_prob=0.15,
    row_height_range=(0.013, 0.017),
    table_width_range=(0.55, 0.95),
)

SPARSE_FINANCIAL = StyleProfile(
    name="sparse-financial",
    page_size=(612.0, 792.0),
    table_count_range=(1, 3),
    rows_range=(5, 10),
    cols_range=(2, 3),
    header_rows_range=(1, 2),
    row_gap_range=(0.003, 0.008),
    col_gap_range=(0.00375, 0.0045),
    col_gap_multiplier=4.0,
    left_header_prob=0.85,
    cell_dropout=0.12,
    paragraph_count_range=(1, 3),
    stack_prob=0.5,
    row_height_range=(0.014, 0.02),
    table_width_range=(0.6, 0.95),
)

BUILTIN_STYLES = {s.name: s for s in (DENSE_SCIENTIFIC, SPARSE_FINANCIAL)}


@dataclass(frozen=True)
class _TableSpec:
    """A sampled column layout; stacked pairs share one of these."""

    x1: float
    col_edges: tuple[tuple[float, float], ...]  # (x1, x2) per grid column
    col_gap: float
    left_header: bool


def _sample_table_spec(style: StyleProfile, rng: np.random.Generator) -> _TableSpec:
    page_w = style.page_size[0]
    usable_w = page_w * (1.0 - 2.0 * MARGIN_X_FRACTION)
    x0 = page_w * MARGIN_X_FRACTION

    content_cols = int(rng.integers(style.cols_range[0], style.cols_range[1] + 1))
    left_header = bool(rng.random() < style.left_header_prob)
    col_gap = float(rng.uniform(*style.col_gap_range)) * style.col_gap_multiplier * page_w
    width = float(rng.uniform(*style.table_width_range)) * usable_w

    total_cols = content_cols + int(left_header)
    gap_total = (total_cols - 1) * col_gap
    weights = np.concatenate(
        [rng.uniform(0.7, 1.2, size=1) if left_header else np.empty(0),
         rng.uniform(1.0, 2.0, size=content_cols)]
    )
    col_widths = weights / weights.sum() * (width - gap_total)
    if col_widths.min() <= 2.0:
        raise _RetryLayout("column width collapsed under the sampled gap budget")

    x1 = x0 + float(rng.uniform(0.0, usable_w - width))
    edges = []
    cx = x1
    for cw in col_widths:
        edges.append((cx, cx + float(cw)))
        cx += float(cw) + col_gap
    return _TableSpec(x1=x1, col_edges=tuple(edges), col_gap=col_gap, left_header=left_header)


class _RetryLayout(Exception):
    """Internal: abandon the current layout attempt and resample."""


def _materialize_table(
    spec: _TableSpec, y_top: float, style: StyleProfile, rng: np.random.Generator
) -> tuple[list[TextBlock], Box, float]:
    """Lay one table grid at y_top; returns (blocks, gt box, bottom y)."""
    page_h = style.page_size[1]
    header_rows = int(rng.integers(style.header_rows_range[0], style.header_rows_range[1] + 1))
    content_rows = int(rng.integers(style.rows_range[0], style.rows_range[1] + 1))
    n_cols = len(spec.col_edges)
    # grid-edge columns keep their outer x flush so stacked pairs share extent
    droppable = [
        c for c in range(int(spec.left_header), n_cols)
        if c not in (0, n_cols - 1)
    ]

    blocks: list[TextBlock] = []
    y = y_top
    for r in range(header_rows + content_rows):
        is_header_row = r < header_rows
        height = float(rng.uniform(*style.row_height_range)) * page_h
        if is_header_row:
            height *= 1.1
        dropped = -1
        if not is_header_row and droppable and rng.random() < style.cell_dropout:
            dropped = droppable[int(rng.integers(len(droppable)))]
        for c, (cx1, cx2) in enumerate(spec.col_edges):
            if is_header_row and spec.left_header and c == 0:
                continue  # the corner above a row-header column stays empty
            if c == dropped:
                continue
            inset_l = 0.0 if c == 0 else float(rng.uniform(0.0, 0.15)) * spec.col_gap
            inset_r = 0.0 if c == n_cols - 1 else float(rng.uniform(0.0, 0.15)) * spec.col_gap
            if is_header_row:
                label = BlockLabel.COLUMN_HEADER
            elif spec.left_header and c == 0:
                label = BlockLabel.ROW_HEADER
            else:
                label = BlockLabel.CONTENT_CELL
            blocks.append(TextBlock(cx1 + inset_l, y, cx2 - inset_r, y + height, label=label))
        y += height
        if r < header_rows + content_rows - 1:
            y += float(rng.uniform(*style.row_gap_range)) * page_h
    return blocks, union_box([b.box for b in blocks]), y


def _materialize_paragraph(
    y_top: float, style: StyleProfile, rng: np.random.Generator
) -> tuple[list[TextBlock], float]:
    page_w, page_h = style.page_size
    usable_w = page_w * (1.0 - 2.0 * MARGIN_X_FRACTION)
    x0 = page_w * MARGIN_X_FRACTION
    width = float(rng.uniform(0.5, 1.0)) * usable_w
    x1 = x0 + float(rng.uniform(0.0, usable_w - width))
    n_lines = int(rng.integers(1, 5))
    y = y_top
    blocks = []
    for i in range(n_lines):
        height = float(rng.uniform(0.012, 0.016)) * page_h
        # last line of a paragraph is usually short
        w = width * (float(rng.uniform(0.4, 0.9)) if i == n_lines - 1 and n_lines > 1 else 1.0)
        blocks.append(TextBlock(x1, y, x1 + w, y + height, label=BlockLabel.OUTSIDE))
        y += height
        if i < n_lines - 1:
            y += float(rng.uniform(0.002, 0.005)) * page_h
    return blocks, y


def _layout_page(style: StyleProfile, rng: np.random.Generator, page_id: str) -> Page:
    page_w, page_h = style.page_size
    m = _MARGIN_FRACTION * page_h
    y_limit = page_h * (1.0 - MARGIN_Y_FRACTION)

    table_count = int(rng.integers(style.table_count_range[0], style.table_count_range[1] + 1))
    items: list[str] = []
    remaining = table_count
    while remaining > 0:
        if remaining >= 2 and rng.random() < style.stack_prob:
            items.append("stack")
            remaining -= 2
        else:
            items.append("table")
            remaining -= 1
    n_paras = int(
        rng.integers(style.paragraph_count_range[0], style.paragraph_count_range[1] + 1)
    )
    items.extend(["para"] * n_paras)
    items = [items[i] for i in rng.permutation(len(items))]

    blocks: list[TextBlock] = []
    tables: list[Box] = []
    y = page_h * MARGIN_Y_FRACTION + float(rng.uniform(0.0, 2.0 * m))
    for pos, kind in enumerate(items):
        if pos > 0:
            y += float(rng.uniform(3.0 * m, 8.0 * m))
        if kind == "para":
            para_blocks, y = _materialize_paragraph(y, style, rng)
            blocks.extend(para_blocks)
        elif kind == "table":
            spec = _sample_table_spec(style, rng)
            tbl_blocks, box, y = _materialize_table(spec, y, style, rng)
            blocks.extend(tbl_blocks)
            tables.append(box)
        else:  # stacked pair sharing one column layout
            spec = _sample_table_spec(style, rng)
            top_blocks, top_box, y = _materialize_table(spec, y, style, rng)
            y += float(rng.uniform(0.6 * m, 1.8 * m))
            bot_blocks, bot_box, y = _materialize_table(spec, y, style, rng)
            blocks.extend(top_blocks)
            blocks.extend(bot_blocks)
            tables.extend([top_box, bot_box])
        if y > y_limit:
            raise _RetryLayout("vertical flow exceeds the page height")

    return Page(page_id, page_w, page_h, tuple(blocks), tuple(tables))


def generate_page(style: StyleProfile, seed: int) -> Page:
    """One synthetic page, deterministic given (style, seed).

    Layout attempts that overflow the page are resampled from the same
    Philox stream; after MAX_LAYOUT_ATTEMPTS the generation fails with a
    LayoutError naming the violated constraint.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    page_id = f"{style.name}-{seed:08d}"
    last = "no attempt made"
    for _ in range(MAX_LAYOUT_ATTEMPTS):
        try:
            return _layout_page(style, rng, page_id)
        except _RetryLayout as exc:
            last = str(exc)
    raise LayoutError(
        f"page {page_id}: no valid layout in {MAX_LAYOUT_ATTEMPTS} attempts ({last})"
    )


def validate_page(page: Page) -> None:
    """Check the generator's label/geometry invariants; raise on violation.

    Every block must carry a label; a block intersecting a table box must
    lie inside it and be labeled in-table; blocks outside all boxes must
    be Outside; each table box must equal the union of its blocks (so its
    span is fully covered on both axes).
    """
    for i, block in enumerate(page.blocks):
        if block.label is None:
            raise PageValidationError(f"page {page.page_id}: block {i} is unlabeled")
        hits = [t for t in page.tables if intersection_area(block.box, t) > 0.0]
        if block.label is BlockLabel.OUTSIDE:
            if hits:
                raise PageValidationError(
                    f"page {page.page_id}: Outside block {i} intersects a table box"
                )
        else:
            if len(hits) != 1:
                raise PageValidationError(
                    f"page {page.page_id}: in-table block {i} hits {len(hits)} table boxes"
                )
            t = hits[0]
            inside = (
                block.x1 >= t[0] - 1e-6
                and block.y1 >= t[1] - 1e-6
                and block.x2 <= t[2] + 1e-6
                and block.y2 <= t[3] + 1e-6
            )
            if not inside:
                raise PageValidationError(
                    f"page {page.page_id}: block {i} sticks out of its table box"
                )
    for t in page.tables:
        members = [
            b.box for b in page.blocks
            if b.label is not BlockLabel.OUTSIDE and intersection_area(b.box, t) > 0.0
        ]
        if not members:
            raise PageValidationError(f"page {page.page_id}: table box {t} has no blocks")
        u = union_box(members)
        spans = (
            (u[2] - u[0]) / (t[2] - t[0]),
            (u[3] - u[1]) / (t[3] - t[1]),
        )
        if min(spans) < 0.9:
            raise PageValidationError(
                f"page {page.page_id}: blocks span only {min(spans):.3f} of box {t}"
            )
        if max(abs(a - b) for a, b in zip(u, t)) > 1e-6:
            raise PageValidationError(
                f"page {page.page_id}: table box {t} is not the union of its blocks {u}"
            )


def style_from_dict(data: dict) -> StyleProfile:
    """Build a StyleProfile from parsed JSON; unknown fields are rejected."""
    fields = {f for f in StyleProfile.__dataclass_fields__}
    unknown = set(data) - fields
    if unknown:
        raise ValueError(f"unknown StyleProfile fields: {sorted(unknown)}")
    missing = fields - set(data)
    if missing:
        raise ValueError(f"missing StyleProfile fields: {sorted(missing)}")
    coerced = {}
    for key, value in data.items():
        if key == "name":
            coerced[key] = str(value)
        elif isinstance(value, list):
            coerced[key] = tuple(value)
        else:
            coerced[key] = value
    return StyleProfile(**coerced)


def generate_corpus(
    style: StyleProfile,
    count: int,
    base_seed: int,
    out_dir: str | Path,
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> dict[str, Path]:
    """Generate pages seeded base_seed + index and write train/val/test.

    Returns {"train": path, "val": path, "test": path, "manifest": path}.
    The manifest records everything needed to regenerate the corpus
    byte-identically.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if abs(sum(split_fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {split_fractions}")

    n_val = int(count * split_fractions[1])
    n_test = int(count * split_fractions[2])
    n_train = count - n_val - n_test

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pages = [generate_page(style, base_seed + i) for i in range(count)]

    paths: dict[str, Path] = {}
    cursor = 0
    for split, n in (("train", n_train), ("val", n_val), ("test", n_test)):
        path = out_dir / f"{split}.jsonl"
        write_pages(pages[cursor : cursor + n], path)
        paths[split] = path
        cursor += n

    manifest = {
        "style": asdict(style),
        "base_seed": base_seed,
        "count": count,
        "split_fractions": list(split_fractions),
        "splits": {"train": n_train, "val": n_val, "test": n_test},
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    paths["manifest"] = manifest_path
    return paths


def corpus_from_manifest(manifest_path: str | Path, out_dir: str | Path) -> dict[str, Path]:
    """Regenerate a corpus byte-identically from its manifest."""
    data = json.loads(Path(manifest_path).read_text())
    style = style_from_dict(data["style"])
    return generate_corpus(
        style,
        count=int(data["count"]),
        base_seed=int(data["base_seed"]),
        out_dir=out_dir,
        split_fractions=tuple(data["split_fractions"]),
    )
