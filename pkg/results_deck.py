#!/usr/bin/env python3
"""
Render experiment summaries into a PowerPoint deck.

One title slide, one slide per summary table and one slide per accuracy
matrix, with matrix cells shaded by value (darker = higher).
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Mapping, Sequence, Union

import numpy as np
from pptx import Presentation
from pptx.dml.color import RGBColor
from pptx.enum.text import PP_ALIGN
from pptx.util import Inches, Pt

logger = logging.getLogger(__name__)

HEADER_RGB = (0, 51, 102)
MAX_TABLE_ROWS = 20


@dataclass
class ResultTable:
    title: str
    header: List[str]
    rows: List[List[object]] = field(default_factory=list)


def find_shape_by_name(slide, name):
    for shape in slide.shapes:
        if shape.name == name:
            return shape
    return None


def heat_color(value: float) -> RGBColor:
    """White at 0, header navy at 1; light grey for undefined cells."""
    if value is None or not np.isfinite(value):
        return RGBColor(230, 230, 230)
    v = min(max(float(value), 0.0), 1.0)
    return RGBColor(*(int(round(255 + (c - 255) * v)) for c in HEADER_RGB))


def _add_title(slide, text: str, name: str = "slide_title") -> None:
    title_box = slide.shapes.add_textbox(Inches(0.5), Inches(0.4), Inches(9), Inches(0.8))
    title_box.name = name
    title_frame = title_box.text_frame
    title_frame.text = text
    para = title_frame.paragraphs[0]
    para.font.size = Pt(28)
    para.font.bold = True
    para.font.color.rgb = RGBColor(*HEADER_RGB)
    para.alignment = PP_ALIGN.CENTER


def _add_table(slide, header: Sequence[str], n_rows: int, name: str):
    """Table with a formatted header row and ``n_rows`` empty data rows."""
    shape = slide.shapes.add_table(n_rows + 1, len(header), Inches(0.5), Inches(1.5),
                                   Inches(9), Inches(0.4) * (n_rows + 1))
    shape.name = name
    table = shape.table
    for col_idx, text in enumerate(header):
        cell = table.cell(0, col_idx)
        cell.text = str(text)
        cell.fill.solid()
        cell.fill.fore_color.rgb = RGBColor(*HEADER_RGB)
        paragraph = cell.text_frame.paragraphs[0]
        paragraph.font.bold = True
        paragraph.font.size = Pt(12)
        paragraph.font.color.rgb = RGBColor(255, 255, 255)
        paragraph.alignment = PP_ALIGN.CENTER
    return shape


def populate_table(table_shape, data, skip_header=True) -> bool:
    """Write ``data`` rows into a table shape; the header row is kept when ``skip_header``."""
    if not table_shape.has_table:
        logger.warning("Shape '%s' is not a table", table_shape.name)
        return False
    table = table_shape.table
    start_row = 1 if skip_header else 0
    available_rows = len(table.rows) - start_row
    if len(data) > available_rows:
        logger.warning("Data has %d rows but table only has %d available rows", len(data), available_rows)
    for data_idx, row_data in enumerate(data):
        table_row_idx = data_idx + start_row
        if table_row_idx >= len(table.rows):
            break
        for col_idx, cell_value in enumerate(row_data):
            if col_idx >= len(table.columns):
                break
            cell = table.cell(table_row_idx, col_idx)
            cell.text = str(cell_value)
            cell.text_frame.paragraphs[0].font.size = Pt(11)
    return True


def build_results_deck(tables: Sequence[ResultTable], heatmaps: Mapping[str, np.ndarray],
                       path: Union[str, Path], title: str = "Composition-IL results") -> Path:
    """Write the deck and return its path.

    Args:
        tables: summary tables (rows beyond MAX_TABLE_ROWS are dropped with a warning).
        heatmaps: name -> square accuracy matrix (rows: after task, columns: task;
            NaN cells are undefined).
        path: output .pptx path.
    """
    prs = Presentation()
    prs.slide_width = Inches(10)
    prs.slide_height = Inches(7.5)
    blank = prs.slide_layouts[6]

    slide = prs.slides.add_slide(blank)
    _add_title(slide, title)
    subtitle = slide.shapes.add_textbox(Inches(0.5), Inches(1.6), Inches(9), Inches(0.6))
    subtitle.name = "deck_contents"
    subtitle.text_frame.text = f"{len(tables)} table(s), {len(heatmaps)} accuracy matrix(es)"
    subtitle.text_frame.paragraphs[0].alignment = PP_ALIGN.CENTER

    for i, table in enumerate(tables):
        slide = prs.slides.add_slide(blank)
        _add_title(slide, table.title)
        rows = table.rows[:MAX_TABLE_ROWS]
        if len(table.rows) > MAX_TABLE_ROWS:
            logger.warning("Table '%s' truncated to %d rows", table.title, MAX_TABLE_ROWS)
        shape = _add_table(slide, table.header, max(len(rows), 1), f"results_table_{i}")
        populate_table(shape, rows, skip_header=True)

    for name, matrix in heatmaps.items():
        values = np.asarray(matrix, dtype=np.float64)
        n = values.shape[0]
        slide = prs.slides.add_slide(blank)
        _add_title(slide, name)
        header = ["after task"] + [f"task {j + 1}" for j in range(n)]
        shape = _add_table(slide, header, n, f"heat_{name}")
        populate_table(shape, [[t + 1] + ["" if np.isnan(v) else f"{100 * v:.1f}" for v in values[t]]
                               for t in range(n)])
        for t in range(n):
            for j in range(n):
                cell = shape.table.cell(t + 1, j + 1)
                cell.fill.solid()
                cell.fill.fore_color.rgb = heat_color(values[t, j])
                if np.isfinite(values[t, j]) and values[t, j] > 0.5:
                    cell.text_frame.paragraphs[0].font.color.rgb = RGBColor(255, 255, 255)

    path = Path(path)
    prs.save(str(path))
    logger.info("Results deck written to %s", path)
    return path
