"""Figure rendering for zmix benchmark result CSVs."""

from zmixplot.figures import (
    FIGURE_KINDS,
    RESULT_HEADER,
    FigureSpec,
    MissingColumnError,
    read_results,
    render,
)

__all__ = [
    "FIGURE_KINDS",
    "RESULT_HEADER",
    "FigureSpec",
    "MissingColumnError",
    "read_results",
    "render",
]
