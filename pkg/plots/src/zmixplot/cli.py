"""Command line: render one figure kind from a result CSV into a directory.

Exit codes: 0 success, 2 bad arguments or malformed input schema, 3 I/O error.
"""

from __future__ import annotations

import argparse
import sys

from zmixplot.figures import FIGURE_KINDS, FigureSpec, MissingColumnError, render


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="zmixplot",
        description="Render zmix benchmark CSVs into figures.",
    )
    parser.add_argument("--in", dest="in_path", required=True, help="result CSV path")
    parser.add_argument("--out", dest="out_dir", required=True, help="output directory")
    parser.add_argument("--kind", required=True, choices=FIGURE_KINDS,
                        help="figure kind to render")
    ns = parser.parse_args(argv)

    spec = FigureSpec(in_path=ns.in_path, out_dir=ns.out_dir, kind=ns.kind)
    try:
        rendered = render(spec)
    except MissingColumnError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    for name in rendered:
        print(f"wrote {spec.out_dir}/{name}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
