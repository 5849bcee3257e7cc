"""Boxplot and density-overlay figures over benchmark result CSVs.

Rendering is a pure function of the input file: groups are ordered by first
appearance, the density overlay regenerates its proposal sample from a fixed
seed, and every figure's plotted data is returned to the caller so identical
inputs can be checked to plot identical values.
"""

from __future__ import annotations

import csv
import math
import os
import sys
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from scipy.stats import gaussian_kde

__all__ = [
    "FIGURE_KINDS",
    "RESULT_HEADER",
    "FigureSpec",
    "MissingColumnError",
    "read_results",
    "render",
]

#: Result-file schema this tool consumes (version 1 of the bench contract).
RESULT_HEADER = (
    "experiment_id,replicate,seed,estimator,N_used,K,m,s,T,scheme,kernel,"
    "z_hat,log_z_hat,k_eff,cost_units,wall_ns,status"
)

FIGURE_KINDS = ("logz_box", "keff_box", "density_overlay")

#: Overlay sample: fixed seed and size keep renders reproducible.
_OVERLAY_SEED = 0xD05E11
_OVERLAY_DRAWS = 4000
_GRID = np.linspace(-10.0, 10.0, 1001)


class MissingColumnError(ValueError):
    """The input file does not carry the expected result schema."""


@dataclass(frozen=True)
class FigureSpec:
    """What to render: input CSV, output directory, figure kind."""

    in_path: str
    out_dir: str
    kind: str
    group_keys: tuple[str, ...] = field(
        default=("estimator", "K", "m", "s", "T")
    )

    def __post_init__(self) -> None:
        if self.kind not in FIGURE_KINDS:
            raise ValueError(
                f"unknown figure kind {self.kind!r}; expected one of {FIGURE_KINDS}"
            )
        header = RESULT_HEADER.split(",")
        for key in self.group_keys:
            if key not in header:
                raise MissingColumnError(f"grouping key {key!r} is not a result column")


def read_results(path: str) -> list[dict[str, str]]:
    """Rows of the result file; the header must match the schema exactly."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = RESULT_HEADER.split(",")
        if header != expected:
            missing = sorted(set(expected) - set(header or []))
            raise MissingColumnError(
                f"input header does not match the result schema"
                f" (missing columns: {missing})" if missing
                else "input header does not match the result schema"
            )
        return [dict(zip(expected, row)) for row in reader]


def _warn(message: str) -> None:
    print(f"warning: {message}", file=sys.stderr)


def _ok_rows(rows: list[dict[str, str]]) -> list[dict[str, str]]:
    return [row for row in rows if row["status"] == "ok"]


def _by_experiment(rows: list[dict[str, str]]) -> dict[str, list[dict[str, str]]]:
    out: dict[str, list[dict[str, str]]] = {}
    for row in rows:
        out.setdefault(row["experiment_id"], []).append(row)
    return out


def _group_labels(rows: list[dict[str, str]], keys: tuple[str, ...]) -> list[tuple[str, list[dict[str, str]]]]:
    """Rows bucketed by the grouping keys, labeled compactly.

    The estimator name always appears; the other keys join the label only
    when they vary inside the experiment, so a single-instance experiment
    reads as plain estimator names.
    """
    varying = [
        key for key in keys
        if key != "estimator" and len({row[key] for row in rows}) > 1
    ]
    buckets: dict[tuple[str, ...], list[dict[str, str]]] = {}
    order: list[tuple[str, ...]] = []
    for row in rows:
        key = tuple(row[k] for k in keys)
        if key not in buckets:
            buckets[key] = []
            order.append(key)
        buckets[key].append(row)
    labeled = []
    for key in order:
        first = buckets[key][0]
        label = first["estimator"]
        for k in varying:
            label += f" {k}={first[k] or '-'}"
        labeled.append((label, buckets[key]))
    return labeled


def _boxplot(path: str, boxes: dict[str, np.ndarray], ylabel: str,
             title: str, reference: float | None) -> None:
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(boxes), 4.0))
    ax.boxplot(list(boxes.values()), tick_labels=list(boxes.keys()),
               whis=1.5, showfliers=True)
    if reference is not None:
        ax.axhline(reference, color="0.4", linestyle="--", linewidth=1.0)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _render_boxes(spec: FigureSpec, rows, value_of, suffix: str, ylabel: str,
                  reference: float | None) -> dict[str, dict]:
    rendered: dict[str, dict] = {}
    for exp, exp_rows in _by_experiment(rows).items():
        boxes: dict[str, np.ndarray] = {}
        for label, members in _group_labels(exp_rows, spec.group_keys):
            alive = _ok_rows(members)
            if not alive:
                _warn(f"{exp}: group {label!r} has no usable rows, skipped")
                continue
            boxes[label] = np.array([value_of(row) for row in alive])
        if not boxes:
            _warn(f"{exp}: nothing to draw for {suffix}, skipped")
            continue
        name = f"{exp}_{suffix}.png"
        _boxplot(os.path.join(spec.out_dir, name), boxes, ylabel, exp, reference)
        data: dict = {"boxes": boxes}
        if reference is not None:
            data["reference_line"] = reference
        rendered[name] = data
    return rendered


def _label_law_sample(k: int, m: float, s: float, size: int,
                      rng: np.random.Generator) -> np.ndarray:
    """Labels 1..k from the shifted beta-binomial law used by the bench."""
    if k == 1 or m == 0.0:
        return np.ones(size, dtype=np.int64)
    if m == 1.0:
        return np.full(size, k, dtype=np.int64)
    if math.isinf(s):
        return 1 + rng.binomial(k - 1, m, size=size)
    p = rng.beta(m * s, (1.0 - m) * s, size=size)
    return 1 + rng.binomial(k - 1, p)


def _proposal_sample(k: int, m: float, s: float, size: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Points from the default Gaussian-grid pool (means spanning [-5, 5])."""
    mus = np.array([0.0]) if k == 1 else np.linspace(-5.0, 5.0, k)
    labels = _label_law_sample(k, m, s, size, rng)
    return mus[labels - 1] + math.sqrt(2.0) * rng.standard_normal(size)


def _render_overlay(spec: FigureSpec, rows) -> dict[str, dict]:
    rendered: dict[str, dict] = {}
    for exp, exp_rows in _by_experiment(rows).items():
        alive = _ok_rows(exp_rows)
        if not alive:
            _warn(f"{exp}: no usable rows, skipped")
            continue
        instances = {(row["K"], row["m"], row["s"]) for row in alive}
        k_raw, m_raw, s_raw = sorted(instances)[0]
        if len(instances) > 1:
            _warn(f"{exp}: multiple instances in one experiment, using K={k_raw}")
        if not m_raw:
            _warn(f"{exp}: no component pool to overlay (joint-only proposal), skipped")
            continue
        k, m, s = int(k_raw), float(m_raw), float(s_raw)
        rng = np.random.default_rng(_OVERLAY_SEED)
        sample = _proposal_sample(k, m, s, _OVERLAY_DRAWS, rng)
        target = np.exp(-0.5 * _GRID**2) / math.sqrt(2.0 * math.pi)
        kde = gaussian_kde(sample)(_GRID)

        name = f"{exp}_density_overlay.png"
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        ax.fill_between(_GRID, target, alpha=0.35, label="target")
        ax.plot(_GRID, kde, linewidth=1.4, label=f"proposal pool (K={k})")
        ax.set_xlabel("x")
        ax.set_ylabel("density")
        ax.set_title(exp)
        ax.legend()
        fig.tight_layout()
        fig.savefig(os.path.join(spec.out_dir, name))
        plt.close(fig)
        rendered[name] = {
            "grid": _GRID.copy(),
            "target": target,
            "kde": kde,
            "instance": (k, m, s),
            "sample_size": _OVERLAY_DRAWS,
        }
    return rendered


def render(spec: FigureSpec) -> dict[str, dict]:
    """Write one image per (experiment, kind); return each file's plotted data."""
    rows = read_results(spec.in_path)
    os.makedirs(spec.out_dir, exist_ok=True)
    if spec.kind == "logz_box":
        return _render_boxes(
            spec, rows, lambda row: float(row["log_z_hat"]),
            "logz_box", "log estimate", reference=0.0,
        )
    if spec.kind == "keff_box":
        return _render_boxes(
            spec, rows, lambda row: float(row["k_eff"]) / float(row["K"]),
            "keff_box", "distinct labels / K", reference=None,
        )
    return _render_overlay(spec, rows)
