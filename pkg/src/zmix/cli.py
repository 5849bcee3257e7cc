"""Configuration-driven command line: run, oracle, summarize, selftest.

Config files are INI-style with sections ``[run]``, ``[target]``,
``[proposal]``, ``[estimators]`` and ``[annealing]``.  Unknown sections or
keys are fatal — a misspelled key must never silently fall back to a
default.  The grammar is versioned through the required
``schema_version`` key in ``[run]``; this build understands version 1.

Exit codes: 0 success, 1 selftest failure, 2 configuration error, 3 I/O
error.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from zmix.bench import (
    CSV_HEADER,
    ESTIMATOR_NAMES,
    SCHEMA_VERSION,
    ExperimentConfig,
    betabinom_label_pmf,
    make_ordered_insert_example,
    make_running_example,
    run_experiment,
)
from zmix.combination import gf1_config, gf2_config, gf_normalizer_exact
from zmix.core import adapt_tractable_as_joint, counts_from_labels
from zmix.oracles import QuadratureSpec, quadrature_tau, quadrature_z

__all__ = [
    "CliInvocation",
    "ConfigError",
    "cmd_oracle",
    "cmd_run",
    "cmd_selftest",
    "cmd_summarize",
    "main",
    "parse_config",
]

_TAU_PRINT_LIMIT = 64


class ConfigError(ValueError):
    """A config file or override failed validation; the message names the key."""


@dataclass(frozen=True)
class CliInvocation:
    """Parsed command line: what to do and where to read/write."""

    subcommand: str
    config_path: str | None = None
    in_path: str | None = None
    out_path: str | None = None
    workers: int = 0
    overrides: tuple[str, ...] = field(default_factory=tuple)


_SCHEMA = {
    "run": {
        "schema_version",
        "experiment_id",
        "seed",
        "n_points",
        "replicates",
        "cost_matching",
        "record_wall_time",
    },
    "target": {"kind"},
    "proposal": {"kind", "k", "m", "s", "mu_min", "mu_max", "base_size"},
    "estimators": {"names"},
    "annealing": {"t", "scheme", "kernel", "mh_steps", "mh_step_std"},
}

_TARGET_FOR_PROPOSAL = {
    "gaussian_grid": "std_normal",
    "ordered_insert": "ascending_product_normal",
}

_TRUE_TOKENS = {"1", "true", "yes", "on"}
_FALSE_TOKENS = {"0", "false", "no", "off"}


def _to_int(section: str, key: str, raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected an integer, got {raw!r}") from None


def _to_float(section: str, key: str, raw: str) -> float:
    try:
        return float(raw)  # accepts the documented "inf" token
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected a number, got {raw!r}") from None


def _to_bool(section: str, key: str, raw: str) -> bool:
    low = raw.strip().lower()
    if low in _TRUE_TOKENS:
        return True
    if low in _FALSE_TOKENS:
        return False
    raise ConfigError(f"[{section}] {key}: expected on/off, got {raw!r}")


def parse_config(text: str, overrides: tuple[str, ...] = ()) -> ExperimentConfig:
    """Validate config text (plus ``section.key=value`` overrides) strictly."""
    import configparser

    cp = configparser.ConfigParser(
        interpolation=None, inline_comment_prefixes=("#", ";")
    )
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from None

    values: dict[str, dict[str, str]] = {}
    for section in cp.sections():
        low = section.lower()
        if low not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        values[low] = {}
        for key, raw in cp.items(section):
            if key not in _SCHEMA[low]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            values[low][key] = raw

    for item in overrides:
        head, eq, raw = item.partition("=")
        if not eq:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        section, dot, key = head.partition(".")
        section, key = section.strip().lower(), key.strip().lower()
        if not dot or section not in _SCHEMA:
            raise ConfigError(f"override {item!r} does not name a known section")
        if key not in _SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        values.setdefault(section, {})[key] = raw.strip()

    run = values.get("run", {})
    if "schema_version" not in run:
        raise ConfigError("[run] schema_version is required")
    version = _to_int("run", "schema_version", run["schema_version"])
    if version != SCHEMA_VERSION:
        raise ConfigError(
            f"[run] schema_version: this build understands {SCHEMA_VERSION}, got {version}"
        )
    if "seed" not in run:
        raise ConfigError("[run] seed is required")

    proposal = values.get("proposal", {})
    proposal_kind = proposal.get("kind", "gaussian_grid")
    target_kind = values.get("target", {}).get("kind")
    expected_target = _TARGET_FOR_PROPOSAL.get(proposal_kind)
    if expected_target is None:
        raise ConfigError(f"[proposal] kind: unknown proposal {proposal_kind!r}")
    if target_kind is not None and target_kind != expected_target:
        raise ConfigError(
            f"[target] kind: proposal {proposal_kind!r} pairs with "
            f"{expected_target!r}, got {target_kind!r}"
        )

    estimators = values.get("estimators", {})
    if "names" in estimators:
        names = tuple(n.strip() for n in estimators["names"].split(",") if n.strip())
    else:
        names = ("z_bh", "z_rb")

    annealing = values.get("annealing", {})

    kwargs: dict[str, object] = {
        "experiment_id": run.get("experiment_id", "experiment"),
        "seed": _to_int("run", "seed", run["seed"]),
        "n_points": _to_int("run", "n_points", run.get("n_points", "500")),
        "replicates": _to_int("run", "replicates", run.get("replicates", "200")),
        "estimators": names,
        "proposal": proposal_kind,
        "T": _to_int("annealing", "t", annealing.get("t", "21")),
        "scheme": annealing.get("scheme", "purely_geometric"),
        "kernel": annealing.get("kernel", "mh_random_walk"),
        "mh_steps": _to_int("annealing", "mh_steps", annealing.get("mh_steps", "10")),
        "mh_step_std": _to_float(
            "annealing", "mh_step_std", annealing.get("mh_step_std", "1.0")
        ),
    }
    if "cost_matching" in run:
        kwargs["cost_matching"] = _to_bool("run", "cost_matching", run["cost_matching"])
    if "record_wall_time" in run:
        kwargs["record_wall_time"] = _to_bool(
            "run", "record_wall_time", run["record_wall_time"]
        )
    if proposal_kind == "gaussian_grid":
        if "base_size" in proposal:
            raise ConfigError("[proposal] base_size applies to ordered_insert only")
        kwargs["K"] = _to_int("proposal", "k", proposal.get("k", "3"))
        kwargs["m"] = _to_float("proposal", "m", proposal.get("m", "0.5"))
        kwargs["s"] = _to_float("proposal", "s", proposal.get("s", "2.0"))
        kwargs["mu_min"] = _to_float("proposal", "mu_min", proposal.get("mu_min", "-5.0"))
        kwargs["mu_max"] = _to_float("proposal", "mu_max", proposal.get("mu_max", "5.0"))
    else:
        for key in ("k", "m", "s", "mu_min", "mu_max"):
            if key in proposal:
                raise ConfigError(f"[proposal] {key} applies to gaussian_grid only")
        kwargs["base_size"] = _to_int(
            "proposal", "base_size", proposal.get("base_size", "4")
        )

    try:
        return ExperimentConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _load_config(inv: CliInvocation) -> ExperimentConfig:
    if not inv.config_path:
        raise ConfigError("--config is required for this subcommand")
    try:
        with open(inv.config_path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config(text, inv.overrides)


def _open_sink(path: str | None):
    """Output file handle plus a flag saying whether the caller must close it."""
    if path is None or path == "-":
        return sys.stdout, False
    return open(path, "w", encoding="utf-8", newline=""), True


def cmd_run(inv: CliInvocation) -> int:
    try:
        config = _load_config(inv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    workers = inv.workers if inv.workers > 0 else (os.cpu_count() or 1)
    try:
        sink, owned = _open_sink(inv.out_path)
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    try:
        rows = run_experiment(config, sink, workers=workers)
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    finally:
        if owned:
            sink.close()
    failures = sum(1 for row in rows if row[-1] != "ok")
    if failures:
        print(f"warning: {failures} estimator failures recorded", file=sys.stderr)
    return 0


def _oracle_rows(config: ExperimentConfig) -> list[tuple[str, str, str]]:
    rows: list[tuple[str, str, str]] = []
    spec = QuadratureSpec()
    if config.proposal == "ordered_insert":
        z_true = 1.0 / math.factorial(config.base_size + 1)
        rows.append(("z_analytic", "", "%.17g" % z_true))
        return rows

    target, family = make_running_example(
        config.K, config.m, config.s, config.mu_min, config.mu_max
    )
    joint = adapt_tractable_as_joint(family)
    rows.append(("z_quadrature", "", "%.17g" % quadrature_z(target, spec)))

    if config.K <= _TAU_PRINT_LIMIT:
        chosen = np.arange(1, config.K + 1)
    else:
        pmf = betabinom_label_pmf(config.K, config.m, config.s, np.arange(1, config.K + 1))
        top = np.argsort(-pmf, kind="stable")[:_TAU_PRINT_LIMIT]
        chosen = np.sort(top) + 1
    tau = quadrature_tau(
        target,
        lambda xs, label: joint.log_joint_density(xs, np.full(xs.shape[0], label)),
        chosen,
        spec,
    )
    for label, value in zip(chosen, tau):
        rows.append(("tau", str(int(label)), "%.17g" % value))
    if config.K > _TAU_PRINT_LIMIT:
        rows.append(("tau_truncated", "", str(config.K - _TAU_PRINT_LIMIT)))

    if config.n_points <= 4 and config.K <= 3:
        alpha = betabinom_label_pmf(
            config.K, config.m, config.s, np.arange(1, config.K + 1)
        )
        n = config.n_points
        k = config.K
        z1 = gf_normalizer_exact(
            lambda smp: gf1_config(counts_from_labels(smp.labels), k, smp.n),
            target,
            joint,
            alpha,
            n,
            spec,
        )
        z2 = gf_normalizer_exact(
            lambda smp: gf2_config(
                smp, joint, counts_from_labels(smp.labels), k, smp.n
            ),
            target,
            joint,
            alpha,
            n,
            spec,
        )
        rows.append(("gf_normalizer_gf1", "", "%.17g" % z1))
        rows.append(("gf_normalizer_gf2", "", "%.17g" % z2))
    return rows


def cmd_oracle(inv: CliInvocation) -> int:
    try:
        config = _load_config(inv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        sink, owned = _open_sink(inv.out_path)
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    try:
        writer = csv.writer(sink, lineterminator="\n")
        writer.writerow(["quantity", "index", "value"])
        writer.writerows(_oracle_rows(config))
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    finally:
        if owned:
            sink.close()
    return 0


def _summary_rows(reader: csv.reader) -> list[list[str]]:
    header = next(reader, None)
    if header != CSV_HEADER.split(","):
        raise ValueError("input does not carry the result-file header")
    groups: dict[tuple[str, str], dict[str, list[float]]] = {}
    order: list[tuple[str, str]] = []
    for line_no, row in enumerate(reader, start=2):
        if len(row) != len(CSV_HEADER.split(",")):
            raise ValueError(f"line {line_no}: wrong field count")
        status = row[16]
        if status != "ok":
            continue
        key = (row[0], row[3])
        try:
            log_z = float(row[12])
            keff = float(row[13])
            cost = float(row[14])
        except ValueError:
            raise ValueError(f"line {line_no}: malformed numeric field") from None
        if key not in groups:
            groups[key] = {"log_z": [], "k_eff": [], "cost": []}
            order.append(key)
        groups[key]["log_z"].append(log_z)
        groups[key]["k_eff"].append(keff)
        groups[key]["cost"].append(cost)

    out: list[list[str]] = []
    for key in order:
        data = groups[key]
        log_z = np.asarray(data["log_z"])
        count = log_z.size
        mean = float(log_z.mean())
        var = float(log_z.var(ddof=1)) if count > 1 else 0.0
        qs = np.quantile(log_z, [0.05, 0.25, 0.50, 0.75, 0.95])
        out.append(
            [
                key[0],
                key[1],
                str(count),
                "%.17g" % mean,
                "%.17g" % var,
                *("%.17g" % q for q in qs),
                "%.17g" % float(np.mean(data["k_eff"])),
                "%.17g" % float(np.mean(data["cost"])),
            ]
        )
    return out


def cmd_summarize(inv: CliInvocation) -> int:
    path = inv.in_path or inv.config_path
    if not path:
        print("config error: summarize needs --in RESULTS.csv", file=sys.stderr)
        return 2
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            rows = _summary_rows(csv.reader(fh))
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, StopIteration) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    try:
        sink, owned = _open_sink(inv.out_path)
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    try:
        writer = csv.writer(sink, lineterminator="\n")
        writer.writerow(
            [
                "experiment_id",
                "estimator",
                "count",
                "log_z_mean",
                "log_z_var",
                "q05",
                "q25",
                "q50",
                "q75",
                "q95",
                "k_eff_mean",
                "cost_units_mean",
            ]
        )
        writer.writerows(rows)
    finally:
        if owned:
            sink.close()
    return 0


def cmd_selftest(inv: CliInvocation) -> int:
    """Fast internal consistency run; prints one line per check."""
    from zmix.annealing import ais_modified, KernelConfig, linear_schedule
    from zmix.combination import beta_opt, z_beta
    from zmix.core import RngStream, draw_labeled_sample
    from zmix.estimators import z_bh, z_rb

    failures = 0

    def check(name: str, ok: bool) -> None:
        nonlocal failures
        print(f"{'ok' if ok else 'FAIL'} - {name}")
        failures += 0 if ok else 1

    sched = linear_schedule(5)
    check("linear schedule endpoints", sched.gammas[0] == 0.0 and sched.gammas[-1] == 1.0)

    target, family = make_running_example(3, 0.5, 2.0)
    joint = adapt_tractable_as_joint(family)
    z = quadrature_z(target, QuadratureSpec())
    check("running-example constant is 1", abs(z - 1.0) < 1e-10)

    stream = RngStream(seed=2024, address=())
    # The annealers draw their starting sample from substream 0.
    sample = draw_labeled_sample(family, 64, stream.substream(0).generator())
    r_rb = z_rb(sample, target, family)
    r_opt = z_beta(sample, target, joint, beta_opt(joint))
    check(
        "posterior-weighted equals Rao-Blackwellized",
        abs(r_opt.z_hat - r_rb.z_hat) <= 1e-12 * abs(r_rb.z_hat),
    )

    r_bh = z_bh(sample, target, family)
    r_T1 = ais_modified(
        64, 1, "purely_geometric", KernelConfig(), family, target, stream
    )
    check(
        "one-transition annealing equals one-shot estimate",
        abs(r_T1.z_hat - r_bh.z_hat) <= 1e-12 * abs(r_bh.z_hat),
    )

    cfg = ExperimentConfig(
        experiment_id="selftest", seed=5, n_points=24, replicates=2,
        estimators=("z_bh", "z_rb"), K=3,
    )
    first, second = io.StringIO(), io.StringIO()
    run_experiment(cfg, first, workers=1)
    run_experiment(cfg, second, workers=2)
    check("runner output worker-invariant", first.getvalue() == second.getvalue())

    print("selftest:", "ok" if failures == 0 else f"{failures} failures")
    return 0 if failures == 0 else 1


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="zmix",
        description="Normalizing-constant estimation benchmarks over randomly "
        "selected proposal pools.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add_common(p: argparse.ArgumentParser, config: bool) -> None:
        if config:
            p.add_argument("--config", required=True, help="INI config path")
            p.add_argument(
                "--override",
                action="append",
                default=[],
                metavar="KEY=VALUE",
                help="override a config entry, KEY is section.key (repeatable)",
            )
        p.add_argument("--out", default=None, help="output path (default stdout)")

    p_run = sub.add_parser("run", help="run an experiment config to a result CSV")
    add_common(p_run, config=True)
    p_run.add_argument(
        "--workers",
        type=int,
        default=0,
        help="worker processes (default: hardware parallelism)",
    )

    p_oracle = sub.add_parser("oracle", help="print reference values for a config")
    add_common(p_oracle, config=True)

    p_sum = sub.add_parser("summarize", help="summarize a result CSV")
    p_sum.add_argument("--in", dest="in_path", required=True, help="result CSV path")
    p_sum.add_argument("--out", default=None, help="output path (default stdout)")

    sub.add_parser("selftest", help="run fast internal consistency checks")

    ns = parser.parse_args(argv)
    inv = CliInvocation(
        subcommand=ns.subcommand,
        config_path=getattr(ns, "config", None),
        in_path=getattr(ns, "in_path", None),
        out_path=getattr(ns, "out", None),
        workers=getattr(ns, "workers", 0),
        overrides=tuple(getattr(ns, "override", ())),
    )
    dispatch = {
        "run": cmd_run,
        "oracle": cmd_oracle,
        "summarize": cmd_summarize,
        "selftest": cmd_selftest,
    }
    return dispatch[inv.subcommand](inv)


if __name__ == "__main__":
    sys.exit(main())
