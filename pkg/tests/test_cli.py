"""Config parsing, subcommand behavior, and exit codes."""

import csv
import io
import math

import numpy as np
import pytest

from zmix.bench import CSV_HEADER, run_experiment
from zmix.cli import (
    CliInvocation,
    ConfigError,
    cmd_oracle,
    cmd_run,
    cmd_selftest,
    cmd_summarize,
    main,
    parse_config,
)

MINIMAL = """
[run]
schema_version = 1
seed = 7
"""

TINY_RUN = """
[run]
schema_version = 1
experiment_id = cli-tiny
seed = 7
n_points = 20
replicates = 2

[estimators]
names = z_bh

[proposal]
k = 3
"""


class TestParseConfig:
    def test_minimal_config_fills_documented_defaults(self):
        cfg = parse_config(MINIMAL)
        assert cfg.seed == 7
        assert cfg.n_points == 500
        assert cfg.replicates == 200
        assert cfg.estimators == ("z_bh", "z_rb")
        assert cfg.proposal == "gaussian_grid"
        assert (cfg.K, cfg.m, cfg.s) == (3, 0.5, 2.0)
        assert (cfg.mu_min, cfg.mu_max) == (-5.0, 5.0)
        assert cfg.T == 21
        assert cfg.scheme == "purely_geometric"
        assert cfg.kernel == "mh_random_walk"
        assert cfg.mh_steps == 10
        assert cfg.mh_step_std == 1.0

    def test_unknown_section_is_fatal(self):
        with pytest.raises(ConfigError, match=r"\[runner\]"):
            parse_config(MINIMAL + "\n[runner]\nx = 1\n")

    def test_unknown_key_is_fatal(self):
        with pytest.raises(ConfigError, match="n_point"):
            parse_config("[run]\nschema_version = 1\nseed = 1\nn_point = 50\n")

    def test_schema_version_required_and_checked(self):
        with pytest.raises(ConfigError, match="schema_version"):
            parse_config("[run]\nseed = 1\n")
        with pytest.raises(ConfigError, match="schema_version"):
            parse_config("[run]\nschema_version = 2\nseed = 1\n")

    def test_seed_required(self):
        with pytest.raises(ConfigError, match="seed"):
            parse_config("[run]\nschema_version = 1\n")

    def test_infinite_spread_token(self):
        cfg = parse_config(MINIMAL + "\n[proposal]\ns = inf\n")
        assert cfg.s == math.inf

    def test_non_numeric_value_names_the_key(self):
        with pytest.raises(ConfigError, match="n_points"):
            parse_config("[run]\nschema_version = 1\nseed = 1\nn_points = many\n")

    def test_boolean_tokens(self):
        assert parse_config(MINIMAL + "\ncost_matching = off\n").cost_matching is False
        assert parse_config(MINIMAL + "\ncost_matching = yes\n").cost_matching is True
        with pytest.raises(ConfigError, match="cost_matching"):
            parse_config(MINIMAL + "\ncost_matching = maybe\n")

    def test_overrides_replace_file_values(self):
        cfg = parse_config(MINIMAL, overrides=("run.seed=9", "proposal.k=5"))
        assert cfg.seed == 9
        assert cfg.K == 5

    def test_override_must_name_known_section_and_key(self):
        with pytest.raises(ConfigError):
            parse_config(MINIMAL, overrides=("run.seed",))
        with pytest.raises(ConfigError):
            parse_config(MINIMAL, overrides=("seed=9",))
        with pytest.raises(ConfigError):
            parse_config(MINIMAL, overrides=("run.sede=9",))

    def test_estimator_names_split_and_stripped(self):
        cfg = parse_config(MINIMAL + "\n[estimators]\nnames = z_rb , z_beta_uniform\n")
        assert cfg.estimators == ("z_rb", "z_beta_uniform")

    def test_unknown_estimator_surfaces_as_config_error(self):
        with pytest.raises(ConfigError, match="z_bogus"):
            parse_config(MINIMAL + "\n[estimators]\nnames = z_bogus\n")

    def test_proposal_kind_checks(self):
        with pytest.raises(ConfigError, match="kind"):
            parse_config(MINIMAL + "\n[proposal]\nkind = mixture\n")
        with pytest.raises(ConfigError, match="base_size"):
            parse_config(MINIMAL + "\n[proposal]\nbase_size = 4\n")
        with pytest.raises(ConfigError, match="applies to gaussian_grid"):
            parse_config(
                MINIMAL + "\n[proposal]\nkind = ordered_insert\nk = 3\n"
            )

    def test_target_kind_must_match_proposal(self):
        cfg = parse_config(MINIMAL + "\n[target]\nkind = std_normal\n")
        assert cfg.proposal == "gaussian_grid"
        with pytest.raises(ConfigError, match="pairs with"):
            parse_config(
                MINIMAL
                + "\n[target]\nkind = std_normal\n[proposal]\nkind = ordered_insert\n"
            )

    def test_ordered_insert_config(self):
        cfg = parse_config(
            "[run]\nschema_version = 1\nseed = 3\n"
            "[proposal]\nkind = ordered_insert\nbase_size = 2\n"
            "[estimators]\nnames = z_beta_uniform\n"
        )
        assert cfg.proposal == "ordered_insert"
        assert cfg.base_size == 2

    def test_component_estimators_rejected_on_joint_only_proposal(self):
        with pytest.raises(ConfigError, match="z_bh"):
            parse_config(
                "[run]\nschema_version = 1\nseed = 3\n"
                "[proposal]\nkind = ordered_insert\n"
                "[estimators]\nnames = z_bh\n"
            )

    def test_inline_comments_are_stripped(self):
        cfg = parse_config("[run]\nschema_version = 1\nseed = 7  # reproducible\n")
        assert cfg.seed == 7


class TestCmdRun:
    def test_writes_csv_and_returns_zero(self, tmp_path):
        config = tmp_path / "exp.ini"
        config.write_text(TINY_RUN)
        out = tmp_path / "results.csv"
        inv = CliInvocation(
            subcommand="run", config_path=str(config), out_path=str(out), workers=1
        )
        assert cmd_run(inv) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == CSV_HEADER
        assert len(lines) == 3  # two replicates of one estimator

    def test_override_flows_through(self, tmp_path):
        config = tmp_path / "exp.ini"
        config.write_text(TINY_RUN)
        out = tmp_path / "results.csv"
        inv = CliInvocation(
            subcommand="run",
            config_path=str(config),
            out_path=str(out),
            workers=1,
            overrides=("run.replicates=3",),
        )
        assert cmd_run(inv) == 0
        assert len(out.read_text().splitlines()) == 4

    def test_bad_config_exits_two(self, tmp_path, capsys):
        config = tmp_path / "exp.ini"
        config.write_text("[run]\nschema_version = 1\n")
        inv = CliInvocation(subcommand="run", config_path=str(config))
        assert cmd_run(inv) == 2
        assert "config error" in capsys.readouterr().err

    def test_missing_config_file_exits_two(self, tmp_path):
        inv = CliInvocation(subcommand="run", config_path=str(tmp_path / "nope.ini"))
        assert cmd_run(inv) == 2

    def test_unwritable_output_exits_three(self, tmp_path, capsys):
        config = tmp_path / "exp.ini"
        config.write_text(TINY_RUN)
        inv = CliInvocation(
            subcommand="run",
            config_path=str(config),
            out_path=str(tmp_path / "missing" / "results.csv"),
            workers=1,
        )
        assert cmd_run(inv) == 3
        assert "i/o error" in capsys.readouterr().err


class TestCmdOracle:
    def _rows(self, tmp_path, text):
        config = tmp_path / "exp.ini"
        config.write_text(text)
        out = tmp_path / "oracle.csv"
        inv = CliInvocation(subcommand="oracle", config_path=str(config), out_path=str(out))
        assert cmd_oracle(inv) == 0
        with open(out, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["quantity", "index", "value"]
        return rows[1:]

    def test_gaussian_grid_reference_values(self, tmp_path):
        rows = self._rows(tmp_path, MINIMAL)
        by_kind = {}
        for quantity, index, value in rows:
            by_kind.setdefault(quantity, []).append((index, value))
        assert float(by_kind["z_quadrature"][0][1]) == pytest.approx(1.0, abs=1e-10)
        taus = by_kind["tau"]
        assert [index for index, _ in taus] == ["1", "2", "3"]
        # centre component of the wide grid: variance-2 proposal against the
        # standard normal gives 2 sqrt(3)
        assert float(taus[1][1]) == pytest.approx(2.0 * math.sqrt(3.0), rel=1e-9)
        assert "tau_truncated" not in by_kind

    def test_tau_listing_truncates_at_sixty_four(self, tmp_path):
        rows = self._rows(tmp_path, MINIMAL + "\n[proposal]\nk = 70\n")
        taus = [row for row in rows if row[0] == "tau"]
        trunc = [row for row in rows if row[0] == "tau_truncated"]
        assert len(taus) == 64
        assert trunc == [["tau_truncated", "", "6"]]

    def test_tiny_run_emits_slot_weighted_normalizers(self, tmp_path):
        rows = self._rows(
            tmp_path, "[run]\nschema_version = 1\nseed = 7\nn_points = 3\n"
        )
        by_kind = {row[0]: row[2] for row in rows}
        assert float(by_kind["gf_normalizer_gf1"]) == pytest.approx(1.0, abs=1e-8)
        assert math.isfinite(float(by_kind["gf_normalizer_gf2"]))

    def test_large_run_omits_normalizer_rows(self, tmp_path):
        rows = self._rows(tmp_path, MINIMAL)
        assert all(not row[0].startswith("gf_normalizer") for row in rows)

    def test_ordered_insert_analytic_value(self, tmp_path):
        rows = self._rows(
            tmp_path,
            "[run]\nschema_version = 1\nseed = 3\n"
            "[proposal]\nkind = ordered_insert\nbase_size = 2\n"
            "[estimators]\nnames = z_beta_uniform\n",
        )
        assert rows == [["z_analytic", "", "%.17g" % (1.0 / 6.0)]]


def _result_line(exp, rep, est, log_z, k_eff=3, cost=60, status="ok"):
    z = "%.17g" % math.exp(log_z) if status == "ok" else ""
    lz = "%.17g" % log_z if status == "ok" else ""
    ke = str(k_eff) if status == "ok" else ""
    cu = str(cost) if status == "ok" else ""
    return ",".join(
        [exp, str(rep), "7", est, "20", "3", "0.5", "2", "", "", "", z, lz, ke, cu, "0", status]
    )


class TestCmdSummarize:
    def _summarize(self, tmp_path, lines):
        src = tmp_path / "results.csv"
        src.write_text("\n".join([CSV_HEADER, *lines]) + "\n")
        out = tmp_path / "summary.csv"
        inv = CliInvocation(subcommand="summarize", in_path=str(src), out_path=str(out))
        code = cmd_summarize(inv)
        rows = []
        if out.exists():
            with open(out, newline="") as fh:
                rows = list(csv.reader(fh))
        return code, rows

    def test_quantiles_and_moments_per_group(self, tmp_path):
        lines = [
            _result_line("e", 1, "z_bh", 1.0),
            _result_line("e", 2, "z_bh", 2.0),
            _result_line("e", 3, "z_bh", 3.0),
            _result_line("e", 1, "z_rb", 5.0),
        ]
        code, rows = self._summarize(tmp_path, lines)
        assert code == 0
        assert rows[0][:5] == ["experiment_id", "estimator", "count", "log_z_mean", "log_z_var"]
        bh = rows[1]
        assert bh[:3] == ["e", "z_bh", "3"]
        assert float(bh[3]) == pytest.approx(2.0)
        assert float(bh[4]) == pytest.approx(1.0)
        assert float(bh[7]) == pytest.approx(2.0)  # median
        rb = rows[2]
        assert rb[2] == "1"
        assert float(rb[4]) == 0.0  # single replicate: variance reported as 0

    def test_error_rows_are_skipped(self, tmp_path):
        lines = [
            _result_line("e", 1, "z_bh", 1.0),
            _result_line("e", 2, "z_bh", 0.0, status="error:FloatingPointError"),
            _result_line("e", 3, "z_bh", 3.0),
        ]
        code, rows = self._summarize(tmp_path, lines)
        assert code == 0
        assert rows[1][2] == "2"
        assert float(rows[1][3]) == pytest.approx(2.0)

    def test_round_trip_from_runner_output(self, tmp_path):
        from zmix.bench import ExperimentConfig

        cfg = ExperimentConfig(
            experiment_id="loop", seed=5, n_points=30, replicates=4,
            estimators=("z_bh", "z_rb"), K=3,
        )
        buf = io.StringIO()
        run_experiment(cfg, buf, workers=1)
        src = tmp_path / "results.csv"
        src.write_text(buf.getvalue())
        out = tmp_path / "summary.csv"
        inv = CliInvocation(subcommand="summarize", in_path=str(src), out_path=str(out))
        assert cmd_summarize(inv) == 0
        with open(out, newline="") as fh:
            rows = list(csv.reader(fh))
        assert [row[1] for row in rows[1:]] == ["z_bh", "z_rb"]
        assert all(row[2] == "4" for row in rows[1:])
        # grand means stay near the true unit constant
        assert all(abs(float(row[3])) < 0.5 for row in rows[1:])

    def test_header_mismatch_is_io_error(self, tmp_path, capsys):
        src = tmp_path / "results.csv"
        src.write_text("something,else\n1,2\n")
        inv = CliInvocation(subcommand="summarize", in_path=str(src))
        assert cmd_summarize(inv) == 3
        assert "header" in capsys.readouterr().err

    def test_malformed_numeric_is_io_error(self, tmp_path, capsys):
        line = _result_line("e", 1, "z_bh", 1.0).replace(
            "%.17g" % 1.0, "not-a-number"
        )
        src = tmp_path / "results.csv"
        src.write_text("\n".join([CSV_HEADER, line]) + "\n")
        inv = CliInvocation(subcommand="summarize", in_path=str(src))
        assert cmd_summarize(inv) == 3
        assert "malformed" in capsys.readouterr().err

    def test_missing_input_path_is_config_error(self, capsys):
        assert cmd_summarize(CliInvocation(subcommand="summarize")) == 2
        assert "--in" in capsys.readouterr().err

    def test_unreadable_input_is_io_error(self, tmp_path):
        inv = CliInvocation(subcommand="summarize", in_path=str(tmp_path / "nope.csv"))
        assert cmd_summarize(inv) == 3


class TestCmdSelftest:
    def test_selftest_passes_and_reports_each_check(self, capsys):
        assert cmd_selftest(CliInvocation(subcommand="selftest")) == 0
        out = capsys.readouterr().out
        assert out.strip().endswith("selftest: ok")
        checks = [line for line in out.splitlines() if line.startswith("ok - ")]
        assert len(checks) == 5
        assert "FAIL" not in out


class TestMainDispatch:
    def test_run_through_main(self, tmp_path):
        config = tmp_path / "exp.ini"
        config.write_text(TINY_RUN)
        out = tmp_path / "results.csv"
        code = main(
            ["run", "--config", str(config), "--out", str(out), "--workers", "1"]
        )
        assert code == 0
        assert out.read_text().startswith(CSV_HEADER)

    def test_oracle_through_main_to_stdout(self, tmp_path, capsys):
        config = tmp_path / "exp.ini"
        config.write_text(MINIMAL)
        assert main(["oracle", "--config", str(config)]) == 0
        assert capsys.readouterr().out.startswith("quantity,index,value")

    def test_subcommand_required(self):
        with pytest.raises(SystemExit):
            main([])

    def test_summarize_requires_in_flag(self):
        with pytest.raises(SystemExit):
            main(["summarize"])

    def test_unknown_flag_rejected(self, tmp_path):
        with pytest.raises(SystemExit):
            main(["selftest", "--fast"])
