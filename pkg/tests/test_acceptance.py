"""Acceptance suite: criteria 1-8 from one verify run, criterion 9 from a second run.

Each criterion prints one ``criterion N ...: PASS/FAIL`` line; the lines are
repeated in the terminal summary.
"""
import io

import pytest

from orbitshift import cli
from orbitshift.suite import CRITERIA


def _run(out):
    cfg = cli.load_config(None, "verify")
    writer = cli.Writer(out, cfg, "verify")
    code, results = cli.run_verify(cfg, writer, log=io.StringIO())
    writer.finish()
    return code, results, (out / "verify_report.json").read_bytes()


@pytest.fixture(scope="session")
def first_run(tmp_path_factory):
    return _run(tmp_path_factory.mktemp("verify_a"))


@pytest.mark.parametrize("number", sorted(CRITERIA))
def test_criterion(first_run, number, acceptance_log):
    _, results, _ = first_run
    r = next(r for r in results if r.number == number)
    status = "PASS" if r.passed else "FAIL"
    acceptance_log(f"criterion {number} ({r.name}): {status} in {r.runtime:.2f} s "
                   f"(budget {r.budget:g} s)")
    assert r.error is None, r.error
    assert r.passed, r.details


def test_criterion_9_cli_determinism(first_run, tmp_path_factory, acceptance_log):
    code_a, _, report_a = first_run
    code_b, _, report_b = _run(tmp_path_factory.mktemp("verify_b"))
    same = report_a == report_b
    ok = code_a == code_b == 0 and same
    acceptance_log(f"criterion 9 (CLI determinism): {'PASS' if ok else 'FAIL'} "
                   f"(exit codes {code_a}, {code_b}; reports {'identical' if same else 'differ'})")
    assert code_a == 0 and code_b == 0
    assert same
