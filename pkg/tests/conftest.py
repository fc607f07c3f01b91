import re

_VERDICT = re.compile(r"^A\d (PASS|FAIL) ")


def pytest_terminal_summary(terminalreporter):
    """Repeat the one-line acceptance verdicts at the end of the run."""
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            lines += [ln for ln in getattr(rep, "capstdout", "").splitlines() if _VERDICT.match(ln)]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
