"""Shared pytest plumbing for the suite.

The acceptance tests register one verdict line each; the terminal-summary
hook below reprints them after the run so the verdicts stay visible even
with output capture enabled.
"""

ACCEPTANCE_LINES: list[str] = []


def record_criterion(index: int, slug: str, ok: bool, detail: str) -> None:
    """Register one acceptance verdict and fail the calling test when not ok."""
    line = f"[{'PASS' if ok else 'FAIL'}] {index:02d} {slug}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance summary")
    for line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
