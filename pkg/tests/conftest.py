"""Shared pytest plumbing: surfaces acceptance gate verdicts in the
terminal summary, where capture cannot swallow them."""

gate_lines: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if gate_lines:
        terminalreporter.section("acceptance gates")
        for line in gate_lines:
            terminalreporter.write_line(line)
