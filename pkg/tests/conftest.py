"""Shared pytest wiring: surface acceptance verdicts in the run summary.

The acceptance tests each print one ``criterion NN ...: PASS/FAIL`` line;
under default output capture those prints are swallowed for passing tests.
They register here as well, and the terminal-summary hook replays them in
a dedicated section so every run of ``pytest`` shows the ten verdicts.
"""

_verdicts: list[str] = []


def record_verdict(line: str) -> None:
    _verdicts.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _verdicts:
        terminalreporter.section("acceptance criteria")
        for line in _verdicts:
            terminalreporter.write_line(line)
