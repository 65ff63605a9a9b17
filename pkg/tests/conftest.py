"""Shared test plumbing: the acceptance suite records one pass/fail line
per criterion; the collected lines are echoed in the terminal summary."""

ACCEPTANCE_LINES = []


def record(index, ok, text):
    line = f"[{'PASS' if ok else 'FAIL'}] acceptance {index:2d}: {text}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return ok


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
