import sys


def pytest_terminal_summary(terminalreporter):
    # acceptance lines survive output capture
    for name, mod in list(sys.modules.items()):
        lines = getattr(mod, "LINES", None) if name.endswith("test_acceptance") else None
        if lines:
            terminalreporter.section("acceptance criteria")
            for k in sorted(lines):
                terminalreporter.write_line(lines[k])
