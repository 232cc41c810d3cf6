"""Shared pytest wiring: the acceptance-criteria verdict block."""

import sys


def pytest_terminal_summary(terminalreporter):
    module = (sys.modules.get("test_acceptance")
              or sys.modules.get("tests.test_acceptance"))
    results = getattr(getattr(module, "criterion", None), "results", None)
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, verdict, detail in sorted(results):
        suffix = f"  ({detail})" if detail else ""
        terminalreporter.write_line(f"criterion {number:2d}: {verdict}{suffix}")
