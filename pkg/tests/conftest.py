import sys


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for key, (ok, detail) in results.items():
        terminalreporter.write_line(f"ACCEPTANCE {key:<4} {'PASS' if ok else 'FAIL'}  {detail}")
