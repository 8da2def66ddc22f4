from helpers import ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, seconds, detail = ACCEPTANCE[n]
        terminalreporter.write_line(
            f"{n:2d} {'PASS' if ok else 'FAIL'} ({seconds:5.1f}s) {title}: {detail}")
