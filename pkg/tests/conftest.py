CRITERIA = {}


def record_criterion(number: int, passed: bool, detail: str) -> str:
    line = f"CRITERION {number:2d} {'PASS' if passed else 'FAIL'}: {detail}"
    CRITERIA[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[n])
