from _criteria import CRITERIA


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        for line in CRITERIA[number]:
            terminalreporter.write_line(line)
