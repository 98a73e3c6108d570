import acceptance_report


def pytest_terminal_summary(terminalreporter):
    if not acceptance_report.LINES:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for key in sorted(acceptance_report.LINES, key=lambda k: (int(k[0]), k)):
        terminalreporter.write_line(acceptance_report.LINES[key])
