import acceptance_report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if acceptance_report.lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in acceptance_report.lines:
            terminalreporter.write_line(line)
