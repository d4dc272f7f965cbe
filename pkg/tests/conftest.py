import hypothesis

hypothesis.settings.register_profile('default', deadline=None, max_examples=50)
hypothesis.settings.load_profile('default')

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section('acceptance criteria')
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
