from hypothesis import settings

# reproducible property runs; individual tests set max_examples
settings.register_profile("repo", derandomize=True, deadline=None, print_blob=True)
settings.load_profile("repo")

# PASS/FAIL lines from the acceptance suite, repeated at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
