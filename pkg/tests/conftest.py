import sys


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains networks for tens of minutes")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
