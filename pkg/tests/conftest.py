import logging
from pathlib import Path

import twinbed

from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")
logging.getLogger("twinbed").setLevel(logging.WARNING)

DATA = Path(twinbed.__file__).parent / "data"


def pytest_terminal_summary(terminalreporter):
    rows = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when == "call" and "::test_criterion_" in rep.nodeid:
                name = rep.nodeid.split("::test_criterion_")[1]
                num, _, what = name.partition("_")
                rows.append((int(num), "PASS" if outcome == "passed" else "FAIL", what))
    if rows:
        terminalreporter.section("acceptance criteria")
        for num, verdict, what in sorted(rows):
            terminalreporter.write_line(f"criterion {num}: {verdict}  {what}")
