import json
import os

import pytest

CRITERIA = {
    1: "gradient suite",
    2: "flow identities",
    3: "oracle equivalence",
    4: "synthetic depth recovery",
    5: "multi-scale pose decoder trend",
    6: "distillation trend",
    7: "distillation convergence",
    8: "freezing exactness",
    9: "steering transfer trend",
    10: "CLI determinism",
}
REPORT_PATH = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "reports", "acceptance.json")


def pytest_configure(config):
    config._acceptance = {}


@pytest.fixture(scope="session")
def acceptance(request):
    """``record(number, passed, detail)`` stores one criterion outcome for the summary."""
    store = request.config._acceptance

    def record(number, passed, detail):
        store[number] = {"criterion": CRITERIA[number], "passed": bool(passed), "detail": detail}
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = getattr(config, "_acceptance", {})
    ran = any("test_acceptance" in r.nodeid for stats in terminalreporter.stats.values() for r in stats
              if hasattr(r, "nodeid"))
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        entry = store.get(n)
        if entry is None:
            terminalreporter.write_line(f"C{n:<2} FAIL  {name}: not completed (test errored or was deselected)")
        else:
            status = "PASS" if entry["passed"] else "FAIL"
            terminalreporter.write_line(f"C{n:<2} {status}  {name}: {entry['detail']}")
    os.makedirs(os.path.dirname(REPORT_PATH), exist_ok=True)
    with open(REPORT_PATH, "w") as f:
        json.dump({str(k): v for k, v in sorted(store.items())}, f, indent=2)
        f.write("\n")
