from __future__ import annotations

import time


def wait_until(predicate, timeout: float = 5.0, interval: float = 0.005) -> bool:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(interval)
    return predicate()


# One line per acceptance criterion, printed in the terminal summary.
ACCEPTANCE_LINES: dict[int, str] = {}


def report(criterion: int, status: str, detail: str) -> str:
    line = f"criterion {criterion}: {status} - {detail}"
    ACCEPTANCE_LINES[criterion] = line
    print(line)
    return line
