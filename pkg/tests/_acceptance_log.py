"""Collects one PASS/FAIL line per acceptance criterion for the run summary."""

LINES = []


def record(number, title, ok, detail):
    line = f"criterion {number} [{title}]: {'PASS' if ok else 'FAIL'} ({detail})"
    LINES.append(line)
    print(line)
    return ok
