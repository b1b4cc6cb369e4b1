"""Shared record of acceptance outcomes, printed at the end of the run."""

RESULTS: list[tuple[int, bool, str]] = []


def record(criterion: int, ok: bool, detail: str) -> str:
    RESULTS.append((criterion, ok, detail))
    return f"ACCEPTANCE {criterion:2d} {'PASS' if ok else 'FAIL'}: {detail}"
