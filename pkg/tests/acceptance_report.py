"""Collects one PASS/FAIL line per acceptance check; printed in the pytest terminal summary."""

RESULTS: list[tuple[str, bool, str]] = []


def record(name: str, ok: bool, detail: str = "") -> bool:
    line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
    print(line)
    RESULTS.append((name, bool(ok), detail))
    return ok
