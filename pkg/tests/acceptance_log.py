"""Shared store for the one-line acceptance verdicts printed after the run."""

LINES: dict[int, str] = {}


def record(number: int, title: str, ok: bool, detail: str) -> None:
    LINES[number] = f"criterion {number} {title}: {'PASS' if ok else 'FAIL'} ({detail})"
