"""Shared collector so every acceptance criterion prints one pass/fail line."""

lines: list[str] = []


def record(name: str, passed: bool, detail: str = "") -> None:
    status = "PASS" if passed else "FAIL"
    line = f"[{status}] {name}" + (f" -- {detail}" if detail else "")
    lines.append(line)
    print(line)
