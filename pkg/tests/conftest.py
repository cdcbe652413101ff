VERDICTS: dict[int, tuple[bool, str]] = {}


def record_verdict(criterion: int, ok: bool, detail: str) -> None:
    VERDICTS[criterion] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        ok, detail = VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
