_acceptance_results: list[tuple[str, bool, str]] = []


def record_criterion(name: str, passed: bool, note: str = "") -> None:
    """Collect acceptance-criterion outcomes for the end-of-run summary."""
    _acceptance_results.append((name, passed, note))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, note in _acceptance_results:
        status = "PASS" if passed else "FAIL"
        suffix = f"  ({note})" if note else ""
        terminalreporter.write_line(f"{status}  {name}{suffix}")
