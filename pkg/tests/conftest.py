import pytest

# criterion number -> (title, passed, detail); filled by test_acceptance.py
_ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def record_criterion():
    def record(num: int, title: str, ok: bool, detail: str) -> None:
        _ACCEPTANCE[num] = (title, bool(ok), detail)
        print(f"[{'PASS' if ok else 'FAIL'}] {num}. {title}: {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in range(1, 10):
        title, ok, detail = _ACCEPTANCE.get(num, ("(not run)", False, "did not complete"))
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {num}. {title}: {detail}")
