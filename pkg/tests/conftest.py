import pytest

# criterion number -> (status, title, detail), filled in by test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def record(number: int, title: str, ok: bool, detail: str = "") -> None:
    ACCEPTANCE[number] = ("PASS" if ok else "FAIL", title, detail)
    print(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {title}  [{detail}]")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{status} {n:2d}. {title}  [{detail}]")


@pytest.fixture
def criterion():
    return record
