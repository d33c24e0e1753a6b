import pytest

ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


class CriterionReport:
    """Records one acceptance criterion's outcome and prints a status line."""

    def __init__(self, number: int, title: str):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        detail = self.detail if exc_type is None else f"{self.detail} {exc_type.__name__}: {exc}".strip()
        ACCEPTANCE[self.number] = (status, self.title, detail)
        print(f"criterion {self.number:2d} {status}: {self.title} | {detail}")
        return False


@pytest.fixture
def criterion():
    return CriterionReport


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d} {status}: {title} | {detail}")
