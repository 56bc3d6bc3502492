"""Shared pytest hooks: the acceptance suite records one verdict per criterion."""

import pytest

_VERDICTS: dict[str, tuple[bool, str]] = {}


class Verdicts:
    def record(self, criterion: str, passed: bool, detail: str) -> bool:
        _VERDICTS[criterion] = (bool(passed), detail)
        print(f"[acceptance {criterion}] {'PASS' if passed else 'FAIL'}: {detail}")
        return bool(passed)


@pytest.fixture(scope="session")
def verdicts():
    return Verdicts()


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(_VERDICTS, key=lambda c: (int(c.split("(")[0]), c)):
        passed, detail = _VERDICTS[criterion]
        terminalreporter.write_line(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} - {detail}")
