import pytest

# criterion number -> (title, passed, detail), filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


class Recorder:
    def __call__(self, number: int, title: str, ok: bool, detail: str):
        ACCEPTANCE[number] = (title, bool(ok), detail)
        status = "PASS" if ok else "FAIL"
        print(f"\n[criterion {number}] {status} {title}: {detail}")
        assert ok, f"criterion {number} ({title}) failed: {detail}"


@pytest.fixture(scope="session")
def criterion():
    return Recorder()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {number}. {title}: {detail}")
