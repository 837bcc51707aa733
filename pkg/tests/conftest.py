import pytest

# criterion id -> verdict line, printed after the run
_VERDICTS: dict[str, str] = {}


@pytest.fixture
def criterion(request):
    """Record a PASS/FAIL line for an acceptance criterion, then assert it."""
    seen = []

    def check(cid: str, title: str, ok: bool, detail: str) -> None:
        seen.append(cid)
        _VERDICTS[cid] = f"{'PASS' if ok else 'FAIL'}  [{cid}] {title}: {detail}"
        assert ok, _VERDICTS[cid]

    yield check
    if not seen:
        _VERDICTS[request.node.name] = f"FAIL  [{request.node.name}] raised before reaching a verdict"


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for cid in sorted(_VERDICTS):
        terminalreporter.write_line(_VERDICTS[cid])
