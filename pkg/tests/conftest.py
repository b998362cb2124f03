import pytest

from molvc.corpus import generate_corpus


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    """Small deterministic corpus shared by unit tests (3 speakers x 4 utterances)."""
    out = tmp_path_factory.mktemp("corpus")
    generate_corpus(out, n_speakers=3, n_utts_per_speaker=4, seed=0)
    return out


_CRITERIA: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number: int, name: str, passed: bool, detail: str = ""):
        line = f"{'PASS' if passed else 'FAIL'}  criterion {number:2d}  {name}  {detail}".rstrip()
        _CRITERIA.append(line)
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
