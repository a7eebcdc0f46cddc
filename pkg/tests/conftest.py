import pytest

# The running example as a bracketed parse; "half of a sandwich" and
# "a plate nearest a coffee mug" are the two top-level noun phrases.
SANDWICH_TREE = (
    "(NP (NP (NN half) (IN of) (DT a) (NN sandwich)) "
    "(PP (IN on) (NP (DT the) (JJ right) (NN side)) (IN of) "
    "(NP (NP (DT a) (NN plate)) (PP (JJS nearest) (NP (DT a) (NN coffee) (NN mug))))))"
)
SANDWICH_TEXT = "half of a sandwich on the right side of a plate nearest a coffee mug"

# acceptance verdicts, printed after the run
ACCEPTANCE: list[str] = []


@pytest.fixture
def sandwich_tree():
    from groundnet.treebank import read_ptb

    return read_ptb(SANDWICH_TREE)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
