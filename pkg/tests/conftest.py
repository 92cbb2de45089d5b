import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

SMALL_WORDS = ["ab", "ba", "cab", "bad", "dab"]


@pytest.fixture(scope="session")
def small_model():
    """A few-word recognizer that trains in seconds; enough to attack."""
    from fawa.model import CTCRecognizer
    from fawa.textgen import render_text

    X = [render_text(w) for w in SMALL_WORDS]
    m = CTCRecognizer(conv1_channels=8, conv2_channels=16, hidden=16, max_epochs=400, learning_rate=1e-2, tone_jitter=0.2, seed=0)
    return m.fit(X * 8, SMALL_WORDS * 8)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = [mod.RESULTS[k] for k in sorted(mod.RESULTS)] if mod is not None else []
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
