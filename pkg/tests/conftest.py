import pytest

from trunet.data import (SyntheticConfig, compute_stats, default_locations, extract_windows, fraction_split,
                         normalize, synth_generate)


def desk_splits(seed=0, days=120, locations=4, stride=4):
    """Normalized train/val/test windows on the micro grid for 8-day, 8x8 desk models."""
    series = synth_generate(SyntheticConfig.micro(seed=seed), days)
    windows = extract_windows(series, default_locations((20, 20), 8, locations), stride=stride,
                              window_days=8, stencil=8)
    splits = fraction_split(windows, series, (0.6, 0.2))
    stats = compute_stats(splits.train)
    return series, stats, tuple(normalize(s, stats) for s in (splits.train, splits.val, splits.test))


@pytest.fixture(scope="session")
def desk_data():
    return desk_splits()


_ACCEPTANCE: list[str] = []


@pytest.fixture
def record():
    """Log one PASS/FAIL line per acceptance criterion; the session summary prints them."""

    def _record(criterion: str, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'} {criterion}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
