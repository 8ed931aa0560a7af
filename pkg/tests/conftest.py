import pytest

from lanerisk.synthgen import SceneParams, generate


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A 40-clip, 16x16, 12-frame synthetic dataset shared by the suite."""
    root = tmp_path_factory.mktemp("ds")
    params = SceneParams(n_clips=40, height=16, width=16, n_frames=12, seed=3, feature_dim=8)
    truths = generate(params, root)
    return root, params, truths


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
