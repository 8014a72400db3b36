"""Shared test helpers.

`emit` prints a line with pytest's output capture temporarily disabled so
it stays visible in the run log; the acceptance tests use it for their
one-line-per-criterion verdicts.
"""

_capman = [None]


def pytest_configure(config):
    _capman[0] = config.pluginmanager.getplugin("capturemanager")


def emit(line):
    capman = _capman[0]
    if capman is not None:
        with capman.global_and_fixture_disabled():
            print(line, flush=True)
    else:
        print(line, flush=True)
