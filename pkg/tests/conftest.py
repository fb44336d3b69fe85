from ffl.config import Config

TINY_OVERRIDES = [
    "model.stages=[4, 8]",
    "data.samples=64",
    "data.test_samples=32",
    "data.image_size=8",
    "data.batch_size=16",
    "train.epochs=2",
    "train.milestones=[1]",
]


def tiny_config(*extra):
    return Config().override([*TINY_OVERRIDES, *extra])


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
