import numpy as np
import pytest

from siamlab.nn import EncoderSpec, SimSiamModel, init_params


def small_model(predictor_mode="learned", d=8, input_dim=5, seed=0, **spec_kw):
    spec = EncoderSpec(
        backbone="mlp", input_dim=input_dim, backbone_widths=[12], projection_hidden=10, output_dim=d, **spec_kw
    )
    model = SimSiamModel(spec, predictor_mode=predictor_mode)
    init_params(model, seed)
    return model


@pytest.fixture
def make_model():
    return small_model


@pytest.fixture
def views():
    rng = np.random.default_rng(123)
    return rng.normal(size=(6, 5)), rng.normal(size=(6, 5))


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for an acceptance criterion and return ``ok``."""

    def record(number: int, ok: bool | None, detail: str) -> bool | None:
        status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        line = f"criterion {number} {status}: {detail}"
        request.config.stash[ACCEPTANCE_KEY].append(line)
        print(line)
        return ok

    return record
