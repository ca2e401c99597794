import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro_cfg():
    """A corpus and model small enough to train for a couple of epochs in seconds."""
    from tstrm.config import TINY_DEEP_ROWS, TINY_SHALLOW_ROWS, Config, ModelConfig, SynthSpec, TrainConfig

    model = ModelConfig(
        n_tokens=4,
        feature_dim=12,
        deep_rows=TINY_DEEP_ROWS,
        shallow_rows=TINY_SHALLOW_ROWS,
        d_m=16,
        n_heads=2,
        n_enc_layers=1,
        n_dec_layers=1,
        d_ff=32,
    )
    synth = SynthSpec(n_speakers=2, n_tokens=4, utterances_per_speaker=8, n_mels=12, max_transcript_len=4)
    train = TrainConfig(epochs=2, batch_size=4, warmup_steps=10, lr_factor=1.0, max_decode_len=8)
    return Config(model=model, train=train, synth=synth)


_CRITERIA: dict[int, tuple[str, str, float]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    number, title = marker.args
    _CRITERIA[number] = (title, "PASS" if report.passed else "FAIL", report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, verdict, seconds = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d} {verdict}  {title} ({seconds:.1f}s)")
