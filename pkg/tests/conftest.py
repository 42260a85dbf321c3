import numpy as np
import pytest

from scenefuse import _backend

BACKENDS = ["python"] + (["cython"] if _backend.compiled_available() else [])


@pytest.fixture(params=BACKENDS)
def backend(request):
    """Run the test once per available kernel backend."""
    previous = _backend.NAME
    _backend.use(request.param)
    yield request.param
    _backend.use("cython" if previous == "cython" else "python")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_run(seed=0, agents=2, dtype=np.float64, depth=2, regime="multi_axis", fusion="early", jitter=0.0):
    """A two-agent scene with T, S <= 4 and a width-4 model, small enough for finite differences.

    ``jitter`` adds Gaussian noise to every parameter. Zero-initialised biases
    and positional tables can park a token exactly on a ReLU kink, where
    finite differences are meaningless; a jittered model sits at a generic point.
    """
    from scenefuse.attention import BlockConfig
    from scenefuse.decoder import DecoderConfig
    from scenefuse.fusion import EncoderConfig
    from scenefuse.model import ForecastModel, ModelConfig, make_batch
    from scenefuse.synthdata import GeneratorConfig, generate

    g = GeneratorConfig(seed=seed, agents=agents, history=3, future=2, interactions=1, roadgraph=4, lights=1)
    batch = make_batch(generate(g, 1))
    block = BlockConfig(hidden=4, heads=2, intermediate=8)
    cfg = ModelConfig(encoder=EncoderConfig(fusion=fusion, regime=regime, depth=depth, block=block),
                      decoder=DecoderConfig(modes=3, horizon=2))
    model = ForecastModel(cfg, batch.shapes(), seed=seed, dtype=dtype)
    if jitter:
        noise = np.random.default_rng([seed, 99])
        for p in model.parameters():
            p.data += jitter * noise.normal(size=p.data.shape).astype(p.data.dtype)
    return model, batch


# one (number, title, passed, detail) tuple per acceptance criterion, printed at the end of the run
ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {n} {'PASS' if ok else 'FAIL'}: {title} ({detail})")
