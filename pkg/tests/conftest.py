import pytest
import torch

from mdti.synthetic import GeneratorConfig, generate_synthetic


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def city():
    """A small synthetic city: (samples, network, grid spec)."""
    return generate_synthetic(GeneratorConfig(trips=24), seed=11)


@pytest.fixture(scope="session")
def clean_city():
    """Noise-free trips for map-matching checks."""
    return generate_synthetic(GeneratorConfig(trips=100, noise_m=0.0), seed=5)


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Record the one-line verdict for an acceptance criterion."""

    def record(number: int, title: str, ok: bool, detail: str = "") -> None:
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}"
        ACCEPTANCE[number] = line + (f"  ({detail})" if detail else "")
        print(ACCEPTANCE[number])

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
