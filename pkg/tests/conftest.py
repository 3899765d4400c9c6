import pytest
import torch

from animlab.backbone import BackboneConfig
from animlab.diffusion import AnimationModel
from animlab.schedule import make_noise_schedule


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def tiny_cfg():
    """Smallest architecture that still has every site type (16x16 attention, 8x8 middle)."""
    return BackboneConfig(base_channels=8, channel_multipliers=(1, 2), image_size=16,
                          attention_resolutions=(16, 8), temporal_pe_max_len=16)


@pytest.fixture
def schedule():
    return make_noise_schedule(100, 1e-3, 0.2)


@pytest.fixture
def tiny_model(tiny_cfg, schedule):
    torch.manual_seed(0)
    return AnimationModel(tiny_cfg, schedule)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
