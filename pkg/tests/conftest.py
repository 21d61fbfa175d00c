import pytest
import torch

from gsam.adapter import AdapterConfig
from gsam.cnn_encoder import CnnConfig
from gsam.image_encoder import EncoderConfig
from gsam.model import ModelConfig

torch.set_num_threads(1)


@pytest.fixture
def small_config():
    """A model small enough for per-test forwards and short training loops."""
    enc = EncoderConfig(patch_size=8, embed_dim=32, depth=2, num_heads=4,
                        adapter=AdapterConfig(embed_dim=32, bottleneck_dim=4))
    return ModelConfig(encoder=enc, cnn=CnnConfig(stage_channels=(8, 16, 16)), num_classes=3,
                       decoder_channels=(16, 16, 8))


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[number])
