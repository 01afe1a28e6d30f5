import numpy as np
import pytest

from acdc.geometry import CameraIntrinsics
from acdc.sim import FrameSequence, SynthConfig, TargetSpec, synthesize_sequence

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def intr():
    return CameraIntrinsics(320, 240, 60.0, 40.0)


@pytest.fixture
def small_intr():
    return CameraIntrinsics(48, 36)


@pytest.fixture
def small_seq():
    cfg = SynthConfig(world_width=128, world_height=96, n_targets=3, n_frames=12,
                      min_size=(6, 10), max_size=(10, 16), max_speed=3.0)
    return synthesize_sequence(cfg, seed=5)


def blank_sequence(annotations, world=(128, 96), value=90, sequence_id="blank"):
    img = np.full((world[1], world[0], 3), value, dtype=np.uint8)
    return FrameSequence(annotations, world, images=[img] * len(annotations), sequence_id=sequence_id)


def single_target_sequence(n_frames=60, world=(384, 288), start=(20.0, 130.0), velocity=(5.0, 1.5),
                           size=(16, 32), seq_id="single"):
    cfg = SynthConfig(world_width=world[0], world_height=world[1], n_frames=n_frames, sequence_id=seq_id,
                      targets=[TargetSpec(start[0], start[1], velocity[0], velocity[1], size[0], size[1])])
    return synthesize_sequence(cfg, seed=0)
