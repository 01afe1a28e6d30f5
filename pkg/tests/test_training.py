import json

import numpy as np
import pytest
import torch

from acdc.dataset import DatasetManifest, TrainingSample, generate_pairs, split_dataset
from acdc.errors import CheckpointError, InvalidInputError, TrainingDiverged
from acdc.geometry import CameraIntrinsics, ControlLabel
from acdc.model import NetworkConfig, build_network, control_loss, labels_to_array, predict
from acdc.training import (
    TrainConfig,
    benchmark_inference,
    desk_preset,
    evaluate_loss,
    load_checkpoint,
    full_preset,
    recalibrate_batchnorm,
    save_checkpoint,
    train,
)

SMALL = dict(input_width=48, input_height=36)


def quick_config(**kw):
    base = dict(epochs=3, batch_size=8, augment=False, validate=False)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def manifest():
    from acdc.sim import SynthConfig, synthesize_sequence
    seq = synthesize_sequence(SynthConfig(world_width=128, world_height=96, n_targets=3, n_frames=30,
                                          min_size=(6, 10), max_size=(10, 16)), seed=1)
    return split_dataset(generate_pairs(seq, CameraIntrinsics(48, 36), 40, seed=0), 0.75, seed=0)


def test_presets():
    net_cfg, tr = full_preset()
    assert (net_cfg.input_width, net_cfg.input_height) == (320, 240)
    assert (tr.epochs, tr.batch_size, tr.initial_lr, tr.lr_decay_factor, tr.lr_decay_every) == \
        (500, 32, 0.001, 0.95, 5)
    desk_net, _ = desk_preset()
    assert (desk_net.input_width, desk_net.input_height) == (160, 120)


def test_overfits_single_sample():
    img = np.random.default_rng(0).integers(0, 256, (36, 48, 3), dtype=np.uint8)
    s = TrainingSample(img, ControlLabel(0.2, -0.3, 4.0))
    m = DatasetManifest(CameraIntrinsics(48, 36), [s, s], ["train", "test"])
    net = build_network(NetworkConfig(dropout_rate=0.0, **SMALL))
    train(net, m, quick_config(epochs=300, balance=False))
    out = predict(net, img)[0]
    assert np.all(np.abs(out - [0.2, -0.3, 4.0]) <= 0.02), out


def test_training_is_bitwise_deterministic(manifest):
    states = []
    for _ in range(2):
        net = build_network(NetworkConfig(seed=7, **SMALL))
        train(net, manifest, quick_config(epochs=2, augment=True, seed=11))
        states.append(net.state_dict())
    assert all(torch.equal(states[0][k], states[1][k]) for k in states[0])


def test_first_epoch_loss_is_sane(manifest):
    net = build_network(NetworkConfig(**SMALL))
    res = train(net, manifest, quick_config(epochs=1))
    labels = labels_to_array([s.label for s in manifest.train])
    zero = control_loss(torch.zeros(len(labels), 3, dtype=torch.float64), torch.tensor(labels)).item()
    assert 0.1 * zero <= res.loss_history[0] <= 10 * zero


def test_resume_continues_numbering(tmp_path, manifest):
    net = build_network(NetworkConfig(**SMALL))
    train(net, manifest, quick_config(epochs=2, checkpoint_every=2), out_dir=tmp_path)
    net2 = build_network(NetworkConfig(**SMALL))
    res = train(net2, manifest, quick_config(epochs=4), out_dir=tmp_path, resume=tmp_path / "epoch_0002.pt")
    assert len(res.loss_history) == 4 and res.epochs_completed == 4
    epochs = [json.loads(l)["epoch"] for l in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert epochs == [0, 1, 2, 3]


def test_resume_matches_uninterrupted_run(tmp_path, manifest):
    # recalibration rewrites BN statistics at the end of each run, so compare with it off
    full = build_network(NetworkConfig(**SMALL))
    train(full, manifest, quick_config(epochs=4, recalibrate_bn=False))
    part = build_network(NetworkConfig(**SMALL))
    train(part, manifest, quick_config(epochs=2, checkpoint_every=2, recalibrate_bn=False), out_dir=tmp_path)
    resumed = build_network(NetworkConfig(**SMALL))
    train(resumed, manifest, quick_config(epochs=4, recalibrate_bn=False), resume=tmp_path / "epoch_0002.pt")
    a, b = full.state_dict(), resumed.state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_divergence_leaves_diagnostic_checkpoint(tmp_path, manifest):
    bad = [TrainingSample(s.image, ControlLabel(float("nan"), 0.0, 1.0)) for s in manifest.samples[:4]]
    m = DatasetManifest(manifest.intrinsics, bad, ["train"] * 4)
    net = build_network(NetworkConfig(**SMALL))
    with pytest.raises(TrainingDiverged) as exc:
        train(net, m, quick_config(), out_dir=tmp_path)
    assert exc.value.checkpoint_path is not None and exc.value.checkpoint_path.exists()


def test_resolution_mismatch_rejected(manifest):
    with pytest.raises(InvalidInputError):
        train(build_network(NetworkConfig(input_width=64, input_height=48)), manifest, quick_config())


def test_recalibration_matches_batch_statistics():
    net = build_network(NetworkConfig(dropout_rate=0.0, **SMALL))
    imgs = np.random.default_rng(3).integers(0, 256, (6, 36, 48, 3), dtype=np.uint8)
    recalibrate_batchnorm(net, imgs, batch_size=4)
    from acdc.model import images_to_tensor
    with torch.no_grad():
        net.train()
        batch_mode = net(images_to_tensor(imgs)).double()
        net.eval()
        eval_mode = net(images_to_tensor(imgs)).double()
    assert torch.allclose(batch_mode, eval_mode, atol=1e-4)


def test_evaluate_loss_matches_direct_computation(manifest):
    net = build_network(NetworkConfig(**SMALL))
    imgs = np.stack([s.image for s in manifest.test])
    labels = labels_to_array([s.label for s in manifest.test])
    direct = control_loss(torch.tensor(predict(net, imgs)), torch.tensor(labels)).item()
    assert evaluate_loss(net, imgs, labels, batch_size=3) == pytest.approx(direct, rel=1e-5)


# --- checkpoints --------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    net = build_network(NetworkConfig(seed=4, **SMALL))
    path = save_checkpoint(tmp_path / "c.pt", net, meta={"epoch": 3})
    back, meta = load_checkpoint(path)
    img = np.random.default_rng(0).integers(0, 256, (2, 36, 48, 3), dtype=np.uint8)
    assert np.array_equal(predict(net, img), predict(back, img)) and meta["epoch"] == 3


def test_truncated_checkpoint(tmp_path):
    path = save_checkpoint(tmp_path / "c.pt", build_network(NetworkConfig(**SMALL)))
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.pt")


def test_checkpoint_loads_at_other_resolution(tmp_path):
    path = save_checkpoint(tmp_path / "c.pt", build_network(NetworkConfig(input_width=160, input_height=120)))
    net, _ = load_checkpoint(path, NetworkConfig())
    assert predict(net, np.zeros((240, 320, 3), np.uint8)).shape == (1, 3)


def test_incompatible_checkpoint_names_tensor(tmp_path):
    path = save_checkpoint(tmp_path / "c.pt", build_network(NetworkConfig(**SMALL)))
    with pytest.raises(CheckpointError, match=r"controller\.2\.weight"):
        load_checkpoint(path, NetworkConfig(projection_width=40, **SMALL))


def test_benchmark_reports_environment():
    info = benchmark_inference(build_network(NetworkConfig(**SMALL)), n_frames=10)
    assert np.isfinite(info["fps"]) and info["fps"] > 0
    assert (info["input_width"], info["input_height"]) == (48, 36)
    assert info["parameters"] == 395_031 and info["reference_fps"] == 25.0
    with pytest.raises(InvalidInputError):
        benchmark_inference(build_network(NetworkConfig(**SMALL)), n_frames=5)
