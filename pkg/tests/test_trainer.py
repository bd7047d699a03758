import numpy as np
import pytest

from relnet.autodiff import ShapeError
from relnet.dedup import DedupConfig
from relnet.head import HeadConfig
from relnet.relation import RelationConfig
from relnet.synthgen import GenConfig, Scene, generate
from relnet.trainer import (
    CHECKPOINT_MAGIC,
    Checkpoint,
    CheckpointError,
    TrainConfig,
    init_dedup,
    init_head,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
    train_dedup,
    train_end_to_end,
    train_head,
)

REL = RelationConfig(num_heads=4, d_k=8, d_g=16, d_f=16)
HEAD = HeadConfig(d_in=64, d_hidden=16, r1=1, r2=1, num_classes=4, relation=REL)
DEDUP_RAW = DedupConfig(d_feat=64, d_fused=16, rank_dim=16, relation=REL)
DEDUP_HEAD = DedupConfig(d_feat=16, d_fused=16, rank_dim=16, relation=REL)


@pytest.fixture(scope="module")
def scenes():
    return generate(GenConfig(seed=21, num_scenes=12))


def test_sgd_zero_everything_is_noop():
    p = {"w": np.array([1.0, -2.0])}
    new_p, new_v = sgd_step(p, {"w": np.zeros(2)}, {"w": np.zeros(2)}, 0.1, 0.9, 0.0)
    np.testing.assert_array_equal(new_p["w"], p["w"])


def test_sgd_scalar_hand_update():
    new_p, _ = sgd_step({"w": np.array(1.0)}, {"w": np.array(2.0)}, {}, 0.1, 0.0, 0.0)
    assert float(new_p["w"]) == pytest.approx(0.8, abs=1e-15)


def test_sgd_momentum_and_decay():
    p, g, v = np.array([2.0]), np.array([0.5]), np.array([1.0])
    new_p, new_v = sgd_step({"w": p}, {"w": g}, {"w": v}, 0.1, 0.9, 0.01)
    assert new_v["w"][0] == pytest.approx(0.9 * 1.0 + 0.5 + 0.01 * 2.0)
    assert new_p["w"][0] == pytest.approx(2.0 - 0.1 * new_v["w"][0])


def test_sgd_plain_gradient_descent_exact():
    rng = np.random.default_rng(0)
    p, g = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    new_p, _ = sgd_step({"w": p}, {"w": g}, {}, 0.05, 0.0, 0.0)
    np.testing.assert_array_equal(new_p["w"], p - 0.05 * g)


def test_sgd_shape_mismatch():
    with pytest.raises(ShapeError):
        sgd_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, {}, 0.1, 0.9, 0.0)


def test_lr_drops_tenfold_at_two_thirds():
    cfg = TrainConfig(lr=2e-3, iterations=300)
    assert cfg.lr_at(0) == 2e-3 and cfg.lr_at(199) == 2e-3
    assert cfg.lr_at(200) == pytest.approx(2e-4) and cfg.lr_at(299) == pytest.approx(2e-4)


def test_train_config_validation():
    for bad in (dict(lr=0), dict(momentum=1.0), dict(weight_decay=-1), dict(iterations=-1)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_zero_iterations_returns_init(scenes):
    ck = train_dedup(scenes, DEDUP_RAW, TrainConfig(iterations=0, seed=4))
    init = init_dedup(DEDUP_RAW, 4)
    assert set(ck.group("dedup")) == set(init)
    for k, v in init.items():
        np.testing.assert_array_equal(ck.group("dedup")[k], v)
    assert ck.iteration == 0 and ck.losses == []


def test_dedup_loss_decreases_on_default_data():
    # default generator and dedup network, fixed seed
    data = generate(GenConfig(seed=5, num_scenes=100))
    ck = train_dedup(data, DedupConfig(d_feat=64), TrainConfig(iterations=300, seed=0, log_every=0))
    first, last = np.mean(ck.losses[:50]), np.mean(ck.losses[-50:])
    assert last < first
    assert last < 0.8 * first  # measured: about 0.42 -> 0.29


def test_training_is_bit_deterministic(scenes, tmp_path):
    cfg = TrainConfig(iterations=20, seed=2, log_every=0)
    a, b = tmp_path / "a.ck", tmp_path / "b.ck"
    save_checkpoint(train_dedup(scenes, DEDUP_RAW, cfg), a)
    save_checkpoint(train_dedup(scenes, DEDUP_RAW, cfg), b)
    assert a.read_bytes() == b.read_bytes()


def test_head_training_reduces_loss(scenes):
    ck = train_head(scenes, HEAD, TrainConfig(iterations=120, lr=5e-3, seed=0, log_every=0))
    assert np.mean(ck.losses[-20:]) < np.mean(ck.losses[:20])


def test_e2e_with_zero_dedup_weight_matches_head_only(scenes):
    cfg = TrainConfig(iterations=15, seed=3, dedup_weight=0.0, log_every=0)
    head_only = train_head(scenes, HEAD, cfg)
    joint = train_end_to_end(scenes, HEAD, DEDUP_HEAD, cfg)
    for k, v in head_only.group("head").items():
        np.testing.assert_array_equal(joint.group("head")[k], v)


def test_e2e_joint_loss_decreases(scenes):
    ck = train_end_to_end(scenes, HEAD, DEDUP_HEAD, TrainConfig(iterations=120, lr=5e-3, seed=0, log_every=0))
    assert np.mean(ck.losses[-20:]) < np.mean(ck.losses[:20])


def test_e2e_requires_matching_feature_dims(scenes):
    with pytest.raises(ValueError):
        train_end_to_end(scenes, HEAD, DEDUP_RAW, TrainConfig(iterations=1))


def test_dedup_on_frozen_head_keeps_head_fixed(scenes):
    head = train_head(scenes, HEAD, TrainConfig(iterations=5, seed=0, log_every=0))
    ck = train_dedup(scenes, DEDUP_HEAD, TrainConfig(iterations=10, seed=0, log_every=0), head=head, head_cfg=HEAD)
    for k, v in head.group("head").items():
        np.testing.assert_array_equal(ck.group("head")[k], v)
    assert any(not np.array_equal(ck.group("dedup")[k], v) for k, v in init_dedup(DEDUP_HEAD, 0).items())


def _flip_scene():
    gt = np.array([[100.0, 100.0, 40.0, 40.0]])
    a = [100.0 + 40 * 0.45 / 1.55, 100.0, 40.0, 40.0]  # IoU 0.55 with the GT: foreground for the head
    b = [100.0 + 40 * 0.55 / 1.45, 100.0, 40.0, 40.0]  # IoU 0.45: background for the head
    feats = np.eye(4)[:2]
    return Scene(0, gt, [0], np.array([a, b]), [0, 0], [0.5, 0.5], feats)


def test_e2e_labels_follow_current_head_scores():
    rel = RelationConfig(num_heads=2, d_k=4, d_g=8, d_f=4)
    hcfg = HeadConfig(d_in=4, d_hidden=4, r1=0, r2=0, num_classes=1, relation=rel)
    dcfg = DedupConfig(d_feat=4, d_fused=4, rank_dim=4, relation=rel, etas=(0.3,), prune_threshold=None)
    tcfg = TrainConfig(iterations=150, lr=0.05, momentum=0.9, weight_decay=0.0, seed=0, log_every=0)
    params = {f"head/{k}": v for k, v in init_head(hcfg, 0).items()}
    params.update({f"dedup/{k}": v for k, v in init_dedup(dcfg, 0).items()})
    # identity trunk; the foreground logit starts out favouring proposal b
    params["head/fc1.W"] = np.eye(4)
    params["head/fc2.W"] = np.eye(4)
    params["head/fc1.b"] = params["head/fc2.b"] = np.zeros(4)
    params["head/cls.W"] = np.array([[0.0, 0.0, 0, 0], [0.0, 2.0, 0, 0]])
    params["head/cls.b"] = np.zeros(2)
    params["head/box.W"] = np.zeros((4, 4))
    params["head/box.b"] = np.zeros(4)
    seen = []
    train_end_to_end([_flip_scene()], hcfg, dcfg, tcfg, init=Checkpoint(params=params),
                     on_labels=lambda it, i, labels: seen.append(labels[:, 0].tolist()))
    assert seen[0] == [0, 1]  # b holds the correct label at the start
    assert seen[-1] == [1, 0]  # after training, a outscores b and takes it over


def test_checkpoint_round_trip(scenes, tmp_path):
    ck = train_dedup(scenes, DEDUP_RAW, TrainConfig(iterations=5, seed=1, log_every=0))
    p1, p2 = tmp_path / "1.ck", tmp_path / "2.ck"
    save_checkpoint(ck, p1)
    back = load_checkpoint(p1)
    save_checkpoint(back, p2)
    assert p1.read_bytes() == p2.read_bytes()
    for k, v in ck.params.items():
        assert back.params[k].tobytes() == v.tobytes() and back.params[k].shape == v.shape
    assert back.config == ck.config and back.iteration == 5


def test_checkpoint_tampered_tensor(scenes, tmp_path):
    ck = train_dedup(scenes, DEDUP_RAW, TrainConfig(iterations=1, seed=1, log_every=0))
    p = tmp_path / "x.ck"
    save_checkpoint(ck, p)
    raw = bytearray(p.read_bytes())
    raw[-3] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="integrity"):
        load_checkpoint(p)
    p.write_bytes(bytes(raw[:-8]))
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_checkpoint_version_mismatch(tmp_path):
    p = tmp_path / "v.ck"
    save_checkpoint(Checkpoint(params={"w": np.ones(2)}, version=99), p)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(p)
    p.write_bytes(b"NOTACKPT" + p.read_bytes()[len(CHECKPOINT_MAGIC):])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(p)


def test_resume_matches_uninterrupted(scenes, tmp_path):
    cfg = TrainConfig(iterations=30, seed=7, log_every=0)
    full = train_dedup(scenes, DEDUP_RAW, cfg)
    half = train_dedup(scenes, DEDUP_RAW, cfg, stop_at=13)
    save_checkpoint(half, tmp_path / "h.ck")
    resumed = train_dedup(scenes, DEDUP_RAW, cfg, init=load_checkpoint(tmp_path / "h.ck"))
    assert resumed.losses == full.losses
    for k, v in full.params.items():
        np.testing.assert_array_equal(resumed.params[k], v)
