import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch.nn import functional as F

from evtexture.events import EventStream, VoxelGrid, voxelize
from evtexture.network import EvTexture, load_checkpoint
from evtexture.training import (ClipDataset, TrainConfig, TrainingDivergedError, bicubic_psnr, build_optimizer,
                                charbonnier_loss, cosine_lr, flip_all, make_corpus, train, validate)

from netutils import randomize_zero_params, tiny_config

FAST = dict(crop=8, seq_len=3, batch=1, clip_size=32, clip_frames=4, train_clips=2, val_clips=1, val_every=2,
            ckpt_every=2, flow_freeze_iters=0, seed=3)


@pytest.fixture(scope="module")
def corpus():
    cfg = TrainConfig(**FAST)
    return make_corpus(2, cfg, seed=11), make_corpus(1, cfg, seed=12, frames=3)


def _model(seed=0, randomize=False):
    torch.manual_seed(seed)
    model = EvTexture(tiny_config(bins=5))
    if randomize:
        randomize_zero_params(model, std=0.05, seed=seed)
    return model


# -- loss --------------------------------------------------------------------

def test_charbonnier_zero_residual_is_eps():
    x = torch.rand(2, 3, 3, 8, 8, dtype=torch.float64)
    assert charbonnier_loss(x, x, 1e-3).item() == pytest.approx(1e-3, abs=1e-15)


def test_charbonnier_l1_limit():
    x = torch.zeros(1, 3, 4, 4, dtype=torch.float64)
    assert charbonnier_loss(x + 3, x, 0.0).item() == 3.0
    assert charbonnier_loss(x + 3, x, 1e-6).item() == pytest.approx(3.0, abs=1e-9)


def test_charbonnier_elementwise_oracle():
    gen = torch.Generator().manual_seed(0)
    a, b = torch.rand(2, 2, generator=gen, dtype=torch.float64), torch.rand(2, 2, generator=gen, dtype=torch.float64)
    eps = 1e-3
    expected = sum(math.sqrt((a[i, j].item() - b[i, j].item()) ** 2 + eps * eps)
                   for i in range(2) for j in range(2)) / 4
    assert charbonnier_loss(a, b, eps).item() == pytest.approx(expected, abs=1e-9)


def test_charbonnier_shape_mismatch():
    with pytest.raises(ValueError):
        charbonnier_loss(torch.zeros(2, 3), torch.zeros(3, 2))


# -- augmentation ------------------------------------------------------------

def _triple(seed=0):
    rng = np.random.default_rng(seed)
    return rng.random((3, 3, 8, 8)), rng.random((3, 3, 32, 32)), rng.random((2, 5, 8, 8)) * 2 - 1


@pytest.mark.parametrize("hflip,vflip", [(True, False), (False, True), (True, True)])
def test_double_flip_is_identity(hflip, vflip):
    lr, hr, vox = _triple()
    once = flip_all(lr, hr, vox, hflip, vflip)
    twice = flip_all(*once, hflip, vflip)
    for orig, back in zip((lr, hr, vox), twice):
        np.testing.assert_array_equal(orig, back)
    assert not np.array_equal(once[0], lr)


def test_hot_pixel_column_maps_to_mirror():
    vox = np.zeros((5, 8, 10))
    vox[2, 3, 1] = 1.0
    grids = [VoxelGrid(vox, normalized=True, eta=1.0)]
    _, _, flipped = flip_all(np.zeros((2, 3, 8, 10)), np.zeros((2, 3, 32, 40)), grids, True, False)
    assert flipped[0].bins[2, 3, 10 - 1 - 1] == 1.0
    assert flipped[0].bins.sum() == 1.0  # polarity unchanged


def test_voxel_flip_matches_mirrored_events():
    rng = np.random.default_rng(5)
    n = 40
    stream = EventStream.from_arrays(rng.integers(0, 12, n), rng.integers(0, 6, n), np.sort(rng.random(n)),
                                     rng.choice([-1, 1], n), 12, 6)
    direct = voxelize(stream.hflip(), 4).bins
    _, _, flipped = flip_all(np.zeros((1, 3, 6, 12)), np.zeros((1, 3, 6, 12)), voxelize(stream, 4).bins, True, False)
    np.testing.assert_allclose(direct, flipped, atol=1e-12)


def test_flip_commutes_with_bicubic_upsampling():
    lr, _, _ = _triple(1)
    t = torch.as_tensor(lr)
    up = lambda x: F.interpolate(x, scale_factor=4, mode="bicubic", align_corners=False)
    for dims in ((-1,), (-2,), (-1, -2)):
        torch.testing.assert_close(up(t.flip(dims)), up(t).flip(dims), atol=1e-12, rtol=0)


def test_dataset_sampling_is_seeded(corpus):
    clips, _ = corpus
    ds = ClipDataset(clips, crop=8, seq_len=3)
    a = ds.sample(np.random.default_rng(0), 2)
    b = ds.sample(np.random.default_rng(0), 2)
    for x, y in zip(a, b):
        assert torch.equal(x, y)
    assert a[0].shape == (2, 3, 3, 8, 8) and a[1].shape == (2, 3, 3, 32, 32) and a[2].shape == (2, 2, 5, 8, 8)


# -- schedule and config -----------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(total=st.integers(1, 5000), base=st.floats(1e-6, 1e-2))
def test_cosine_schedule_monotone(total, base):
    lrs = [cosine_lr(base, it, total) for it in range(0, total + 1, max(1, total // 50))]
    assert lrs[0] == pytest.approx(base)
    assert all(b <= a + 1e-18 for a, b in zip(lrs, lrs[1:]))
    assert cosine_lr(base, total, total) == pytest.approx(0.0, abs=1e-18)


@pytest.mark.parametrize("kw", [dict(lr_main=0), dict(lr_flow=-1), dict(crop=30), dict(seq_len=1)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_config_presets_and_round_trip():
    paper = TrainConfig.preset("paper")
    assert (paper.lr_main, paper.lr_flow, paper.flow_freeze_iters) == (2e-4, 2.5e-5, 5000)
    assert (paper.crop, paper.seq_len, paper.batch, paper.total_iters) == (64, 15, 8, 300000)
    desk = TrainConfig.preset("desk")
    assert desk.lr_main / desk.lr_flow == pytest.approx(8.0)
    assert TrainConfig.from_dict(desk.to_dict()) == desk
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"nope": 1})


def test_optimizer_groups():
    model = _model()
    opt = build_optimizer(model, TrainConfig(lr_main=1e-3, lr_flow=1e-4))
    names = {g["name"]: g for g in opt.param_groups}
    assert names["main"]["lr"] == 1e-3 and names["flow"]["lr"] == 1e-4
    assert opt.defaults["betas"] == (0.9, 0.999)
    flow_ids = {id(p) for p in model.flownet.parameters()}
    assert {id(p) for p in names["flow"]["params"]} == flow_ids
    total = sum(p.numel() for g in opt.param_groups for p in g["params"])
    assert total == sum(p.numel() for p in model.parameters())


# -- training loop -----------------------------------------------------------

def test_zero_iterations_keeps_initialization(corpus, tmp_path):
    clips, val = corpus
    model = _model()
    init = {k: v.clone() for k, v in model.state_dict().items()}
    cfg = TrainConfig(**FAST, total_iters=0)
    result = train(model, ClipDataset(clips, 8, 3), cfg, tmp_path, val_clips=val)
    loaded, _ = load_checkpoint(result.checkpoint)
    for k, v in loaded.state_dict().items():
        assert torch.equal(v, init[k]), k
    assert result.initial_val_psnr == pytest.approx(bicubic_psnr(val), abs=1e-4)
    assert (tmp_path / "metrics.csv").read_text().splitlines() == ["iter,loss,lr,val_psnr",
                                                                   f"0,,,{result.initial_val_psnr!r}"]


def test_flow_group_frozen_then_trained(corpus):
    clips, _ = corpus
    model = _model(randomize=True)
    flow0 = [p.detach().clone() for p in model.flownet.parameters()]
    main0 = [p.detach().clone() for p in model.upsampler.parameters()]
    cfg = TrainConfig(**{**FAST, "flow_freeze_iters": 3}, total_iters=3)
    train(model, ClipDataset(clips, 8, 3), cfg)
    assert all(torch.equal(a, b) for a, b in zip(flow0, model.flownet.parameters()))
    assert not all(torch.equal(a, b) for a, b in zip(main0, model.upsampler.parameters()))

    model = _model(randomize=True)
    cfg = TrainConfig(**{**FAST, "flow_freeze_iters": 1}, total_iters=3)
    train(model, ClipDataset(clips, 8, 3), cfg)
    assert not all(torch.equal(a, b) for a, b in zip(flow0, model.flownet.parameters()))


def test_checkpoints_and_metrics_written(corpus, tmp_path):
    clips, val = corpus
    cfg = TrainConfig(**FAST, total_iters=4)
    result = train(_model(), ClipDataset(clips, 8, 3), cfg, tmp_path, val_clips=val)
    assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == ["ckpt_000002.ckpt", "ckpt_000004.ckpt", "model.ckpt"]
    rows = (tmp_path / "metrics.csv").read_text().splitlines()
    assert len(rows) == 1 + 1 + 4
    lrs = [float(r.split(",")[2]) for r in rows[2:]]
    assert lrs == sorted(lrs, reverse=True)
    vals = [r.split(",")[3] for r in rows[1:]]
    assert vals[2] and vals[4] and not vals[1] and not vals[3]
    assert result.final_val_psnr == pytest.approx(validate(load_checkpoint(result.checkpoint)[0], val))


def test_seeded_runs_write_identical_csvs(corpus, tmp_path):
    clips, val = corpus
    cfg = TrainConfig(**FAST, total_iters=4)
    for name in ("a", "b"):
        train(_model(seed=1), ClipDataset(clips, 8, 3), cfg, tmp_path / name, val_clips=val)
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_nan_loss_dumps_batch(corpus, tmp_path, monkeypatch):
    clips, _ = corpus
    model = _model()
    monkeypatch.setattr(model, "forward", lambda lr, vox: torch.full((lr.shape[0], lr.shape[1], 3, 32, 32),
                                                                      float("nan")))
    with pytest.raises(TrainingDivergedError, match="iteration 1"):
        train(model, ClipDataset(clips, 8, 3), TrainConfig(**FAST, total_iters=3), tmp_path)
    dump = np.load(tmp_path / "nan_batch_000001.npz")
    assert dump["lr"].shape == (1, 3, 3, 8, 8) and dump["voxels"].shape == (1, 2, 5, 8, 8)


@pytest.mark.slow
def test_loss_drops_within_200_iterations():
    cfg = TrainConfig(**{**FAST, "batch": 2, "crop": 16, "clip_size": 64}, total_iters=200, lr_main=1e-3,
                      lr_flow=1.25e-4)
    clips = make_corpus(4, cfg, seed=21)
    result = train(_model(), ClipDataset(clips, 16, 3), cfg)
    losses = [r["loss"] for r in result.history[1:]]
    assert np.mean(losses[-20:]) < np.mean(losses[:20])
    assert losses[-1] < losses[0]
