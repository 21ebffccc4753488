import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.ndimage import gaussian_filter

from evtexture import data, events
from evtexture.data import (ClipRecord, ingest_clip, load_clip_dir, make_lr, read_frames, synth_clip, write_clip,
                            write_frames)
from evtexture.evaluation import texture_magnitude
from evtexture.events import EventStream, SimulatorConfig, write_evt1

SIM = SimulatorConfig(contrast_mean=0.3, contrast_std=0.03, rng_seed=0)


# -- make_lr -----------------------------------------------------------------

def test_make_lr_constant_frame():
    hr = np.full((2, 3, 32, 32), 0.37)
    np.testing.assert_allclose(make_lr(hr, 4), 0.37, atol=1e-12)


def test_make_lr_shape():
    assert make_lr(np.zeros((5, 3, 128, 128)), 4).shape == (5, 3, 32, 32)


def test_make_lr_rejects_indivisible():
    with pytest.raises(ValueError):
        make_lr(np.zeros((1, 3, 30, 32)), 4)


def test_make_lr_ramp_midpoint():
    w, s, a, b = 128, 4, 0.2, 0.8
    x = (np.arange(w) + 0.5) / w
    hr = np.broadcast_to(a + (b - a) * x, (1, 3, 64, w)).copy()
    lr = make_lr(hr, s)
    mid = lr[0, 0, 8, w // s // 2 - 1: w // s // 2 + 1].mean()
    assert mid == pytest.approx((a + b) / 2, abs=1e-3)
    # interior LR pixels sample the ramp at their own centres
    xl = (np.arange(w // s) + 0.5) / (w // s)
    np.testing.assert_allclose(lr[0, 0, 8, 4:-4], (a + (b - a) * xl)[4:-4], atol=1e-9)


def test_frame_and_voxel_downsampling_share_one_kernel(monkeypatch):
    calls = []
    real = data.bicubic_downsample

    def spy(arr, scale):
        calls.append(arr.shape)
        return real(arr, scale)

    monkeypatch.setattr(data, "bicubic_downsample", spy)
    monkeypatch.setattr(events, "bicubic_downsample", spy)
    synth_clip("checkerboard", T=3, H=32, W=32, velocity=(1.0, 0.0), seed=0, bins=3, sim_cfg=SIM)
    assert (3, 3, 32, 32) in calls  # frames
    assert calls.count((3, 32, 32)) == 2  # one voxel grid per interval
    assert data.bicubic_downsample is events.bicubic_downsample


# -- synth_clip --------------------------------------------------------------

def test_synth_clip_shapes():
    clip = synth_clip("perlin-texture", T=5, H=128, W=128, velocity=(1.5, -0.5), seed=3, sim_cfg=SIM)
    assert clip.hr_frames.shape == (5, 3, 128, 128)
    assert clip.lr_frames.shape == (5, 3, 32, 32)
    assert len(clip.lr_voxels) == 4 and len(clip.hr_events) == 4
    assert all(v.shape == (5, 32, 32) and v.normalized for v in clip.lr_voxels)
    assert 0.0 <= clip.texture_magnitude <= 1.0


@pytest.mark.parametrize("kind", data.KINDS)
def test_synth_clip_deterministic(kind):
    a = synth_clip(kind, T=3, H=32, W=32, velocity=(1.0, 0.5), seed=7, sim_cfg=SIM)
    b = synth_clip(kind, T=3, H=32, W=32, velocity=(1.0, 0.5), seed=7, sim_cfg=SIM)
    np.testing.assert_array_equal(a.hr_frames, b.hr_frames)
    np.testing.assert_array_equal(a.voxel_array(), b.voxel_array())
    assert a.hr_frames.min() >= 0.0 and a.hr_frames.max() <= 1.0


def test_zero_velocity_is_static_and_silent():
    clip = synth_clip("checkerboard", T=4, H=32, W=32, velocity=(0.0, 0.0), seed=1)
    assert all(np.array_equal(f, clip.hr_frames[0]) for f in clip.hr_frames)
    assert len(clip.events) == 0
    assert not clip.voxel_array().any()


@settings(max_examples=15, deadline=None)
@given(vel=st.tuples(st.integers(-3, 3), st.integers(-3, 3)).filter(lambda v: v[0] ** 2 + v[1] ** 2 <= 16),
       seed=st.integers(0, 1000), kind=st.sampled_from(["checkerboard", "perlin-texture"]))
def test_integer_velocity_shifts_exactly(vel, seed, kind):
    vx, vy = vel
    clip = synth_clip(kind, T=3, H=32, W=32, velocity=(vx, vy), seed=seed, sim_cfg=SIM)
    f = clip.hr_frames
    b = 3
    for t in range(len(f) - 1):
        nxt = f[t + 1, :, b:-b, b:-b]
        shifted = f[t, :, b - vy:32 - b - vy, b - vx:32 - b - vx]
        np.testing.assert_array_equal(nxt, shifted)


def test_checkerboard_beats_blurred_clone():
    clip = synth_clip("checkerboard", T=3, H=64, W=64, velocity=(1.0, 0.0), seed=2, sim_cfg=SIM)
    blurred = gaussian_filter(clip.hr_frames, (0, 0, 1.5, 1.5))
    assert clip.texture_magnitude > texture_magnitude(blurred).magnitude


@pytest.mark.parametrize("kw", [dict(kind="plasma"), dict(H=30), dict(velocity=(3.0, 3.0)), dict(T=1)])
def test_synth_clip_validation(kw):
    args = dict(kind="checkerboard", T=3, H=32, W=32, velocity=(1.0, 0.0))
    args.update(kw)
    with pytest.raises(ValueError):
        synth_clip(**args)


def test_clip_record_invariants():
    clip = synth_clip("checkerboard", T=3, H=32, W=32, seed=0, sim_cfg=SIM)
    with pytest.raises(ValueError):
        ClipRecord(clip.hr_frames, clip.lr_frames, clip.hr_events, clip.lr_voxels[:1], "x", 0.0)
    with pytest.raises(ValueError):
        ClipRecord(clip.hr_frames, clip.lr_frames[..., :4], clip.hr_events, clip.lr_voxels, "x", 0.0)


def test_events_partition_into_intervals():
    clip = synth_clip("moving-text", T=4, H=32, W=32, velocity=(2.0, 1.0), seed=5, sim_cfg=SIM)
    assert sum(len(s) for s in clip.hr_events) == len(clip.events)
    ts = clip.timestamps
    for i, s in enumerate(clip.hr_events):
        if len(s):
            assert s.t.min() >= ts[i]
            assert s.t.max() < ts[i + 1] or (i == len(ts) - 2 and s.t.max() <= ts[i + 1])


# -- disk round trip and ingestion -------------------------------------------

def test_round_trip_is_exact(tmp_path):
    clip = synth_clip("perlin-texture", T=4, H=32, W=32, velocity=(1.3, 0.4), seed=4, sim_cfg=SIM)
    write_clip(clip, tmp_path / "clip")
    meta = json.loads((tmp_path / "clip" / "meta.json").read_text())
    assert meta["fps"] == clip.fps and meta["scale"] == 4
    back = load_clip_dir(tmp_path / "clip")
    np.testing.assert_array_equal(back.hr_frames, clip.hr_frames)
    np.testing.assert_array_equal(back.lr_frames.astype(np.float32), clip.lr_frames.astype(np.float32))
    np.testing.assert_array_equal(back.voxel_array(), clip.voxel_array())
    assert back.name == clip.name


def test_ingest_counts_intervals(tmp_path):
    frames = np.random.default_rng(0).random((10, 3, 16, 16))
    write_frames(frames, tmp_path / "f")
    stream = EventStream.from_arrays([1, 2, 3], [4, 5, 6], [0.01, 0.1, 0.25], [1, -1, 1], 16, 16)
    write_evt1(stream, tmp_path / "e.evt1")
    clip = ingest_clip(tmp_path / "f", tmp_path / "e.evt1", scale=4, bins=3)
    assert len(clip.lr_voxels) == 9
    assert clip.lr_frames.shape == (10, 3, 4, 4)


def test_ingest_events_outside_span_warn(tmp_path, caplog):
    write_frames(np.full((3, 3, 16, 16), 0.5), tmp_path / "f")
    stream = EventStream.from_arrays([1, 2], [1, 2], [5.0, 6.0], [1, -1], 16, 16)
    write_evt1(stream, tmp_path / "e.evt1")
    with caplog.at_level(logging.WARNING):
        clip = ingest_clip(tmp_path / "f", tmp_path / "e.evt1", scale=4, bins=3)
    assert not clip.voxel_array().any()
    assert "outside the frame time span" in caplog.text
    assert caplog.text.count("no events in interval") == 2


def test_unreadable_inputs_name_the_path(tmp_path):
    with pytest.raises(OSError, match="missing"):
        read_frames(tmp_path / "missing")
    (tmp_path / "bad").mkdir()
    (tmp_path / "bad" / "000000.png").write_bytes(b"not a png")
    with pytest.raises(OSError, match="000000.png"):
        read_frames(tmp_path / "bad")
    with pytest.raises(OSError, match="meta.json"):
        load_clip_dir(tmp_path / "nothing")
