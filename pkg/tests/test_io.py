import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from synclip import container
from synclip.checkpoint import load_checkpoint, save_checkpoint
from synclip.exceptions import ConfigMismatch, ContractViolation, FormatError, MediaError
from synclip.expert import init_expert, toy_expert_config
from synclip.gan import init_quality_disc, toy_disc_config
from synclip.generator import init_generator, toy_generator_config
from synclip.media import (read_audio, read_clip, read_frames_container, read_video, read_wav,
                           write_frames_container, write_video, write_wav)
from synclip.params import ParameterSet


# --------------------------------------------------------------------------- container

dtypes = st.sampled_from([np.float32, np.float64, np.int64, np.uint8, np.int16])


@settings(max_examples=40, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=8), st.tuples(dtypes, array_shapes(max_dims=3, max_side=4)),
                       max_size=4), st.integers(0, 2**32 - 1))
def test_container_round_trip(spec, seed):
    rng = np.random.default_rng(seed)
    arrays = {k: (rng.random(shape) * 100).astype(dt) for k, (dt, shape) in spec.items()}
    out, meta = container.loads(container.dumps(arrays, {"x": 1}))
    assert meta == {"x": 1}
    assert set(out) == set(arrays)
    for k in arrays:
        assert out[k].dtype == arrays[k].dtype and out[k].shape == arrays[k].shape
        assert out[k].tobytes() == arrays[k].tobytes()


def test_container_big_endian_normalised():
    a = np.arange(4, dtype=">f4")
    out, _ = container.loads(container.dumps({"a": a}))
    assert out["a"].dtype == np.dtype("<f4")
    np.testing.assert_array_equal(out["a"], a)


def test_container_rejects_damage(tmp_path):
    blob = container.dumps({"a": np.arange(10.0)}, {"k": "v"})
    for cut in (0, 10, 30, len(blob) - 1):
        with pytest.raises(FormatError):
            container.loads(blob[:cut])
    flipped = bytearray(blob)
    flipped[40] ^= 1
    with pytest.raises(FormatError):
        container.loads(bytes(flipped))
    with pytest.raises(FormatError):
        container.loads(b"NOTMAGIC" + blob[8:])
    bumped = bytearray(blob)
    bumped[8:12] = struct.pack("<I", 99)
    with pytest.raises(FormatError):
        container.loads(bytes(bumped))
    with pytest.raises(FormatError):
        container.dumps({"o": np.array(["x"], dtype=object)})


def test_container_save_is_atomic(tmp_path):
    path = tmp_path / "c.bin"
    container.save(path, {"a": np.ones(3)})
    assert list(tmp_path.iterdir()) == [path]
    np.testing.assert_array_equal(container.load(path)[0]["a"], np.ones(3))


# --------------------------------------------------------------------------- parameter sets

def test_frozen_parameter_set():
    p = ParameterSet({"w": np.ones(3)}).freeze()
    with pytest.raises(ContractViolation):
        p["w"] = np.zeros(3)
    with pytest.raises(ValueError):
        p["w"][0] = 5
    u = p.unfrozen_copy()
    u["w"] = np.zeros(3)
    assert p.checksum() != u.checksum()
    assert p.checksum() == ParameterSet({"w": np.ones(3)}).checksum()


# --------------------------------------------------------------------------- checkpoints

@pytest.mark.parametrize("make", [
    lambda w: init_expert(toy_expert_config(5), w),
    lambda w: init_generator(toy_generator_config(w), w),
    lambda w: init_quality_disc(toy_disc_config()),
])
def test_checkpoint_round_trip(make, toy_cfg, tmp_path):
    p = make(toy_cfg)
    p.step_count = 17
    save_checkpoint(p, None, tmp_path / "x.ckpt")
    q, cfg = load_checkpoint(tmp_path / "x.ckpt")
    assert q.kind == p.kind and q.step_count == 17 and cfg == p.config
    for k in p.names():
        assert q[k].dtype == p[k].dtype and q[k].tobytes() == p[k].tobytes()


def test_checkpoint_truncated(toy_cfg, tmp_path):
    p = init_expert(toy_expert_config(5), toy_cfg)
    path = tmp_path / "e.ckpt"
    save_checkpoint(p, None, path)
    data = path.read_bytes()
    path.write_bytes(data[:len(data) // 2])
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_checkpoint_version_and_shape_checks(toy_cfg, tmp_path):
    p = init_expert(toy_expert_config(5), toy_cfg)
    arrays, meta = p.arrays, {"format": "synclip-checkpoint", "checkpoint_version": 2, "kind": p.kind,
                              "config": p.config}
    container.save(tmp_path / "v2.ckpt", arrays, meta)
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "v2.ckpt")
    bad = dict(arrays)
    name = sorted(bad)[0]
    bad[name] = np.zeros(bad[name].shape + (1,), dtype=bad[name].dtype)
    container.save(tmp_path / "shape.ckpt", bad, {**meta, "checkpoint_version": 1})
    with pytest.raises(ConfigMismatch):
        load_checkpoint(tmp_path / "shape.ckpt")


def test_checkpoint_window_mismatch(toy_cfg, tmp_path):
    p = init_expert(toy_expert_config(5), toy_cfg)
    save_checkpoint(p, None, tmp_path / "e.ckpt")
    with pytest.raises(ConfigMismatch):
        load_checkpoint(tmp_path / "e.ckpt", runtime_window=toy_cfg.with_window(3))
    with pytest.raises(ConfigMismatch):
        load_checkpoint(tmp_path / "e.ckpt", expect_kind="generator")
    load_checkpoint(tmp_path / "e.ckpt", runtime_window=toy_cfg)


# --------------------------------------------------------------------------- media

def test_wav_round_trip(tmp_path):
    x = np.sin(np.linspace(0, 40, 1600)).astype(np.float32) * 0.5
    write_wav(tmp_path / "a.wav", x, 16000)
    y, sr = read_wav(tmp_path / "a.wav")
    assert sr == 16000 and len(y) == 1600
    np.testing.assert_allclose(y, x, atol=1 / 32767)
    np.testing.assert_allclose(read_audio(tmp_path / "a.wav", 16000), y)
    with pytest.raises(MediaError):
        read_audio(tmp_path / "a.wav", 8000)
    with pytest.raises(MediaError):
        read_audio(tmp_path / "missing.wav", 16000)
    (tmp_path / "bad.wav").write_bytes(b"RIFFjunk")
    with pytest.raises(MediaError):
        read_wav(tmp_path / "bad.wav")


def test_clip_round_trip(tmp_path, rng):
    frames = (rng.random((4, 8, 8, 3)) * 255).astype(np.uint8)
    write_frames_container(tmp_path / "v.clip", frames, 25.0)
    got, fps = read_video(tmp_path / "v.clip")
    assert fps == 25.0
    np.testing.assert_array_equal(got, frames)
    write_wav(tmp_path / "a.wav", np.zeros(100), 16000)
    write_video(tmp_path / "o.clip", frames, 30.0, tmp_path / "a.wav")
    clip = read_clip(tmp_path / "o.clip")
    assert clip["audio"] == (tmp_path / "a.wav").read_bytes()
    assert clip["fps"] == 30.0 and clip["audio_name"] == "a.wav"
    (tmp_path / "junk.clip").write_bytes(b"junk")
    with pytest.raises(MediaError):
        read_frames_container(tmp_path / "junk.clip")
