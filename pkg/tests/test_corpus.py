import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tempodistill import corpus
from tempodistill.corpus import (BadMagicError, ClassSpec, ConfigError, CorpusConfig, LabeledVideoSet,
                                 TruncatedPayloadError, VersionMismatchError, dynamic_class_ids, generate,
                                 render_video, static_class_ids, staticize, staticize_indices, trajectory)
from tempodistill.numkit import ContractError, RngStream

from .conftest import tiny_corpus_config


def test_default_counts_and_shapes(default_corpus):
    train, test, reward = default_corpus
    assert len(train) == 128 and train.videos.shape == (128, 8, 16, 16, 1)
    assert len(test) == 128 and len(reward) == 128
    assert np.bincount(train.labels).tolist() == [16] * 8
    assert [s.split for s in default_corpus] == ["train", "test", "reward"]
    assert train.videos.min() >= 0.0 and train.videos.max() <= 1.0


def test_default_has_four_static_four_dynamic():
    cfg = CorpusConfig()
    assert static_class_ids(cfg) == [0, 1, 2, 3]
    assert dynamic_class_ids(cfg) == [4, 5, 6, 7]
    dyn = [c for c in cfg.classes if c.is_dynamic]
    assert {c.appearance for c in dyn} == {"dot"}


def test_static_class_frames_identical_without_noise():
    train, _, _ = generate(CorpusConfig(noise_std=0.0, per_class_train=3, per_class_test=1, per_class_reward=1))
    for v in train.videos[train.labels < 4]:
        for t in range(1, 8):
            np.testing.assert_array_equal(v[t], v[0])


def test_left_right_share_frame_zero_but_not_frame_one():
    left = ClassSpec(0, "dot", "left", 2.0)
    right = ClassSpec(1, "dot", "right", 2.0)
    dots = [(1.0, 2.0), (5.5, 9.0), (12.0, 3.0)]
    a = render_video(left, 8, 16, 16, 1, 7.5, 7.5, dots=dots)
    b = render_video(right, 8, 16, 16, 1, 7.5, 7.5, dots=dots)
    np.testing.assert_array_equal(a[0], b[0])
    assert not np.array_equal(a[1], b[1])


def test_oscillation_periods_and_aliasing():
    slow = ClassSpec(0, "dot", "oscillate_slow", 1.0)
    fast = ClassSpec(1, "dot", "oscillate_fast", 1.0)
    s = trajectory(slow, 8, 5.0, 5.0)
    f = trajectory(fast, 8, 5.0, 5.0)
    # Fast repeats after 4 frames; slow passes back through the start at half period.
    np.testing.assert_allclose(f[4:], f[:4], atol=1e-12)
    np.testing.assert_allclose(s[4], s[0], atol=1e-12)
    assert not np.allclose(s[2], s[0])
    # Peak speed equals the configured speed: max |dx/dt| = A * 2*pi/period.
    assert np.max(np.abs(np.diff(trajectory(slow, 64, 0.0, 0.0)[:, 1]))) <= 1.0 + 1e-12
    np.testing.assert_array_equal(s[:, 0], 5.0)


def test_jitter_starts_at_anchor():
    spec = ClassSpec(0, "dot", "jitter", 1.5)
    offsets = np.random.default_rng(0).normal(size=(8, 2))
    traj = trajectory(spec, 8, 3.0, 4.0, offsets)
    np.testing.assert_array_equal(traj[0], [3.0, 4.0])
    np.testing.assert_allclose(traj[1:], [3.0, 4.0] + 1.5 * offsets[1:])


def test_dynamic_single_frame_is_ambiguous():
    # Any frame of a left-moving clip is a valid frame of some right-moving clip.
    left = ClassSpec(0, "dot", "left", 2.0)
    right = ClassSpec(1, "dot", "right", 2.0)
    a = render_video(left, 8, 16, 16, 1, 7.5, 7.5)
    b = render_video(right, 8, 16, 16, 1, 7.5, 7.5 - 2.0 * 3)
    np.testing.assert_allclose(a[3], b[0], atol=1e-12)


def test_generate_is_deterministic_and_seed_sensitive():
    a = generate(tiny_corpus_config(seed=3))
    b = generate(tiny_corpus_config(seed=3))
    c = generate(tiny_corpus_config(seed=4))
    assert all(x == y for x, y in zip(a, b))
    assert not np.array_equal(a[0].videos, c[0].videos)


def test_splits_are_distinct(tiny_corpus):
    train, test, reward = tiny_corpus
    assert not np.array_equal(train.videos, test.videos)
    assert not np.array_equal(test.videos, reward.videos)


@pytest.mark.parametrize("bad", [
    dict(classes=[ClassSpec(0, "circle"), ClassSpec(1, "circle")]),
    dict(classes=[ClassSpec(0, "circle"), ClassSpec(2, "square")]),
    dict(C=2),
    dict(T=0),
    dict(per_class_train=0),
    dict(noise_std=-1.0),
    dict(classes=[]),
])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        generate(tiny_corpus_config(**bad))


@pytest.mark.parametrize("kwargs", [
    dict(appearance="hexagon"), dict(motion="spin"), dict(motion="none", speed=1.0), dict(motion="left", speed=-1.0),
])
def test_invalid_class_spec(kwargs):
    base = dict(class_id=0, appearance="dot", motion="left", speed=1.0)
    base.update(kwargs)
    with pytest.raises(ConfigError):
        ClassSpec(**base)


def test_three_channel_output():
    train, _, _ = generate(tiny_corpus_config(C=3, noise_std=0.0))
    assert train.videos.shape[-1] == 3
    np.testing.assert_array_equal(train.videos[..., 0], train.videos[..., 2])


# -- staticize ---------------------------------------------------------------

def test_staticize_static_video_is_unchanged():
    train, _, _ = generate(tiny_corpus_config(noise_std=0.0))
    static = train.subset(np.where(train.labels < 2)[0])
    assert staticize(static, RngStream(0)) == static


def test_staticize_shape_labels_and_reproducibility(tiny_corpus):
    train = tiny_corpus[0]
    a = staticize(train, RngStream(5))
    b = staticize(train, RngStream(5))
    assert a.videos.shape == train.videos.shape
    np.testing.assert_array_equal(a.labels, train.labels)
    assert a == b
    picks = staticize_indices(len(train), 8, RngStream(5))
    for i, t in enumerate(picks):
        for s in range(8):
            np.testing.assert_array_equal(a.videos[i, s], train.videos[i, t])


def test_staticize_indices_uniform():
    picks = staticize_indices(80_000, 8, RngStream(1))
    freq = np.bincount(picks, minlength=8) / len(picks)
    np.testing.assert_allclose(freq, 1 / 8, atol=0.01)


def test_staticize_empty():
    empty = LabeledVideoSet(np.zeros((0, 8, 4, 4, 1)), np.zeros(0, dtype=int))
    with pytest.raises(ContractError):
        staticize(empty, RngStream(0))


# -- container ---------------------------------------------------------------

def test_round_trip_default_corpus(tmp_path, default_corpus):
    paths = corpus.save_corpus(tmp_path, CorpusConfig(), default_corpus)
    assert sorted(p.name for p in paths) == ["manifest.json", "reward.dvdc", "test.dvdc", "train.dvdc"]
    config, *sets = corpus.load_corpus(tmp_path)
    assert config.to_dict() == CorpusConfig().to_dict()
    for original, loaded in zip(default_corpus, sets):
        assert loaded == original


def test_save_is_byte_identical(tmp_path, tiny_corpus):
    corpus.save(tiny_corpus[0], tmp_path / "a.dvdc")
    corpus.save(generate(tiny_corpus_config())[0], tmp_path / "b.dvdc")
    assert (tmp_path / "a.dvdc").read_bytes() == (tmp_path / "b.dvdc").read_bytes()


def test_corrupted_magic(tmp_path, tiny_corpus):
    p = tmp_path / "train.dvdc"
    corpus.save(tiny_corpus[0], p)
    data = bytearray(p.read_bytes())
    data[0] ^= 0xFF
    p.write_bytes(bytes(data))
    with pytest.raises(BadMagicError):
        corpus.load(p)


def test_future_version(tmp_path, tiny_corpus):
    p = tmp_path / "train.dvdc"
    corpus.save(tiny_corpus[0], p)
    data = bytearray(p.read_bytes())
    data[4:6] = struct.pack("<H", corpus.VERSION + 1)
    p.write_bytes(bytes(data))
    with pytest.raises(VersionMismatchError):
        corpus.load(p)


@pytest.mark.parametrize("keep", [2, 10, -1])
def test_truncated_payload(tmp_path, tiny_corpus, keep):
    p = tmp_path / "train.dvdc"
    corpus.save(tiny_corpus[0], p)
    data = p.read_bytes()
    p.write_bytes(data[:keep])
    with pytest.raises(BadMagicError if 0 <= keep < 4 else TruncatedPayloadError):
        corpus.load(p)


def test_container_errors_are_distinct():
    kinds = {BadMagicError, VersionMismatchError, TruncatedPayloadError}
    assert len(kinds) == 3
    assert all(issubclass(k, corpus.CorpusFormatError) for k in kinds)


def test_manifest_contents(tmp_path, tiny_corpus):
    corpus.save_corpus(tmp_path, tiny_corpus_config(), tiny_corpus)
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["format"] == "DVDC" and m["version"] == corpus.VERSION
    assert m["meta"]["generator_version"] == corpus.GENERATOR_VERSION
    assert [c["dynamic"] for c in m["classes"]] == [False, False, True, True]


@given(st.integers(1, 3), st.integers(1, 4), st.integers(0, 2 ** 32 - 1))
def test_container_round_trip_property(n, T, seed):
    import tempfile
    from pathlib import Path
    g = np.random.default_rng(seed)
    videos = g.random((n, T, 4, 4, 1)).astype(np.float32).astype(np.float64)
    s = LabeledVideoSet(videos, g.integers(0, 5, n), "test", {})
    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "test.dvdc"
        corpus.save(s, p)
        assert corpus.load(p) == s


def test_labeled_set_contract():
    with pytest.raises(ContractError):
        LabeledVideoSet(np.zeros((2, 8, 4, 4, 1)), np.zeros(3, dtype=int))
    with pytest.raises(ContractError):
        LabeledVideoSet(np.zeros((2, 8, 4, 4)), np.zeros(2, dtype=int))
    with pytest.raises(ContractError):
        LabeledVideoSet(np.zeros((2, 8, 4, 4, 1)), np.zeros(2, dtype=int), split="val")
