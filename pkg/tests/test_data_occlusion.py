import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from partsmamba.data_occlusion import (SCENES, OcclusionMask, ParseError, SkeletonClip, SpecError,
                                       UnsupportedFormatError, apply_mask, center_skeleton,
                                       label_from_name, load_dataset, load_occlusion_table, mask_parts,
                                       mask_periodic, mask_random_frames, mask_temporal, motion_energy,
                                       parse_ntu_skeleton, parse_occlusion_spec, sample_window,
                                       save_dataset, stack_clips, synth_class_mean, synth_dataset,
                                       window_indices, write_ntu_skeleton)


def ntu_text(frames):
    buf = io.StringIO()
    write_ntu_skeleton(buf, frames)
    return buf.getvalue()


@pytest.fixture
def table():
    return load_occlusion_table()


class TestNtuParser:
    def test_golden_two_frames(self):
        rng = np.random.default_rng(0)
        coords = rng.uniform(-1, 3, size=(2, 25, 3))
        clip = parse_ntu_skeleton(ntu_text([[("b1", c)] for c in coords]), "S001C002P003R002A013.skeleton")
        assert clip.joints.shape == (25, 2, 3)
        assert np.array_equal(clip.joints, coords.transpose(1, 0, 2))
        assert clip.label == 12

    def test_moving_body_selected(self):
        rng = np.random.default_rng(1)
        still = rng.normal(size=(25, 3))
        moving = [rng.normal(size=(25, 3)) for _ in range(4)]
        clip = parse_ntu_skeleton(ntu_text([[("A", still), ("B", m)] for m in moving]))
        expected = np.stack(moving, axis=1)
        assert np.array_equal(clip.joints, expected)

    def test_motion_energy_reference_loop(self):
        track = np.random.default_rng(2).normal(size=(25, 5, 3))
        ref = 0.0
        for f in range(1, 5):
            for j in range(25):
                ref += float(np.sqrt(((track[j, f] - track[j, f - 1]) ** 2).sum()))
        assert motion_energy(track) == pytest.approx(ref, rel=1e-12)

    def test_zero_frames(self):
        with pytest.raises(ParseError) as info:
            parse_ntu_skeleton("0\n")
        assert info.value.line == 1

    def test_truncated_reports_line(self):
        text = ntu_text([[("b", np.zeros((25, 3)))]])
        cut = "\n".join(text.splitlines()[:10]) + "\n"
        with pytest.raises(ParseError) as info:
            parse_ntu_skeleton(cut)
        assert info.value.line == 11

    def test_bad_joint_count(self):
        text = ntu_text([[("b", np.zeros((25, 3)))]]).replace("\n25\n", "\n18\n", 1)
        with pytest.raises(UnsupportedFormatError):
            parse_ntu_skeleton(text)

    def test_non_numeric(self):
        text = ntu_text([[("b", np.zeros((25, 3)))]]).splitlines()
        text[5] = "x y z"
        with pytest.raises(ParseError, match="line 6"):
            parse_ntu_skeleton("\n".join(text))

    def test_label_from_name(self):
        assert label_from_name("data/S017C003P020R002A060.skeleton") == 59
        assert label_from_name("clip.skeleton") is None

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), frames=st.integers(1, 4))
    def test_round_trip(self, seed, frames):
        coords = np.random.default_rng(seed).normal(scale=2.0, size=(frames, 25, 3))
        clip = parse_ntu_skeleton(ntu_text([[("b", c)] for c in coords]))
        assert np.array_equal(clip.joints, coords.transpose(1, 0, 2))


class TestWindows:
    def test_identity(self):
        assert window_indices(64, 64).tolist() == list(range(64))

    def test_stride_two(self):
        assert window_indices(128, 64).tolist() == list(range(0, 128, 2))

    def test_loop_padding(self):
        idx = window_indices(32, 64)
        assert np.bincount(idx).tolist() == [2] * 32
        assert idx[:33].tolist() == list(range(32)) + [0]

    def test_errors(self):
        with pytest.raises(ValueError):
            window_indices(0, 4)
        with pytest.raises(ValueError):
            window_indices(4, 0)

    def test_sample_window_shape(self):
        clip = SkeletonClip(np.random.default_rng(0).normal(size=(25, 10, 3)), 1)
        assert sample_window(clip, 4).shape == (25, 4, 3)

    def test_center_and_stack(self):
        clips = synth_dataset(2, 3, seed=0, window=8)
        x, y = stack_clips(clips, 8)
        assert x.shape == (6, 25, 8, 3) and x.dtype == np.float32
        assert not x[:, 1, 0].any()
        raw, _ = stack_clips(clips, 8, center=False)
        np.testing.assert_allclose(x, center_skeleton(raw), atol=1e-6)
        assert y.tolist() == [0, 0, 0, 1, 1, 1]


class TestSynthetic:
    def test_deterministic(self):
        a, b = synth_dataset(4, 5, seed=3), synth_dataset(4, 5, seed=3)
        assert all(np.array_equal(p.joints, q.joints) for p, q in zip(a, b))

    def test_balanced(self):
        labels = [c.label for c in synth_dataset(4, 7, seed=0)]
        assert np.bincount(labels).tolist() == [7] * 4

    def test_classes_differ_in_designated_part(self):
        m0, m1 = synth_class_mean(0, 64), synth_class_mean(1, 64)
        left_hand = 7
        assert np.abs(m0[left_hand] - m1[left_hand]).max() > 10 * 0.01

    def test_noise_level(self):
        clips = synth_dataset(2, 40, seed=0, window=16)
        resid = np.concatenate([(c.joints - synth_class_mean(c.label, 16)).ravel() for c in clips])
        # residual mixes sigma=0.01 noise with phase/amplitude jitter; noise dominates at rest joints
        rest = np.concatenate([(c.joints[12] - synth_class_mean(c.label, 16)[12]).ravel() for c in clips])
        assert 0.007 < rest.std() < 0.02
        assert np.isfinite(resid).all()

    def test_needs_two_classes(self):
        with pytest.raises(ValueError):
            synth_dataset(1, 3, seed=0)

    def test_native_round_trip(self, tmp_path):
        clips = synth_dataset(3, 2, seed=4, window=6)
        save_dataset(tmp_path / "d.txt", clips)
        back = load_dataset(tmp_path / "d.txt")
        for a, b in zip(clips, back):
            assert np.array_equal(a.joints, b.joints)
            assert a.label == b.label


class TestMasks:
    @pytest.mark.parametrize("scene", SCENES)
    def test_parts_scene(self, scene, table):
        m = mask_parts(scene, table, 25, 64)
        hidden = sorted(np.flatnonzero(~m.visible[:, 0]))
        assert hidden == sorted(table[scene])
        assert (m.visible == m.visible[:, :1]).all()
        assert m.visible.sum(axis=0).tolist() == [25 - len(table[scene])] * 64

    def test_shipped_table(self, table):
        assert set(table) == set(SCENES)
        assert sorted(table["trunk"]) == [0, 1, 2, 3, 20]
        assert sorted(table["two_hands"]) == [21, 22, 23, 24]
        assert set().union(*map(set, table.values())) == set(range(25))

    def test_unknown_scene(self, table):
        with pytest.raises(KeyError):
            mask_parts("head", table, 25, 64)

    def test_temporal_middle(self):
        m = mask_temporal(0.5, "middle", 64)
        hidden = np.flatnonzero(~m.visible[0])
        assert hidden.tolist() == list(range(16, 48))
        assert (m.visible == m.visible[:1]).all()

    def test_temporal_zero(self):
        assert mask_temporal(0.0, "random", 64, seed=1).visible.all()

    @settings(max_examples=50, deadline=None)
    @given(portion=st.floats(0, 1), t=st.integers(1, 100), seed=st.integers(0, 2**31))
    def test_temporal_contiguous(self, portion, t, seed):
        m = mask_temporal(portion, "random", t, seed=seed, v=3)
        hidden = np.flatnonzero(~m.visible[0])
        assert len(hidden) == int(np.floor(portion * t + 1e-9))
        if len(hidden):
            assert hidden[-1] - hidden[0] == len(hidden) - 1

    def test_temporal_bad_portion(self):
        with pytest.raises(ValueError):
            mask_temporal(1.5, "middle", 64)

    def test_random_frames(self):
        assert (~mask_random_frames(0.25, 64, seed=0).visible[0]).sum() == 16
        assert not mask_random_frames(1.0, 64, seed=0).visible.any()
        a = mask_random_frames(0.25, 64, seed=0).visible
        b = mask_random_frames(0.25, 64, seed=1).visible
        assert a.sum() == b.sum() and not np.array_equal(a, b)

    def test_random_frames_rounding(self):
        # 0.1 * 25 = 2.5 rounds half up
        assert (~mask_random_frames(0.1, 25, seed=0, v=1).visible).sum() == 3

    def test_periodic(self):
        assert np.flatnonzero(~mask_periodic(2, 4, v=1).visible[0]).tolist() == [1, 3]
        assert (~mask_periodic(8, 64).visible[0]).sum() == 8
        assert mask_periodic(65, 64).visible.all()
        with pytest.raises(ValueError):
            mask_periodic(1, 64)

    def test_generators_deterministic(self):
        assert np.array_equal(mask_temporal(0.3, "random", 64, seed=5).visible,
                              mask_temporal(0.3, "random", 64, seed=5).visible)

    def test_mask_validation(self):
        with pytest.raises(ValueError):
            OcclusionMask(np.ones((3, 3), dtype=int))


class TestApplyMask:
    def test_identity_and_zero(self):
        x = np.random.default_rng(0).normal(size=(25, 8, 3))
        assert np.array_equal(apply_mask(x, OcclusionMask.full(25, 8)), x)
        assert not apply_mask(x, OcclusionMask(np.zeros((25, 8), dtype=bool))).any()

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_idempotent_and_intersection(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(2, 25, 16, 3))
        m1 = OcclusionMask(rng.random((25, 16)) > 0.3)
        m2 = OcclusionMask(rng.random((25, 16)) > 0.3)
        once = apply_mask(x, m1)
        assert np.array_equal(apply_mask(once, m1), once)
        assert np.array_equal(apply_mask(once, m2), apply_mask(x, m1 & m2))
        hidden = ~m1.visible
        assert not once[:, hidden].any()
        assert np.array_equal(once[:, m1.visible], x[:, m1.visible])

    def test_per_sample_grids(self):
        x = np.ones((2, 25, 4, 3))
        grids = np.ones((2, 25, 4), dtype=bool)
        grids[1, 3] = False
        out = apply_mask(x, grids)
        assert out[0].all() and not out[1, 3].any()

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            apply_mask(np.zeros((25, 4, 3)), OcclusionMask.full(25, 5))


class TestSpecs:
    @pytest.mark.parametrize("text,kind,random", [
        ("none", "none", False), ("parts:two_hands", "parts", False),
        ("temporal:0.3:middle", "temporal", False), ("temporal:0.3:random", "temporal", True),
        ("randomframe:0.2", "randomframe", True), ("periodic:4", "periodic", False),
    ])
    def test_parse(self, text, kind, random):
        spec = parse_occlusion_spec(text)
        assert spec.kind == kind and spec.is_random == random and spec.text == text
        assert parse_occlusion_spec(spec.text) == spec

    @pytest.mark.parametrize("text", ["", "parts", "parts:head", "temporal:0.3", "temporal:x:middle",
                                      "temporal:2:middle", "periodic:1", "randomframe:-0.1", "blur:3"])
    def test_reject(self, text):
        with pytest.raises(SpecError, match="grammar"):
            parse_occlusion_spec(text)

    def test_spec_masks_match_generators(self, table):
        assert np.array_equal(parse_occlusion_spec("parts:trunk").mask(25, 64, table).visible,
                              mask_parts("trunk", table, 25, 64).visible)
        assert np.array_equal(parse_occlusion_spec("temporal:0.4:random").mask(25, 64, table, 3).visible,
                              mask_temporal(0.4, "random", 64, 3).visible)
