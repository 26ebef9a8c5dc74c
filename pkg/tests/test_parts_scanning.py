import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from partsmamba import nn_core as nn
from partsmamba import ssm_scan as ss
from partsmamba.nn_core import Param, Tensor
from partsmamba.parts_scanning import (PartPartition, body_scan, gate_stream, part_wise_scan,
                                       project_streams)


def rand_ssm(rng, c, s=2, prefix="s"):
    p = ss.SsmParams.init(prefix, c, s, rng, np.float64)
    for q in (p.w_delta, p.w_b, p.w_c):
        q.data = rng.normal(size=q.shape)
    return p


def rand_pairs(rng, partition, c):
    return [(rand_ssm(rng, c, prefix=f"{n}.f"), rand_ssm(rng, c, prefix=f"{n}.b")) for n in partition.names]


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def ntu():
    return PartPartition.load()


@pytest.fixture
def six():
    return PartPartition.from_lists([[0, 1, 2], [5, 4, 3]], 6, ["a", "b"])


class TestPartition:
    def test_shipped_table(self, ntu):
        assert ntu.names == ("trunk", "left_arm", "right_arm", "left_leg", "right_leg")
        assert sorted(ntu.order) == list(range(25))
        assert ntu.parts[1] == (4, 5, 6, 7, 21, 22)

    @pytest.mark.parametrize("parts", [
        [[0, 1], [1, 2]],   # overlap
        [[0, 1], [3]],      # 2 missing
        [[0, 1, 2], []],    # empty part
        [[0, 1, 2, 7]],     # out of range
    ])
    def test_invalid_rejected(self, parts):
        with pytest.raises(ValueError):
            PartPartition.from_lists(parts, 4)

    def test_text_round_trip(self, ntu, tmp_path):
        path = tmp_path / "p.parts"
        path.write_text(ntu.to_text())
        assert PartPartition.load(path) == ntu

    def test_part_of(self, ntu):
        assert ntu.names[ntu.part_of(23)] == "right_arm"
        with pytest.raises(KeyError):
            ntu.part_of(99)


class TestProjectStreams:
    def make(self, rng, c=6, ci=3):
        ws = [Param(f"w{i}", rng.normal(size=(c, ci))) for i in range(3)]
        norms = [(nn.constant_param(f"g{i}", (ci,), 1.0, np.float64),
                  nn.constant_param(f"b{i}", (ci,), 0.0, np.float64)) for i in range(3)]
        return ws, norms

    def test_zero_input(self, rng):
        ws, norms = self.make(rng)
        s = project_streams(Tensor(np.zeros((4, 5, 6))), *ws, *norms)
        for t in (s.x_p, s.x_s, s.x_g):
            assert t.shape == (4, 5, 3)
            assert not t.data.any()

    def test_composition(self, rng):
        ws, norms = self.make(rng)
        x = rng.normal(size=(4, 5, 6))
        s = project_streams(Tensor(x), *ws, *norms)
        for t, w in zip((s.x_p, s.x_s, s.x_g), ws):
            h = x @ w.data
            ref = (h - h.mean(-1, keepdims=True)) / np.sqrt(h.var(-1, keepdims=True) + 1e-5)
            np.testing.assert_allclose(t.data, ref, atol=1e-12)

    def test_gate_not_activated(self, rng):
        ws, norms = self.make(rng)
        s = project_streams(Tensor(rng.normal(size=(4, 5, 6))), *ws, *norms)
        assert (s.x_g.data < 0).any()
        assert (gate_stream(s.x_g).data >= 0).all()

    def test_expanding_projection_rejected(self, rng):
        ws, norms = self.make(rng, c=3, ci=3)
        ws[0] = Param("big", rng.normal(size=(3, 4)))
        with pytest.raises(nn.ShapeError):
            project_streams(Tensor(np.zeros((2, 2, 3))), *ws, *norms)


class TestPartWiseScan:
    def test_zero_input(self, rng, ntu):
        out = part_wise_scan(Tensor(np.zeros((25, 4, 3))), ntu, rand_pairs(rng, ntu, 3), Tensor(np.eye(3)))
        assert not out.data.any()

    def test_manual_composition(self, rng, six):
        pairs = rand_pairs(rng, six, 4)
        mix = Param("mix", rng.normal(size=(4, 4)))
        x = rng.normal(size=(6, 5, 4))
        expected = np.zeros_like(x)
        for t in range(5):
            for part, (f, b) in zip(six.parts, pairs):
                expected[list(part), t] = ss.bidirectional_scan(x[list(part), t], f, b).data
        expected = expected @ mix.data
        np.testing.assert_allclose(part_wise_scan(Tensor(x), six, pairs, mix).data, expected, rtol=1e-12)

    def test_single_part_equals_body_scan(self, rng):
        whole = PartPartition.from_lists([list(range(7))], 7)
        pair = (rand_ssm(rng, 3), rand_ssm(rng, 3, prefix="b"))
        x = Tensor(rng.normal(size=(7, 4, 3)))
        a = part_wise_scan(x, whole, [pair], Tensor(np.eye(3))).data
        np.testing.assert_allclose(a, body_scan(x, pair).data, atol=1e-10)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_part_locality(self, seed):
        rng = np.random.default_rng(seed)
        ntu = PartPartition.load()
        pairs = rand_pairs(rng, ntu, 3)
        mix = Tensor(rng.normal(size=(3, 3)))
        x = rng.normal(size=(2, 25, 5, 3))
        src = int(rng.integers(len(ntu.parts)))
        x2 = x.copy()
        x2[:, list(ntu.parts[src])] += rng.normal(size=(2, len(ntu.parts[src]), 5, 3))
        a = part_wise_scan(Tensor(x), ntu, pairs, mix, 2).data
        b = part_wise_scan(Tensor(x2), ntu, pairs, mix, 2).data
        others = [j for j in range(25) if j not in ntu.parts[src]]
        assert np.array_equal(a[:, others], b[:, others])
        assert not np.array_equal(a[:, list(ntu.parts[src])], b[:, list(ntu.parts[src])])

    def test_frame_independence(self, rng, ntu):
        pairs = rand_pairs(rng, ntu, 3)
        mix = Tensor(rng.normal(size=(3, 3)))
        x = rng.normal(size=(25, 6, 3))
        x2 = x.copy()
        x2[:, 2] += 1.0
        a = part_wise_scan(Tensor(x), ntu, pairs, mix).data
        b = part_wise_scan(Tensor(x2), ntu, pairs, mix).data
        keep = [0, 1, 3, 4, 5]
        assert np.array_equal(a[:, keep], b[:, keep])

    def test_wrong_joint_count(self, rng, ntu):
        with pytest.raises(nn.ShapeError):
            part_wise_scan(Tensor(np.zeros((24, 2, 3))), ntu, rand_pairs(rng, ntu, 3), Tensor(np.eye(3)))

    def test_wrong_pair_count(self, rng, ntu):
        with pytest.raises(ValueError):
            part_wise_scan(Tensor(np.zeros((25, 2, 3))), ntu, rand_pairs(rng, ntu, 3)[:4], Tensor(np.eye(3)))


class TestBodyScan:
    def test_single_joint_tied(self, rng):
        p = rand_ssm(rng, 3)
        x = rng.normal(size=(1, 4, 3))
        out = body_scan(Tensor(x), (p, p)).data
        single = ss.selective_scan_seq(x[0][:, None, :], p).data[:, 0]
        np.testing.assert_allclose(out[0], 2 * single, rtol=1e-13)

    def test_per_frame_oracle(self, rng):
        pair = (rand_ssm(rng, 3), rand_ssm(rng, 3, prefix="b"))
        x = rng.normal(size=(5, 4, 3))
        out = body_scan(Tensor(x), pair).data
        for t in range(4):
            np.testing.assert_allclose(out[:, t], ss.bidirectional_scan(x[:, t], *pair).data, rtol=1e-12)

    def test_zero(self, rng):
        pair = (rand_ssm(rng, 3), rand_ssm(rng, 3))
        assert not body_scan(Tensor(np.zeros((5, 2, 3))), pair).data.any()


def test_gradients_flow_through_part_scan(rng, six):
    pairs = rand_pairs(rng, six, 2)
    mix = Param("mix", rng.normal(size=(2, 2)))
    x = Param("x", rng.normal(size=(6, 3, 2)))
    params = [x, mix] + [q for f, b in pairs for q in f.parameters() + b.parameters()]
    report = nn.grad_check(lambda: nn.sum(nn.mul(part_wise_scan(x, six, pairs, mix), x)), params)
    assert report.passed, report
