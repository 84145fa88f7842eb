"""Model construction, forward heads, and checkpoint container."""

import hashlib
import json
import os

import numpy as np
import numpy.testing as npt
import pytest

from r3denoise import networks as N
from r3denoise import tensor as tz

# sha256 of forward outputs for init_params(seed=2024) on a fixed ramp input,
# recorded from the first verified build; guards against silent numeric drift
GOLDEN = {
    "encode": "c734525fa01c6d3f29e691f4ab94d6cffcfcf1fb46ead756c55725acefc14836",
    "policy": "fdb9cbd8b07194b6f13ccc044ff6c42f5e0d0bf920ad092638f2dd5067c37153",
    "value": "6823a19e4a8ff3067b9702a0d82ea5e8c0af3751c609faab294585ecc635fd82",
    "r3n": "4b16d16493b757522035981a9e72339ee523c31cc0196cbe9140836c76505434",
}


def _ramp_input():
    return tz.Tensor(np.linspace(0.0, 1.0, 144).reshape(1, 1, 12, 12))


def _zeroed(params):
    for t in params.parameters():
        t.data[...] = 0.0
    return params


class TestInit:
    def test_layer_inventory_r3l(self, tiny_r3l):
        names = tiny_r3l.layer_names()
        assert names[:4] == ["encoder.0", "encoder.1", "encoder.2", "encoder.3"]
        assert "policy.2" in names and "value.2" in names
        assert not any(n.startswith("r3n") for n in names)

    def test_parameter_counts(self):
        r3l = N.init_params("r3l", seed=0)
        r3n = N.init_params("r3n", seed=0)
        count = lambda p: sum(t.data.size for t in p.parameters())
        assert count(r3l) == 275_292
        assert count(r3n) == 185_857

    def test_dilation_schedule(self):
        p = N.init_params("r3l", seed=0)
        enc = [p.layers[f"encoder.{i}"].dilation for i in range(4)]
        pol = [p.layers[f"policy.{i}"].dilation for i in range(3)]
        val = [p.layers[f"value.{i}"].dilation for i in range(3)]
        assert enc == [1, 2, 3, 4]
        assert pol == [3, 2, 1]
        assert val == [3, 2, 1]

    def test_same_seed_identical_weights(self):
        a = N.init_params("r3l", seed=9)
        b = N.init_params("r3l", seed=9)
        for ta, tb in zip(a.parameters(), b.parameters()):
            npt.assert_array_equal(ta.data, tb.data)

    def test_different_seed_differs(self):
        a = N.init_params("r3l", seed=9)
        b = N.init_params("r3l", seed=10)
        assert any((ta.data != tb.data).any()
                   for ta, tb in zip(a.parameters(), b.parameters()))

    def test_he_scaling_and_zero_bias(self):
        p = N.init_params("r3l", seed=4)
        layer = p.layers["encoder.1"]  # 64 -> 64, fan-in 576
        expected = np.sqrt(2.0 / (64 * 9))
        assert abs(layer.weight.data.std() / expected - 1.0) < 0.05
        npt.assert_array_equal(layer.bias.data, 0.0)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            N.init_params("dqn", seed=0)

    def test_n_actions_must_be_positive(self):
        with pytest.raises(ValueError):
            N.init_params("r3l", seed=0, n_actions=0)


class TestForward:
    def test_encode_shape(self, tiny_r3l, rng):
        x = tz.Tensor(rng.random((3, 1, 10, 11)))
        f = N.encode(tiny_r3l, x)
        assert f.data.shape == (3, 64, 10, 11)

    def test_encode_rejects_multichannel(self, tiny_r3l, rng):
        with pytest.raises(ValueError):
            N.encode(tiny_r3l, tz.Tensor(rng.random((1, 3, 8, 8))))

    def test_policy_shape_and_normalization(self, tiny_r3l, rng):
        f = N.encode(tiny_r3l, tz.Tensor(rng.random((2, 1, 9, 9))))
        p = N.policy_forward(tiny_r3l, f)
        assert p.data.shape == (2, 27, 9, 9)
        npt.assert_allclose(p.data.sum(axis=1), 1.0, atol=1e-12)
        assert p.data.min() >= 0.0

    def test_value_shape(self, tiny_r3l, rng):
        f = N.encode(tiny_r3l, tz.Tensor(rng.random((2, 1, 9, 9))))
        v = N.value_forward(tiny_r3l, f)
        assert v.data.shape == (2, 1, 9, 9)

    def test_zero_weight_policy_is_uniform(self):
        p = _zeroed(N.init_params("r3l", seed=0))
        f = N.encode(p, _ramp_input())
        probs = N.policy_forward(p, f)
        npt.assert_array_equal(probs.data, 1.0 / 27)

    def test_zero_weight_value_is_zero(self):
        p = _zeroed(N.init_params("r3l", seed=0))
        v = N.value_forward(p, N.encode(p, _ramp_input()))
        npt.assert_array_equal(v.data, 0.0)

    def test_r3n_residual_bounded(self):
        # saturate the head: huge weights cannot push |r| past the limit
        p = N.init_params("r3n", seed=1)
        p.layers["r3n.2"].weight.data *= 1e4
        r = N.r3n_forward(p, N.encode(p, _ramp_input()))
        assert np.abs(r.data).max() <= N.RESIDUAL_LIMIT
        assert np.abs(r.data).max() > 0.99 * N.RESIDUAL_LIMIT

    def test_zero_weight_r3n_residual_is_zero(self):
        p = _zeroed(N.init_params("r3n", seed=0))
        r = N.r3n_forward(p, N.encode(p, _ramp_input()))
        npt.assert_array_equal(r.data, 0.0)

    def test_head_kind_mismatch_is_logic_error(self, tiny_r3l, tiny_r3n):
        f_l = N.encode(tiny_r3l, _ramp_input())
        f_n = N.encode(tiny_r3n, _ramp_input())
        with pytest.raises(RuntimeError):
            N.r3n_forward(tiny_r3l, f_l)
        with pytest.raises(RuntimeError):
            N.policy_forward(tiny_r3n, f_n)
        with pytest.raises(RuntimeError):
            N.value_forward(tiny_r3n, f_n)

    def test_golden_forward_digests(self):
        x = _ramp_input()
        p = N.init_params("r3l", seed=2024)
        f = N.encode(p, x)
        digest = lambda t: hashlib.sha256(t.data.tobytes()).hexdigest()
        assert digest(f) == GOLDEN["encode"]
        assert digest(N.policy_forward(p, f)) == GOLDEN["policy"]
        assert digest(N.value_forward(p, f)) == GOLDEN["value"]
        q = N.init_params("r3n", seed=2024)
        assert digest(N.r3n_forward(q, N.encode(q, x))) == GOLDEN["r3n"]


class TestParamStoreOps:
    def test_clone_is_deep(self, tiny_r3l):
        c = tiny_r3l.clone()
        c.layers["encoder.0"].weight.data += 1.0
        assert (c.layers["encoder.0"].weight.data
                != tiny_r3l.layers["encoder.0"].weight.data).any()

    def test_copy_data_from(self, tiny_r3l):
        dst = N.init_params("r3l", seed=999)
        dst.copy_data_from(tiny_r3l)
        for a, b in zip(dst.parameters(), tiny_r3l.parameters()):
            npt.assert_array_equal(a.data, b.data)

    def test_copy_kind_mismatch(self, tiny_r3l, tiny_r3n):
        with pytest.raises(ValueError):
            tiny_r3n.clone().copy_data_from(tiny_r3l)

    def test_zero_grad(self, tiny_r3l):
        w = tiny_r3l.layers["encoder.0"].weight
        w.grad = np.ones_like(w.data)
        tiny_r3l.zero_grad()
        assert w.grad is None or not w.grad.any()


class TestCheckpoint:
    def test_round_trip_exact(self, tiny_r3n, tmp_path):
        src = tiny_r3n.clone()
        src.metadata["note"] = "x"
        path = tmp_path / "m.json"
        N.save_checkpoint(src, path)
        loaded = N.load_checkpoint(path)
        assert loaded.kind == "r3n"
        assert loaded.n_actions == src.n_actions
        assert loaded.seed == src.seed
        assert loaded.metadata["note"] == "x"
        for a, b in zip(loaded.parameters(), src.parameters()):
            npt.assert_array_equal(a.data, b.data)

    def test_save_is_byte_deterministic(self, tiny_r3l, tmp_path):
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        N.save_checkpoint(tiny_r3l, p1)
        N.save_checkpoint(tiny_r3l, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_save_rejects_non_finite(self, tmp_path):
        p = N.init_params("r3l", seed=0)
        p.layers["value.2"].weight.data[0, 0, 0, 0] = np.nan
        with pytest.raises(N.CheckpointError):
            N.save_checkpoint(p, tmp_path / "bad.json")
        assert not os.path.exists(tmp_path / "bad.json")

    def test_missing_file(self, tmp_path):
        with pytest.raises(N.CheckpointError):
            N.load_checkpoint(tmp_path / "nope.json")

    def test_not_json(self, tmp_path):
        f = tmp_path / "garbage.json"
        f.write_text("{truncated")
        with pytest.raises(N.CheckpointError):
            N.load_checkpoint(f)

    def _doc(self, params, tmp_path):
        path = tmp_path / "base.json"
        N.save_checkpoint(params, path)
        return json.loads(path.read_text()), path

    def _expect_reject(self, doc, path, fragment):
        path.write_text(json.dumps(doc))
        with pytest.raises(N.CheckpointError, match=fragment):
            N.load_checkpoint(path)

    def test_wrong_format_tag(self, tiny_r3l, tmp_path):
        doc, path = self._doc(tiny_r3l, tmp_path)
        doc["format"] = "pickle"
        self._expect_reject(doc, path, "format")

    def test_wrong_version(self, tiny_r3l, tmp_path):
        doc, path = self._doc(tiny_r3l, tmp_path)
        doc["version"] = 99
        self._expect_reject(doc, path, "version")

    def test_bad_kind(self, tiny_r3l, tmp_path):
        doc, path = self._doc(tiny_r3l, tmp_path)
        doc["model_kind"] = "vae"
        self._expect_reject(doc, path, "model_kind")

    def test_missing_layer(self, tiny_r3l, tmp_path):
        doc, path = self._doc(tiny_r3l, tmp_path)
        doc["layers"] = [e for e in doc["layers"] if e["name"] != "value.1"]
        self._expect_reject(doc, path, "value.1")

    def test_extra_layer(self, tiny_r3l, tmp_path):
        doc, path = self._doc(tiny_r3l, tmp_path)
        doc["layers"].append(dict(doc["layers"][0], name="spare.0"))
        self._expect_reject(doc, path, "spare.0")

    def test_wrong_shape(self, tiny_r3l, tmp_path):
        doc, path = self._doc(tiny_r3l, tmp_path)
        for e in doc["layers"]:
            if e["name"] == "policy.2":
                e["weight_shape"] = [27, 64, 5, 5]
        self._expect_reject(doc, path, "policy.2")

    def test_wrong_dilation(self, tiny_r3l, tmp_path):
        doc, path = self._doc(tiny_r3l, tmp_path)
        for e in doc["layers"]:
            if e["name"] == "encoder.2":
                e["dilation"] = 7
        self._expect_reject(doc, path, "encoder.2")

    def test_truncated_weight_data(self, tiny_r3l, tmp_path):
        doc, path = self._doc(tiny_r3l, tmp_path)
        doc["layers"][0]["weight"] = doc["layers"][0]["weight"][:-3]
        self._expect_reject(doc, path, "encoder.0")

    def test_values_survive_repr_round_trip(self, tmp_path):
        # awkward floats: denormal-adjacent, negative zero, long mantissa
        p = N.init_params("r3n", seed=5)
        w = p.layers["encoder.0"].weight
        w.data[0, 0, 0, 0] = 1.0 / 3.0
        w.data[0, 0, 0, 1] = -0.0
        w.data[0, 0, 0, 2] = 5e-324
        path = tmp_path / "edge.json"
        N.save_checkpoint(p, path)
        loaded = N.load_checkpoint(path)
        got = loaded.layers["encoder.0"].weight.data
        npt.assert_array_equal(got, w.data)
        assert np.signbit(got[0, 0, 0, 1])
