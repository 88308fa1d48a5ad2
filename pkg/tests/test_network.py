import numpy as np
import pytest

from sslspk import autodiff as ad
from sslspk.autodiff import Tensor
from sslspk.checkpoint import Checkpoint, store_param_set
from sslspk.config import NetworkConfig, ProjectionConfig
from sslspk.errors import CheckpointError, NumericError, ShapeError
from sslspk.network import (POST, PRE, STD_EPS, ParamSet, adam_step, backward,
                            embed_graph, forward_embed, forward_head, grad_check,
                            init_params, lr_schedule, renormalize_rows)

from conftest import TINY_NET, TINY_PROJ

RNG = np.random.default_rng(7)


def params(dtype=np.float64, net=TINY_NET, proj=TINY_PROJ, seed=1):
    return init_params(net, proj, n_mels=10, seed=seed, dtype=dtype)


class TestForwardEmbed:
    def test_constant_in_time_std_half_is_epsilon(self):
        # kernel 1 keeps a time-constant input time-constant through the trunk
        net = NetworkConfig(trunk_channels=(6,), embed_dim=12, frame_kernel=1)
        p = init_params(net, None, n_mels=5, seed=0, dtype=np.float64)
        p.tensors["embed.w"] = np.eye(12)  # embedding == pooled stats
        p.tensors["embed.b"] = np.zeros(12)
        f = np.tile(RNG.standard_normal(5), (9, 1))
        out = forward_embed(p, f)
        assert np.allclose(out[6:], np.sqrt(STD_EPS), atol=1e-12)

    def test_frame_permutation_invariance_kernel_one(self):
        net = NetworkConfig(trunk_channels=(6, 6), embed_dim=8, frame_kernel=1)
        p = init_params(net, None, n_mels=5, seed=3, dtype=np.float64)
        f = RNG.standard_normal((20, 5))
        perm = np.random.default_rng(0).permutation(20)
        a = forward_embed(p, f)
        b = forward_embed(p, f[perm])
        assert np.allclose(a, b, atol=1e-12)

    def test_shape_and_finiteness(self):
        p = params()
        out = forward_embed(p, RNG.standard_normal((31, 10)))
        assert out.shape == (TINY_NET.embed_dim,)
        assert np.all(np.isfinite(out))

    def test_variable_length_accepted(self):
        p = params()
        for t in (5, 17, 100):
            assert forward_embed(p, RNG.standard_normal((t, 10))).shape == (16,)

    def test_empty_features_rejected(self):
        with pytest.raises(ShapeError):
            forward_embed(params(), np.zeros((0, 10)))


class TestForwardHead:
    def test_logits_bounded_by_one(self):
        p = params()
        for _ in range(10):
            logits = forward_head(p, RNG.standard_normal(16) * 10)
            assert np.all(np.abs(logits) <= 1.0 + 1e-9)

    def test_orthonormal_prototypes_aligned_bottleneck(self):
        # zeroed fc weights force a constant bottleneck vector via fc3 bias
        proj = ProjectionConfig(hidden_dim=4, bottleneck_dim=2, k=2)
        p = init_params(TINY_NET, proj, n_mels=10, seed=0, dtype=np.float64)
        for name in ("head.fc1.w", "head.fc2.w", "head.fc3.w"):
            p.tensors[name] = np.zeros_like(p.tensors[name])
        for name in ("head.fc1.b", "head.fc2.b"):
            p.tensors[name] = np.zeros_like(p.tensors[name])
        p.tensors["head.fc3.b"] = np.array([1.0, 0.0])
        p.tensors["head.proto"] = np.eye(2)
        logits = forward_head(p, RNG.standard_normal(16))
        assert np.allclose(logits, [1.0, 0.0], atol=0, rtol=0)
        # scaling the bottleneck direction leaves logits unchanged
        p.tensors["head.fc3.b"] = np.array([7.0, 0.0])
        assert np.allclose(forward_head(p, RNG.standard_normal(16)), [1.0, 0.0], atol=1e-15)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            forward_head(params(), np.zeros(5))


class TestBackward:
    def test_dead_path_gets_zero_gradient(self):
        p = params()
        p.tensors["embed.w"] = np.zeros_like(p.tensors["embed.w"])
        x = RNG.standard_normal((2, 9, 10))

        def loss_fn(pt, batch):
            e = embed_graph(pt, Tensor(batch))
            return ad.tsum(ad.square(e))

        _, grads = backward(p, x, loss_fn)
        for name in p.tensors:
            if name.startswith("trunk."):
                assert np.allclose(grads[name], 0.0), name
        assert not np.allclose(grads["embed.w"], 0.0)

    def test_norm_squared_gradient_is_theta(self):
        p = ParamSet(tensors={"theta": RNG.standard_normal(9)}, partition={"theta": PRE})
        val, grads = backward(p, None, lambda pt, b: ad.mul(ad.tsum(ad.square(pt["theta"])), 0.5))
        assert np.allclose(grads["theta"], p.tensors["theta"])
        assert np.isclose(val, 0.5 * np.sum(p.tensors["theta"] ** 2))

    def test_non_finite_loss_names_tensor(self):
        p = ParamSet(tensors={"bad": np.array([np.inf, 1.0])}, partition={"bad": PRE})
        with pytest.raises(NumericError, match="bad"):
            backward(p, None, lambda pt, b: ad.tsum(pt["bad"]))


class TestGradCheck:
    def test_quadratic_tight(self):
        p = ParamSet(tensors={"theta": RNG.standard_normal(6)}, partition={"theta": PRE})
        err = grad_check(p, None, lambda pt, b: ad.mul(ad.tsum(ad.square(pt["theta"])), 0.5),
                         eps=1e-5, n_coords=6)
        assert err <= 1e-7

    def test_full_model_double_precision(self):
        p = params(np.float64)
        x = RNG.standard_normal((2, 7, 10))

        def loss_fn(pt, batch):
            from sslspk.network import head_graph
            return ad.tsum(ad.square(head_graph(pt, embed_graph(pt, Tensor(batch)))))

        assert grad_check(p, x, loss_fn, eps=1e-6, n_coords=3, seed=5) <= 1e-6


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        p = params(np.float32)
        zeros = {k: np.zeros_like(v) for k, v in p.tensors.items()}
        out, state = adam_step(p, zeros, None, lr=0.1)
        for k in p.tensors:
            assert np.array_equal(out.tensors[k], p.tensors[k])
        assert state["t"] == 1

    def test_first_step_magnitude_is_lr(self):
        # bias-corrected first step with g=1: lr * 1/(1 + eps)
        p = ParamSet(tensors={"w": np.zeros(4)}, partition={"w": PRE})
        out, _ = adam_step(p, {"w": np.ones(4)}, None, lr=0.1)
        assert np.allclose(out.tensors["w"], -0.1 / (1 + 1e-8), rtol=1e-12)

    def test_deterministic(self):
        p = params(np.float32)
        g = {k: RNG.standard_normal(v.shape).astype(np.float32) for k, v in p.tensors.items()}
        a1, s1 = adam_step(p, g, None, lr=1e-3)
        a2, s2 = adam_step(p, g, None, lr=1e-3)
        for k in p.tensors:
            assert np.array_equal(a1.tensors[k], a2.tensors[k])

    def test_non_finite_gradient_raises(self):
        p = ParamSet(tensors={"w": np.zeros(2)}, partition={"w": PRE})
        with pytest.raises(NumericError, match="w"):
            adam_step(p, {"w": np.array([np.nan, 0.0])}, None, lr=0.1)

    def test_untouched_tensors_shared_by_reference(self):
        p = params(np.float32)
        g = {"embed.w": np.ones_like(p.tensors["embed.w"])}
        out, _ = adam_step(p, g, None, lr=0.1)
        assert out.tensors["trunk.0.w"] is p.tensors["trunk.0.w"]
        assert not np.array_equal(out.tensors["embed.w"], p.tensors["embed.w"])


class TestParamSet:
    def test_partition_total_and_disjoint(self):
        p = params()
        for name in p.tensors:
            assert p.partition[name] in (PRE, POST)
        assert any(v == PRE for v in p.partition.values())
        assert any(v == POST for v in p.partition.values())

    def test_renormalize_rows_unit(self):
        p = params()
        p.tensors["head.proto"] = RNG.standard_normal(p.tensors["head.proto"].shape) * 5
        out = renormalize_rows(p, "head.proto")
        norms = np.linalg.norm(out.tensors["head.proto"], axis=1)
        assert np.allclose(norms, 1.0, atol=1e-12)

    def test_congruence_check(self):
        a, b = params(), params()
        b.tensors["embed.w"] = np.zeros((3, 3))
        with pytest.raises(ShapeError):
            a.check_congruent(b)


class TestLrSchedule:
    def test_warmup_then_decay(self):
        lrs = [lr_schedule(1.0, e, 10, 2, 0.1) for e in range(10)]
        assert lrs[0] == 0.5 and lrs[1] == 1.0
        assert all(a >= b for a, b in zip(lrs[1:], lrs[2:]))
        assert lrs[-1] >= 0.1


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        p = params(np.float32)
        ckpt = Checkpoint(config={"net": {"embed_dim": 16}}, meta={"stage": "test"})
        store_param_set(ckpt, p, "teacher/")
        ckpt.tensors["center"] = RNG.standard_normal(24).astype(np.float32)
        path = tmp_path / "model.ssvc"
        ckpt.save(path)
        back = Checkpoint.load(path)
        assert back.config == ckpt.config
        assert back.meta == ckpt.meta
        assert list(back.tensors) == list(ckpt.tensors)
        for k in ckpt.tensors:
            assert back.tensors[k].tobytes() == np.ascontiguousarray(ckpt.tensors[k]).tobytes()
        assert back.to_bytes() == path.read_bytes()

    def test_magic_and_version_checked(self, tmp_path):
        with pytest.raises(CheckpointError, match="magic"):
            Checkpoint.from_bytes(b"XXXX" + b"\0" * 16)

    def test_param_set_prefix_extraction(self):
        p = params(np.float32)
        ckpt = Checkpoint(meta={"embed_prefix": "teacher/"})
        store_param_set(ckpt, p, "teacher/")
        back = ckpt.param_set()
        assert list(back.tensors) == list(p.tensors)
        assert back.partition == p.partition
        with pytest.raises(CheckpointError):
            ckpt.param_set("student/")
