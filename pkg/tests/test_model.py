import numpy as np
import pytest

from afinet import functional as F
from afinet.model import (AfinetModel, BLOCK_SPECS, CheckpointError,
                          DESCRIPTOR_DIM, FEATURE_DIM, FLAT_DIM,
                          PARAM_COUNT_BASE_VLAD, VARIANT_FLATTEN,
                          VARIANT_VLAD, VladParams, build_model,
                          collect_descriptors, deformable_conv,
                          deformable_conv_with_offsets, descriptors_from_map,
                          encode, expected_parameter_count, extractor_forward,
                          features, forward, head_forward, kmeans_init,
                          load_checkpoint, model_digest, netvlad_forward,
                          save_checkpoint)
from afinet.tensor import Tensor, tsum, mul, no_grad
from conftest import fd_gradient_check, vlad_reference


def tiny_vlad_params(rng, k, c, dtype=np.float64):
    return VladParams(
        weights=Tensor(rng.standard_normal((k, c)), dtype=dtype),
        biases=Tensor(rng.standard_normal(k), dtype=dtype),
        centers=Tensor(rng.standard_normal((k, c)), dtype=dtype),
    )


class TestDeformableConv:
    def test_zero_offsets_equal_conv2d(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 6, 8)), dtype=np.float64)
        k = Tensor(rng.standard_normal((4, 3, 3, 3)), dtype=np.float64)
        b = Tensor(rng.standard_normal(4), dtype=np.float64)
        offsets = Tensor(np.zeros((2, 18, 6, 8)), dtype=np.float64)
        got = deformable_conv_with_offsets(x, offsets, k, b).data
        want = F.conv2d(x, k).data + b.data.reshape(1, 4, 1, 1)
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_unit_column_offset_equals_shifted_conv(self, rng):
        x = rng.standard_normal((1, 2, 6, 8))
        k = rng.standard_normal((3, 2, 3, 3))
        offsets = np.zeros((1, 18, 6, 8))
        offsets[:, 1::2] = 1.0  # col offset +1 for every tap
        got = deformable_conv_with_offsets(
            Tensor(x, dtype=np.float64), Tensor(offsets, dtype=np.float64),
            Tensor(k, dtype=np.float64),
            Tensor(np.zeros(3), dtype=np.float64)).data
        want = F.conv2d(Tensor(np.roll(x, -1, axis=3), dtype=np.float64),
                        Tensor(k, dtype=np.float64)).data
        np.testing.assert_allclose(got, want, atol=1e-10)

    def test_gradients_at_fractional_offsets(self, rng):
        x = rng.standard_normal((1, 2, 4, 5))
        k = rng.standard_normal((2, 2, 3, 3))
        b = rng.standard_normal(2)
        off = rng.uniform(0.2, 0.8, (1, 18, 4, 5)) \
            * rng.choice([-1, 1], (1, 18, 4, 5))
        w = rng.standard_normal((1, 2, 4, 5))

        def build(xt, ot, kt, bt):
            return tsum(mul(deformable_conv_with_offsets(xt, ot, kt, bt),
                            Tensor(w, dtype=np.float64)))

        fd_gradient_check(build, [x, off, k, b])

    def test_offset_predictor_starts_at_plain_conv(self, rng):
        model = build_model(num_classes=3, seed=1)
        blk = model.extractor.blocks[0]
        x = Tensor(rng.standard_normal((1, 48, 8, 8)).astype(np.float32))
        got = deformable_conv(x, blk.offset_kernel, blk.offset_bias,
                              blk.deform_kernel, blk.deform_bias).data
        want = F.conv2d(x, blk.deform_kernel).data \
            + blk.deform_bias.data.reshape(1, -1, 1, 1)
        np.testing.assert_allclose(got, want, atol=1e-6)


class TestExtractor:
    def test_shape_audit_table(self, rng):
        model = build_model(num_classes=2, seed=0)
        x = Tensor(rng.standard_normal((1, 1, 128, 128)).astype(np.float32))
        h = x
        expect = [(48, 64, 64), (96, 32, 32), (128, 16, 16), (192, 8, 8)]
        from afinet.tensor import add, reshape
        for blk, (c, hh, ww) in zip(model.extractor.blocks, expect):
            co = blk.conv_bias.shape[0]
            h = add(F.conv2d(h, blk.conv_kernel),
                    reshape(blk.conv_bias, (1, co, 1, 1)))
            assert h.shape[1] == 2 * c
            h = F.maxout(h)
            h, _ = F.maxpool2d(h)
            h = deformable_conv(h, blk.offset_kernel, blk.offset_bias,
                                blk.deform_kernel, blk.deform_bias)
            assert h.shape == (1, c, hh, ww)

    def test_wrong_input_shape_rejected(self):
        model = build_model(num_classes=2, seed=0)
        from afinet.tensor import ShapeMismatchError
        with pytest.raises(ShapeMismatchError):
            extractor_forward(Tensor(np.zeros((1, 1, 64, 64))),
                              model.extractor)

    def test_shift16_equivariance(self, rng):
        model = build_model(num_classes=2, seed=3)
        x = rng.standard_normal((1, 1, 128, 128)).astype(np.float32)
        with no_grad():
            a = extractor_forward(Tensor(x), model.extractor).data
            b = extractor_forward(Tensor(np.roll(x, 16, axis=3)),
                                  model.extractor).data
        np.testing.assert_allclose(b, np.roll(a, 1, axis=3), atol=1e-5)


class TestNetVlad:
    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            v = rng.standard_normal((1, 4, 3))
            p = tiny_vlad_params(rng, 2, 3)
            out = netvlad_forward(Tensor(v, dtype=np.float64), p).data
            # independent evaluation: softmax assignment, residual loops,
            # then flatten + L2
            scores = v @ p.weights.data.T + p.biases.data
            e = np.exp(scores - scores.max(axis=2, keepdims=True))
            assign = e / e.sum(axis=2, keepdims=True)
            ref = vlad_reference(assign, v, p.centers.data).reshape(1, -1)
            ref = ref / np.linalg.norm(ref)
            np.testing.assert_allclose(out, ref, atol=1e-10)

    def test_permutation_invariance_bitwise(self):
        rng = np.random.default_rng(6)
        v = rng.standard_normal((1, 8, 5))
        p = tiny_vlad_params(rng, 3, 5)
        base = netvlad_forward(Tensor(v, dtype=np.float64), p).data
        for seed in range(5):
            perm = np.random.default_rng(seed).permutation(8)
            out = netvlad_forward(Tensor(v[:, perm], dtype=np.float64),
                                  p).data
            np.testing.assert_array_equal(out, base)

    def test_permutation_invariance_bitwise_float32(self):
        rng = np.random.default_rng(7)
        v = rng.standard_normal((1, 64, 192)).astype(np.float32)
        p = tiny_vlad_params(rng, 25, 192, dtype=np.float32)
        base = netvlad_forward(Tensor(v), p).data
        perm = rng.permutation(64)
        out = netvlad_forward(Tensor(v[:, perm]), p).data
        np.testing.assert_array_equal(out, base)

    def test_single_cluster_sums_residuals(self):
        rng = np.random.default_rng(8)
        v = rng.standard_normal((1, 6, 4))
        p = tiny_vlad_params(rng, 1, 4)
        out = netvlad_forward(Tensor(v, dtype=np.float64), p).data
        ref = (v[0] - p.centers.data[0]).sum(axis=0)
        ref = ref / np.linalg.norm(ref)
        np.testing.assert_allclose(out[0], ref, atol=1e-12)

    def test_output_unit_norm(self):
        rng = np.random.default_rng(9)
        v = rng.standard_normal((3, 10, 6))
        p = tiny_vlad_params(rng, 4, 6)
        out = netvlad_forward(Tensor(v, dtype=np.float64), p).data
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0,
                                   atol=1e-6)

    def test_assignment_rows_sum_to_one(self):
        rng = np.random.default_rng(10)
        v = Tensor(rng.standard_normal((2, 7, 5)), dtype=np.float64)
        p = tiny_vlad_params(rng, 4, 5)
        from afinet.tensor import add, matmul, permute, reshape
        scores = add(matmul(v, permute(p.weights, (1, 0))),
                     reshape(p.biases, (1, 1, 4)))
        a = F.softmax(scores, axis=2).data
        np.testing.assert_allclose(a.sum(axis=2), 1.0, atol=1e-6)

    def test_netvlad_gradcheck(self):
        rng = np.random.default_rng(11)
        v = rng.standard_normal((1, 4, 3))
        wts = rng.standard_normal((2, 3))
        bias = rng.standard_normal(2)
        ctr = rng.standard_normal((2, 3))
        w = rng.standard_normal((1, 6))

        def build(vt, wt, bt, ct):
            p = VladParams(wt, bt, ct)
            return tsum(mul(netvlad_forward(vt, p), Tensor(w,
                                                           dtype=np.float64)))

        fd_gradient_check(build, [v, wts, bias, ctr])


class TestHead:
    def test_zero_weights_zero_outputs(self):
        model = build_model(num_classes=3, seed=0)
        for t in (model.head.fc1_weight, model.head.fc1_bias,
                  model.head.fc2_weight, model.head.fc2_bias):
            t.data[:] = 0
        enc = Tensor(np.random.default_rng(0).standard_normal(
            (2, 4800)).astype(np.float32))
        feat, logits = head_forward(enc, model.head)
        assert not feat.data.any()
        assert not logits.data.any()

    def test_basis_vector_selects_column(self, rng):
        model = build_model(num_classes=3, seed=0)
        w = model.head.fc1_weight
        model.head.fc1_bias.data[:] = 0
        x = np.zeros((1, 4800), dtype=np.float32)
        x[0, 137] = 1.0
        feat, _ = head_forward(Tensor(x), model.head)
        np.testing.assert_allclose(feat.data[0], w.data[137], rtol=1e-6)

    def test_head_gradcheck(self, rng):
        x = rng.standard_normal((2, 5))
        w1 = rng.standard_normal((5, 4))
        b1 = rng.standard_normal(4)
        w2 = rng.standard_normal((4, 3))
        b2 = rng.standard_normal(3)
        labels = np.array([0, 2])

        def build(xt, w1t, b1t, w2t, b2t):
            from afinet.model import HeadParams
            _, logits = head_forward(xt, HeadParams(w1t, b1t, w2t, b2t))
            return F.cross_entropy(logits, labels)

        fd_gradient_check(build, [x, w1, b1, w2, b2])


class TestKmeans:
    def test_recovers_separated_clusters(self):
        rng = np.random.default_rng(12)
        true = rng.standard_normal((4, 6)) * 20
        pts = np.concatenate([true[i] + rng.standard_normal((50, 6))
                              for i in range(4)])
        p = kmeans_init(pts, k=4, seed=0)
        got = p.centers.data
        for i in range(4):
            d = np.linalg.norm(got - true[i], axis=1).min()
            assert d < 1.0  # within the unit cloud radius

    def test_k1_is_global_mean(self):
        rng = np.random.default_rng(13)
        pts = rng.standard_normal((40, 5))
        p = kmeans_init(pts, k=1, seed=0)
        np.testing.assert_allclose(p.centers.data[0], pts.mean(axis=0),
                                   atol=1e-5)

    def test_alpha_sharpens_to_nearest_center(self):
        rng = np.random.default_rng(14)
        pts = rng.standard_normal((100, 4))
        hard = None
        for alpha in (1.0, 100.0):
            p = kmeans_init(pts, k=5, alpha=alpha, seed=3)
            scores = pts @ p.weights.data.T.astype(np.float64) \
                + p.biases.data.astype(np.float64)
            soft_arg = scores.argmax(axis=1)
            dist = ((pts[:, None] - p.centers.data[None]) ** 2).sum(axis=2)
            nearest = dist.argmin(axis=1)
            np.testing.assert_array_equal(soft_arg, nearest)
            if alpha == 100.0:
                e = np.exp(scores - scores.max(axis=1, keepdims=True))
                a = e / e.sum(axis=1, keepdims=True)
                hard = a.max(axis=1)
        assert hard.min() > 0.99  # essentially one-hot at large alpha

    def test_deterministic_under_seed(self):
        rng = np.random.default_rng(15)
        pts = rng.standard_normal((80, 4))
        a = kmeans_init(pts, k=3, seed=7)
        b = kmeans_init(pts, k=3, seed=7)
        np.testing.assert_array_equal(a.centers.data, b.centers.data)

    def test_too_few_distinct_vectors(self):
        pts = np.zeros((30, 4))
        with pytest.raises(ValueError, match="distinct"):
            kmeans_init(pts, k=3)


class TestParamCount:
    def test_hand_computed_constant(self):
        for nc in (2, 10, 40):
            assert expected_parameter_count(nc) == \
                PARAM_COUNT_BASE_VLAD + 257 * nc
            model = build_model(num_classes=nc, seed=0)
            assert model.parameter_count() == expected_parameter_count(nc)

    def test_flatten_variant_count(self):
        model = build_model(num_classes=5, seed=0, variant=VARIANT_FLATTEN)
        assert model.parameter_count() == \
            expected_parameter_count(5, VARIANT_FLATTEN)


class TestCheckpoint:
    def test_roundtrip_byte_identical(self, tmp_path):
        model = build_model(num_classes=4, seed=9)
        model.dataset_digest = "cafebabe"
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_checkpoint(model, p1)
        again = load_checkpoint(p1)
        save_checkpoint(again, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_forward_identical_after_roundtrip(self, rng, tmp_path):
        model = build_model(num_classes=4, seed=9)
        p = tmp_path / "m.ckpt"
        save_checkpoint(model, p)
        back = load_checkpoint(p)
        x = rng.standard_normal((1, 1, 128, 128)).astype(np.float32)
        np.testing.assert_array_equal(features(model, x), features(back, x))

    def test_corrupt_field_named(self, tmp_path):
        model = build_model(num_classes=4, seed=9)
        p = tmp_path / "m.ckpt"
        save_checkpoint(model, p)
        raw = p.read_bytes().replace(b"num_classes 4", b"num_classes x", 1)
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(raw)
        with pytest.raises(CheckpointError, match="num_classes"):
            load_checkpoint(bad)

    def test_truncation_names_param(self, tmp_path):
        model = build_model(num_classes=4, seed=9)
        p = tmp_path / "m.ckpt"
        save_checkpoint(model, p)
        raw = p.read_bytes()
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(raw[:-100])
        with pytest.raises(CheckpointError, match="param head.fc2"):
            load_checkpoint(bad)

    def test_version_mismatch_refused(self, tmp_path):
        model = build_model(num_classes=2, seed=0)
        p = tmp_path / "m.ckpt"
        save_checkpoint(model, p)
        raw = p.read_bytes().replace(b"AFINET-CKPT v1", b"AFINET-CKPT v9", 1)
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(raw)
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(bad)

    def test_digest_stable(self, tmp_path):
        model = build_model(num_classes=4, seed=9)
        d1 = model_digest(model)
        p = tmp_path / "m.ckpt"
        save_checkpoint(model, p)
        assert model_digest(load_checkpoint(p)) == d1


class TestEndToEndInvariance:
    def test_vlad_feature_invariant_at_45(self, rng):
        from afinet.iris import Degradation, rotate_normalized, \
            synth_iris_sample
        model = build_model(num_classes=3, seed=21)
        img = synth_iris_sample(2, 0, Degradation(noise_std=3.0))
        x = (img.image[None, None] - 128.0) / 64.0
        xr = np.roll(x, 16, axis=3)
        fa = features(model, x.astype(np.float32))
        fb = features(model, xr.astype(np.float32))
        fa = fa / np.linalg.norm(fa)
        fb = fb / np.linalg.norm(fb)
        assert np.linalg.norm(fa - fb) < 1e-4

    def test_flatten_variant_not_invariant(self, rng):
        model = build_model(num_classes=3, seed=21, variant=VARIANT_FLATTEN)
        x = rng.standard_normal((1, 1, 128, 128)).astype(np.float32)
        xr = np.roll(x, 16, axis=3)
        fa = features(model, x)
        fb = features(model, xr)
        fa = fa / np.linalg.norm(fa)
        fb = fb / np.linalg.norm(fb)
        assert np.linalg.norm(fa - fb) > 1e-2

    def test_collect_descriptors_shape(self, rng):
        model = build_model(num_classes=2, seed=1)
        imgs = rng.standard_normal((3, 1, 128, 128)).astype(np.float32)
        d = collect_descriptors(model, imgs, batch=2)
        assert d.shape == (3 * 64, DESCRIPTOR_DIM)
