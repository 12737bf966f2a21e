import json

import numpy as np
import pytest

import mixquant as mq
from mixquant.errors import CorruptBlob, EmptyImageBatch, FormatVersionMismatch, UnknownArch
from mixquant.model_io import Lcg, gen_synthetic, load_labels, save_labels, scale_node_weights

from conftest import graph_signature, run_f32


class TestLcg:
    def test_pinned_recurrence(self):
        rng = Lcg(0)
        first = rng.next_u64()
        # state0 = 0 ^ 0x9E3779B97F4A7C15; state1 = state0 * mul + inc (mod 2^64)
        expected = (0x9E3779B97F4A7C15 * 6364136223846793005 + 1442695040888963407) % 2**64
        assert first == expected

    def test_uniform_range_and_determinism(self):
        a = Lcg(99).uniform(-1.0, 1.0, (1000,))
        b = Lcg(99).uniform(-1.0, 1.0, (1000,))
        assert np.array_equal(a, b)
        assert a.min() >= -1.0 and a.max() < 1.0
        assert abs(a.mean()) < 0.1


class TestGenSynthetic:
    def test_deterministic_bit_exact(self):
        assert graph_signature(gen_synthetic("mininet", 42)) == graph_signature(gen_synthetic("mininet", 42))

    def test_seeds_differ(self):
        assert graph_signature(gen_synthetic("mininet", 42)) != graph_signature(gen_synthetic("mininet", 43))

    def test_unknown_arch(self):
        with pytest.raises(UnknownArch):
            gen_synthetic("resnet152", 1)

    def test_mininet_topology(self, mininet):
        kinds = [n.kind for n in mininet.nodes]
        assert kinds.count("Conv2d") == 8
        assert kinds.count("Add") == 1
        assert kinds.count("GlobalAvgPool") == 1 and kinds.count("Gemm") == 1
        assert kinds.count("Softmax") == 1
        assert tuple(mininet.input_node.attrs["shape"]) == (3, 16, 16)
        assert mininet.node("fc").weights["weight"].shape[0] == 10

    def test_mini_mobilenet_has_depthwise(self):
        g = gen_synthetic("mini_mobilenet", 42)
        assert sum(1 for n in g.nodes if n.kind == "DepthwiseConv2d") >= 4

    def test_all_archs_validate_and_execute(self, all_archs):
        for name, g in all_archs.items():
            g.validate()
            shape = tuple(int(d) for d in g.input_node.attrs["shape"])
            out, _ = run_f32(g, mq.gen_images(1, shape, 5))
            assert out.shape == (1, 10)
            assert np.isclose(out.data.sum(), 1.0, atol=1e-5)  # softmax head

    def test_scale_node_weights_sparse(self, mininet):
        g = scale_node_weights(mininet, "b6_conv", 50.0, stride=64)
        w0 = mininet.node("b6_conv").weights["weight"].data.ravel()
        w1 = g.node("b6_conv").weights["weight"].data.ravel()
        assert np.allclose(w1[::64], w0[::64] * 50.0)
        mask = np.ones(w0.size, dtype=bool)
        mask[::64] = False
        assert np.array_equal(w1[mask], w0[mask])


class TestModelRoundTrip:
    def test_save_load_bit_exact(self, mininet, tmp_path):
        mq.save_model(mininet, tmp_path / "m")
        loaded = mq.load_model(tmp_path / "m")
        assert graph_signature(loaded) == graph_signature(mininet)
        mq.save_model(loaded, tmp_path / "m2")
        assert (tmp_path / "m/manifest.json").read_bytes() == (tmp_path / "m2/manifest.json").read_bytes()
        assert (tmp_path / "m/weights.bin").read_bytes() == (tmp_path / "m2/weights.bin").read_bytes()

    def test_quantized_graph_round_trip(self, mininet, mininet_calib, tmp_path):
        qg = mq.apply_mixed_precision(mininet, [], mininet_calib)
        mq.save_model(qg, tmp_path / "q")
        loaded = mq.load_model(tmp_path / "q")
        assert graph_signature(loaded) == graph_signature(qg)
        x = mq.Tensor.f32(mq.gen_images(1, (3, 16, 16), 3))
        ex = mq.Executor()
        a, _ = ex.run_quantized(qg, x)
        b, _ = ex.run_quantized(loaded, x)
        assert np.array_equal(a.data, b.data)

    def test_truncated_blob_file(self, mininet, tmp_path):
        mq.save_model(mininet, tmp_path / "m")
        raw = (tmp_path / "m/weights.bin").read_bytes()
        (tmp_path / "m/weights.bin").write_bytes(raw[:len(raw) // 2])
        with pytest.raises(CorruptBlob):
            mq.load_model(tmp_path / "m")

    def test_missing_blob_reference(self, mininet, tmp_path):
        mq.save_model(mininet, tmp_path / "m")
        manifest = json.loads((tmp_path / "m/manifest.json").read_text())
        victim = next(iter(manifest["blobs"]))
        del manifest["blobs"][victim]
        (tmp_path / "m/manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(CorruptBlob):
            mq.load_model(tmp_path / "m")

    def test_bad_blob_length(self, mininet, tmp_path):
        mq.save_model(mininet, tmp_path / "m")
        manifest = json.loads((tmp_path / "m/manifest.json").read_text())
        victim = next(iter(manifest["blobs"]))
        manifest["blobs"][victim]["length"] += 4
        (tmp_path / "m/manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(CorruptBlob):
            mq.load_model(tmp_path / "m")

    def test_format_version_mismatch(self, mininet, tmp_path):
        mq.save_model(mininet, tmp_path / "m")
        manifest = json.loads((tmp_path / "m/manifest.json").read_text())
        manifest["format_version"] = 999
        (tmp_path / "m/manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(FormatVersionMismatch):
            mq.load_model(tmp_path / "m")


class TestImageIo:
    def test_round_trip(self, tmp_path):
        imgs = mq.gen_images(5, (3, 4, 4), 11)
        mq.save_images(imgs, tmp_path / "images.bin")
        back = mq.load_images(tmp_path / "images.bin")
        assert np.array_equal(imgs, back)

    def test_gen_images_deterministic(self):
        assert np.array_equal(mq.gen_images(3, (1, 2, 2), 5), mq.gen_images(3, (1, 2, 2), 5))

    def test_gen_images_empty_rejected(self):
        with pytest.raises(EmptyImageBatch):
            mq.gen_images(0, (1, 2, 2), 5)

    def test_truncated_image_file(self, tmp_path):
        imgs = mq.gen_images(2, (1, 2, 2), 1)
        mq.save_images(imgs, tmp_path / "images.bin")
        raw = (tmp_path / "images.bin").read_bytes()
        (tmp_path / "images.bin").write_bytes(raw[:-3])
        with pytest.raises(CorruptBlob):
            mq.load_images(tmp_path / "images.bin")

    def test_labels_round_trip(self, tmp_path):
        save_labels([3, 1, 4], tmp_path / "labels.json")
        assert load_labels(tmp_path / "labels.json") == [3, 1, 4]
