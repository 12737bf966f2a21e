import numpy as np
import pytest
from scipy import signal

import mixquant as mq
from mixquant.errors import InvariantViolation, MissingQuantParams, NonPositiveVariance, ShapeMismatch
from mixquant.executor import (
    Executor,
    kernel_avgpool,
    kernel_batchnorm,
    kernel_conv2d,
    kernel_depthwise_conv2d,
    kernel_flatten,
    kernel_gemm,
    kernel_global_avgpool,
    kernel_maxpool,
    kernel_relu,
    kernel_softmax,
)
from mixquant.ir import Graph, Node, QuantParams, Tensor
from mixquant.model_io import Lcg

from conftest import run_f32

# Output of mininet(seed 42) on gen_images(1, (3,16,16), 123), pinned at first
# implementation and cross-checked against the scipy-based oracle below.
MININET_GOLDEN = np.array([
    0.159620196, 0.031039290, 0.164319858, 0.041680433, 0.280350566,
    0.039827872, 0.050020613, 0.102116905, 0.059311889, 0.071712330,
], dtype=np.float32)


def scipy_conv2d(x, w, b, stride, padding):
    """Independent conv oracle: per-channel scipy correlate2d in float64."""
    n, ci, h, wd = x.shape
    co = w.shape[0]
    sh, sw = (stride, stride) if np.isscalar(stride) else stride
    ph, pw = (padding, padding) if np.isscalar(padding) else padding
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = []
    for i in range(n):
        maps = []
        for o in range(co):
            acc = np.zeros((xp.shape[2] - w.shape[2] + 1, xp.shape[3] - w.shape[3] + 1))
            for c in range(ci):
                acc += signal.correlate2d(xp[i, c], w[o, c].astype(np.float64), mode="valid")
            maps.append(acc[::sh, ::sw] + (0.0 if b is None else b[o]))
        out.append(np.stack(maps))
    return np.stack(out)


class TestFp32Kernels:
    def test_relu(self):
        assert np.array_equal(kernel_relu(np.array([-3.0, 0.0, 5.0])), [0.0, 0.0, 5.0])

    def test_relu_graph_example(self):
        g = Graph("r")
        g.add(Node("input", "Input", attrs={"shape": [1, 1, 2]}))
        g.add(Node("r", "ReLU", ["input"]))
        g.add(Node("output", "Output", ["r"]))
        y, _ = Executor().run_fp32(g, Tensor.f32(np.array([[[[-1.0, 2.0]]]])))
        assert np.array_equal(y.data, [[[[0.0, 2.0]]]])

    def test_softmax_symmetry(self):
        assert np.allclose(kernel_softmax(np.array([[0.0, 0.0]])), [[0.5, 0.5]])

    def test_softmax_stability(self):
        y = kernel_softmax(np.array([[1000.0, 1000.0, 999.0]], dtype=np.float32))
        assert np.isfinite(y).all() and np.isclose(y.sum(), 1.0)

    def test_conv_identity_kernel(self):
        x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
        w = np.ones((1, 1, 1, 1), dtype=np.float32)
        assert np.array_equal(kernel_conv2d(x, w, None), x)

    def test_conv_hand_sum(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]], dtype=np.float32)
        w = np.ones((1, 1, 2, 2), dtype=np.float32)
        assert np.array_equal(kernel_conv2d(x, w, None), [[[[10.0]]]])

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_conv_vs_scipy_oracle(self, stride, padding):
        rng = Lcg(17)
        x = rng.uniform(-1, 1, (2, 3, 8, 8)).astype(np.float32)
        w = rng.uniform(-1, 1, (4, 3, 3, 3)).astype(np.float32)
        b = rng.uniform(-1, 1, (4,)).astype(np.float32)
        got = kernel_conv2d(x, w, b, stride, padding)
        want = scipy_conv2d(x, w, b, stride, padding)
        np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-6)

    def test_depthwise_vs_per_channel_oracle(self):
        rng = Lcg(23)
        x = rng.uniform(-1, 1, (1, 2, 6, 6)).astype(np.float32)
        w = rng.uniform(-1, 1, (2, 1, 3, 3)).astype(np.float32)
        got = kernel_depthwise_conv2d(x, w, None, 1, 1)
        for c in range(2):
            want = scipy_conv2d(x[:, c:c + 1], w[c:c + 1], None, 1, 1)
            np.testing.assert_allclose(got[:, c:c + 1], want, rtol=1e-5, atol=1e-6)
        # each filter touches only its own channel
        x2 = x.copy()
        x2[:, 1] = 0.0
        got2 = kernel_depthwise_conv2d(x2, w, None, 1, 1)
        np.testing.assert_array_equal(got[:, 0], got2[:, 0])

    def test_batchnorm_identity(self):
        x = np.array([[[[1.0, -2.0]]]], dtype=np.float32)
        ones, zeros = np.ones(1, np.float32), np.zeros(1, np.float32)
        np.testing.assert_allclose(kernel_batchnorm(x, ones, zeros, zeros, ones, 0.0), x)

    def test_batchnorm_hand_value(self):
        y = kernel_batchnorm(np.array([[[[3.0]]]], np.float32), np.array([2.0], np.float32),
                             np.array([0.5], np.float32), np.array([1.0], np.float32),
                             np.array([4.0], np.float32), 0.0)
        assert np.isclose(y, 2.5)

    def test_batchnorm_negative_variance(self):
        with pytest.raises(NonPositiveVariance):
            kernel_batchnorm(np.zeros((1, 1, 1, 1), np.float32), np.ones(1), np.zeros(1),
                             np.zeros(1), np.array([-1.0]), 0.0)

    def test_maxpool(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]], dtype=np.float32)
        assert np.array_equal(kernel_maxpool(x, 2, 2), [[[[4.0]]]])

    def test_avgpool(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]], dtype=np.float32)
        assert np.array_equal(kernel_avgpool(x, 2, 2), [[[[2.5]]]])

    def test_global_avgpool(self):
        x = np.arange(8, dtype=np.float32).reshape(1, 2, 2, 2)
        assert np.array_equal(kernel_global_avgpool(x), [[1.5, 5.5]])

    def test_gemm_hand_value(self):
        y = kernel_gemm(np.array([[1.0, 2.0]], np.float32),
                        np.array([[1.0, 0.0], [0.0, 1.0]], np.float32),
                        np.array([1.0, 1.0], np.float32))
        assert np.array_equal(y, [[2.0, 3.0]])

    def test_flatten(self):
        x = np.arange(8, dtype=np.float32).reshape(1, 2, 2, 2)
        assert kernel_flatten(x).shape == (1, 8)


class TestGraphExecution:
    def test_mininet_golden(self, mininet):
        y, _ = run_f32(mininet, mq.gen_images(1, (3, 16, 16), 123))
        np.testing.assert_allclose(y.data.ravel(), MININET_GOLDEN, rtol=1e-6, atol=1e-7)

    def test_mininet_vs_scalar_composite(self, mininet):
        """Re-run the whole net through the independent scipy/float64 path."""
        x = mq.gen_images(1, (3, 16, 16), 123).astype(np.float64)
        values = {"input": x}
        for nid in mq.topo_sort(mininet):
            n = mininet.node(nid)
            if n.kind == "Input":
                continue
            a = values[n.inputs[0]]
            if n.kind == "Conv2d":
                values[nid] = scipy_conv2d(a, n.weights["weight"].data, n.weights["bias"].data,
                                           n.attrs.get("stride", 1), n.attrs.get("padding", 0))
            elif n.kind == "BatchNorm":
                w = n.weights
                scale = w["gamma"].data / np.sqrt(w["var"].data + n.attrs["epsilon"])
                values[nid] = scale[None, :, None, None] * (a - w["mean"].data[None, :, None, None]) \
                    + w["beta"].data[None, :, None, None]
            elif n.kind == "ReLU":
                values[nid] = np.maximum(a, 0.0)
            elif n.kind == "Add":
                values[nid] = a + values[n.inputs[1]]
            elif n.kind == "GlobalAvgPool":
                values[nid] = a.mean(axis=(2, 3))
            elif n.kind == "Gemm":
                values[nid] = a @ n.weights["weight"].data.T.astype(np.float64) + n.weights["bias"].data
            elif n.kind == "Softmax":
                e = np.exp(a - a.max(axis=-1, keepdims=True))
                values[nid] = e / e.sum(axis=-1, keepdims=True)
            elif n.kind == "Output":
                values[nid] = a
        want = values[mininet.output_node.id]
        got, _ = run_f32(mininet, mq.gen_images(1, (3, 16, 16), 123))
        np.testing.assert_allclose(got.data, want, rtol=1e-4, atol=1e-6)

    def test_deterministic_bit_exact(self, mininet, calib_images):
        a, _ = run_f32(mininet, calib_images)
        b, _ = run_f32(mininet, calib_images)
        assert np.array_equal(a.data, b.data)

    def test_pass_counter(self, mininet, calib_images):
        ex = Executor()
        run_f32(mininet, calib_images, executor=ex)
        run_f32(mininet, calib_images, idx=1, executor=ex)
        assert ex.passes == 2
        ex.reset()
        assert ex.passes == 0

    def test_trace_covers_non_input_nodes(self, mininet, calib_images):
        _, trace = run_f32(mininet, calib_images, capture=True)
        expected = {n.id for n in mininet.nodes if n.kind != "Input"}
        assert set(trace.outputs) == expected
        assert trace.pass_counter == 1

    def test_no_capture_empty_trace(self, mininet, calib_images):
        _, trace = run_f32(mininet, calib_images, capture=False)
        assert trace.outputs == {}

    def test_run_fp32_rejects_int8_graph(self, mininet, mininet_calib, calib_images):
        qg = mq.apply_mixed_precision(mininet, [], mininet_calib)
        with pytest.raises(InvariantViolation):
            run_f32(qg, calib_images)

    def test_input_shape_mismatch(self, mininet):
        with pytest.raises(ShapeMismatch):
            Executor().run_fp32(mininet, Tensor.f32(np.zeros((1, 3, 8, 8), np.float32)))


class TestQuantizedExecution:
    def test_quantize_dequantize_roundtrip_bound(self):
        qp = QuantParams(8, 0.02, -5)
        g = Graph("qdq")
        g.add(Node("input", "Input", attrs={"shape": [1, 1, 64]}))
        g.add(Node("q", "Quantize", ["input"], attrs={"qparams": qp}))
        g.add(Node("d", "Dequantize", ["q"], attrs={"qparams": qp}))
        g.add(Node("output", "Output", ["d"]))
        x = Lcg(3).uniform(-2.0, 2.0, (1, 1, 1, 64)).astype(np.float32)
        x = np.clip(x, (qp.qmin - qp.zero_point) * qp.step, (qp.qmax - qp.zero_point) * qp.step)
        y, _ = Executor().run_quantized(g, Tensor.f32(x))
        assert np.abs(y.data - x).max() <= qp.step / 2 + 1e-9

    def test_unit_scale_conv_hand_value(self):
        qp1 = QuantParams(8, 1.0, 0)
        g = Graph("c1x1")
        g.add(Node("input", "Input", attrs={"shape": [1, 1, 1]}))
        g.add(Node("q", "Quantize", ["input"], attrs={"qparams": qp1}))
        conv = Node("c", "Conv2d", ["q"],
                    attrs={"stride": 1, "padding": 0, "in_qparams": [qp1], "out_qparams": qp1},
                    weights={"weight": Tensor.i8(np.array([[[[3]]]], np.int8),
                                                 QuantParams(8, 1.0, 0, symmetric=True))},
                    precision=8)
        g.add(conv)
        g.add(Node("output", "Output", ["c"]))
        y, _ = Executor().run_quantized(g, Tensor.f32(np.array([[[[2.0]]]], np.float32)))
        assert y.data.ravel()[0] == 6 and y.dtype == "i8"

    def test_unit_scale_conv_matches_fp32_exactly(self, mininet_calib):
        """Integer inputs, all scales 1: the int8 conv equals FP32 conv bit-for-bit."""
        rng = Lcg(9)
        xi = np.floor(rng.uniform(-5, 6, (1, 2, 5, 5))).astype(np.float32)
        wi = np.floor(rng.uniform(-3, 4, (3, 2, 3, 3))).astype(np.float32)
        qp_act = QuantParams(8, 1.0, 0)
        fp = mq.executor.kernel_conv2d(xi, wi, None, 1, 1)
        g = Graph("int")
        g.add(Node("input", "Input", attrs={"shape": [2, 5, 5]}))
        g.add(Node("q", "Quantize", ["input"], attrs={"qparams": qp_act}))
        g.add(Node("c", "Conv2d", ["q"],
                   attrs={"stride": 1, "padding": 1, "in_qparams": [qp_act],
                          "out_qparams": QuantParams(8, 1.0, 0)},
                   weights={"weight": Tensor.i8(wi.astype(np.int8), QuantParams(8, 1.0, 0, symmetric=True))},
                   precision=8))
        g.add(Node("d", "Dequantize", ["c"], attrs={"qparams": QuantParams(8, 1.0, 0)}))
        g.add(Node("output", "Output", ["d"]))
        y, _ = Executor().run_quantized(g, Tensor.f32(xi))
        np.testing.assert_array_equal(y.data, np.clip(fp, -128, 127))

    def test_local_error_bound_at_quantize_point(self, mininet, mininet_calib, calib_images):
        """Dequantized activation differs from its own pre-quantization input by
        at most step/2 elementwise at the Quantize node itself."""
        qg = mq.apply_mixed_precision(mininet, [], mininet_calib)
        quantize_nodes = [n for n in qg.nodes if n.kind == "Quantize"]
        assert quantize_nodes
        ex = Executor()
        x = Tensor.f32(calib_images[0:1])
        values = {}
        for nid in mq.topo_sort(qg):
            n = qg.node(nid)
            ins = [values[s] for s in n.inputs]
            values[nid] = ex._exec_node(qg, n, ins, x)
        for qn in quantize_nodes:
            src = values[qn.inputs[0]].data
            back = mq.dequantize(values[qn.id]).data
            in_range = np.abs(src) <= (qn.attrs["qparams"].qmax - qn.attrs["qparams"].zero_point) \
                * qn.attrs["qparams"].step
            err = np.abs(back - src)[in_range]
            assert err.max() <= qn.attrs["qparams"].step / 2 + 1e-9

    def test_fully_int8_mininet_logit_sqnr(self, mininet, mininet_calib, calib_images):
        from mixquant.cli import final_logit_sqnr
        qg = mq.apply_mixed_precision(mininet, [], mininet_calib)
        assert final_logit_sqnr(qg, mininet, calib_images[:8]) > 10.0

    def test_quantized_deterministic(self, mininet, mininet_calib, calib_images):
        qg = mq.apply_mixed_precision(mininet, [], mininet_calib)
        ex = Executor()
        x = Tensor.f32(calib_images[0:1])
        a, _ = ex.run_quantized(qg, x)
        b, _ = ex.run_quantized(qg, x)
        assert np.array_equal(a.data, b.data)

    def test_missing_qparams_rejected(self):
        g = Graph("bad")
        g.add(Node("input", "Input", attrs={"shape": [1, 2, 2]}))
        bad = Node("r", "ReLU", ["input"], precision=8)
        g.add(bad)
        g.add(Node("output", "Output", ["r"]))
        with pytest.raises(MissingQuantParams):
            Executor().run_quantized(g, Tensor.f32(np.zeros((1, 1, 2, 2), np.float32)))
