"""Base metrics on hand-set weights, gradients and feature maps."""
import numpy as np
import pytest

from conftest import random_batch
from engine import BatchResult, backward
from errors import MissingActivations, MissingGradients, PrunedChannel, ZeroCount
from fixtures import ManifestBuilder, group_pair
from netgraph import build_graph, out_ref, slot_ref
from saliency import (
    L1,
    TAYLOR_F,
    TAYLOR_W,
    MetricConfig,
    apply_averaging,
    candidate_refs,
    combine,
    compute_raw,
    saliency_l1,
    saliency_taylor_fmaps,
    saliency_taylor_weights,
)


def _pointwise(channels=4, out=2):
    b = ManifestBuilder('pointwise')
    x = b.conv('c', b.input('data', channels, 2, 2), out, kernel=1)
    b.loss('loss', b.fc('fc', b.flatten('flat', b.gap('gap', x)), 2))
    return build_graph(*b.build())


def _result(**kw):
    return BatchResult(loss=0.0, correct=0, logits=np.zeros((1, 2)), **kw)


class TestL1:
    def test_output_channel(self):
        graph = _pointwise()
        graph.store['c.weight'][0, :, 0, 0] = [0.5, -0.5, 1.0, -1.0]
        assert saliency_l1(graph, out_ref('c', 0)) == (pytest.approx(3.0), 4)

    def test_zero_channel(self):
        graph = _pointwise()
        graph.store['c.weight'][1] = 0.0
        assert saliency_l1(graph, out_ref('c', 1))[0] == 0.0

    def test_slot_reads_every_filter(self, linear):
        w = linear.weight('b').astype(np.float64)
        raw, count = saliency_l1(linear, slot_ref('b', 2))
        assert raw == pytest.approx(np.abs(w[:, 2]).sum(), rel=1e-6)
        assert count == 6 * 3 * 3

    def test_fc_slot_is_a_column_block(self):
        b = ManifestBuilder('flat-fc')
        x = b.flatten('flat', b.conv('c', b.input('data', 2, 3, 3), 2))
        b.loss('loss', b.fc('fc', x, 4))
        graph = build_graph(*b.build())
        w = graph.weight('fc').astype(np.float64)
        raw, count = saliency_l1(graph, slot_ref('fc', 1))
        assert count == 4 * 9
        assert raw == pytest.approx(np.abs(w[:, 9:18]).sum(), rel=1e-6)

    def test_grouped_slot_counts_all_groups(self):
        graph = build_graph(*group_pair())
        assert saliency_l1(graph, slot_ref('l', 0))[1] == 4 * 3 * 3

    def test_scale_covariance(self, linear):
        before = {r: saliency_l1(linear, r)[0] for r in (out_ref('a', 0), out_ref('a', 1))}
        linear.store['a.weight'][0] *= 3.0
        assert saliency_l1(linear, out_ref('a', 0))[0] == pytest.approx(3 * before[out_ref('a', 0)], rel=1e-6)
        assert saliency_l1(linear, out_ref('a', 1))[0] == before[out_ref('a', 1)]

    def test_pruned_ref(self, linear):
        with pytest.raises(PrunedChannel):
            saliency_l1(linear, out_ref('a', 0), pruned={out_ref('a', 0)})


class TestTaylor:
    def test_weights(self):
        graph = _pointwise(channels=2)
        graph.store['c.weight'][0, :, 0, 0] = [1.0, 2.0]
        g = np.zeros(graph.store.shape('c.weight'))
        g[0, :, 0, 0] = [0.1, -0.2]
        raw, count = saliency_taylor_weights(graph, _result(grads_w={'c.weight': g}), out_ref('c', 0))
        assert raw == pytest.approx(0.3)
        assert count == 2

    def test_weights_need_gradients(self):
        graph = _pointwise()
        with pytest.raises(MissingGradients):
            saliency_taylor_weights(graph, None, out_ref('c', 0))
        with pytest.raises(MissingGradients):
            saliency_taylor_weights(graph, _result(), out_ref('c', 0))

    def test_fmaps(self):
        graph = _pointwise()
        a = np.zeros((1, 2, 1, 2))
        a[0, 0, 0] = [1.0, 2.0]
        raw, count = saliency_taylor_fmaps(graph, _result(activations={'c': a}, grads_a={'c': a}), out_ref('c', 0))
        assert raw == pytest.approx(5.0)
        assert count == 2
        assert saliency_taylor_fmaps(graph, _result(activations={'c': a}, grads_a={'c': a}), out_ref('c', 1))[0] == 0.0

    def test_fmaps_divide_by_batch(self):
        graph = _pointwise()
        a = np.ones((4, 2, 1, 2))
        raw, _ = saliency_taylor_fmaps(graph, _result(activations={'c': a}, grads_a={'c': 0.5 * a}), out_ref('c', 0))
        assert raw == pytest.approx(1.0)

    def test_fmaps_need_activations(self):
        graph = _pointwise()
        with pytest.raises(MissingActivations):
            saliency_taylor_fmaps(graph, None, out_ref('c', 0))
        with pytest.raises(MissingActivations):
            saliency_taylor_fmaps(graph, _result(), out_ref('c', 0))

    def test_grouped_slot_reads_its_maps(self):
        graph = build_graph(*group_pair())
        x, y = random_batch(graph, n=3)
        res = backward(graph, x, y)
        a = res.inputs[('l', 0)][:, [0, 2]].astype(np.float64)
        g = res.grads_in[('l', 0)][:, [0, 2]]
        raw, count = saliency_taylor_fmaps(graph, res, slot_ref('l', 0))
        assert raw == pytest.approx(abs((a * g).sum()) / 3, rel=1e-6)
        assert count == 2 * 8 * 8

    def test_weights_match_explicit_products(self, resblock):
        x, y = random_batch(resblock, n=4)
        res = backward(resblock, x, y)
        w = resblock.weight('C').astype(np.float64)
        g = res.grads_w['C.weight']
        assert saliency_taylor_weights(resblock, res, slot_ref('C', 3))[0] == \
            pytest.approx(abs((w[:, 3] * g[:, 3]).sum()), rel=1e-6)


class TestAveraging:
    def test_single(self):
        assert apply_averaging(3.0, 4, True) == 0.75
        assert apply_averaging(3.0, 4, False) == 3.0

    def test_combined_divides_sums(self):
        assert combine([3.0, 1.0], [4, 4], True) == 0.5
        assert combine([3.0, 1.0], [4, 4], False) == 4.0

    def test_zero_count(self):
        with pytest.raises(ZeroCount):
            apply_averaging(1.0, 0, True)


class TestComputeRaw:
    def test_covers_every_candidate(self, resblock):
        vec = compute_raw(resblock, MetricConfig(L1))
        assert len(vec) == len(candidate_refs(resblock))
        assert all(v >= 0 for v in vec.scores.values())

    def test_skip(self, resblock):
        vec = compute_raw(resblock, MetricConfig(L1), skip={out_ref('A', 0), slot_ref('C', 0)})
        assert out_ref('A', 0) not in vec and slot_ref('C', 0) not in vec
        assert out_ref('A', 1) in vec

    @pytest.mark.parametrize('base', [TAYLOR_W, TAYLOR_F])
    def test_gradient_metrics(self, resblock, base):
        x, y = random_batch(resblock, n=4)
        vec = compute_raw(resblock, MetricConfig(base), backward(resblock, x, y))
        assert len(vec) == len(candidate_refs(resblock))

    def test_unknown_metric(self):
        with pytest.raises(ValueError):
            MetricConfig('l2')
        assert MetricConfig(L1, averaged=True).name == 'l1-avg'
