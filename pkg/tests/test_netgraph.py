"""Graph construction, validation and activation absorption."""
import numpy as np
import pytest

from errors import CycleDetected, DanglingTensorRef, GraphError, JoinArityMismatch, ShapeMismatch, UnsupportedLayer
from fixtures import ManifestBuilder, build_fixture, group_pair, resblock_toy
from model_io import TensorStore
from netgraph import (
    BATCHNORM,
    CONV,
    INPUT,
    LOSS,
    LayerNode,
    absorb_activations,
    build_graph,
    group_table,
    out_ref,
    slot_ref,
)


def _tiny_manifest():
    b = ManifestBuilder('tiny')
    x = b.input('data', 3, 4, 4)
    x = b.conv('c', x, 2)
    x = b.flatten('flat', b.gap('gap', x))
    b.loss('loss', b.fc('fc', x, 2))
    return b.build()


class TestBuildGraph:
    def test_resblock_layer_counts(self, resblock):
        assert len(resblock) == 19
        absorbed = absorb_activations(resblock)
        assert [l.id for l in absorbed] == ['data', 'A', 'B', 'add1', 'C', 'D', 'add2', 'fc', 'loss']
        assert len(absorbed.joins()) == 2

    def test_order_is_topological(self, resblock):
        for layer in resblock:
            for src in layer.inputs:
                assert resblock.position(src) < resblock.position(layer.id)

    def test_manifest_order_does_not_matter(self):
        manifest, store = resblock_toy()
        shuffled = dict(manifest, layers=list(reversed(manifest['layers'])))
        graph = build_graph(shuffled, store)
        assert graph.layers[0].kind == INPUT
        assert graph.layers[-1].kind == LOSS

    def test_shapes(self, resblock):
        assert resblock.shapes['A'].array_shape() == (24, 16, 16)
        assert resblock.shapes['pool1'].array_shape() == (24, 8, 8)
        assert resblock.shapes['flat'].array_shape() == (48,)
        assert resblock.shapes['loss'].array_shape() == (10,)

    def test_cycle(self):
        manifest = {'layers': [
            {'id': 'data', 'kind': INPUT, 'out_channels': 1, 'height': 2, 'width': 2},
            {'id': 'a', 'kind': CONV, 'inputs': ['b']},
            {'id': 'b', 'kind': CONV, 'inputs': ['a']},
            {'id': 'loss', 'kind': LOSS, 'inputs': ['b']},
        ]}
        with pytest.raises(CycleDetected):
            build_graph(manifest, TensorStore())

    def test_dangling_tensor(self):
        manifest, store = _tiny_manifest()
        del store['c.weight']
        with pytest.raises(DanglingTensorRef):
            build_graph(manifest, store)

    def test_weight_shape_mismatch_names_layer(self):
        manifest, store = _tiny_manifest()
        store['c.weight'] = np.zeros((2, 3, 5, 5))
        with pytest.raises(ShapeMismatch) as info:
            build_graph(manifest, store)
        assert 'c' in info.value.layers

    def test_channel_mismatch_names_both_layers(self):
        manifest, store = _tiny_manifest()
        manifest['layers'][1]['in_channels'] = 5
        with pytest.raises(ShapeMismatch) as info:
            build_graph(manifest, store)
        assert info.value.layers == ('data', 'c')

    def test_join_shape_mismatch(self):
        b = ManifestBuilder('bad-join')
        x = b.input('data', 3, 4, 4)
        y = b.add('join', b.conv('c1', x, 2), b.conv('c2', x, 4))
        b.loss('loss', b.fc('fc', b.flatten('flat', b.gap('gap', y)), 2))
        with pytest.raises(JoinArityMismatch):
            build_graph(*b.build())

    def test_unsupported_kind(self):
        manifest, store = _tiny_manifest()
        manifest['layers'][2]['kind'] = 'Dropout'
        with pytest.raises(UnsupportedLayer):
            build_graph(manifest, store)

    def test_needs_single_loss(self):
        manifest, store = _tiny_manifest()
        manifest['layers'] = manifest['layers'][:-1]
        with pytest.raises(GraphError):
            build_graph(manifest, store)

    def test_fc_slot_width_from_flatten(self):
        b = ManifestBuilder('flat-fc')
        x = b.input('data', 2, 4, 4)
        x = b.flatten('flat', b.conv('c', x, 3))
        b.loss('loss', b.fc('fc', x, 2))
        graph = build_graph(*b.build())
        assert graph.slot_width('fc') == 16
        assert graph.weight('fc').shape == (2, 48)
        assert graph.layer('fc').m_in == 3

    def test_manifest_round_trip(self, resblock):
        again = build_graph(resblock.to_manifest(), resblock.store)
        assert again.layers == resblock.layers
        assert again.shapes == resblock.shapes


class TestAbsorb:
    def test_chains_and_channel_params(self, resblock):
        absorbed = absorb_activations(resblock)
        assert [op.id for op in absorbed.edge_chains[('C', 0)]] == ['add1_relu', 'pool1']
        assert [op.id for op in absorbed.edge_chains[('add1', 0)]] == ['A_bn']
        assert set(absorbed.channel_params['A']) == {'A_bn.gamma', 'A_bn.beta', 'A_bn.mean', 'A_bn.var'}
        assert 'add1' not in absorbed.channel_params
        assert absorbed.layer('D').inputs == ('C',)

    def test_join_output_chain_registers_on_join(self):
        b = ManifestBuilder('join-bn')
        x = b.input('data', 2, 4, 4)
        y = b.bn('post_bn', b.add('join', b.conv('c1', x, 2), b.conv('c2', x, 2)))
        b.loss('loss', b.fc('fc', b.flatten('flat', b.gap('gap', y)), 2))
        absorbed = absorb_activations(build_graph(*b.build()))
        assert 'post_bn.beta' in absorbed.channel_params['join']

    def test_absorbed_view_is_idempotent(self, resblock):
        absorbed = absorb_activations(resblock)
        assert absorb_activations(absorbed) is absorbed
        assert all(l.kind not in (BATCHNORM,) for l in absorbed)

    def test_absorbed_view_cannot_be_saved(self, resblock):
        with pytest.raises(GraphError):
            absorb_activations(resblock).to_manifest()


class TestGroupTable:
    def _layer(self, mapping):
        return LayerNode('l', CONV, ('x',), in_channels=4, out_channels=4, groups=2, group_mapping=mapping)

    def test_interleaved(self):
        np.testing.assert_array_equal(group_table(self._layer('interleaved')), [[0, 1], [2, 3]])

    def test_strided(self):
        np.testing.assert_array_equal(group_table(self._layer('strided')), [[0, 2], [1, 3]])

    def test_groups_read_contiguous_or_every_gth_channel(self):
        layer = LayerNode('l', CONV, ('x',), in_channels=6, out_channels=6, groups=3, group_mapping='interleaved')
        np.testing.assert_array_equal(group_table(layer), [[0, 1], [2, 3], [4, 5]])
        layer = LayerNode.from_dict(dict(id='l', kind=CONV, inputs=['x'], in_channels=6, out_channels=6,
                                         groups=3, group_mapping='blocked'))
        assert layer.group_mapping == 'strided'
        np.testing.assert_array_equal(group_table(layer), [[0, 3], [1, 4], [2, 5]])

    def test_every_channel_once(self):
        for mapping in ('interleaved', 'strided'):
            layer = LayerNode('l', CONV, ('x',), in_channels=8, out_channels=8, groups=4, group_mapping=mapping)
            assert sorted(group_table(layer).ravel()) == list(range(8))


def test_channel_ref_text():
    assert str(out_ref('A', 3)) == 'out(A,3)'
    assert str(slot_ref('fc', 0)) == 'in(fc,0)'


def test_fixture_size_override():
    graph, _ = build_fixture('resblock-toy', size=32)
    assert graph.shapes['data'].array_shape() == (3, 32, 32)
    with pytest.raises(GraphError):
        build_fixture('mixed-toy', size=32)
    with pytest.raises(GraphError):
        build_fixture('no-such-net')


def test_group_pair_mapping_is_recorded():
    manifest, store = group_pair(mapping='strided')
    graph = build_graph(manifest, store)
    assert graph.layer('l').group_mapping == 'strided'
