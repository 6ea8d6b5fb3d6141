"""Successor relation, coparent classes and prune sets."""
import pytest

from depgraph import (
    DisjointSet,
    ParamSlice,
    WeightSlice,
    build_dependency,
    describe_classes,
    oracle_prune_set,
    prune_set,
    siblings_closure,
)
from errors import AlreadyPruned, UnprunableChannel
from fixtures import build_fixture, group_pair, has_coupling
from netgraph import build_graph, out_ref, slot_ref
from verify import check_oracle, random_graphs, swapped_group_mapping


def _dep(name, **kw):
    graph, _ = build_fixture(name, **kw)
    return build_dependency(graph)


class TestResblock:
    def test_spine_classes_pair_up(self, resblock):
        dep = build_dependency(resblock)
        assert dep.class_of(out_ref('A', 1)) == (out_ref('A', 1), out_ref('B', 1))
        assert dep.class_of(out_ref('D', 5)) == (out_ref('C', 5), out_ref('D', 5))
        assert dep.succ(out_ref('C', 5)) == {slot_ref('D', 5), slot_ref('fc', 5)}

    def test_prune_set_through_first_join(self, resblock):
        pset = prune_set(build_dependency(resblock), out_ref('A', 1))
        assert pset.coparents == {out_ref('A', 1), out_ref('B', 1)}
        assert pset.siblings == {slot_ref('C', 1)}
        assert pset.weight_slices == (WeightSlice('A', 0, 1), WeightSlice('B', 0, 1), WeightSlice('C', 1, 1))
        names = {p.tensor for p in pset.bias_params}
        assert names == {f'{l}_bn.{r}' for l in 'AB' for r in ('gamma', 'beta', 'mean', 'var')}
        assert all(p.index == 1 for p in pset.bias_params)
        assert pset.set_size == 2

    def test_prune_set_through_second_join(self, resblock):
        pset = prune_set(build_dependency(resblock), out_ref('C', 7))
        assert pset.coparents == {out_ref('C', 7), out_ref('D', 7)}
        assert pset.siblings == {slot_ref('D', 7), slot_ref('fc', 7)}
        assert [(w.layer, w.axis) for w in pset.weight_slices] == [('C', 0), ('D', 0), ('D', 1), ('fc', 1)]

    def test_class_count(self, resblock):
        dep = build_dependency(resblock)
        # 3 input channels, 24 A/B pairs, 48 C/D pairs, 10 logits
        assert len(dep.classes()) == 3 + 24 + 48 + 10
        assert len(list(describe_classes(dep))) == 24 + 48 + 10

    def test_describe_record(self, resblock):
        first = next(describe_classes(build_dependency(resblock)))
        assert first == {'seed': 'out(A,0)', 'coparents': ['out(A,0)', 'out(B,0)'],
                         'siblings': ['in(C,0)'], 'slices': 3, 'pinned': False}

    def test_classes_partition_outputs(self, resblock):
        dep = build_dependency(resblock)
        members = [x for c in dep.classes() for x in c]
        assert len(members) == len(set(members)) == len(dep.succ_edges)


class TestMicroExamples:
    def test_linear_net_is_all_singletons(self):
        dep = _dep('linear-toy')
        assert all(len(r['coparents']) == 1 for r in describe_classes(dep))
        pset = prune_set(dep, out_ref('a', 2))
        assert pset.weight_slices == (WeightSlice('a', 0, 2), WeightSlice('b', 1, 2))
        assert pset.bias_params == (ParamSlice('a_bias.bias', 2),)

    def test_spine_spans_three_layers(self):
        dep = _dep('spine-toy')
        for layer in ('S', 'X1', 'X2'):
            assert set(dep.class_of(out_ref(layer, 2))) == {out_ref('S', 2), out_ref('X1', 2), out_ref('X2', 2)}
        assert siblings_closure(dep, out_ref('S', 2)) == {slot_ref('X1', 2), slot_ref('X2', 2), slot_ref('fc', 2)}

    @pytest.mark.parametrize('mapping, classes', [
        ('interleaved', [(0, 2), (1, 3)]),
        ('strided', [(0, 1), (2, 3)]),
    ])
    def test_grouped_slots_couple_producers(self, mapping, classes):
        dep = build_dependency(build_graph(*group_pair(mapping=mapping)))
        for members in classes:
            assert dep.class_of(out_ref('prev', members[0])) == tuple(out_ref('prev', i) for i in members)
        pset = prune_set(dep, out_ref('prev', classes[0][1]))
        assert pset.siblings == {slot_ref('l', 0)}

    def test_logit_channels_are_singletons(self, resblock):
        dep = build_dependency(resblock)
        assert dep.succ(out_ref('fc', 0)) == frozenset()
        assert dep.class_of(out_ref('fc', 0)) == (out_ref('fc', 0),)


class TestPruneSetErrors:
    def test_input_channels_are_pinned(self, resblock):
        dep = build_dependency(resblock)
        assert dep.is_pinned(out_ref('data', 0))
        with pytest.raises(UnprunableChannel):
            prune_set(dep, out_ref('data', 0))

    def test_slot_is_not_a_seed(self, resblock):
        with pytest.raises(UnprunableChannel):
            prune_set(build_dependency(resblock), slot_ref('C', 0))

    def test_already_pruned(self, resblock):
        dep = build_dependency(resblock)
        with pytest.raises(AlreadyPruned):
            prune_set(dep, out_ref('A', 0), pruned={out_ref('A', 0)})


class TestOracle:
    def test_fixtures_agree(self):
        for name in ('resblock-toy', 'spine-toy', 'grouped-toy', 'group-pair', 'mixed-toy'):
            graph, _ = build_fixture(name)
            dep = build_dependency(graph)
            for members in dep.classes():
                if dep.is_pinned(members[0]):
                    continue
                fast = prune_set(dep, members[-1])
                slow = oracle_prune_set(graph, members[-1])
                assert (fast.coparents, fast.siblings, fast.weight_slices, fast.bias_params) == \
                    (slow.coparents, slow.siblings, slow.weight_slices, slow.bias_params), name

    def test_random_graphs_are_coupled(self):
        assert all(has_coupling(g) for g in random_graphs(50, seed=3))

    def test_random_graphs_agree(self):
        result = check_oracle(count=200, seed=0)
        assert result.passed, result.detail

    def test_wrong_group_mapping_is_caught(self, grouped):
        with swapped_group_mapping():
            result = check_oracle(count=20, seed=0, graph=grouped)
        assert not result.passed
        assert check_oracle(count=0, graph=grouped).passed


def test_disjoint_set_merges():
    ds = DisjointSet('abcd')
    ds.union('a', 'b')
    ds.union('c', 'd')
    assert ds.find('a') == ds.find('b') != ds.find('c')
    ds.union('b', 'd')
    assert len({ds.find(x) for x in 'abcd'}) == 1
