import math

import hypothesis as h
import hypothesis.strategies as st
import numpy as np
import pytest

from soundcut import common_graphs, errors, graph_gen
from soundcut.compgraph import (
    Cut,
    Explanation,
    GraphBuilder,
    Kind,
    OpSpec,
    Side,
    boundary,
    evaluate,
    explain,
    gate_id,
    mask_cut,
    replay,
    validate_cut,
)
from soundcut.trees import tree_to_graph


def _seeds():
    return st.integers(min_value=0, max_value=2**32 - 1)


class TestOpSpec:
    @pytest.mark.parametrize(
        "op,args,expected",
        [
            (OpSpec.affine([2.0, -1.0], bias=0.5), [1.0, 3.0], -0.5),
            (OpSpec.sum(), [1.0, 2.0, 3.0], 6.0),
            (OpSpec.product(), [2.0, -3.0], -6.0),
            (OpSpec.negate(), [4.0], -4.0),
            (OpSpec.max(), [1.0, 7.0, -2.0], 7.0),
            (OpSpec.sigmoid(), [0.0], 0.5),
            (OpSpec.threshold(1.0, "le"), [1.0], 1.0),
            (OpSpec.threshold(1.0, "gt"), [1.0], 0.0),
            # selector 1 picks the second data argument
            (OpSpec.mux(1), [1.0, 10.0, 20.0], 20.0),
            (OpSpec.mux(1), [0.2, 10.0, 20.0], 10.0),
            # two selector bits, binary 10 picks index 2
            (OpSpec.mux(2), [1.0, 0.0, 10.0, 20.0, 30.0, 40.0], 30.0),
        ],
    )
    def test_apply(self, op, args, expected):
        assert op.apply(args) == pytest.approx(expected)

    def test_tanh(self):
        assert OpSpec.tanh().apply([0.3]) == pytest.approx(math.tanh(0.3))

    @pytest.mark.parametrize(
        "op,n_args,accepted",
        [
            (OpSpec.affine([1.0, 2.0]), 2, True),
            (OpSpec.affine([1.0, 2.0]), 3, False),
            (OpSpec.tanh(), 2, False),
            (OpSpec.sum(), 5, True),
            (OpSpec.mux(2), 6, True),
            (OpSpec.mux(2), 5, False),
        ],
    )
    def test_arity(self, op, n_args, accepted):
        assert op.accepts_arity(n_args) == accepted

    def test_empty_affine_is_rejected(self):
        with pytest.raises(errors.ValidationError):
            OpSpec.affine([])

    def test_unknown_direction(self):
        with pytest.raises(errors.ValidationError):
            OpSpec.threshold(0.0, "lt")


class TestGraphValidation:
    def test_two_outputs(self):
        builder = GraphBuilder()
        builder.add_input("x")
        builder.add_output("a", OpSpec.negate(), ["x"])
        builder.add_output("b", OpSpec.negate(), ["x"])
        with pytest.raises(errors.ValidationError):
            builder.build()

    def test_cycle(self):
        builder = GraphBuilder()
        builder.add_input("x")
        builder.add_vertex("a", OpSpec.sum(), ["x", "b"])
        builder.add_vertex("b", OpSpec.negate(), ["a"])
        builder.add_output("out", OpSpec.negate(), ["b"])
        with pytest.raises(errors.ValidationError, match="cycle"):
            builder.build()

    def test_wrong_arity(self):
        builder = GraphBuilder()
        builder.add_input("x")
        builder.add_output("out", OpSpec.affine([1.0, 1.0]), ["x"])
        with pytest.raises(errors.ValidationError):
            builder.build()

    def test_unknown_predecessor(self):
        builder = GraphBuilder()
        builder.add_input("x")
        builder.add_output("out", OpSpec.negate(), ["y"])
        with pytest.raises(errors.ValidationError):
            builder.build()

    def test_internal_vertex_without_predecessors(self):
        builder = GraphBuilder()
        builder.add_input("x")
        builder.add_vertex("a", OpSpec.sum(), [])
        builder.add_output("out", OpSpec.negate(), ["x"])
        with pytest.raises(errors.ValidationError):
            builder.build()

    def test_duplicate_id(self):
        builder = GraphBuilder()
        builder.add_input("x")
        with pytest.raises(errors.ValidationError):
            builder.add_input("x")

    def test_derived_structure(self):
        graph = common_graphs.diamond()
        assert graph.order.index("x0") < graph.order.index("a")
        assert graph.order[-1] == "out"
        assert graph.outgoing["x0"] == ("a", "b")
        assert graph.outgoing["out"] == ()
        assert graph.kinds["b"] == Kind.INTERNAL

    def test_derived_structure_is_per_graph(self):
        small = common_graphs.diamond()
        tree_graph, _ = tree_to_graph(common_graphs.small_tree())
        assert set(small.order) == {"x0", "x1", "a", "b", "out"}
        assert set(tree_graph.order) == set(tree_graph.ids)
        assert set(tree_graph.outgoing) == set(tree_graph.ids)


class TestEvaluate:
    def test_diamond(self):
        graph = common_graphs.diamond()
        output, values = evaluate(graph, [1.0, 2.0])
        assert values["a"] == 3.0
        assert values["b"] == pytest.approx(math.tanh(1.0))
        assert output == pytest.approx(6.0 - math.tanh(1.0))

    def test_mapping_input(self):
        graph = common_graphs.diamond()
        by_position, _ = evaluate(graph, [1.0, 2.0])
        by_name, _ = evaluate(graph, {"x1": 2.0, "x0": 1.0})
        assert by_position == by_name

    def test_wrong_arity(self):
        with pytest.raises(errors.InputArityError):
            evaluate(common_graphs.diamond(), [1.0])

    def test_nan_names_the_vertex(self):
        with pytest.raises(errors.NumericError) as info:
            evaluate(common_graphs.diamond(), [float("nan"), 0.0])
        assert info.value.vertex == "x0"

    def test_infinity_is_a_value(self):
        output, values = evaluate(common_graphs.diamond(), [math.inf, 0.0])
        assert values["a"] == math.inf
        assert values["b"] == 1.0
        assert output == math.inf

    def test_nan_inside_the_graph(self):
        builder = GraphBuilder()
        builder.add_input("x")
        builder.add_vertex("inf", OpSpec.affine([1.0], bias=float("inf")), ["x"])
        builder.add_output("out", OpSpec.affine([1.0], bias=float("-inf")), ["inf"])
        with pytest.raises(errors.NumericError) as info:
            evaluate(builder.build(), [0.0])
        assert info.value.vertex == "out"


class TestCuts:
    def test_trivial_boundary(self):
        graph = common_graphs.diamond()
        assert boundary(graph, Cut.trivial(graph)) == {"a", "b"}

    def test_inputs_only_boundary(self):
        graph = common_graphs.diamond()
        assert boundary(graph, Cut.inputs_only(graph)) == {"x0", "x1"}

    def test_input_in_t(self):
        graph = common_graphs.diamond()
        with pytest.raises(errors.InvalidCutError) as info:
            validate_cut(graph, Cut.from_t_side(graph, ["x0", "out"]))
        assert info.value.clause == "inputs-in-S"

    def test_output_in_s(self):
        graph = common_graphs.diamond()
        with pytest.raises(errors.InvalidCutError) as info:
            validate_cut(graph, Cut.from_t_side(graph, ["a"]))
        assert info.value.clause == "output-in-T"

    def test_partial_assignment(self):
        graph = common_graphs.diamond()
        cut = Cut({"x0": Side.S, "x1": Side.S, "out": Side.T})
        with pytest.raises(errors.InvalidCutError) as info:
            validate_cut(graph, cut)
        assert info.value.clause == "partition"


class TestExplanations:
    def test_explanation_values(self):
        graph = common_graphs.diamond()
        explanation = explain(graph, Cut.trivial(graph), [1.0, 2.0])
        assert explanation.vertex_ids == {"a", "b"}
        assert explanation.as_dict()["a"] == 3.0

    def test_replay_ignores_everything_but_the_explanation(self):
        graph = common_graphs.diamond()
        cut = Cut.trivial(graph)
        explanation = Explanation((("a", 1.0), ("b", 0.5)))
        assert replay(graph, cut, explanation) == pytest.approx(1.5)

    def test_missing_boundary_vertex(self):
        graph = common_graphs.diamond()
        cut = Cut.trivial(graph)
        explanation = explain(graph, cut, [1.0, 2.0]).without("b")
        with pytest.raises(errors.IncompleteExplanationError) as info:
            replay(graph, cut, explanation)
        assert info.value.missing == ("b",)

    def test_extra_vertex(self):
        graph = common_graphs.diamond()
        cut = Cut.trivial(graph)
        explanation = Explanation((("a", 1.0), ("b", 0.5), ("x0", 2.0)))
        with pytest.raises(errors.ValidationError):
            replay(graph, cut, explanation)

    def test_duplicate_entries(self):
        with pytest.raises(errors.ValidationError):
            Explanation((("a", 1.0), ("a", 2.0)))

    @h.given(seed=_seeds())
    def test_replay_is_sound_on_random_graphs(self, seed):
        rng = np.random.default_rng(seed)
        graph = graph_gen.random_dag(rng)
        cut = graph_gen.random_cut(graph, rng)
        x = graph_gen.random_input(graph, rng)

        output, _ = evaluate(graph, x)
        explanation = explain(graph, cut, x)
        assert graph.output not in explanation.vertex_ids
        assert replay(graph, cut, explanation) == output

    @h.given(seed=_seeds())
    def test_every_entry_is_needed(self, seed):
        rng = np.random.default_rng(seed)
        graph = graph_gen.random_dag(rng)
        cut = graph_gen.random_cut(graph, rng)
        explanation = explain(graph, cut, graph_gen.random_input(graph, rng))

        assert explanation.vertex_ids == boundary(graph, cut)
        for vertex_id in explanation.vertex_ids:
            with pytest.raises(errors.IncompleteExplanationError) as info:
                replay(graph, cut, explanation.without(vertex_id))
            assert info.value.missing == (vertex_id,)


class TestMaskCut:
    @pytest.mark.parametrize("selected", [["x0"], ["x1"], ["x0", "x1"]])
    def test_boundary_is_the_selected_gates(self, selected):
        masked, cut = mask_cut(common_graphs.diamond(), selected)
        assert boundary(masked, cut) == {gate_id(i) for i in selected}

    @h.given(seed=_seeds(), data=st.data())
    def test_replay_matches_zeroed_inputs(self, seed, data):
        rng = np.random.default_rng(seed)
        graph = graph_gen.random_dag(rng, n_inputs=4)
        selected = data.draw(st.sets(st.sampled_from(graph.inputs)))
        masked, cut = mask_cut(graph, selected)

        x = graph_gen.random_input(graph, rng)
        zeroed = [v if i in selected else 0.0 for i, v in zip(graph.inputs, x)]
        expected, _ = evaluate(graph, zeroed)

        masked_output, _ = evaluate(masked, x)
        assert masked_output == expected
        assert replay(masked, cut, explain(masked, cut, x)) == expected

    def test_unselected_values_never_cross_the_cut(self):
        graph = common_graphs.diamond()
        masked, cut = mask_cut(graph, ["x0"])
        e1 = explain(masked, cut, [1.0, 5.0])
        e2 = explain(masked, cut, [1.0, -3.0])
        assert e1 == e2

    def test_unknown_input(self):
        with pytest.raises(errors.InvalidSelectionError):
            mask_cut(common_graphs.diamond(), ["a"])
