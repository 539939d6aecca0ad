import numpy as np

from . import neural
from .attribution import AffineFn, CallableFn
from .compgraph import CompGraph, GraphBuilder, OpSpec
from .trees import DecisionTree, Leaf, Split


def linear_difference() -> AffineFn:
    """F(x) = x1 - x2."""
    return AffineFn([1.0, -1.0])


def square() -> CallableFn:
    return CallableFn(1, lambda x: float(x[0] ** 2), grad=lambda x: 2 * x)


def first_coordinate(dim: int = 2) -> AffineFn:
    return AffineFn([1.0] + [0.0] * (dim - 1))


def small_tree() -> DecisionTree:
    #
    #            node0: x0 <= 0.5
    #           /                \
    #   node1: x1 <= 2.0       leaf4 (0.9)
    #    /          \
    # leaf2 (0.1)  leaf3 (0.4)
    #
    return DecisionTree(
        (
            Split(feature=0, threshold=0.5, left=1, right=4),
            Split(feature=1, threshold=2.0, left=2, right=3),
            Leaf(0.1),
            Leaf(0.4),
            Leaf(0.9),
        ),
        root=0,
        n_features=2,
    )


def diamond() -> CompGraph:
    """x0, x1 -> a = x0 + x1, b = tanh(x0) -> out = 2a - b."""
    builder = GraphBuilder()
    builder.add_input("x0")
    builder.add_input("x1")
    builder.add_vertex("a", OpSpec.sum(), ["x0", "x1"])
    builder.add_vertex("b", OpSpec.tanh(), ["x0"])
    builder.add_output("out", OpSpec.affine([2.0, -1.0]), ["a", "b"])
    return builder.build()


def dead_input_mlp(dead: int = 1, n_inputs: int = 3, seed: int = 0) -> neural.MlpModel:
    """A network whose input `dead` has every outgoing weight zeroed."""
    rng = np.random.default_rng(seed)
    mlp = neural.init_model(
        neural.MlpConfig(n_inputs=n_inputs, hidden=(5, 3), seed=seed)
    )
    for layer_i, W in enumerate(mlp.weights):
        W[...] = rng.normal(0.0, 1.0, size=W.shape)
        mlp.biases[layer_i][...] = rng.normal(0.0, 0.3, size=W.shape[1])
    mlp.weights[0][dead, :] = 0.0
    return mlp
