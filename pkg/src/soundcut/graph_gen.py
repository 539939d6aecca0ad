"""Seeded random graphs, cuts, trees and small networks, used as test oracles
and for the axiom sweeps.
"""
import typing as t

import numpy as np

from . import neural
from .compgraph import CompGraph, Cut, GraphBuilder, Kind, Opcode, OpSpec
from .trees import DecisionTree, Leaf, Split

DAG_OPCODES = (
    Opcode.AFFINE,
    Opcode.TANH,
    Opcode.SIGMOID,
    Opcode.SUM,
    Opcode.PRODUCT,
    Opcode.THRESHOLD,
    Opcode.MUX,
    Opcode.NEGATE,
    Opcode.MAX,
)


def _random_op(rng: np.random.Generator, opcode: Opcode, n_available: int):
    """An op of `opcode` and its argument count, or None if it needs more
    predecessors than are available.
    """
    if opcode == Opcode.AFFINE:
        n_args = int(rng.integers(1, min(4, n_available) + 1))
        coefficients = rng.uniform(-1.0, 1.0, size=n_args)
        return OpSpec.affine(coefficients, bias=float(rng.uniform(-1.0, 1.0))), n_args
    if opcode in (Opcode.TANH, Opcode.SIGMOID, Opcode.NEGATE):
        return OpSpec(opcode), 1
    if opcode == Opcode.THRESHOLD:
        direction = "le" if rng.random() < 0.5 else "gt"
        return OpSpec.threshold(float(rng.uniform(-1.0, 1.0)), direction), 1
    if opcode in (Opcode.SUM, Opcode.PRODUCT, Opcode.MAX):
        return OpSpec(opcode), int(rng.integers(1, min(3, n_available) + 1))
    if opcode == Opcode.MUX:
        if n_available < 3:
            return None
        return OpSpec.mux(1), 3
    raise ValueError(f"unknown opcode {opcode}")


def random_dag(
    rng: np.random.Generator,
    n_inputs: int = 3,
    n_internal: int = 8,
    opcodes: t.Sequence[Opcode] = DAG_OPCODES,
) -> CompGraph:
    """Vertices read from earlier vertices only, so the graph is acyclic. The
    output is an affine combination of up to three earlier vertices.
    """
    builder = GraphBuilder()
    ids = [builder.add_input(f"x{i}") for i in range(n_inputs)]

    for k in range(n_internal):
        while True:
            opcode = opcodes[int(rng.integers(len(opcodes)))]
            drawn = _random_op(rng, opcode, len(ids))
            if drawn is not None:
                break
        op, n_args = drawn
        # Arguments may repeat.
        args = [ids[int(i)] for i in rng.integers(len(ids), size=n_args)]
        ids.append(builder.add_vertex(f"v{k}", op, args))

    n_out = int(rng.integers(1, min(3, len(ids)) + 1))
    out_args = [ids[int(i)] for i in rng.choice(len(ids), size=n_out, replace=False)]
    builder.add_output(
        "out", OpSpec.affine(rng.uniform(-1.0, 1.0, size=n_out)), out_args
    )
    return builder.build()


def random_cut(graph: CompGraph, rng: np.random.Generator, t_prob: float = 0.5) -> Cut:
    """Inputs in S, output in T, every other vertex on a random side."""
    t_side = [graph.output] + [
        v
        for v, kind in graph.kinds.items()
        if kind == Kind.INTERNAL and rng.random() < t_prob
    ]
    return Cut.from_t_side(graph, t_side)


def random_input(graph: CompGraph, rng: np.random.Generator, scale: float = 2.0):
    return rng.uniform(-scale, scale, size=len(graph.inputs))


def random_tree(
    rng: np.random.Generator,
    n_features: int = 3,
    max_depth: int = 4,
    split_prob: float = 0.7,
) -> DecisionTree:
    """Nodes are numbered in preorder, the root is 0."""
    nodes: t.List[t.Any] = []

    def grow(depth: int) -> int:
        node_i = len(nodes)
        nodes.append(None)
        if depth < max_depth and rng.random() < split_prob:
            feature = int(rng.integers(n_features))
            threshold = float(np.round(rng.uniform(-1.0, 1.0), 2))
            left = grow(depth + 1)
            right = grow(depth + 1)
            nodes[node_i] = Split(feature, threshold, left, right)
        else:
            nodes[node_i] = Leaf(float(np.round(rng.uniform(0.0, 1.0), 3)))
        return node_i

    grow(0)
    return DecisionTree(tuple(nodes), root=0, n_features=n_features)


def random_mlp(
    rng: np.random.Generator,
    n_inputs: int = 4,
    hidden: t.Tuple[int, int] = (6, 4),
    closed_gate_prob: float = 0.0,
) -> neural.MlpModel:
    """A network with normal weights and biases. Each gate is closed with
    probability `closed_gate_prob`; the smoothed masks follow the gates.
    """
    config = neural.MlpConfig(
        n_inputs=n_inputs, hidden=hidden, seed=int(rng.integers(2**31))
    )
    mlp = neural.init_model(config)

    def close_some(gate: neural.GateVector):
        closed = rng.random(gate.theta.shape) < closed_gate_prob
        gate.theta[closed] = -np.abs(gate.theta[closed])
        gate.ema = gate.hard()

    for layer_i, W in enumerate(mlp.weights):
        W[...] = rng.normal(0.0, 1.0, size=W.shape)
        mlp.biases[layer_i][...] = rng.normal(0.0, 0.5, size=mlp.biases[layer_i].shape)
        close_some(mlp.weight_gates[layer_i])
    close_some(mlp.input_mask)
    return mlp
