"""Decision trees and their conversion into computational graphs.

Every tree node becomes a vertex whose value is 1 when the input activates
the node and 0 otherwise. The output vertex sums leaf activations weighted by
leaf values. Under the cut (V \\ {t}, {t}) the explanation is the leaf
activation vector, and exactly one entry is 1: the end of the decision path.
"""
import typing as t

import numpy as np

from . import errors
from .compgraph import CompGraph, Cut, Explanation, GraphBuilder, OpSpec
from .core import model


@model
class Split:
    feature: int
    threshold: float
    left: int
    right: int


@model
class Leaf:
    value: float


TreeNode = t.Union[Split, Leaf]


@model
class DecisionTree:
    """Binary tree over `n_features` inputs. A split sends `x[feature] <=
    threshold` to the left child.
    """

    nodes: t.Tuple[TreeNode, ...]
    root: int = 0
    n_features: int = 1

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        _validate_tree(self)

    @classmethod
    def from_sklearn(cls, estimator) -> "DecisionTree":
        """Converts a fitted scikit-learn decision tree. Classifier leaves hold
        the probability of the last class, regressor leaves the prediction.
        """
        tree_ = estimator.tree_
        is_classifier = hasattr(estimator, "classes_")

        nodes: t.List[TreeNode] = []
        for node_i in range(tree_.node_count):
            left = int(tree_.children_left[node_i])
            right = int(tree_.children_right[node_i])
            if left == right:
                counts = np.asarray(tree_.value[node_i][0], dtype=float)
                if is_classifier:
                    value = counts[-1] / counts.sum()
                else:
                    value = counts[0]
                nodes.append(Leaf(float(value)))
            else:
                nodes.append(
                    Split(
                        feature=int(tree_.feature[node_i]),
                        threshold=float(tree_.threshold[node_i]),
                        left=left,
                        right=right,
                    )
                )

        return cls(nodes=tuple(nodes), root=0, n_features=int(tree_.n_features))

    def leaf_for(self, x: t.Sequence[float]) -> int:
        """Index of the leaf reached by direct traversal."""
        node_i = self.root
        while isinstance(node := self.nodes[node_i], Split):
            node_i = node.left if x[node.feature] <= node.threshold else node.right
        return node_i

    def predict(self, x: t.Sequence[float]) -> float:
        return self.nodes[self.leaf_for(x)].value

    @property
    def leaves(self) -> t.List[int]:
        return [i for i in self._preorder() if isinstance(self.nodes[i], Leaf)]

    def _preorder(self) -> t.List[int]:
        order = []
        stack = [self.root]
        while stack:
            node_i = stack.pop()
            order.append(node_i)
            node = self.nodes[node_i]
            if isinstance(node, Split):
                stack.append(node.right)
                stack.append(node.left)
        return order


def _validate_tree(tree: DecisionTree):
    n = len(tree.nodes)
    if n == 0:
        raise errors.TreeValidationError("tree has no nodes")
    if not 0 <= tree.root < n:
        raise errors.TreeValidationError(f"root {tree.root} out of range")
    if tree.n_features < 1:
        raise errors.TreeValidationError("tree needs at least one feature")

    parents = [0] * n
    for node_i, node in enumerate(tree.nodes):
        if isinstance(node, Leaf):
            continue
        if not isinstance(node, Split):
            raise errors.TreeValidationError(f"node {node_i} is neither split nor leaf")
        if not 0 <= node.feature < tree.n_features:
            raise errors.TreeValidationError(
                f"node {node_i} splits on feature {node.feature}, "
                f"tree has {tree.n_features}"
            )
        if node.left == node.right:
            raise errors.TreeValidationError(f"node {node_i} has identical children")
        for child in (node.left, node.right):
            if not 0 <= child < n or child == tree.root:
                raise errors.TreeValidationError(
                    f"node {node_i} has invalid child {child}"
                )
            parents[child] += 1

    if any(count > 1 for count in parents):
        raise errors.TreeValidationError("a node has more than one parent")

    # With single parents and the root unreachable as a child, the reachable
    # part is a tree; everything must be reachable.
    reachable = set()
    stack = [tree.root]
    while stack:
        node_i = stack.pop()
        if node_i in reachable:
            raise errors.TreeValidationError("tree has a cycle")
        reachable.add(node_i)
        node = tree.nodes[node_i]
        if isinstance(node, Split):
            stack.extend([node.left, node.right])
    if len(reachable) != n:
        raise errors.TreeValidationError(
            f"nodes {sorted(set(range(n)) - reachable)} are unreachable"
        )


def input_id(feature: int) -> str:
    return f"x{feature}"


def node_id(node_i: int) -> str:
    return f"node{node_i}"


OUTPUT_ID = "out"


def tree_to_graph(tree: DecisionTree) -> t.Tuple[CompGraph, Cut]:
    """Graph whose node vertices hold activations, with the cut (V \\ {t}, {t})."""
    builder = GraphBuilder()
    for feature in range(tree.n_features):
        builder.add_input(input_id(feature))

    root = tree.nodes[tree.root]
    root_feature = root.feature if isinstance(root, Split) else 0
    # The root is always active: a zero-weighted read of one input plus bias 1.
    builder.add_vertex(
        node_id(tree.root),
        OpSpec.affine([0.0], bias=1.0),
        [input_id(root_feature)],
    )

    for node_i in tree._preorder():
        node = tree.nodes[node_i]
        if not isinstance(node, Split):
            continue

        x = input_id(node.feature)
        le_test = builder.add_vertex(
            f"{node_id(node_i)}.le", OpSpec.threshold(node.threshold, "le"), [x]
        )
        gt_test = builder.add_vertex(
            f"{node_id(node_i)}.gt", OpSpec.threshold(node.threshold, "gt"), [x]
        )
        builder.add_vertex(
            node_id(node.left), OpSpec.product(), [node_id(node_i), le_test]
        )
        builder.add_vertex(
            node_id(node.right), OpSpec.product(), [node_id(node_i), gt_test]
        )

    leaves = tree.leaves
    builder.add_output(
        OUTPUT_ID,
        OpSpec.affine([tree.nodes[i].value for i in leaves]),
        [node_id(i) for i in leaves],
    )

    graph = builder.build()
    return graph, Cut.trivial(graph)


def active_leaves(explanation: Explanation) -> t.List[int]:
    """Leaf indices whose activation in a tree explanation is 1."""
    return [
        int(vertex_id[len("node"):])
        for vertex_id, value in explanation.entries
        if vertex_id.startswith("node") and value == 1.0
    ]


def tree_path(tree: DecisionTree, x: t.Sequence[float]) -> t.List[str]:
    """Branching decisions along the path taken by `x`, as readable rules."""
    rules = []
    node_i = tree.root
    while isinstance(node := tree.nodes[node_i], Split):
        name = input_id(node.feature)
        if x[node.feature] <= node.threshold:
            rules.append(f"{name} <= {node.threshold!r}")
            node_i = node.left
        else:
            rules.append(f"{name} > {node.threshold!r}")
            node_i = node.right
    rules.append(f"leaf {node_i} -> {tree.nodes[node_i].value!r}")
    return rules
