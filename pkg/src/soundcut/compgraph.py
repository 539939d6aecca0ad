"""Machine-learning systems as computational graphs, and sound explanations as
cuts of those graphs.

A graph is a DAG of vertices. Input vertices carry the system input, every
other vertex applies a primitive `OpSpec` to the values of its predecessors
(in declared argument order), and the single output vertex carries the
prediction. A cut splits the vertices into S (holding every input) and T
(holding the output). The values of the S vertices that feed T form the
explanation, and `replay` recomputes the output from them alone.
"""
import collections.abc
import dataclasses
import enum
import graphlib
import logging
import math
import typing as t

from scipy.special import expit

from . import errors
from .core import EMPTY_PROP, lazy_prop, model

logger = logging.getLogger(__name__)

VertexId = str


class Kind(enum.Enum):
    INPUT = "input"
    INTERNAL = "internal"
    OUTPUT = "output"


class Side(enum.Enum):
    S = "S"
    T = "T"


class Opcode(enum.Enum):
    AFFINE = "affine"
    TANH = "tanh"
    SIGMOID = "sigmoid"
    SUM = "sum"
    PRODUCT = "product"
    THRESHOLD = "threshold"
    MUX = "mux"
    NEGATE = "negate"
    MAX = "max"


_UNARY = {Opcode.TANH, Opcode.SIGMOID, Opcode.NEGATE, Opcode.THRESHOLD}
_VARIADIC = {Opcode.SUM, Opcode.PRODUCT, Opcode.MAX}
DIRECTIONS = ("le", "gt")


def _fsum(values: t.Sequence[float]) -> float:
    try:
        return math.fsum(values)
    except (ValueError, OverflowError):
        # inf - inf or intermediate overflow; the caller checks for NaN
        return float(sum(values))


@model
class OpSpec:
    """Primitive function of a non-input vertex. Constants live here, never in
    vertices.
    """

    opcode: Opcode
    coefficients: t.Tuple[float, ...] = ()
    bias: float = 0.0
    constant: float = 0.0
    direction: str = "le"
    selector_arity: int = 0

    def __post_init__(self):
        object.__setattr__(
            self, "coefficients", tuple(float(c) for c in self.coefficients)
        )
        object.__setattr__(self, "bias", float(self.bias))
        object.__setattr__(self, "constant", float(self.constant))

        if self.direction not in DIRECTIONS:
            raise errors.ValidationError(
                f"threshold direction must be one of {DIRECTIONS}, "
                f"got {self.direction!r}"
            )
        if self.opcode == Opcode.AFFINE and len(self.coefficients) == 0:
            raise errors.ValidationError("affine op needs at least one coefficient")
        if self.opcode == Opcode.MUX and self.selector_arity < 1:
            raise errors.ValidationError("mux needs at least one selector bit")

    # -------- constructors --------
    @classmethod
    def affine(cls, coefficients: t.Iterable[float], bias: float = 0.0) -> "OpSpec":
        return cls(Opcode.AFFINE, coefficients=tuple(coefficients), bias=bias)

    @classmethod
    def tanh(cls) -> "OpSpec":
        return cls(Opcode.TANH)

    @classmethod
    def sigmoid(cls) -> "OpSpec":
        return cls(Opcode.SIGMOID)

    @classmethod
    def sum(cls) -> "OpSpec":
        return cls(Opcode.SUM)

    @classmethod
    def product(cls) -> "OpSpec":
        return cls(Opcode.PRODUCT)

    @classmethod
    def threshold(cls, constant: float, direction: str = "le") -> "OpSpec":
        return cls(Opcode.THRESHOLD, constant=constant, direction=direction)

    @classmethod
    def mux(cls, selector_arity: int) -> "OpSpec":
        return cls(Opcode.MUX, selector_arity=selector_arity)

    @classmethod
    def negate(cls) -> "OpSpec":
        return cls(Opcode.NEGATE)

    @classmethod
    def max(cls) -> "OpSpec":
        return cls(Opcode.MAX)

    # -------- semantics --------
    def accepts_arity(self, n_args: int) -> bool:
        if self.opcode == Opcode.AFFINE:
            return n_args == len(self.coefficients)
        if self.opcode in _UNARY:
            return n_args == 1
        if self.opcode in _VARIADIC:
            return n_args >= 1
        if self.opcode == Opcode.MUX:
            return n_args == self.selector_arity + 2**self.selector_arity

        raise errors.ValidationError(f"unknown opcode {self.opcode}")

    def apply(self, args: t.Sequence[float]) -> float:
        op = self.opcode

        if op == Opcode.AFFINE:
            terms = [c * a for c, a in zip(self.coefficients, args)]
            return _fsum([self.bias, *terms])
        if op == Opcode.TANH:
            return math.tanh(args[0])
        if op == Opcode.SIGMOID:
            return float(expit(args[0]))
        if op == Opcode.SUM:
            return _fsum(args)
        if op == Opcode.PRODUCT:
            return math.prod(args)
        if op == Opcode.THRESHOLD:
            if self.direction == "le":
                return 1.0 if args[0] <= self.constant else 0.0
            return 1.0 if args[0] > self.constant else 0.0
        if op == Opcode.MUX:
            k = self.selector_arity
            index = 0
            for bit in args[:k]:
                index = (index << 1) | int(bit >= 0.5)
            return float(args[k + index])
        if op == Opcode.NEGATE:
            return -args[0]
        if op == Opcode.MAX:
            return max(args)

        raise errors.ValidationError(f"unknown opcode {op}")


@model
class Vertex:
    id: VertexId
    kind: Kind


def _lazy_field():
    return dataclasses.field(
        init=False,
        repr=False,
        compare=False,
        default=EMPTY_PROP,
    )


@model
class CompGraph:
    """Validated, immutable computational graph with a single output vertex."""

    vertices: t.Tuple[Vertex, ...]
    incoming: t.Mapping[VertexId, t.Tuple[VertexId, ...]]
    op_table: t.Mapping[VertexId, OpSpec]

    _order: t.Tuple[VertexId, ...] = _lazy_field()
    _outgoing: t.Mapping[VertexId, t.Tuple[VertexId, ...]] = _lazy_field()
    _kinds: t.Mapping[VertexId, Kind] = _lazy_field()

    def __post_init__(self):
        object.__setattr__(self, "vertices", tuple(self.vertices))
        object.__setattr__(
            self,
            "incoming",
            {v.id: tuple(self.incoming.get(v.id, ())) for v in self.vertices},
        )
        object.__setattr__(self, "op_table", dict(self.op_table))
        _validate_graph(self)

    @property
    def ids(self) -> t.Tuple[VertexId, ...]:
        return tuple(v.id for v in self.vertices)

    @property
    @lazy_prop
    def kinds(self) -> t.Mapping[VertexId, Kind]:
        return {v.id: v.kind for v in self.vertices}

    @property
    def inputs(self) -> t.Tuple[VertexId, ...]:
        return tuple(v.id for v in self.vertices if v.kind == Kind.INPUT)

    @property
    def output(self) -> VertexId:
        (out,) = [v.id for v in self.vertices if v.kind == Kind.OUTPUT]
        return out

    @property
    def edges(self) -> t.List[t.Tuple[VertexId, VertexId]]:
        return [(u, v) for v in self.ids for u in self.incoming[v]]

    @property
    @lazy_prop
    def order(self) -> t.Tuple[VertexId, ...]:
        """Topological order, predecessors first."""
        sorter = graphlib.TopologicalSorter()
        for v in self.vertices:
            sorter.add(v.id, *self.incoming[v.id])
        try:
            return tuple(sorter.static_order())
        except graphlib.CycleError as e:
            raise errors.ValidationError(f"graph has a cycle: {e.args[1]}") from e

    @property
    @lazy_prop
    def outgoing(self) -> t.Mapping[VertexId, t.Tuple[VertexId, ...]]:
        succ: t.Dict[VertexId, t.List[VertexId]] = {v: [] for v in self.ids}
        for u, v in self.edges:
            if v not in succ[u]:
                succ[u].append(v)
        return {v: tuple(s) for v, s in succ.items()}


def _validate_graph(graph: CompGraph):
    ids = graph.ids
    if len(set(ids)) != len(ids):
        raise errors.ValidationError("vertex ids must be unique")

    known = set(ids)
    outputs = [v.id for v in graph.vertices if v.kind == Kind.OUTPUT]
    if len(outputs) != 1:
        raise errors.ValidationError(
            f"graph needs exactly one output vertex, got {len(outputs)}"
        )

    for vertex in graph.vertices:
        preds = graph.incoming[vertex.id]
        unknown = [p for p in preds if p not in known]
        if unknown:
            raise errors.ValidationError(
                f"vertex {vertex.id!r} reads unknown vertices {unknown}"
            )

        if vertex.kind == Kind.INPUT:
            if preds:
                raise errors.ValidationError(
                    f"input vertex {vertex.id!r} has incoming edges"
                )
            if vertex.id in graph.op_table:
                raise errors.ValidationError(
                    f"input vertex {vertex.id!r} has an op"
                )
            continue

        if not preds:
            raise errors.ValidationError(
                f"only input vertices may lack incoming edges, {vertex.id!r} has none"
            )
        op = graph.op_table.get(vertex.id)
        if op is None:
            raise errors.ValidationError(f"vertex {vertex.id!r} has no op")
        if not op.accepts_arity(len(preds)):
            raise errors.ValidationError(
                f"vertex {vertex.id!r}: {op.opcode.value} does not accept "
                f"{len(preds)} arguments"
            )

    stray_ops = set(graph.op_table) - known
    if stray_ops:
        raise errors.ValidationError(f"ops for unknown vertices {sorted(stray_ops)}")

    # Forces the cycle check.
    graph.order

    (out,) = outputs
    if graph.outgoing[out]:
        raise errors.ValidationError(f"output vertex {out!r} has outgoing edges")


class GraphBuilder:
    """Incremental graph construction. Validation happens in `build()`."""

    def __init__(self):
        self._vertices: t.List[Vertex] = []
        self._incoming: t.Dict[VertexId, t.Tuple[VertexId, ...]] = {}
        self._ops: t.Dict[VertexId, OpSpec] = {}

    def _add(self, vertex_id: VertexId, kind: Kind) -> VertexId:
        if vertex_id in self._incoming:
            raise errors.ValidationError(f"duplicate vertex id {vertex_id!r}")
        self._vertices.append(Vertex(vertex_id, kind))
        self._incoming[vertex_id] = ()
        return vertex_id

    def add_input(self, vertex_id: VertexId) -> VertexId:
        return self._add(vertex_id, Kind.INPUT)

    def add_vertex(
        self, vertex_id: VertexId, op: OpSpec, args: t.Sequence[VertexId]
    ) -> VertexId:
        self._add(vertex_id, Kind.INTERNAL)
        self._incoming[vertex_id] = tuple(args)
        self._ops[vertex_id] = op
        return vertex_id

    def add_output(
        self, vertex_id: VertexId, op: OpSpec, args: t.Sequence[VertexId]
    ) -> VertexId:
        self._add(vertex_id, Kind.OUTPUT)
        self._incoming[vertex_id] = tuple(args)
        self._ops[vertex_id] = op
        return vertex_id

    def build(self) -> CompGraph:
        return CompGraph(
            vertices=tuple(self._vertices),
            incoming=dict(self._incoming),
            op_table=dict(self._ops),
        )


# ------- evaluation ---------


InputLike = t.Union[t.Mapping[VertexId, float], t.Sequence[float]]


def _input_values(graph: CompGraph, x: InputLike) -> t.Dict[VertexId, float]:
    inputs = graph.inputs
    if isinstance(x, collections.abc.Mapping):
        missing = [i for i in inputs if i not in x]
        if missing:
            raise errors.InputArityError(f"no value for input vertices {missing}")
        return {i: float(x[i]) for i in inputs}

    values = list(x)
    if len(values) != len(inputs):
        raise errors.InputArityError(
            f"graph has {len(inputs)} inputs, got {len(values)} values"
        )
    return {i: float(v) for i, v in zip(inputs, values)}


def _checked(vertex_id: VertexId, value: float) -> float:
    # Infinities propagate as values, only NaN is an error.
    if math.isnan(value):
        raise errors.NumericError(f"NaN at vertex {vertex_id!r}", vertex=vertex_id)
    return value


def evaluate(
    graph: CompGraph, x: InputLike
) -> t.Tuple[float, t.Dict[VertexId, float]]:
    """Computes the value function f_x for every vertex. Returns the output value
    and the full value map.
    """
    values = _input_values(graph, x)
    for vertex_id, value in values.items():
        _checked(vertex_id, value)

    for vertex_id in graph.order:
        if vertex_id in values:
            continue
        op = graph.op_table[vertex_id]
        args = [values[a] for a in graph.incoming[vertex_id]]
        values[vertex_id] = _checked(vertex_id, op.apply(args))

    return values[graph.output], values


# ------- cuts ---------


@model
class Cut:
    side: t.Mapping[VertexId, Side]

    def __post_init__(self):
        object.__setattr__(self, "side", dict(self.side))

    @classmethod
    def from_t_side(cls, graph: CompGraph, t_ids: t.Iterable[VertexId]) -> "Cut":
        t_set = set(t_ids)
        return cls({v: Side.T if v in t_set else Side.S for v in graph.ids})

    @classmethod
    def from_s_side(cls, graph: CompGraph, s_ids: t.Iterable[VertexId]) -> "Cut":
        s_set = set(s_ids)
        return cls({v: Side.S if v in s_set else Side.T for v in graph.ids})

    @classmethod
    def trivial(cls, graph: CompGraph) -> "Cut":
        """C = (V \\ {t}, {t})."""
        return cls.from_t_side(graph, [graph.output])

    @classmethod
    def inputs_only(cls, graph: CompGraph) -> "Cut":
        """C = (I, V \\ I)."""
        return cls.from_s_side(graph, graph.inputs)

    @property
    def s_ids(self) -> t.FrozenSet[VertexId]:
        return frozenset(v for v, side in self.side.items() if side == Side.S)

    @property
    def t_ids(self) -> t.FrozenSet[VertexId]:
        return frozenset(v for v, side in self.side.items() if side == Side.T)


def validate_cut(graph: CompGraph, cut: Cut):
    known = set(graph.ids)
    assigned = set(cut.side)
    if assigned != known or not all(isinstance(s, Side) for s in cut.side.values()):
        raise errors.InvalidCutError(
            "partition",
            f"unassigned {sorted(known - assigned)}, unknown {sorted(assigned - known)}",
        )

    stray_inputs = [i for i in graph.inputs if cut.side[i] != Side.S]
    if stray_inputs:
        raise errors.InvalidCutError("inputs-in-S", f"{stray_inputs} are in T")

    if cut.side[graph.output] != Side.T:
        raise errors.InvalidCutError("output-in-T", f"{graph.output!r} is in S")


def boundary(graph: CompGraph, cut: Cut) -> t.FrozenSet[VertexId]:
    """V_C: vertices in S with at least one edge into T."""
    validate_cut(graph, cut)
    return frozenset(
        u for u, v in graph.edges if cut.side[u] == Side.S and cut.side[v] == Side.T
    )


@model
class Explanation:
    entries: t.Tuple[t.Tuple[VertexId, float], ...]

    def __post_init__(self):
        entries = tuple((str(v), float(value)) for v, value in self.entries)
        ids = [v for v, _ in entries]
        if len(set(ids)) != len(ids):
            raise errors.ValidationError("explanation has duplicate vertex ids")
        object.__setattr__(self, "entries", entries)

    @property
    def vertex_ids(self) -> t.FrozenSet[VertexId]:
        return frozenset(v for v, _ in self.entries)

    def as_dict(self) -> t.Dict[VertexId, float]:
        return dict(self.entries)

    def without(self, vertex_id: VertexId) -> "Explanation":
        return Explanation(tuple(e for e in self.entries if e[0] != vertex_id))

    def with_value(self, vertex_id: VertexId, value: float) -> "Explanation":
        return Explanation(
            tuple((v, value if v == vertex_id else x) for v, x in self.entries)
        )

    def render(self) -> str:
        return "\n".join(f"{v} = {value!r}" for v, value in self.entries)


def explain(graph: CompGraph, cut: Cut, x: InputLike) -> Explanation:
    """E_x: boundary vertices with their values under input `x`."""
    v_c = boundary(graph, cut)
    _, values = evaluate(graph, x)
    return Explanation(tuple((v, values[v]) for v in graph.ids if v in v_c))


def replay(graph: CompGraph, cut: Cut, explanation: Explanation) -> float:
    """Recomputes the output reading only the explanation and the T side."""
    v_c = boundary(graph, cut)
    given = explanation.as_dict()

    missing = v_c - given.keys()
    if missing:
        raise errors.IncompleteExplanationError(missing)
    extra = given.keys() - v_c
    if extra:
        raise errors.ValidationError(
            f"explanation holds vertices off the boundary: {sorted(extra)}"
        )

    values = dict(given)
    for vertex_id in graph.order:
        if cut.side[vertex_id] != Side.T:
            continue
        op = graph.op_table[vertex_id]
        args = [values[a] for a in graph.incoming[vertex_id]]
        values[vertex_id] = _checked(vertex_id, op.apply(args))

    return values[graph.output]


# ------- input masks ---------


def gate_id(input_id: VertexId) -> VertexId:
    return f"gate:{input_id}"


def mask_cut(
    graph: CompGraph, selected: t.Iterable[VertexId]
) -> t.Tuple[CompGraph, Cut]:
    """Inserts a gate vertex behind every input and cuts the graph right after
    the gates of the selected inputs.

    The lowest selected gate (the anchor) also reads the unselected inputs with
    coefficient 0, and every unselected gate is `Affine(0)` of the anchor on
    the T side, so no unselected value crosses the cut. With nothing selected,
    the unselected gates stay in S as constant zeros.
    """
    selected_set = set(selected)
    inputs = graph.inputs
    unknown = sorted(selected_set - set(inputs))
    if unknown:
        raise errors.InvalidSelectionError(f"not input vertices: {unknown}")

    clashes = [gate_id(i) for i in inputs if gate_id(i) in graph.kinds]
    if clashes:
        raise errors.ValidationError(f"gate ids already in use: {clashes}")

    chosen = [i for i in inputs if i in selected_set]
    dropped = [i for i in inputs if i not in selected_set]
    anchor = chosen[0] if chosen else None

    builder = GraphBuilder()
    for i in inputs:
        builder.add_input(i)

    s_side = set(inputs)
    for i in inputs:
        if i == anchor:
            builder.add_vertex(
                gate_id(i),
                OpSpec.affine([1.0, *[0.0] * len(dropped)]),
                [i, *dropped],
            )
            s_side.add(gate_id(i))
        elif i in selected_set:
            builder.add_vertex(gate_id(i), OpSpec.affine([1.0]), [i])
            s_side.add(gate_id(i))
        elif anchor is not None:
            builder.add_vertex(gate_id(i), OpSpec.affine([0.0]), [gate_id(anchor)])
        else:
            builder.add_vertex(gate_id(i), OpSpec.affine([0.0]), [i])
            s_side.add(gate_id(i))

    input_set = set(inputs)
    for vertex in graph.vertices:
        if vertex.kind == Kind.INPUT:
            continue
        args = [gate_id(a) if a in input_set else a for a in graph.incoming[vertex.id]]
        op = graph.op_table[vertex.id]
        if vertex.kind == Kind.OUTPUT:
            builder.add_output(vertex.id, op, args)
        else:
            builder.add_vertex(vertex.id, op, args)

    masked = builder.build()
    cut = Cut.from_s_side(masked, s_side)
    logger.debug(
        "Masked graph: %d of %d inputs selected, anchor %r",
        len(chosen),
        len(inputs),
        anchor,
    )
    return masked, cut
