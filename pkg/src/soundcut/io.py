"""File formats: graphs with cuts, trained models, cohorts, sparse feature
matrices with their sidecars, and feature-set lists.

Floats are written with `repr`, so reading a file back gives bit-identical
values. Malformed content raises `FormatError`; missing files raise the
usual `OSError`.
"""
import io
import json
import typing as t
from pathlib import Path

import numpy as np
import scipy.sparse

from . import errors, neural, synthehr
from .compgraph import CompGraph, Cut, GraphBuilder, Kind, Opcode, OpSpec, Side
from .generic_structs import IndexSet

GRAPH_FORMAT = "soundcut.graph"
MODEL_FORMAT = "soundcut.model"
FORMAT_VERSION = 1


def _check_header(data: t.Mapping, fmt: str):
    if not isinstance(data, dict) or data.get("format") != fmt:
        raise errors.FormatError(f"not a {fmt} file")
    if data.get("version") != FORMAT_VERSION:
        raise errors.FormatError(
            f"unsupported {fmt} version {data.get('version')!r}"
        )


def _load_json(f) -> t.Any:
    try:
        return json.load(f)
    except json.JSONDecodeError as e:
        raise errors.FormatError(f"malformed JSON: {e}") from e


# ------- graphs ---------


def _op_to_dict(op: OpSpec) -> t.Dict[str, t.Any]:
    out: t.Dict[str, t.Any] = {"opcode": op.opcode.value}
    if op.opcode == Opcode.AFFINE:
        out.update(coefficients=list(op.coefficients), bias=op.bias)
    elif op.opcode == Opcode.THRESHOLD:
        out.update(constant=op.constant, direction=op.direction)
    elif op.opcode == Opcode.MUX:
        out.update(selector_arity=op.selector_arity)
    return out


def _op_from_dict(data: t.Mapping[str, t.Any]) -> OpSpec:
    try:
        opcode = Opcode(data["opcode"])
        extra = {k: v for k, v in data.items() if k != "opcode"}
        return OpSpec(opcode, **extra)
    except (KeyError, TypeError, ValueError) as e:
        raise errors.FormatError(f"bad op {data!r}: {e}") from e


def dump_graph(graph: CompGraph, cut: t.Optional[Cut], f):
    json.dump(
        {
            "format": GRAPH_FORMAT,
            "version": FORMAT_VERSION,
            "vertices": [
                {
                    "id": v.id,
                    "kind": v.kind.value,
                    "args": list(graph.incoming[v.id]),
                    **(
                        {"op": _op_to_dict(graph.op_table[v.id])}
                        if v.kind != Kind.INPUT
                        else {}
                    ),
                }
                for v in graph.vertices
            ],
            "t_side": (
                None
                if cut is None
                else [v for v in graph.ids if cut.side[v] == Side.T]
            ),
        },
        f,
        indent=2,
    )


def dumps_graph(graph: CompGraph, cut: t.Optional[Cut] = None) -> str:
    buf = io.StringIO()
    dump_graph(graph, cut, buf)
    buf.seek(0)
    return buf.read()


def load_graph(f) -> t.Tuple[CompGraph, t.Optional[Cut]]:
    data = _load_json(f)
    _check_header(data, GRAPH_FORMAT)

    builder = GraphBuilder()
    try:
        for vertex in data["vertices"]:
            kind = Kind(vertex["kind"])
            if kind == Kind.INPUT:
                builder.add_input(vertex["id"])
                continue
            op = _op_from_dict(vertex["op"])
            if kind == Kind.OUTPUT:
                builder.add_output(vertex["id"], op, vertex["args"])
            else:
                builder.add_vertex(vertex["id"], op, vertex["args"])
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, errors.SoundcutError):
            raise
        raise errors.FormatError(f"bad vertex record: {e}") from e

    graph = builder.build()
    t_side = data.get("t_side")
    cut = None if t_side is None else Cut.from_t_side(graph, t_side)
    return graph, cut


def loads_graph(text: str) -> t.Tuple[CompGraph, t.Optional[Cut]]:
    return load_graph(io.StringIO(text))


# ------- models ---------


def _gate_to_dict(gate: neural.GateVector) -> t.Dict[str, t.Any]:
    return {
        "theta": gate.theta.tolist(),
        "ema": gate.ema.tolist(),
        "temperature": gate.temperature,
        "ema_decay": gate.ema_decay,
        "n_updates": gate.n_updates,
    }


def _gate_from_dict(data) -> neural.GateVector:
    return neural.GateVector(
        theta=np.array(data["theta"], dtype=float),
        temperature=float(data["temperature"]),
        ema=np.array(data["ema"], dtype=float),
        ema_decay=float(data["ema_decay"]),
        n_updates=int(data["n_updates"]),
    )


def dump_model(mlp: neural.MlpModel, f):
    json.dump(
        {
            "format": MODEL_FORMAT,
            "version": FORMAT_VERSION,
            "config": mlp.config.to_dict(),
            "weights": [W.tolist() for W in mlp.weights],
            "biases": [b.tolist() for b in mlp.biases],
            "weight_gates": [_gate_to_dict(g) for g in mlp.weight_gates],
            "input_mask": _gate_to_dict(mlp.input_mask),
            "input_scale": mlp.input_scale.tolist(),
        },
        f,
    )


def load_model(f) -> neural.MlpModel:
    data = _load_json(f)
    _check_header(data, MODEL_FORMAT)
    try:
        config = neural.MlpConfig.from_dict(data["config"])
        mlp = neural.MlpModel(
            config=config,
            weights=[np.array(W, dtype=float) for W in data["weights"]],
            biases=[np.array(b, dtype=float) for b in data["biases"]],
            weight_gates=[_gate_from_dict(g) for g in data["weight_gates"]],
            input_mask=_gate_from_dict(data["input_mask"]),
            input_scale=np.array(data["input_scale"], dtype=float),
        )
    except (KeyError, TypeError) as e:
        raise errors.FormatError(f"bad model record: {e}") from e

    sizes = [config.n_inputs, *config.hidden, 1]
    shapes = [W.shape for W in mlp.weights]
    if shapes != list(zip(sizes, sizes[1:])):
        raise errors.FormatError(f"weight shapes {shapes} do not match {sizes}")
    return mlp


def save_model(mlp: neural.MlpModel, path: Path):
    with open(path, "w") as f:
        dump_model(mlp, f)


def read_model(path: Path) -> neural.MlpModel:
    with open(path) as f:
        return load_model(f)


# ------- cohorts ---------


def _patient_record(patient: synthehr.Patient, cohort: synthehr.Cohort, label: int):
    return {
        "id": patient.id,
        "sex": patient.sex,
        "birth_year": patient.birth_year,
        "death_day": patient.death_day,
        "events": [
            [e.day, e.kind.value, e.code]
            + ([e.value] if e.value is not None else [])
            for e in patient.events
        ],
        "label": label,
        "diagnosis_day": cohort.diagnosis_days.get(patient.id),
    }


def dump_cohort(cohort: synthehr.Cohort, f):
    """JSON lines, one patient per line."""
    for patient, label in zip(cohort.patients, cohort.labels):
        f.write(json.dumps(_patient_record(patient, cohort, label)) + "\n")


def load_cohort(
    f, ground_truth: t.Iterable[synthehr.CodeId] = ()
) -> synthehr.Cohort:
    patients, labels, diagnosis_days = [], [], {}
    for line_i, line in enumerate(f, 1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            patients.append(
                synthehr.Patient(
                    id=int(record["id"]),
                    sex=int(record["sex"]),
                    birth_year=int(record["birth_year"]),
                    death_day=record["death_day"],
                    events=tuple(
                        synthehr.Event(
                            int(e[0]),
                            synthehr.EventKind(e[1]),
                            int(e[2]),
                            float(e[3]) if len(e) > 3 else None,
                        )
                        for e in record["events"]
                    ),
                )
            )
            labels.append(int(record["label"]))
            if record.get("diagnosis_day") is not None:
                diagnosis_days[int(record["id"])] = int(record["diagnosis_day"])
        except (KeyError, TypeError, IndexError, ValueError) as e:
            if isinstance(e, errors.SoundcutError):
                raise
            raise errors.FormatError(f"line {line_i}: bad patient record: {e}") from e

    return synthehr.Cohort(
        patients=tuple(patients),
        labels=tuple(labels),
        diagnosis_days=diagnosis_days,
        ground_truth=frozenset(ground_truth),
    )


def dumps_codes(codes: t.Iterable[synthehr.CodeId]) -> str:
    return "".join(
        f"{synthehr.code_name(c)}\n" for c in sorted(codes, key=synthehr.code_sort_key)
    )


def parse_codes(text: str) -> t.List[synthehr.CodeId]:
    codes = []
    for line in text.splitlines():
        if not line.strip():
            continue
        try:
            kind, index = line.strip().split(":")
            codes.append((synthehr.EventKind(kind), int(index)))
        except ValueError as e:
            raise errors.FormatError(f"bad code name {line!r}") from e
    return codes


# ------- feature matrices ---------


def columns_path(path: Path) -> Path:
    return Path(f"{path}.columns")


def labels_path(path: Path) -> Path:
    return Path(f"{path}.labels")


def dump_matrix(matrix: scipy.sparse.spmatrix, f):
    """Header `rows cols nnz`, then `row col value` triplets in row-major
    order. Explicit zeros are dropped.
    """
    coo = scipy.sparse.csr_matrix(matrix, dtype=float, copy=True)
    coo.eliminate_zeros()
    coo.sort_indices()
    coo = coo.tocoo()
    rows, cols = coo.shape
    f.write(f"{rows} {cols} {coo.nnz}\n")
    for r, c, v in zip(coo.row, coo.col, coo.data):
        f.write(f"{int(r)} {int(c)} {float(v)!r}\n")


def load_matrix(f) -> scipy.sparse.csr_matrix:
    try:
        n_rows, n_cols, nnz = (int(x) for x in f.readline().split())
        triplets = [line.split() for line in f if line.strip()]
        rows = [int(r) for r, _, _ in triplets]
        cols = [int(c) for _, c, _ in triplets]
        vals = [float(v) for _, _, v in triplets]
    except ValueError as e:
        raise errors.FormatError(f"bad matrix file: {e}") from e

    if len(triplets) != nnz:
        raise errors.FormatError(f"header promises {nnz} entries, found {len(triplets)}")
    if rows and (max(rows) >= n_rows or max(cols) >= n_cols or min(rows + cols) < 0):
        raise errors.FormatError("triplet index out of range")
    return scipy.sparse.csr_matrix(
        (vals, (rows, cols)), shape=(n_rows, n_cols), dtype=float
    )


def save_feature_matrix(
    fm: synthehr.FeatureMatrix, path: Path, labels: t.Optional[np.ndarray] = None
):
    """Writes the matrix, its `.columns` sidecar and, with labels, its
    `.labels` sidecar.
    """
    path = Path(path)
    with open(path, "w") as f:
        dump_matrix(fm.matrix, f)
    columns_path(path).write_text("".join(f"{name}\n" for name in fm.columns))
    if labels is not None:
        labels_path(path).write_text("".join(f"{int(y)}\n" for y in labels))


def read_feature_matrix(path: Path) -> synthehr.FeatureMatrix:
    path = Path(path)
    with open(path) as f:
        matrix = load_matrix(f)
    columns = columns_path(path).read_text().splitlines()
    if len(columns) != matrix.shape[1]:
        raise errors.FormatError(
            f"{path} has {matrix.shape[1]} columns but {len(columns)} names"
        )
    return synthehr.FeatureMatrix(matrix, tuple(columns))


def read_labels(path: Path) -> np.ndarray:
    """Labels sidecar of the matrix at `path`."""
    lines = [x for x in labels_path(path).read_text().splitlines() if x.strip()]
    try:
        labels = np.array([int(x) for x in lines], dtype=int)
    except ValueError as e:
        raise errors.FormatError(f"bad labels file: {e}") from e
    if not np.isin(labels, (0, 1)).all():
        raise errors.FormatError("labels must be 0 or 1")
    return labels


# ------- feature sets ---------


def dumps_feature_set(selected: t.Iterable[int], columns: t.Sequence[str]) -> str:
    return "".join(f"{columns[i]}\n" for i in IndexSet(selected))


def parse_feature_set(text: str, columns: t.Sequence[str]) -> IndexSet:
    """Column indices of the names listed one per line."""
    index = {name: i for i, name in enumerate(columns)}
    names = [line.strip() for line in text.splitlines() if line.strip()]
    unknown = [n for n in names if n not in index]
    if unknown:
        raise errors.FormatError(f"unknown feature names {unknown[:5]}")
    return IndexSet(index[n] for n in names)
