"""Mixed-type task encodings.

Each task gets four feature blocks:

* ``a`` (numeric, length n): per-table normalized selectivity of the origin
  query, zero for tables its plan does not touch. Query-level, shared by
  every task of the query.
* ``b`` (counts, length 3+2n): HJ/MJ/NL join counts, then per-table
  SeqScan/IndexScan counts in schema slot order.
* ``c`` (structure): pre-order (node, left, right) id triples, 0 marking an
  absent child, padded with (0,0,0) to a fixed length so clustering can
  mismatch-count them.
* ``d`` (binary, length 4): sub-query / aggregation / group-by / order-by.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .decompose import Task
from .plans import PlanTree, QueryProps, WorkloadSchema

C_MAX_DEFAULT = 64

# SelectivityProvider contract: table name -> estimate in [0, 1],
# deterministic for a fixed (query, data volume) pair.
SelectivityProvider = Callable[[str], float]


class EncodingError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TaskEncoding:
    a: np.ndarray  # float64 (n,)
    b: np.ndarray  # int64 (3 + 2n,)
    c: np.ndarray  # int64 (c_max, 3), pre-order triples padded with zeros
    d: np.ndarray  # int64 (4,)
    n_nodes: int   # unpadded triple count

    def triples(self) -> np.ndarray:
        return self.c[: self.n_nodes]


def mapping_selectivities(sels: Mapping[str, float], default: float = 0.0) -> SelectivityProvider:
    return lambda table: sels.get(table, default)


def selectivities_from_plan(plan: PlanTree, schema: WorkloadSchema) -> SelectivityProvider:
    """Planner-estimate selectivities: first scan's est_rows / table rows."""
    sels: dict[str, float] = {}
    for nid in plan.preorder_ids():
        node = plan.nodes[nid]
        if node.table is not None and node.table not in sels:
            if node.table not in schema.index_of:
                raise EncodingError(f"unknown table {node.table!r}")
            sels[node.table] = node.est_rows / schema.row_count(node.table)
    return mapping_selectivities(sels)


def encode_query_level(plan: PlanTree, schema: WorkloadSchema,
                       sel: SelectivityProvider,
                       props: QueryProps | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Feature A and D vectors shared by every task of the query."""
    if props is None:
        props = plan.query_props
    a = np.zeros(schema.n)
    index = schema.index_of
    for table in plan.table_names():
        slot = index.get(table)
        if slot is None:
            raise EncodingError(f"unknown table {table!r}")
        a[slot] = min(1.0, max(0.0, float(sel(table))))
    d = np.array(props.as_tuple(), dtype=np.int64)
    return a, d


def _count_ops(tree: PlanTree, schema: WorkloadSchema) -> np.ndarray:
    b = np.zeros(3 + 2 * schema.n, dtype=np.int64)
    index = schema.index_of
    joins = {"HashJoin": 0, "MergeJoin": 1, "NestedLoop": 2}
    for node in tree.nodes.values():
        if node.op.tag in joins:
            b[joins[node.op.tag]] += 1
        elif node.op.is_scan:
            slot = index.get(node.table)
            if slot is None:
                raise EncodingError(f"unknown table {node.table!r}")
            offset = 3 + 2 * slot + (0 if node.op.tag == "SeqScan" else 1)
            b[offset] += 1
    return b


def structure_triples(tree: PlanTree) -> np.ndarray:
    """Pre-order (node, left, right) id triples; 0 marks an absent child."""
    rows = []
    for nid in tree.preorder_ids():
        ch = tree.nodes[nid].children
        left = ch[0] if len(ch) >= 1 else 0
        right = ch[1] if len(ch) >= 2 else 0
        rows.append((nid, left, right))
    return np.array(rows, dtype=np.int64)


def shape_from_triples(triples: np.ndarray) -> PlanTree:
    """Reconstruct the bare tree shape encoded by Feature C triples.

    Node ids and child links come back exactly; operator/table information
    is not part of Feature C, so every node is a generic placeholder.
    """
    from .plans import PlanNode, other

    if len(triples) == 0:
        raise EncodingError("empty structure encoding")
    placeholder = other("NODE")
    nodes = {}
    for row in triples:
        node_id, left, right = (int(v) for v in row)
        children = tuple(c for c in (left, right) if c != 0)
        nodes[node_id] = PlanNode(node_id, placeholder, children)
    root = int(triples[0][0])
    return PlanTree(nodes, root)


def encode_task(task: Task, schema: WorkloadSchema, sel: SelectivityProvider,
                props: QueryProps | None = None,
                query_plan: PlanTree | None = None,
                c_max: int = C_MAX_DEFAULT) -> TaskEncoding:
    """Encode one task. A and D are query-level (pass ``query_plan`` when the
    task subtree is narrower than the query); B and C are task-specific.
    """
    base = query_plan if query_plan is not None else task.subtree
    a, d = encode_query_level(base, schema, sel, props)
    b = _count_ops(task.subtree, schema)
    triples = structure_triples(task.subtree)
    if len(triples) > c_max:
        raise EncodingError(
            f"task has {len(triples)} nodes, exceeding the structure "
            f"encoding capacity {c_max}")
    c = np.zeros((c_max, 3), dtype=np.int64)
    c[: len(triples)] = triples
    return TaskEncoding(a, b, c, d, len(triples))


def encode_tasks(tasks: list[Task], schema: WorkloadSchema,
                 sel: SelectivityProvider, props: QueryProps | None = None,
                 query_plan: PlanTree | None = None,
                 c_max: int = C_MAX_DEFAULT) -> list[TaskEncoding]:
    return [encode_task(t, schema, sel, props, query_plan, c_max) for t in tasks]


def encoding_record(enc: TaskEncoding) -> dict:
    """JSON-friendly form used by the encode subcommand."""
    return {
        "a": [float(v) for v in enc.a],
        "b": [int(v) for v in enc.b],
        "c": [[int(v) for v in row] for row in enc.triples()],
        "d": [int(v) for v in enc.d],
    }
