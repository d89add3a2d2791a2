"""Plan decomposition into tasks at break operators.

A break operator splits the plan at its shallowest occurrences: a node of a
break kind roots a task unless some proper ancestor already has the same
kind (deeper same-kind nodes are suppressed). Each break kind is traversed
independently, so tasks of different kinds may overlap structurally. One
remainder task always covers the root region, truncated at the shallowest
break node of any kind, each replaced by a CUT leaf that keeps the break
node's original id.
"""
from __future__ import annotations

from dataclasses import dataclass

from .plans import CUT, OperatorKind, PlanNode, PlanTree, NATIVE_SPELLINGS

OTH_HUB = "OTH"


class DecomposeError(ValueError):
    pass


@dataclass(frozen=True)
class BreakOperatorSet:
    """Ordered set of join kinds used as break operators."""

    kinds: tuple[OperatorKind, ...]

    def __post_init__(self):
        if not self.kinds:
            raise DecomposeError("break operator set must be non-empty")
        if len(set(self.kinds)) != len(self.kinds):
            raise DecomposeError("duplicate break operators")
        for k in self.kinds:
            if not k.is_join:
                raise DecomposeError(f"break operator {k.label} is not a join kind")

    @classmethod
    def from_names(cls, names) -> BreakOperatorSet:
        kinds = []
        for name in names:
            op = NATIVE_SPELLINGS.get(name)
            if op is None or not op.is_join:
                raise DecomposeError(f"{name!r} is not a join operator spelling")
            kinds.append(op)
        return cls(tuple(kinds))

    def names(self) -> list[str]:
        return [_hub_name(k) for k in self.kinds]

    def __contains__(self, op: OperatorKind) -> bool:
        return op in self.kinds


def _hub_name(op: OperatorKind) -> str:
    return {"HashJoin": "HJ", "MergeJoin": "MJ", "NestedLoop": "NL"}[op.tag]


@dataclass(frozen=True)
class Task:
    """A sub-plan produced by decomposition; the unit routed to modules.

    ``break_op`` is None for the remainder task. Subtree nodes keep the ids
    of the origin plan.
    """

    break_op: OperatorKind | None
    subtree: PlanTree
    origin_plan: str = ""

    @property
    def is_remainder(self) -> bool:
        return self.break_op is None

    @property
    def hub_kind(self) -> str:
        return OTH_HUB if self.break_op is None else _hub_name(self.break_op)


def _min_break_roots(plan: PlanTree, kinds) -> list[int]:
    """Pre-order ids of nodes of a kind in ``kinds`` with no proper ancestor
    of a kind in ``kinds``."""
    roots: list[int] = []
    stack: list[tuple[int, bool]] = [(plan.root, False)]
    order = {nid: i for i, nid in enumerate(plan.preorder_ids())}
    while stack:
        nid, covered = stack.pop()
        node = plan.nodes[nid]
        hit = node.op in kinds
        if hit and not covered:
            roots.append(nid)
        for c in node.children:
            stack.append((c, covered or hit))
    return sorted(roots, key=order.__getitem__)


def remainder_frontier(plan: PlanTree, breaks: BreakOperatorSet) -> frozenset[int]:
    """Ids that become CUT leaves of the remainder: the shallowest break
    nodes per root-to-leaf path, across all break kinds."""
    return frozenset(_min_break_roots(plan, set(breaks.kinds)))


def _extract_subtree(plan: PlanTree, root: int) -> PlanTree:
    ids = plan.subtree_ids(root)
    return PlanTree({i: plan.nodes[i] for i in ids}, root, plan.query_props)


def _remainder_tree(plan: PlanTree, frontier: frozenset[int]) -> PlanTree:
    nodes: dict[int, PlanNode] = {}
    stack = [plan.root]
    while stack:
        nid = stack.pop()
        node = plan.nodes[nid]
        if nid in frontier:
            nodes[nid] = PlanNode(nid, CUT, (), None, node.est_rows)
        else:
            nodes[nid] = node
            stack.extend(node.children)
    return PlanTree(nodes, plan.root, plan.query_props)


def decompose(plan: PlanTree, breaks: BreakOperatorSet | None,
              origin: str = "") -> list[Task]:
    """Split ``plan`` into the remainder task followed by one task per
    shallowest break-kind node (break kinds in set order, roots in
    pre-order). ``breaks=None`` yields a single whole-plan remainder,
    which is how the non-modular baseline consumes plans.
    """
    if breaks is None:
        return [Task(None, plan, origin)]
    frontier = remainder_frontier(plan, breaks)
    tasks = [Task(None, _remainder_tree(plan, frontier), origin)]
    for kind in breaks.kinds:
        for root in _min_break_roots(plan, {kind}):
            tasks.append(Task(kind, _extract_subtree(plan, root), origin))
    return tasks


def task_sidecar(tasks: list[Task]) -> list[dict]:
    """JSON-friendly description of a decomposition: kind, root, node ids."""
    return [
        {
            "kind": t.hub_kind,
            "root_id": t.subtree.root,
            "node_ids": sorted(t.subtree.nodes),
        }
        for t in tasks
    ]
