"""Channel folding: fold-matrix assembly, group folding, and whole-network
folding driven by a plan.

Folding replaces a group's n channels by k cluster representatives:
producer rows (bias included) and BatchNorm parameters become cluster
means, and every consumer's input columns become cluster sums, so each
consumer reads the summed contribution of the channels it used to read
individually.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..clustering import Assignment, cluster_means, cluster_sums, kmeans
from ..errors import ValidationError
from ..nn.blocks import Network, RUNNING_VAR_FLOOR, get_block, path_str
from .groups import (FoldableGroup, consumer_cols, discover_groups,
                     producer_rows, set_consumer_cols, set_producer_rows)

VARIANTS = ("plain", "bn_ar", "bn_dir")
REPAIR_MODES = ("naive", "ar", "dir", "data")


def sparsity_to_k(n: int, sparsity: float) -> int:
    """Cluster count for a sparsity level: k = max(1, round((1 - s) * n))."""
    if not 0.0 <= sparsity <= 1.0:
        raise ValidationError(f"sparsity {sparsity} outside [0, 1]")
    return max(1, int(np.floor((1.0 - sparsity) * n + 0.5)))


def identity_assignment(n: int) -> Assignment:
    return Assignment(labels=np.arange(n), k=n)


def _bn_of(net, producer):
    return get_block(net, producer.bn_path) if producer.bn_path is not None else None


def build_fold_matrix(net: Network, group: FoldableGroup, variant: str):
    """Row matrix whose k-means clustering defines the fold, plus its layout.

    plain:  [rows(P_1) | ... | cols(C_1) | ...]
    bn_ar:  [inv_std * rows(P) | gamma | ... | cols(C) | ...]
    bn_dir: [cols(C) | ... | rows(P) | gamma | inv_std | ...]

    Layout is a list of (label, start, stop) column segments. BN variants
    require every producer in the group to carry a BatchNorm.
    """
    if variant not in VARIANTS:
        raise ValidationError(f"unknown fold variant {variant!r}")
    if variant != "plain" and not group.has_bn:
        raise ValidationError(f"variant {variant!r} requested on BN-free group {group.group_id}")

    segments = []

    def producer_segments():
        for p in group.producers:
            rows = producer_rows(net, p)
            tag = path_str(p.path)
            if variant == "plain":
                segments.append((f"producer:{tag}", rows))
                continue
            bn = _bn_of(net, p)
            inv_std = 1.0 / np.sqrt(bn.running_var + bn.epsilon)
            if variant == "bn_ar":
                segments.append((f"producer:{tag}", rows * inv_std[:, None]))
                segments.append((f"gamma:{tag}", bn.gamma[:, None]))
            else:
                segments.append((f"producer:{tag}", rows))
                segments.append((f"gamma:{tag}", bn.gamma[:, None]))
                segments.append((f"inv_std:{tag}", inv_std[:, None]))

    def consumer_segments():
        for c in group.consumers:
            segments.append((f"consumer:{path_str(c.path)}", consumer_cols(net, c, group.n)))

    if variant == "bn_dir":
        consumer_segments()
        producer_segments()
    else:
        producer_segments()
        consumer_segments()

    layout, start = [], 0
    for label, seg in segments:
        layout.append((label, start, start + seg.shape[1]))
        start += seg.shape[1]
    return np.hstack([seg for _, seg in segments]), layout


def fold_group(net: Network, group: FoldableGroup, assignment: Assignment) -> Network:
    """Fold one group: consumer columns to cluster sums, producer rows and
    BatchNorm parameters to cluster means."""
    if assignment.n != group.n:
        raise ValidationError(
            f"assignment over {assignment.n} rows, group {group.group_id} has {group.n} channels")
    out = net.copy()
    for c in group.consumers:
        set_consumer_cols(out, c, cluster_sums(assignment, consumer_cols(out, c, group.n)))
    for p in group.producers:
        set_producer_rows(out, p, cluster_means(assignment, producer_rows(out, p)))
        bn = _bn_of(out, p)
        if bn is not None:
            folded = cluster_means(assignment, np.stack(
                [bn.gamma, bn.beta, bn.running_mean, bn.running_var], axis=1))
            bn.gamma, bn.beta = folded[:, 0].copy(), folded[:, 1].copy()
            bn.running_mean = folded[:, 2].copy()
            bn.running_var = np.maximum(folded[:, 3], RUNNING_VAR_FLOOR)
    # reconstruct to re-run shape validation on the new channel counts
    return Network(blocks=out.blocks, input_shape=out.input_shape, class_count=out.class_count)


def permute_group_channels(net: Network, group: FoldableGroup, perm) -> Network:
    """Reorder a group's channels; perm[new_index] = old_index."""
    perm = np.asarray(perm, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(group.n)):
        raise ValidationError("perm must be a permutation of the group's channels")
    return fold_group(net, group, Assignment(labels=np.argsort(perm), k=group.n))


@dataclass
class FoldPlan:
    """Target sizes per group (uniform sparsity or explicit per-group k),
    a repair mode, and the clustering seed."""
    sparsity: float | None = None
    per_group: dict | None = None
    repair: str = "naive"
    seed: int = 0

    def __post_init__(self):
        if self.repair not in REPAIR_MODES:
            raise ValidationError(f"unknown repair mode {self.repair!r}")
        if self.sparsity is None and not self.per_group:
            raise ValidationError("plan needs a sparsity or per-group sizes")

    def k_for(self, group_id: str, n: int) -> int:
        if self.per_group and group_id in self.per_group:
            k = int(self.per_group[group_id])
            if not 1 <= k <= n:
                raise ValidationError(f"group {group_id}: k={k} out of range for n={n}")
            return k
        if self.sparsity is None:
            raise ValidationError(f"plan does not cover group {group_id}")
        return sparsity_to_k(n, self.sparsity)


@dataclass
class GroupFoldRecord:
    group_id: str
    kind: str
    variant: str
    n: int
    k: int
    cost: float
    cluster_sizes: list
    labels: np.ndarray
    probe_site: str
    producer_paths: list
    consumer_paths: list
    layout: list
    segment_costs: dict
    e_values: dict | None = None     # producer path -> per-cluster correlation estimate
    gamma_scales: dict | None = None  # producer path -> per-cluster gamma factor

    def assignment(self) -> Assignment:
        return Assignment(labels=self.labels, k=self.k)

    def to_json(self):
        d = {
            "group_id": self.group_id, "kind": self.kind, "variant": self.variant,
            "n": self.n, "k": self.k, "cost": self.cost,
            "cluster_sizes": [int(c) for c in self.cluster_sizes],
            "labels": [int(label) for label in self.labels],
            "probe_site": self.probe_site,
            "producer_paths": self.producer_paths, "consumer_paths": self.consumer_paths,
            "layout": [[name, int(a), int(b)] for name, a, b in self.layout],
            "segment_costs": {k: float(v) for k, v in self.segment_costs.items()},
        }
        if self.e_values is not None:
            d["e_values"] = {k: [float(x) for x in v] for k, v in self.e_values.items()}
        if self.gamma_scales is not None:
            d["gamma_scales"] = {k: [float(x) for x in v] for k, v in self.gamma_scales.items()}
        return d


@dataclass
class FoldReport:
    groups: list = field(default_factory=list)
    total_cost: float = 0.0
    repair: str = "naive"
    seed: int = 0

    def record_for(self, group_id):
        for g in self.groups:
            if g.group_id == group_id:
                return g
        raise KeyError(group_id)

    def probe_assignments(self):
        """probe site -> labels mapping original channels to folded ones."""
        return {g.probe_site: g.labels for g in self.groups}

    def to_json(self):
        return {"repair": self.repair, "seed": self.seed, "total_cost": self.total_cost,
                "groups": [g.to_json() for g in self.groups]}


def variant_for(group: FoldableGroup, repair: str) -> str:
    if not group.has_bn:
        return "plain"
    return "bn_dir" if repair == "dir" else "bn_ar"


def _group_seed(seed: int, index: int) -> int:
    return (int(seed) * 1000003 + index) % (2 ** 63)


def _segment_costs(mat, labels, k, layout):
    a = Assignment(labels=labels, k=k)
    resid = mat - cluster_means(a, mat)[a.labels]
    return {name: float((resid[:, s:e] ** 2).sum()) for name, s, e in layout}


def fold_network(net: Network, plan: FoldPlan, gamma_scaler=None):
    """Fold every group front to back, re-reading weights after each upstream
    fold. Returns (folded network, report).

    gamma_scaler(net, group, assignment), when given, returns
    {producer path -> (scales, extras)} applied multiplicatively to that
    producer's folded BatchNorm gamma; extras land in the report.
    """
    order = [g.group_id for g in discover_groups(net)]
    report = FoldReport(repair=plan.repair, seed=plan.seed)
    current = net
    for index, gid in enumerate(order):
        group = next(g for g in discover_groups(current) if g.group_id == gid)
        variant = variant_for(group, plan.repair)
        mat, layout = build_fold_matrix(current, group, variant)
        k = plan.k_for(gid, group.n)
        if k == group.n:
            assignment, cost = identity_assignment(group.n), 0.0
        else:
            result = kmeans(mat, k, seed=_group_seed(plan.seed, index))
            assignment, cost = result.assignment, result.cost

        scale_info = gamma_scaler(current, group, assignment) if gamma_scaler else None
        current = fold_group(current, group, assignment)
        rec = GroupFoldRecord(
            group_id=gid, kind=group.kind, variant=variant, n=group.n, k=k,
            cost=cost, cluster_sizes=assignment.counts().tolist(),
            labels=assignment.labels.copy(), probe_site=group.probe_site,
            producer_paths=[path_str(p.path) for p in group.producers],
            consumer_paths=[path_str(c.path) for c in group.consumers],
            layout=layout, segment_costs=_segment_costs(mat, assignment.labels, k, layout))
        if scale_info is not None:
            rec.e_values = {path: [float(x) for x in extras] for path, (_, extras) in scale_info.items()}
            rec.gamma_scales = {path: [float(x) for x in scales] for path, (scales, _) in scale_info.items()}
            for p in group.producers:
                tag = path_str(p.path)
                if tag in scale_info and p.bn_path is not None:
                    bn = get_block(current, p.bn_path)
                    bn.gamma = bn.gamma * np.asarray(scale_info[tag][0], dtype=np.float64)
        report.groups.append(rec)
        report.total_cost += cost
    return current, report
