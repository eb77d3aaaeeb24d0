"""Structured (physical) pruning of backbone filters and aggregation heads.

All sparsities are cumulative against the dense model: a layer that started
with ``n`` filters keeps ``max(1, round((1 - s) * n))`` of them.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .kmeans import kmeans
from .layers import MixVPRHead, NetVLADHead, VPRModel, assignment_from_centers
from .tensor import Tensor


class TopologyError(ValueError):
    pass


@dataclass
class DependencyGroup:
    """Channel axes that must lose the same index set together."""

    name: str
    producers: list[int]
    members: list[tuple[str, int]]
    is_output: bool = False
    head_members: list[tuple[str, int]] = field(default_factory=list)


@dataclass
class PruneSchedule:
    """Linear ramp to ``backbone_sparsity`` and ``gamma`` over ``rounds``.

    ``stop_sparsity`` truncates the run after the first round whose backbone
    target reaches it (evaluating a point part-way along the ramp).
    """

    rounds: int
    backbone_sparsity: float = 0.9
    gamma: float = 0.0
    stop_sparsity: float | None = None

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not 0.0 <= self.backbone_sparsity < 1.0:
            raise ValueError(f"backbone_sparsity {self.backbone_sparsity} outside [0, 1)")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma {self.gamma} outside [0, 1)")
        if self.stop_sparsity is not None and not 0.0 < self.stop_sparsity <= self.backbone_sparsity:
            raise ValueError(f"stop_sparsity {self.stop_sparsity} outside (0, {self.backbone_sparsity}]")

    @property
    def active_rounds(self) -> int:
        if self.stop_sparsity is None:
            return self.rounds
        return min(self.rounds, math.ceil(self.stop_sparsity * self.rounds / self.backbone_sparsity - 1e-9))


def schedule_round(schedule: PruneSchedule, t: int) -> tuple[float, float]:
    """Linear ramp: (s_b * t / R, gamma * t / R) for t in 1..R."""
    if not 1 <= t <= schedule.rounds:
        raise ValueError(f"round {t} outside 1..{schedule.rounds}")
    frac = t / schedule.rounds
    return schedule.backbone_sparsity * frac, schedule.gamma * frac


@dataclass
class PruneRoundResult:
    removed: dict[str, list[int]]
    channels: list[int]
    descriptor_dim: int
    clusters: int | None = None
    depth: int | None = None

    def __post_init__(self):
        if self.descriptor_dim <= 0 or min(self.channels) <= 0:
            raise ValueError("pruning left an empty layer")


def retained(original: int, sparsity: float) -> int:
    if not 0.0 <= sparsity < 1.0:
        raise ValueError(f"sparsity {sparsity} would leave no channels")
    return max(1, int(math.floor((1.0 - sparsity) * original + 0.5 + 1e-9)))


def l1_filter_importance(weight) -> np.ndarray:
    w = weight.data if isinstance(weight, Tensor) else np.asarray(weight)
    return np.sum(np.abs(w.astype(np.float64)).reshape(w.shape[0], -1), axis=1)


def lowest_scores(scores: np.ndarray, count: int) -> list[int]:
    """Indices of the ``count`` smallest scores; ties go to the lower index."""
    order = np.lexsort((np.arange(len(scores)), scores))
    return sorted(int(i) for i in order[:count])


def _head_input_members(model: VPRModel) -> list[tuple[str, int]]:
    return {
        "gem": [("descriptor", 0)],
        "convap": [("descriptor", 0)],
        "mixvpr": [("mix.wd", 1)],
        "netvlad": [("vlad.centers", 1), ("vlad.assign_w", 1)],
    }[model.arch]


def build_dependency_groups(model: VPRModel) -> list[DependencyGroup]:
    blocks = model.spec.blocks
    units: list[list[int]] = []
    closed: set[str] = set()
    for i, blk in enumerate(blocks):
        g = blk.residual_group
        if units and g is not None and blocks[units[-1][-1]].residual_group == g:
            units[-1].append(i)
            continue
        if g is not None and g in closed:
            raise TopologyError(f"residual group {g!r} re-entered at block {i}; only contiguous groups are supported")
        if units:
            prev = blocks[units[-1][-1]].residual_group
            if prev is not None:
                closed.add(prev)
        units.append([i])

    groups = []
    for u, unit in enumerate(units):
        members = []
        for i in unit:
            members += [(f"conv{i}.weight", 0), (f"conv{i}.bias", 0)]
        members += [(f"conv{i}.weight", 1) for i in unit[1:]]
        last = u == len(units) - 1
        if not last:
            members.append((f"conv{units[u + 1][0]}.weight", 1))
        name = f"block{unit[0]}" if len(unit) == 1 else f"res[{unit[0]}-{unit[-1]}]"
        groups.append(DependencyGroup(name, list(unit), members, last, _head_input_members(model) if last else []))
    return groups


def _delete(t: Tensor, idx, axis: int) -> Tensor:
    return Tensor(np.delete(t.data, idx, axis=axis), requires_grad=True)


def prune_backbone(model: VPRModel, target_sparsity: float, output_sparsity: float | None = None) -> PruneRoundResult:
    """Remove lowest-l1 filters in place; the output group uses ``output_sparsity``.

    Consumer input channels (including the head's) go with the same indices.
    """
    if output_sparsity is None:
        output_sparsity = target_sparsity
    removed = {}
    for group in build_dependency_groups(model):
        s = output_sparsity if group.is_output else target_sparsity
        keep = retained(model.dense_widths[group.producers[0]], s)
        current = model.spec.blocks[group.producers[0]].out_channels
        if keep >= current:
            removed[group.name] = []
            continue
        scores = sum(l1_filter_importance(model.backbone[f"conv{i}.weight"]) for i in group.producers)
        idx = lowest_scores(scores, current - keep)
        for pname, axis in group.members:
            model.backbone[pname] = _delete(model.backbone[pname], idx, axis)
        for i in group.producers:
            model.spec.blocks[i].out_channels = keep
        if group.is_output:
            model.head.drop_input_channels(idx)
        removed[group.name] = idx
    return PruneRoundResult(removed, [b.out_channels for b in model.spec.blocks], model.descriptor_dim)


def prune_mixvpr_head(head: MixVPRHead, removed_backbone, r_o: float) -> MixVPRHead:
    """Drop W_d input columns matching pruned backbone filters, then the lowest-l1 W_d rows.

    Mixer weights and the row projection are left untouched.
    """
    if r_o >= 1.0:
        raise ValueError(f"r_o={r_o} would remove every depth channel")
    out = copy.deepcopy(head)
    out.drop_input_channels(list(removed_backbone))
    keep = retained(out.dense_depth, r_o)
    if keep < out.depth:
        idx = lowest_scores(l1_filter_importance(out.wd), out.depth - keep)
        out.wd = _delete(out.wd, idx, 0)
    return out


def literal_cluster_count(r_o: float, clusters: int) -> int:
    """Cluster count under the reading "new K = r_o * K" (reported, not applied)."""
    return max(1, int(math.floor(r_o * clusters + 0.5 + 1e-9)))


def prune_netvlad_head(head: NetVLADHead, r_o: float, seed: int = 0, max_iter: int = 100) -> NetVLADHead:
    """Merge cluster centers with k-means down to (1 - r_o) of the dense count.

    The assignment projection is re-derived from the merged centers.
    """
    keep = retained(head.dense_clusters, r_o)
    out = copy.deepcopy(head)
    if keep >= head.clusters:
        return out
    res = kmeans(head.centers.data, keep, seed=seed, max_iter=max_iter)
    w, b = assignment_from_centers(res.centers, head.alpha)
    dt = head.centers.dtype
    out.centers = Tensor(res.centers.astype(dt), requires_grad=True)
    out.assign_w = Tensor(w.astype(dt), requires_grad=True)
    out.assign_b = Tensor(b.astype(dt), requires_grad=True)
    return out


def prune_round(model: VPRModel, backbone_target: float, agg_target: float, seed: int = 0) -> PruneRoundResult:
    """One IMP surgery step on ``model`` (in place) for any of the four heads.

    NetVLAD keeps the full feature width: its descriptor is controlled by the
    cluster count alone.
    """
    output_target = 0.0 if model.arch == "netvlad" else agg_target
    result = prune_backbone(model, backbone_target, output_target)
    if model.arch == "mixvpr":
        model.head = prune_mixvpr_head(model.head, (), agg_target)
        result.depth = model.head.depth
    elif model.arch == "netvlad":
        model.head = prune_netvlad_head(model.head, agg_target, seed)
        result.clusters = model.head.clusters
    model.check_contract()
    result.descriptor_dim = model.descriptor_dim
    return result
