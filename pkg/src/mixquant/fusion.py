"""Operator fusion: conv+BN weight folding, conv+ReLU scale substitution,
and fusion-group discovery.

Folding a BatchNorm into the preceding conv rewrites weights to
W' = W * gamma / sqrt(var + eps) and bias to
B' = (B - mean) * gamma / sqrt(var + eps) + beta, eliminating the BN node.

Fusing a ReLU into a conv marks the conv to clamp its output at zero and
routes the conv's output quantization to the ReLU's calibrated range, so the
int8 path quantizes once with the post-activation scale instead of
quantizing at the conv scale and requantizing after the ReLU.

A fused node keeps its own id but records `profile_id` (the id of the
original node whose activation range now describes its output) so
calibration profiles gathered on the unfused graph stay valid after fusion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonPositiveVariance
from .ir import Graph, QUANTIZABLE_KINDS, Tensor, topo_sort

_CONV_KINDS = ("Conv2d", "DepthwiseConv2d")


@dataclass(frozen=True)
class FusionGroup:
    """A conv-anchored chain (conv[, bn][, add][, relu]) sharing one precision.

    Quantizable nodes outside any chain form singleton groups, so every
    quantizable node belongs to exactly one group.
    """

    anchor: str
    members: tuple[str, ...]


def _sole_consumer(graph: Graph, node_id: str):
    consumers = graph.consumers(node_id)
    return consumers[0] if len(consumers) == 1 else None


def discover_fusion_groups(graph: Graph) -> list[FusionGroup]:
    """Partition the quantizable nodes into fusion groups, anchors in topo order."""
    order = topo_sort(graph)
    taken: set[str] = set()
    groups: list[FusionGroup] = []
    for nid in order:
        node = graph.node(nid)
        if node.kind not in _CONV_KINDS or nid in taken:
            continue
        members = [nid]
        tail = nid
        nxt = _sole_consumer(graph, tail)
        if nxt is not None and nxt.kind == "BatchNorm" and nxt.id not in taken:
            members.append(nxt.id)
            tail = nxt.id
            nxt = _sole_consumer(graph, tail)
        if nxt is not None and nxt.kind == "Add" and nxt.id not in taken:
            members.append(nxt.id)
            tail = nxt.id
            nxt = _sole_consumer(graph, tail)
        if nxt is not None and nxt.kind == "ReLU" and nxt.id not in taken:
            members.append(nxt.id)
        taken.update(members)
        groups.append(FusionGroup(nid, tuple(members)))
    for nid in order:
        node = graph.node(nid)
        if node.kind in QUANTIZABLE_KINDS and nid not in taken:
            taken.add(nid)
            groups.append(FusionGroup(nid, (nid,)))
    groups.sort(key=lambda g: order.index(g.anchor))
    return groups


def _drop_node(graph: Graph, victim_id: str, replacement_id: str) -> Graph:
    out = Graph(graph.name)
    for n in graph.nodes:
        if n.id == victim_id:
            continue
        n = n.copy()
        n.inputs = [replacement_id if s == victim_id else s for s in n.inputs]
        out.add(n)
    return out


def fuse_conv_bn(graph: Graph) -> Graph:
    """Fold every BatchNorm that solely consumes a conv into that conv's weights."""
    g = graph.copy()
    while True:
        match = None
        for n in g.nodes:
            if n.kind != "BatchNorm":
                continue
            producer = g.node(n.inputs[0])
            if producer.kind in _CONV_KINDS and _sole_consumer(g, producer.id) is not None \
                    and _sole_consumer(g, producer.id).id == n.id:
                match = (producer, n)
                break
        if match is None:
            return g
        conv, bn = match
        gamma = bn.weights["gamma"].data.astype(np.float64)
        beta = bn.weights["beta"].data.astype(np.float64)
        mean = bn.weights["mean"].data.astype(np.float64)
        var = bn.weights["var"].data.astype(np.float64)
        eps = float(bn.attrs.get("epsilon", 1e-5))
        if np.any(var < 0):
            raise NonPositiveVariance(f"{bn.id}: negative variance")
        scale = gamma / np.sqrt(var + eps)

        w = conv.weights["weight"].data.astype(np.float64)
        b = conv.weights.get("bias")
        b = b.data.astype(np.float64) if b is not None else np.zeros(w.shape[0])
        conv = conv.copy()
        conv.weights = {
            "weight": Tensor((w * scale[:, None, None, None]).astype(np.float32)),
            "bias": Tensor(((b - mean) * scale + beta).astype(np.float32)),
        }
        conv.attrs = dict(conv.attrs)
        conv.attrs["profile_id"] = bn.attrs.get("profile_id", bn.id)
        rebuilt = Graph(g.name)
        for n in g.nodes:
            rebuilt.add(conv if n.id == conv.id else n)
        g = _drop_node(rebuilt, bn.id, conv.id)


def fuse_conv_relu(graph: Graph) -> Graph:
    """Fold every ReLU that solely consumes a conv into that conv's requantize.

    The conv gains `fused_relu` (a clamp at zero, exact in FP32) and inherits
    the ReLU's profile id, which eliminates the intermediate conv-output scale
    on the int8 path.
    """
    g = graph.copy()
    while True:
        match = None
        for n in g.nodes:
            if n.kind != "ReLU":
                continue
            producer = g.node(n.inputs[0])
            if producer.kind in _CONV_KINDS and not producer.attrs.get("fused_relu") \
                    and _sole_consumer(g, producer.id) is not None \
                    and _sole_consumer(g, producer.id).id == n.id:
                match = (producer, n)
                break
        if match is None:
            return g
        conv, relu = match
        conv = conv.copy()
        conv.attrs = dict(conv.attrs)
        conv.attrs["fused_relu"] = True
        conv.attrs["profile_id"] = relu.attrs.get("profile_id", relu.id)
        rebuilt = Graph(g.name)
        for n in g.nodes:
            rebuilt.add(conv if n.id == conv.id else n)
        g = _drop_node(rebuilt, relu.id, conv.id)


STAGES = ("unfused", "fused")


def lower_to_stage(graph: Graph, stage: str) -> Graph:
    """Lower to an IR stage: `unfused` is the identity, `fused` applies conv+BN
    folding then conv+ReLU fusion exhaustively."""
    if stage == "unfused":
        return graph.copy()
    if stage == "fused":
        return fuse_conv_relu(fuse_conv_bn(graph))
    raise ValueError(f"unknown IR stage {stage!r}; choose from {STAGES}")
