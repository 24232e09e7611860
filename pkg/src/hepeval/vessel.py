"""Skeleton graphs for binary vessel masks and the central/peripheral split.

The skeleton comes from the same iterative soft-skeleton used by the losses,
applied to the 0/1 field and thresholded. Graph extraction clusters adjacent
irregular voxels (degree != 2) into nodes, walks degree-2 chains into edges,
estimates per-edge radii from the exact distance transform of the vessel
mask, breaks spurious cycles at their thinnest edge, and assigns generations
(hops from the greatest-radius trunk edge) plus Strahler orders.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .morphology import (
    connected_components,
    distance_transform,
    pool_array,
)
from .volume import BinaryMask, Geometry

log = logging.getLogger(__name__)

# Neighbor offsets in (dz, dy, dx) lexicographic order, which is ascending
# neighbor linear index; walks scan them in this order for determinism.
OFFSETS_26 = tuple(
    (dz, dy, dx)
    for dz in (-1, 0, 1)
    for dy in (-1, 0, 1)
    for dx in (-1, 0, 1)
    if (dz, dy, dx) != (0, 0, 0)
)


def skeletonize(mask: BinaryMask, iterations: int = 10) -> BinaryMask:
    """Binary skeleton: the soft skeleton of the 0/1 field, thresholded at 0.5.

    Guaranteed to be a subset of the input mask. On binary input every
    intermediate value is 0 or 1, so integer arithmetic is exact.
    """
    if iterations < 1:
        raise ParameterError(f"iterations must be >= 1, got {iterations}")
    current = mask.values.astype(np.uint8)
    opened, _ = pool_array(current, "min", want_trace=False)
    opened, _ = pool_array(opened, "max", want_trace=False)
    skel = current - np.minimum(current, opened)
    for _ in range(iterations):
        current, _ = pool_array(current, "min", want_trace=False)
        if not current.any():
            break
        opened, _ = pool_array(current, "min", want_trace=False)
        opened, _ = pool_array(opened, "max", want_trace=False)
        delta = current - np.minimum(current, opened)
        skel = skel | delta
    return BinaryMask(mask.geometry, (skel > 0) & mask.values)


@dataclass(frozen=True, eq=False)
class SkeletonNode:
    id: int
    voxel: tuple[int, int, int]  # representative position (x, y, z)
    kind: str  # "endpoint" or "junction"
    voxels: np.ndarray = field(repr=False)  # member linear indices


@dataclass(eq=False)
class SkeletonEdge:
    id: int
    nodes: tuple[int, int]
    path: np.ndarray  # interior voxel linear indices, ordered along the walk
    attach: tuple[int, int]  # node voxel linear indices the walk starts/ends at
    length_mm: float = 0.0
    mean_radius_mm: float = 0.0
    generation: int | None = None
    strahler: int | None = None


@dataclass
class SkeletonGraph:
    geometry: Geometry
    nodes: list[SkeletonNode]
    edges: list[SkeletonEdge]
    removed_edges: list[SkeletonEdge]
    root_edge_id: int | None

    def edge_by_id(self, edge_id: int) -> SkeletonEdge:
        for e in self.edges + self.removed_edges:
            if e.id == edge_id:
                return e
        raise ParameterError(f"no edge with id {edge_id}")

    def skeleton_voxel_count(self) -> int:
        n = sum(len(node.voxels) for node in self.nodes)
        n += sum(len(e.path) for e in self.edges + self.removed_edges)
        return n

    def to_json_dict(self) -> dict:
        return {
            "root_edge_id": self.root_edge_id,
            "nodes": [
                {"id": n.id, "voxel": list(n.voxel), "kind": n.kind, "n_voxels": int(len(n.voxels))}
                for n in self.nodes
            ],
            "edges": [
                {
                    "id": e.id,
                    "nodes": list(e.nodes),
                    "generation": e.generation,
                    "strahler": e.strahler,
                    "length_mm": e.length_mm,
                    "mean_radius_mm": e.mean_radius_mm,
                    "n_path_voxels": int(len(e.path)),
                }
                for e in self.edges
            ],
            "removed_edge_ids": [e.id for e in self.removed_edges],
        }


def _linear_to_xyz(lin: int, dims: tuple[int, int, int]) -> tuple[int, int, int]:
    nx, ny, _ = dims
    x = lin % nx
    y = (lin // nx) % ny
    z = lin // (nx * ny)
    return (x, y, int(z))


def _neighbor_degrees(sk: np.ndarray) -> np.ndarray:
    nz, ny, nx = sk.shape
    padded = np.pad(sk, 1).astype(np.uint8)
    deg = np.zeros(sk.shape, dtype=np.uint8)
    for dz, dy, dx in OFFSETS_26:
        deg += padded[1 + dz : 1 + dz + nz, 1 + dy : 1 + dy + ny, 1 + dx : 1 + dx + nx]
    return deg


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[max(ra, rb)] = min(ra, rb)
        return True


def build_graph(skeleton: BinaryMask, vessel_mask: BinaryMask) -> SkeletonGraph:
    """26-connectivity skeleton graph with radii, generations, Strahler orders.

    The skeleton must be a subset of the vessel mask. An empty skeleton
    yields an empty graph rather than an error.
    """
    geometry = skeleton.geometry
    sk = skeleton.values
    if (sk & ~vessel_mask.values).any():
        raise ParameterError("skeleton is not a subset of the vessel mask")
    if not sk.any():
        return SkeletonGraph(geometry, [], [], [], None)

    nz, ny, nx = sk.shape
    deg = _neighbor_degrees(sk)
    node_mask = sk & (deg != 2)
    chain_mask = sk & (deg == 2)

    # node ids: connected clusters of irregular voxels, ordered by first voxel
    node_cc = connected_components(BinaryMask(geometry, node_mask), 26)
    node_of_voxel = node_cc.labels  # 0 where not a node voxel
    n_nodes = node_cc.count
    node_members: list[list[int]] = [[] for _ in range(n_nodes)]
    for lin in np.flatnonzero(node_mask.ravel()):
        node_members[node_of_voxel.ravel()[lin] - 1].append(int(lin))

    sk_flat = sk.ravel()
    chain_flat = chain_mask.ravel()
    node_flat = node_of_voxel.ravel().copy()
    lin_offsets = [dz * nx * ny + dy * nx + dx for dz, dy, dx in OFFSETS_26]
    coords_cache: dict[int, tuple[int, int, int]] = {}

    def neighbors(lin: int):
        x, y, z = _linear_to_xyz(lin, geometry.dims)
        out = []
        for (dz, dy, dx), dlin in zip(OFFSETS_26, lin_offsets):
            xx, yy, zz = x + dx, y + dy, z + dz
            if 0 <= xx < nx and 0 <= yy < ny and 0 <= zz < nz and sk_flat[lin + dlin]:
                out.append(lin + dlin)
        return out

    claimed = np.zeros(sk.size, dtype=bool)
    edges: list[SkeletonEdge] = []

    def walk_chain(start_node_voxel: int, first: int):
        path = []
        prev, cur = start_node_voxel, first
        while True:
            claimed[cur] = True
            path.append(cur)
            nbrs = neighbors(cur)
            nxt = None
            for cand in nbrs:
                if cand != prev:
                    nxt = cand
                    break
            if nxt is None:  # dead end inside a chain: treat last voxel as terminal
                return path, None
            if node_flat[nxt] > 0:
                return path, nxt
            if claimed[nxt]:  # closed a pure cycle back onto its anchor
                return path, nxt
            prev, cur = cur, nxt

    def add_edge(node_a: int, attach_a: int, first: int):
        path, end_voxel = walk_chain(attach_a, first)
        if end_voxel is None:
            # chain that dies out: make its last voxel a fresh endpoint node
            tail = path[-1]
            node_flat[tail] = len(node_members) + 1
            node_members.append([tail])
            end_voxel = tail
            path = path[:-1]
        node_b = int(node_flat[end_voxel]) - 1
        edges.append(
            SkeletonEdge(
                id=len(edges),
                nodes=(node_a, node_b),
                path=np.asarray(path, dtype=np.int64),
                attach=(attach_a, end_voxel),
            )
        )

    for node_id in range(n_nodes):
        for v in node_members[node_id]:
            for w in neighbors(v):
                if chain_flat[w] and not claimed[w]:
                    add_edge(node_id, v, w)

    # components made only of degree-2 voxels (pure cycles): anchor at the
    # smallest unclaimed voxel, producing a self-loop that cycle-breaking drops
    for lin in np.flatnonzero(chain_flat & ~claimed):
        lin = int(lin)
        if claimed[lin]:
            continue
        anchor_id = len(node_members)
        node_members.append([lin])
        node_flat[lin] = anchor_id + 1
        chain_flat[lin] = False
        claimed[lin] = True
        for w in neighbors(lin):
            if chain_flat[w] and not claimed[w]:
                add_edge(anchor_id, lin, w)

    # per-edge length and radius
    spacing = np.asarray(geometry.spacing)
    dt = distance_transform(vessel_mask)
    dt_flat = dt.ravel()
    for e in edges:
        walk = [e.attach[0], *e.path.tolist(), e.attach[1]]
        pts = np.array([_linear_to_xyz(v, geometry.dims) for v in walk], dtype=np.float64)
        if len(pts) > 1:
            steps = np.diff(pts, axis=0) * spacing
            e.length_mm = float(np.sqrt((steps**2).sum(axis=1)).sum())
        e.mean_radius_mm = float(dt_flat[np.asarray(walk)].mean())

    # cycle breaking: maximum-radius spanning forest; dropped edges are the
    # thinnest within each cycle
    uf = _UnionFind(len(node_members))
    removed: list[SkeletonEdge] = []
    kept: list[SkeletonEdge] = []
    for e in sorted(edges, key=lambda e: (-e.mean_radius_mm, e.id)):
        if e.nodes[0] != e.nodes[1] and uf.union(e.nodes[0], e.nodes[1]):
            kept.append(e)
        else:
            removed.append(e)
    if removed:
        log.info("cycle breaking removed %d skeleton edge(s): %s", len(removed), [e.id for e in removed])
    kept.sort(key=lambda e: e.id)
    removed.sort(key=lambda e: e.id)

    # generations: BFS over edge adjacency from each component's widest edge
    incident: dict[int, list[SkeletonEdge]] = {}
    for e in kept:
        incident.setdefault(e.nodes[0], []).append(e)
        incident.setdefault(e.nodes[1], []).append(e)
    by_component: dict[int, list[SkeletonEdge]] = {}
    for e in kept:
        by_component.setdefault(uf.find(e.nodes[0]), []).append(e)

    root_edge_id = None
    best_key = None
    for comp_edges in by_component.values():
        root = min(comp_edges, key=lambda e: (-e.mean_radius_mm, e.id))
        key = (-root.mean_radius_mm, root.id)
        if best_key is None or key < best_key:
            best_key, root_edge_id = key, root.id
        root.generation = 0
        frontier = [root]
        while frontier:
            nxt = []
            for e in frontier:
                for node in e.nodes:
                    for other in incident[node]:
                        if other.generation is None:
                            other.generation = e.generation + 1
                            nxt.append(other)
            frontier = nxt
        _assign_strahler(root, incident)

    # removed edges inherit a generation for voxel classification only
    node_gen: dict[int, int] = {}
    for e in kept:
        for node in e.nodes:
            g = node_gen.get(node)
            node_gen[node] = e.generation if g is None else min(g, e.generation)
    for e in removed:
        gens = [node_gen[n] for n in e.nodes if n in node_gen]
        e.generation = (min(gens) + 1) if gens else 0
        e.strahler = None

    nodes = []
    for node_id, members in enumerate(node_members):
        members_arr = np.asarray(sorted(members), dtype=np.int64)
        n_edges = len(incident.get(node_id, []))
        kind = "endpoint" if n_edges <= 1 else "junction"
        nodes.append(
            SkeletonNode(
                id=node_id,
                voxel=_linear_to_xyz(int(members_arr[0]), geometry.dims),
                kind=kind,
                voxels=members_arr,
            )
        )
    return SkeletonGraph(geometry, nodes, kept, removed, root_edge_id)


def _assign_strahler(root: SkeletonEdge, incident: dict[int, list[SkeletonEdge]]) -> None:
    """Edge-rooted Strahler orders: leaves 1; a parent takes the max child
    order, plus one when two or more children attain that max."""
    # Iterative post-order over the tree of edges.
    stack: list[tuple[SkeletonEdge, int | None, bool]] = [(root, None, False)]
    children: dict[int, list[SkeletonEdge]] = {}
    while stack:
        edge, entry_node, expanded = stack.pop()
        if expanded:
            kids = children[edge.id]
            if not kids:
                edge.strahler = 1
            else:
                orders = [k.strahler for k in kids]
                top = max(orders)
                edge.strahler = top + 1 if orders.count(top) >= 2 else top
            continue
        if entry_node is None:
            far_nodes = list(edge.nodes)
        else:
            far_nodes = [n for n in edge.nodes if n != entry_node] or [entry_node]
        kids = []
        kid_ids = set()
        for node in far_nodes:
            for other in incident[node]:
                if other.id != edge.id and other.strahler is None and other.id not in kid_ids:
                    kids.append(other)
                    kid_ids.add(other.id)
        children[edge.id] = kids
        edge.strahler = -1  # mark visited to stop re-entry on cycles of logic
        stack.append((edge, entry_node, True))
        for kid in kids:
            shared = kid.nodes[0] if kid.nodes[0] in far_nodes else kid.nodes[1]
            stack.append((kid, shared, False))


@dataclass(frozen=True)
class VesselRegionSplit:
    """Disjoint central/peripheral masks that partition the input mask."""

    central: BinaryMask
    peripheral: BinaryMask


def _skeleton_central_flags(
    graph: SkeletonGraph, rule: str, max_generation: int
) -> tuple[np.ndarray, np.ndarray]:
    """Skeleton voxels (ascending linear index) with their central flag."""
    if rule not in ("generation", "strahler"):
        raise ParameterError(f"rule must be 'generation' or 'strahler', got {rule!r}")

    root_strahler = None
    if rule == "strahler" and graph.root_edge_id is not None:
        root_strahler = graph.edge_by_id(graph.root_edge_id).strahler

    def edge_central(e: SkeletonEdge) -> bool:
        if rule == "generation":
            return e.generation is not None and e.generation <= max_generation
        return e.strahler is not None and root_strahler is not None and e.strahler >= root_strahler - 1

    # Edge path voxels carry their edge's class. Junction-cluster voxels sit
    # between branches of different classes, so they claim no basin of their
    # own; they fall back in only when the graph has no edge interiors at all.
    lin_list: list[np.ndarray] = []
    flag_list: list[np.ndarray] = []
    node_central: dict[int, bool] = {}
    for e in graph.edges + graph.removed_edges:
        c = edge_central(e)
        if len(e.path):
            lin_list.append(e.path)
            flag_list.append(np.full(len(e.path), c, dtype=bool))
        for node in e.nodes:
            node_central[node] = node_central.get(node, False) or c
    if not lin_list:
        for node in graph.nodes:
            c = node_central.get(node.id, False)
            lin_list.append(node.voxels)
            flag_list.append(np.full(len(node.voxels), c, dtype=bool))

    lins = np.concatenate(lin_list) if lin_list else np.zeros(0, dtype=np.int64)
    flags = np.concatenate(flag_list) if flag_list else np.zeros(0, dtype=bool)
    order = np.argsort(lins, kind="stable")
    return lins[order], flags[order]


def _nearest_labels(
    geometry: Geometry, targets_lin: np.ndarray, sources_lin: np.ndarray, source_flags: np.ndarray
) -> np.ndarray:
    """Flag of the nearest source voxel for each target voxel.

    Distances are anisotropic (spacing-weighted). Ties resolve to the source
    with the smallest linear index: sources are scanned in ascending order
    and only strictly closer candidates replace the incumbent.
    """
    nx, ny, _ = geometry.dims
    spacing = np.asarray(geometry.spacing)

    def to_mm(lin):
        x = lin % nx
        y = (lin // nx) % ny
        z = lin // (nx * ny)
        return np.stack([x, y, z], axis=1).astype(np.float64) * spacing

    tgt = to_mm(targets_lin)
    src = to_mm(sources_lin)
    tt = (tgt**2).sum(axis=1)
    best_d2 = np.full(len(tgt), np.inf)
    best_flag = np.zeros(len(tgt), dtype=bool)

    target_block = 16384
    src_block = 1024
    for t0 in range(0, len(tgt), target_block):
        t1 = min(t0 + target_block, len(tgt))
        tgt_blk = tgt[t0:t1]
        tt_blk = tt[t0:t1]
        for s0 in range(0, len(src), src_block):
            s1 = min(s0 + src_block, len(src))
            src_blk = src[s0:s1]
            d2 = tt_blk[:, None] + (src_blk**2).sum(axis=1)[None, :] - 2.0 * (tgt_blk @ src_blk.T)
            jmin = np.argmin(d2, axis=1)  # first minimum: smallest index in block
            dmin = d2[np.arange(len(jmin)), jmin]
            upd = dmin < best_d2[t0:t1]
            best_d2[t0:t1][upd] = dmin[upd]
            best_flag[t0:t1][upd] = source_flags[s0:s1][jmin[upd]]
    return best_flag


def classify_central_peripheral(
    graph: SkeletonGraph,
    vessel_mask: BinaryMask,
    rule: str = "generation",
    max_generation: int = 1,
) -> VesselRegionSplit:
    """Split a vessel mask into central and peripheral regions.

    Central skeleton voxels are those of edges with generation <= 1 (default)
    or, under the Strahler rule, orders within one of the root order. Every
    mask voxel takes the class of its nearest skeleton voxel. The two masks
    partition the input mask.
    """
    geometry = vessel_mask.geometry
    targets = np.flatnonzero(vessel_mask.values.ravel())
    empty = np.zeros(geometry.shape, dtype=bool)
    if len(targets) == 0:
        return VesselRegionSplit(BinaryMask(geometry, empty), BinaryMask(geometry, empty))

    src_lin, src_flags = _skeleton_central_flags(graph, rule, max_generation)
    if len(src_lin) == 0:
        log.warning("empty skeleton graph: classifying all %d vessel voxels as peripheral", len(targets))
        peripheral = empty.copy()
        peripheral.ravel()[targets] = True
        return VesselRegionSplit(BinaryMask(geometry, empty), BinaryMask(geometry, peripheral))

    central_flags = _nearest_labels(geometry, targets, src_lin, src_flags)
    central = empty.copy()
    central.ravel()[targets[central_flags]] = True
    peripheral = empty.copy()
    peripheral.ravel()[targets[~central_flags]] = True
    return VesselRegionSplit(BinaryMask(geometry, central), BinaryMask(geometry, peripheral))


def _surface_area_mm2(mask: np.ndarray, spacing: tuple[float, float, float]) -> float:
    """Surface area by counting exposed faces; the exterior is background."""
    sx, sy, sz = spacing
    face_area = {0: sx * sy, 1: sx * sz, 2: sy * sz}  # faces normal to z, y, x
    padded = np.pad(mask, 1)
    total = 0.0
    for axis, area in face_area.items():
        diff = np.diff(padded.astype(np.int8), axis=axis)
        total += float(np.abs(diff).sum()) * area
    return total


def identify_gallbladder(
    biliary_mask: BinaryMask,
    min_volume_mm3: float = 5000.0,
    min_sphericity: float = 0.5,
) -> tuple[BinaryMask, BinaryMask]:
    """Split a biliary mask into (gallbladder, ducts).

    The gallbladder is the 26-connected component maximizing volume times
    sphericity, accepted only above both thresholds; with no qualifying
    component (cholecystectomy) the gallbladder mask is empty and everything
    is ducts.
    """
    geometry = biliary_mask.geometry
    empty = np.zeros(geometry.shape, dtype=bool)
    cc = connected_components(biliary_mask, 26)
    voxvol = geometry.voxel_volume_mm3

    best = None  # (score, component id)
    for cid in range(1, cc.count + 1):
        volume = float(cc.sizes[cid]) * voxvol
        if volume < min_volume_mm3:
            continue
        (x0, x1), (y0, y1), (z0, z1) = cc.bounding_boxes[cid - 1]
        crop = cc.labels[z0:z1, y0:y1, x0:x1] == cid
        area = _surface_area_mm2(crop, geometry.spacing)
        sphericity = np.pi ** (1 / 3) * (6.0 * volume) ** (2 / 3) / area
        if sphericity < min_sphericity:
            continue
        score = volume * sphericity
        if best is None or score > best[0]:
            best = (score, cid)

    if best is None:
        return BinaryMask(geometry, empty), BinaryMask(geometry, biliary_mask.values.copy())
    gb = cc.labels == best[1]
    return BinaryMask(geometry, gb), BinaryMask(geometry, biliary_mask.values & ~gb)
