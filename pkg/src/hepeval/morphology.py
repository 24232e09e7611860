"""Differentiable 3D morphology, connected components, exact distance transform.

Pooling uses the full 3x3x3 neighborhood with exterior cells contributing 0,
so solid structures erode from the volume border. The box window is separable,
so each pool runs as three 1D passes; the per-pass tie rule (in-volume beats
exterior, then smallest coordinate) composes to the documented global rule:
ties go to the smallest linear index, and the exterior sentinel wins only on
a strict extremum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ParameterError
from .volume import BinaryMask, Geometry, ProbVolume

EXTERIOR = -1


@dataclass(frozen=True)
class PoolTrace:
    """Per-voxel linear index of the neighborhood element that won the pool.

    ``source`` holds x-fastest linear indices into the input grid, or the
    EXTERIOR sentinel where the implicit zero padding attained the extremum.
    """

    kind: str  # "min" or "max"
    source: np.ndarray  # int32, shape (nz, ny, nx)


def _pad_zero(values: np.ndarray) -> np.ndarray:
    out = np.zeros(tuple(s + 2 for s in values.shape), dtype=values.dtype)
    out[1:-1, 1:-1, 1:-1] = values
    return out


def _pool_values(values: np.ndarray, mode: str) -> np.ndarray:
    """Trace-free box pool; dtype-preserving, used on float and uint8 grids."""
    op = np.minimum if mode == "min" else np.maximum
    cur = _pad_zero(values)
    for axis in (2, 1, 0):
        n = values.shape[axis]
        sl = [slice(None)] * 3

        def win(start):
            sl[axis] = slice(start, start + n)
            return cur[tuple(sl)]

        cur = op(op(win(0), win(1)), win(2))
    return cur


def _pool_traced(values: np.ndarray, mode: str) -> tuple[np.ndarray, PoolTrace]:
    """Box pool that also records the winning element per output voxel."""
    nz, ny, nx = values.shape
    n = values.size
    val = _pad_zero(values.astype(np.float64, copy=False))
    lin = np.full(val.shape, EXTERIOR, dtype=np.int64)
    lin[1:-1, 1:-1, 1:-1] = np.arange(n, dtype=np.int64).reshape(values.shape)

    better_than = np.less if mode == "min" else np.greater
    for axis in (2, 1, 0):
        extent = values.shape[axis]
        sl = [slice(None)] * 3

        def window(arr, start):
            sl[axis] = slice(start, start + extent)
            return arr[tuple(sl)]

        best_v = window(val, 0).copy()
        best_l = window(lin, 0).copy()
        for start in (1, 2):
            cand_v = window(val, start)
            cand_l = window(lin, start)
            take = better_than(cand_v, best_v)
            # Equal values: an in-volume candidate replaces an exterior
            # incumbent; among in-volume candidates the first (smallest
            # coordinate, hence smallest linear index) wins.
            take |= (cand_v == best_v) & (best_l == EXTERIOR) & (cand_l != EXTERIOR)
            best_v = np.where(take, cand_v, best_v)
            best_l = np.where(take, cand_l, best_l)
        val, lin = best_v, best_l

    return val, PoolTrace(mode, lin.astype(np.int32))


def pool_array(values: np.ndarray, mode: str, want_trace: bool = True):
    if mode not in ("min", "max"):
        raise ParameterError(f"mode must be 'min' or 'max', got {mode!r}")
    if want_trace:
        return _pool_traced(values, mode)
    return _pool_values(values, mode), None


def max_pool(volume: ProbVolume) -> tuple[ProbVolume, PoolTrace]:
    pooled, trace = _pool_traced(volume.values, "max")
    return ProbVolume(volume.geometry, pooled), trace


def min_pool(volume: ProbVolume) -> tuple[ProbVolume, PoolTrace]:
    pooled, trace = _pool_traced(volume.values, "min")
    return ProbVolume(volume.geometry, pooled), trace


def pool_scatter(trace: PoolTrace, grad_out: np.ndarray, grad_in: np.ndarray) -> None:
    """Accumulate pooled-output gradients back onto the winning inputs."""
    src = trace.source.ravel()
    valid = src != EXTERIOR
    flat = np.bincount(src[valid], weights=grad_out.ravel()[valid], minlength=grad_in.size)
    grad_in.ravel()[:] += flat


def pool_gather(trace: PoolTrace, values: np.ndarray) -> np.ndarray:
    """Replay a recorded pool: gather each winner's value (exterior -> 0)."""
    src = trace.source
    flat = values.ravel()
    out = np.where(src != EXTERIOR, flat[np.where(src != EXTERIOR, src, 0)], 0.0)
    return out.astype(np.float64)


@dataclass(frozen=True)
class SkeletonTape:
    """Ordered pool traces from one soft-skeleton run, enough to replay it.

    Trace order: [open0_min, open0_max] then per iteration
    [erode_k, open_k_min, open_k_max].
    """

    iterations: int
    traces: tuple[PoolTrace, ...]


def soft_skeleton_array(
    values: np.ndarray, iterations: int, want_tape: bool = True
) -> tuple[np.ndarray, SkeletonTape | None]:
    """Iterative soft skeleton with optional gradient tape.

    S = relu(I - open(I)); then `iterations` times:
    I = min_pool(I);  S = S + (1 - S) * relu(I - open(I)).
    """
    if iterations < 1:
        raise ParameterError(f"iterations must be >= 1, got {iterations}")
    traces: list[PoolTrace] = []

    def opened(img):
        eroded, t_min = pool_array(img, "min", want_tape)
        dilated, t_max = pool_array(eroded, "max", want_tape)
        if want_tape:
            traces.extend([t_min, t_max])
        return dilated

    current = values.astype(np.float64, copy=False)
    skel = np.maximum(current - opened(current), 0.0)
    for _ in range(iterations):
        current, t_er = pool_array(current, "min", want_tape)
        if want_tape:
            traces.append(t_er)
        delta = np.maximum(current - opened(current), 0.0)
        skel = skel + (1.0 - skel) * delta
    tape = SkeletonTape(iterations, tuple(traces)) if want_tape else None
    return skel, tape


def soft_skeleton(volume: ProbVolume, iterations: int = 10) -> tuple[ProbVolume, SkeletonTape]:
    skel, tape = soft_skeleton_array(volume.values, iterations, want_tape=True)
    assert tape is not None
    return ProbVolume(volume.geometry, np.clip(skel, 0.0, 1.0)), tape


def replay_skeleton_forward(tape: SkeletonTape, values: np.ndarray) -> np.ndarray:
    """Recompute the skeleton from recorded traces alone (bit-exact)."""
    shape = values.shape
    ti = iter(tape.traces)

    def opened(img):
        eroded = pool_gather(next(ti), img).reshape(shape)
        return pool_gather(next(ti), eroded).reshape(shape)

    current = values.astype(np.float64, copy=False)
    skel = np.maximum(current - opened(current), 0.0)
    for _ in range(tape.iterations):
        current = pool_gather(next(ti), current).reshape(shape)
        skel = skel + (1.0 - skel) * np.maximum(current - opened(current), 0.0)
    return skel


def soft_skeleton_grad(tape: SkeletonTape, values: np.ndarray, grad_skel: np.ndarray) -> np.ndarray:
    """Exact reverse replay of the soft skeleton.

    Forward intermediates are regathered from the traces (identical floats),
    then gradients flow through the relu gates and the argmin/argmax routing.
    """
    shape = values.shape
    ti = iter(tape.traces)

    # Forward replay, keeping what the backward pass needs per stage.
    stages = []  # (t_erode|None, t_min, t_max, gate, skel_before, delta)
    current = values.astype(np.float64, copy=False)
    skel = None
    for k in range(tape.iterations + 1):
        t_er = None
        if k > 0:
            t_er = next(ti)
            current = pool_gather(t_er, current).reshape(shape)
        t_min = next(ti)
        eroded = pool_gather(t_min, current).reshape(shape)
        t_max = next(ti)
        open_img = pool_gather(t_max, eroded).reshape(shape)
        resid = current - open_img
        gate = resid > 0.0
        delta = np.maximum(resid, 0.0)
        skel_before = skel
        skel = delta if skel is None else skel + (1.0 - skel) * delta
        stages.append((t_er, t_min, t_max, gate, skel_before, delta))

    grad_i = np.zeros(shape)  # dL/d(current I at this stage)
    grad_s = grad_skel.astype(np.float64, copy=True)
    for t_er, t_min, t_max, gate, skel_before, delta in reversed(stages):
        if skel_before is None:
            grad_delta = grad_s
        else:
            grad_delta = grad_s * (1.0 - skel_before)
            grad_s = grad_s * (1.0 - delta)
        grad_resid = np.where(gate, grad_delta, 0.0)
        # resid = I - max_pool(min_pool(I))
        grad_i += grad_resid
        grad_open = -grad_resid
        grad_eroded = np.zeros(shape)
        pool_scatter(t_max, grad_open, grad_eroded)
        pool_scatter(t_min, grad_eroded, grad_i)
        if t_er is not None:
            grad_prev = np.zeros(shape)
            pool_scatter(t_er, grad_i, grad_prev)
            grad_i = grad_prev
    return grad_i


@dataclass(frozen=True)
class ComponentLabeling:
    """Connected components with ids assigned by first-voxel linear index."""

    geometry: Geometry
    labels: np.ndarray  # int32, 0 = background
    count: int
    sizes: np.ndarray  # voxel count per component, index 0 unused
    bounding_boxes: tuple  # per component: ((x0,x1), (y0,y1), (z0,z1)), exclusive upper

    def component_mask(self, component_id: int) -> np.ndarray:
        return self.labels == component_id


_STRUCTURES = {6: 1, 18: 2, 26: 3}


def connected_components(mask: BinaryMask, connectivity: int = 26) -> ComponentLabeling:
    """Label components under 6/18/26 adjacency, deterministically ordered."""
    if connectivity not in _STRUCTURES:
        raise ParameterError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    structure = ndimage.generate_binary_structure(3, _STRUCTURES[connectivity])
    raw, count = ndimage.label(mask.values, structure=structure)
    raw = raw.astype(np.int32)
    if count == 0:
        return ComponentLabeling(mask.geometry, raw, 0, np.zeros(1, dtype=np.int64), ())

    # Renumber so component ids follow the first-voxel linear order.
    flat = raw.ravel()
    fg = np.flatnonzero(flat)
    ids, firsts = np.unique(flat[fg], return_index=True)
    order = np.argsort(firsts, kind="stable")
    remap = np.zeros(count + 1, dtype=np.int32)
    remap[ids[order]] = np.arange(1, count + 1, dtype=np.int32)
    labels = remap[raw]

    sizes = np.bincount(labels.ravel(), minlength=count + 1).astype(np.int64)
    sizes[0] = 0
    boxes = []
    for sl in ndimage.find_objects(labels):
        zs, ys, xs = sl
        boxes.append(((xs.start, xs.stop), (ys.start, ys.stop), (zs.start, zs.stop)))
    return ComponentLabeling(mask.geometry, labels, count, sizes, tuple(boxes))


def _squared_edt_axis(f: np.ndarray, axis: int, step: float) -> np.ndarray:
    """Exact min over shifts of f + (d * step)^2 along one axis.

    Brute force over offsets with an early cutoff once d^2 step^2 exceeds the
    largest remaining value; exact because every quantity is an exact float.
    """
    out = f.copy()
    moved_f = np.moveaxis(f, axis, 0)
    moved_out = np.moveaxis(out, axis, 0)
    n = moved_f.shape[0]
    w2 = step * step
    for d in range(1, n):
        c = d * d * w2
        if c >= moved_out.max():
            break
        np.minimum(moved_out[d:], moved_f[:-d] + c, out=moved_out[d:])
        np.minimum(moved_out[:-d], moved_f[d:] + c, out=moved_out[:-d])
    return out


def distance_transform_squared(mask: BinaryMask) -> np.ndarray:
    """Exact squared Euclidean distance (mm^2) to the nearest background.

    The exterior counts as background adjacent to the border; background
    voxels map to 0. Separable passes keep all arithmetic exact for rational
    spacings, so squared values can be compared to a brute-force oracle
    bit for bit.
    """
    sx, sy, sz = mask.geometry.spacing
    padded = np.pad(mask.values, 1, constant_values=False)

    # 1D pass along x via nearest-background index arithmetic.
    nz, ny, nx = padded.shape
    pos = np.arange(nx, dtype=np.int64)
    big = nx + 1
    bg = ~padded
    left_src = np.where(bg, pos, -big)
    left = np.maximum.accumulate(left_src, axis=2)
    right_src = np.where(bg, pos, 2 * big)
    right = np.flip(np.minimum.accumulate(np.flip(right_src, axis=2), axis=2), axis=2)
    dist_vox = np.minimum(pos - left, right - pos).astype(np.float64)
    f = (dist_vox * sx) ** 2

    f = _squared_edt_axis(f, axis=1, step=sy)
    f = _squared_edt_axis(f, axis=0, step=sz)
    return np.ascontiguousarray(f[1:-1, 1:-1, 1:-1])


def distance_transform(mask: BinaryMask) -> np.ndarray:
    """Exact Euclidean distance in mm to the nearest background voxel."""
    return np.sqrt(distance_transform_squared(mask))
