"""Evaluation protocol: DSC, binary clDice, lesion-wise detection, per-case
reports, aggregation, and the unpaired Mann-Whitney U test."""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import ParameterError, SchemaError
from .morphology import connected_components
from .vessel import (
    build_graph,
    classify_central_peripheral,
    identify_gallbladder,
    skeletonize,
)
from .volume import (
    VESSEL_STRUCTURES,
    BinaryMask,
    LabelVolume,
    extract_mask,
    require_same_geometry,
)


def dsc(a: BinaryMask, b: BinaryMask) -> float:
    """Dice similarity coefficient; 1.0 when both masks are empty."""
    require_same_geometry(a, b)
    na, nb = a.popcount(), b.popcount()
    if na == 0 and nb == 0:
        return 1.0
    inter = int((a.values & b.values).sum())
    return 2.0 * inter / (na + nb)


def cl_dice_metric(pred: BinaryMask, gt: BinaryMask, iterations: int = 10) -> float:
    """Binary centerline-Dice between prediction and truth masks.

    Harmonic mean of skeleton precision (predicted skeleton inside the truth
    mask) and skeleton recall (truth skeleton inside the prediction). Both
    skeletons empty gives 1.0; exactly one empty gives 0.0.
    """
    require_same_geometry(pred, gt)
    skel_p = skeletonize(pred, iterations).values
    skel_g = skeletonize(gt, iterations).values
    np_, ng = int(skel_p.sum()), int(skel_g.sum())
    if np_ == 0 and ng == 0:
        return 1.0
    if np_ == 0 or ng == 0:
        return 0.0
    tprec = int((skel_p & gt.values).sum()) / np_
    tsens = int((skel_g & pred.values).sum()) / ng
    if tprec + tsens == 0.0:
        return 0.0
    return 2.0 * tprec * tsens / (tprec + tsens)


@dataclass(frozen=True)
class LesionRow:
    id: int
    volume_mm3: float
    detected: bool
    best_overlap_dsc: float


@dataclass(frozen=True)
class FalsePositiveRow:
    id: int
    volume_mm3: float


@dataclass(frozen=True)
class LesionReport:
    n_gt: int
    n_detected: int
    detection_rate: float
    n_false_positive: int
    rows: tuple[LesionRow, ...]
    fp_rows: tuple[FalsePositiveRow, ...]

    def to_json_dict(self) -> dict:
        return {
            "n_gt": self.n_gt,
            "n_detected": self.n_detected,
            "detection_rate": self.detection_rate,
            "n_false_positive": self.n_false_positive,
            "lesions": [
                {
                    "id": r.id,
                    "volume_mm3": r.volume_mm3,
                    "detected": r.detected,
                    "best_overlap_dsc": r.best_overlap_dsc,
                }
                for r in self.rows
            ],
            "false_positives": [{"id": r.id, "volume_mm3": r.volume_mm3} for r in self.fp_rows],
        }


def lesion_match(
    gt_tumors: BinaryMask,
    pred_tumors: BinaryMask,
    connectivity: int = 26,
    min_overlap_voxels: int = 1,
) -> LesionReport:
    """Instance-wise tumor detection.

    A truth lesion counts as detected when some single predicted component
    overlaps it by at least ``min_overlap_voxels``; a predicted component
    overlapping no truth lesion at all is a false positive.
    """
    require_same_geometry(gt_tumors, pred_tumors)
    if min_overlap_voxels < 1:
        raise ParameterError("min_overlap_voxels must be >= 1")
    gt_cc = connected_components(gt_tumors, connectivity)
    pr_cc = connected_components(pred_tumors, connectivity)
    voxvol = gt_tumors.geometry.voxel_volume_mm3

    # pairwise overlap counts via a joint histogram of (gt id, pred id)
    overlap = np.zeros((gt_cc.count + 1, pr_cc.count + 1), dtype=np.int64)
    either = (gt_cc.labels > 0) | (pr_cc.labels > 0)
    if either.any():
        g = gt_cc.labels[either].astype(np.int64)
        p = pr_cc.labels[either].astype(np.int64)
        pairs = np.bincount(g * (pr_cc.count + 1) + p, minlength=overlap.size)
        overlap = pairs.reshape(overlap.shape)

    rows = []
    n_detected = 0
    for gid in range(1, gt_cc.count + 1):
        best_dsc = 0.0
        detected = False
        for pid in range(1, pr_cc.count + 1):
            ov = int(overlap[gid, pid])
            if ov == 0:
                continue
            if ov >= min_overlap_voxels:
                detected = True
            pair_dsc = 2.0 * ov / (int(gt_cc.sizes[gid]) + int(pr_cc.sizes[pid]))
            best_dsc = max(best_dsc, pair_dsc)
        n_detected += detected
        rows.append(LesionRow(gid, float(gt_cc.sizes[gid]) * voxvol, detected, best_dsc))

    fp_rows = []
    for pid in range(1, pr_cc.count + 1):
        if int(overlap[1:, pid].sum()) == 0:
            fp_rows.append(FalsePositiveRow(pid, float(pr_cc.sizes[pid]) * voxvol))

    return LesionReport(
        n_gt=gt_cc.count,
        n_detected=n_detected,
        detection_rate=n_detected / max(gt_cc.count, 1),
        n_false_positive=len(fp_rows),
        rows=tuple(rows),
        fp_rows=tuple(fp_rows),
    )


@dataclass(frozen=True)
class EvalConfig:
    """Options for the per-case evaluation protocol."""

    connectivity: int = 26
    skeleton_iterations: int = 10
    min_overlap_voxels: int = 1
    central_rule: str = "generation"
    max_central_generation: int = 1
    gallbladder_min_volume_mm3: float = 5000.0
    gallbladder_min_sphericity: float = 0.5


@dataclass(frozen=True)
class CaseReport:
    """Per-case evaluation record mirroring the reporting protocol."""

    case_id: str
    dsc: dict[str, float]
    central_dsc: dict[str, float | None]
    peripheral_dsc: dict[str, float | None]
    cl_dice: dict[str, float]
    lesions: LesionReport
    gallbladder_absent_gt: bool
    gallbladder_absent_pred: bool

    def to_json_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "dsc": self.dsc,
            "central_dsc": self.central_dsc,
            "peripheral_dsc": self.peripheral_dsc,
            "cl_dice": self.cl_dice,
            "lesions": self.lesions.to_json_dict(),
            "flags": {
                "gallbladder_absent_gt": self.gallbladder_absent_gt,
                "gallbladder_absent_pred": self.gallbladder_absent_pred,
            },
        }


def _biliary_mask(volume: LabelVolume) -> BinaryMask:
    """Biliary tree mask: the biliary label plus a separate gallbladder label
    when the dataset uses one."""
    mask = extract_mask(volume, volume.schema.id_of("biliary_tree")).values
    if any(name == "gallbladder" for name in volume.schema.ids.values()):
        mask = mask | extract_mask(volume, volume.schema.id_of("gallbladder")).values
    return BinaryMask(volume.geometry, mask)


def evaluate_case(
    gt: LabelVolume,
    pred: LabelVolume,
    config: EvalConfig = EvalConfig(),
    case_id: str = "case",
) -> CaseReport:
    """Full per-case evaluation.

    Per-structure DSC over the schema; central/peripheral DSC for the venous
    trees using the split derived from the truth mask's skeleton graph and
    applied to both masks; gallbladder/ducts subdivision of the biliary tree
    with the central (gallbladder) comparison skipped for cholecystectomy
    cases; clDice for veins and ducts; lesion-wise tumor detection.
    """
    require_same_geometry(gt, pred)
    if gt.schema != pred.schema:
        raise SchemaError("ground truth and prediction use different label schemas")

    structure_dsc = {}
    for sid in gt.schema.structure_ids():
        name = gt.schema.name_of(sid)
        structure_dsc[name] = dsc(extract_mask(gt, sid), extract_mask(pred, sid))

    central: dict[str, float | None] = {}
    peripheral: dict[str, float | None] = {}
    cl: dict[str, float] = {}

    for name in VESSEL_STRUCTURES:
        sid = gt.schema.id_of(name)
        gt_mask = extract_mask(gt, sid)
        pred_mask = extract_mask(pred, sid)
        skel = skeletonize(gt_mask, config.skeleton_iterations)
        graph = build_graph(skel, gt_mask)
        gt_split = classify_central_peripheral(
            graph, gt_mask, config.central_rule, config.max_central_generation
        )
        pred_split = classify_central_peripheral(
            graph, pred_mask, config.central_rule, config.max_central_generation
        )
        central[name] = dsc(gt_split.central, pred_split.central)
        peripheral[name] = dsc(gt_split.peripheral, pred_split.peripheral)
        cl[name] = cl_dice_metric(pred_mask, gt_mask, config.skeleton_iterations)

    gt_biliary = _biliary_mask(gt)
    pred_biliary = _biliary_mask(pred)
    gb_gt, ducts_gt = identify_gallbladder(
        gt_biliary, config.gallbladder_min_volume_mm3, config.gallbladder_min_sphericity
    )
    gb_pred, ducts_pred = identify_gallbladder(
        pred_biliary, config.gallbladder_min_volume_mm3, config.gallbladder_min_sphericity
    )
    gb_absent_gt = gb_gt.popcount() == 0
    gb_absent_pred = gb_pred.popcount() == 0
    # Cholecystectomy rule: no truth gallbladder means the central biliary
    # comparison is left out of the analysis entirely.
    central["biliary_tree"] = None if gb_absent_gt else dsc(gb_gt, gb_pred)
    peripheral["biliary_tree"] = dsc(ducts_gt, ducts_pred)
    cl["biliary_ducts"] = cl_dice_metric(ducts_pred, ducts_gt, config.skeleton_iterations)

    tumor_id = gt.schema.id_of("tumor")
    lesions = lesion_match(
        extract_mask(gt, tumor_id),
        extract_mask(pred, tumor_id),
        config.connectivity,
        config.min_overlap_voxels,
    )

    return CaseReport(
        case_id=case_id,
        dsc=structure_dsc,
        central_dsc=central,
        peripheral_dsc=peripheral,
        cl_dice=cl,
        lesions=lesions,
        gallbladder_absent_gt=gb_absent_gt,
        gallbladder_absent_pred=gb_absent_pred,
    )


@dataclass(frozen=True)
class SummaryEntry:
    mean: float
    sd: float
    median: float
    min: float
    max: float
    n: int


@dataclass(frozen=True)
class Summary:
    n_cases: int
    entries: dict[str, SummaryEntry | None]
    detection_rate_mean: float
    detection_rate_sd: float
    detection_rate_pooled: float
    median_false_positives: float

    def to_json_dict(self) -> dict:
        return {
            "n_cases": self.n_cases,
            "structures": {
                key: None
                if e is None
                else {
                    "mean": e.mean,
                    "sd": e.sd,
                    "median": e.median,
                    "min": e.min,
                    "max": e.max,
                    "n": e.n,
                }
                for key, e in self.entries.items()
            },
            "tumor_detection": {
                "rate_mean": self.detection_rate_mean,
                "rate_sd": self.detection_rate_sd,
                "rate_pooled": self.detection_rate_pooled,
                "median_false_positives": self.median_false_positives,
            },
        }

    def to_csv_rows(self) -> list[list]:
        rows = [["structure", "mean", "sd", "median", "min", "max"]]
        for key, e in self.entries.items():
            if e is None:
                rows.append([key, "", "", "", "", ""])
            else:
                rows.append([key, e.mean, e.sd, e.median, e.min, e.max])
        return rows


def _stats(values: list[float]) -> SummaryEntry | None:
    if not values:
        return None
    arr = np.asarray(values, dtype=np.float64)
    sd = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return SummaryEntry(
        mean=float(arr.mean()),
        sd=sd,
        median=float(np.median(arr)),
        min=float(arr.min()),
        max=float(arr.max()),
        n=len(arr),
    )


def aggregate(reports: list[CaseReport]) -> Summary:
    """Summarize case reports as mean +- sample sd, median, min, max.

    Entries absent from every case (for example the central biliary DSC when
    all cases lack a gallbladder) stay null instead of 0. Reports are
    aggregated in case-id order.
    """
    if not reports:
        raise ParameterError("aggregate requires at least one case report")
    reports = sorted(reports, key=lambda r: r.case_id)

    columns: dict[str, list[float]] = {}

    def put(key: str, value: float | None):
        columns.setdefault(key, [])
        if value is not None:
            columns[key].append(value)

    for r in reports:
        for name, v in r.dsc.items():
            put(name, v)
        for name, v in r.central_dsc.items():
            put(f"{name}/central", v)
        for name, v in r.peripheral_dsc.items():
            put(f"{name}/peripheral", v)
        for name, v in r.cl_dice.items():
            put(f"{name}/cl_dice", v)

    entries = {key: _stats(vals) for key, vals in columns.items()}

    rates = [r.lesions.detection_rate for r in reports]
    rate_stats = _stats(rates)
    total_gt = sum(r.lesions.n_gt for r in reports)
    total_detected = sum(r.lesions.n_detected for r in reports)
    fp_counts = [r.lesions.n_false_positive for r in reports]
    return Summary(
        n_cases=len(reports),
        entries=entries,
        detection_rate_mean=rate_stats.mean,
        detection_rate_sd=rate_stats.sd,
        detection_rate_pooled=total_detected / max(total_gt, 1),
        median_false_positives=float(np.median(fp_counts)),
    )


@dataclass(frozen=True)
class MannWhitneyResult:
    U: float
    p_two_sided: float
    method: str  # "exact" or "normal_approximation"
    tie_correction_applied: bool


EXACT_LIMIT = 12


def _midranks(pooled: np.ndarray) -> np.ndarray:
    order = np.argsort(pooled, kind="stable")
    ranks = np.empty(len(pooled), dtype=np.float64)
    sorted_vals = pooled[order]
    i = 0
    while i < len(pooled):
        j = i
        while j + 1 < len(pooled) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def mann_whitney_u(xs, ys) -> MannWhitneyResult:
    """Unpaired two-sided Mann-Whitney U test.

    U is the statistic of the first sample, from midrank sums. The p-value is
    exact (full enumeration over label assignments) for tie-free samples with
    n1 + n2 <= 12, otherwise a normal approximation with tie and continuity
    corrections. Two-sided p = min(1, 2 * one-sided).
    """
    xs = [float(v) for v in xs]
    ys = [float(v) for v in ys]
    if not xs or not ys:
        raise ParameterError("both samples must be non-empty")
    n1, n2 = len(xs), len(ys)
    pooled = np.asarray(xs + ys, dtype=np.float64)
    ranks = _midranks(pooled)
    u_x = float(ranks[:n1].sum()) - n1 * (n1 + 1) / 2.0
    u_y = n1 * n2 - u_x
    u_min = min(u_x, u_y)

    has_ties = len(np.unique(pooled)) < len(pooled)
    if not has_ties and n1 + n2 <= EXACT_LIMIT:
        total = math.comb(n1 + n2, n1)
        all_ranks = ranks  # a permutation of 1..n when tie-free
        base = n1 * (n1 + 1) / 2.0
        count = 0
        for combo in combinations(range(n1 + n2), n1):
            u = sum(all_ranks[i] for i in combo) - base
            if u <= u_min:
                count += 1
        p = min(1.0, 2.0 * count / total)
        return MannWhitneyResult(U=u_x, p_two_sided=p, method="exact", tie_correction_applied=False)

    n = n1 + n2
    mu = n1 * n2 / 2.0
    tie_term = 0.0
    _, tie_counts = np.unique(pooled, return_counts=True)
    for t in tie_counts:
        tie_term += t**3 - t
    sigma2 = n1 * n2 / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
    if sigma2 <= 0:
        return MannWhitneyResult(
            U=u_x, p_two_sided=1.0, method="normal_approximation", tie_correction_applied=True
        )
    z = max(0.0, abs(u_x - mu) - 0.5) / math.sqrt(sigma2)
    p_one = 0.5 * math.erfc(z / math.sqrt(2.0))
    return MannWhitneyResult(
        U=u_x,
        p_two_sided=min(1.0, 2.0 * p_one),
        method="normal_approximation",
        tie_correction_applied=bool(tie_term > 0),
    )
