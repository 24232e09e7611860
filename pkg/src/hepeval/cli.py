"""Command-line surface: eval, phantom, loss, skeleton, stats.

Exit codes: 0 success, 1 usage/config error, 2 partial data failure (a batch
ran but at least one case failed). Outputs are UTF-8 JSON and RFC 4180 CSV;
every command writes a run manifest with SHA-256 digests of its inputs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .errors import HepevalError, ParameterError, RangeError
from .losses import LossConfig, bootstrapped_ce_loss, cl_dice_loss, k_schedule
from .metrics import CaseReport, EvalConfig, aggregate, evaluate_case, mann_whitney_u
from .nifti import (
    read_binary_mask,
    read_label_volume,
    read_prob_volume,
    write_int_nifti,
    write_nifti,
)
from .phantom import (
    degrade,
    degrade_from_json_dict,
    generate_case,
    spec_from_json_dict,
    truth_manifest,
)
from .vessel import build_graph, classify_central_peripheral, skeletonize

log = logging.getLogger("hepeval")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_json(path: Path, obj) -> None:
    _atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            csv.writer(fh, lineterminator="\r\n").writerows(rows)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class RunManifest:
    command: list[str]
    config: dict
    input_digests: dict[str, str]

    def to_json_dict(self) -> dict:
        return {
            "tool_version": __version__,
            "command": self.command,
            "config": self.config,
            "input_digests": self.input_digests,
            "timestamp": datetime.now(timezone.utc).isoformat(),
        }


def _load_config(path: str | None) -> tuple[LossConfig, EvalConfig, dict]:
    raw = {}
    if path:
        with open(path) as fh:
            raw = json.load(fh)
    loss_fields = set(LossConfig.__dataclass_fields__)
    eval_fields = set(EvalConfig.__dataclass_fields__)
    unknown = set(raw) - loss_fields - eval_fields
    if unknown:
        raise ParameterError(f"unknown config keys: {sorted(unknown)}")
    loss = LossConfig(**{k: v for k, v in raw.items() if k in loss_fields})
    ev = EvalConfig(**{k: v for k, v in raw.items() if k in eval_fields})
    return loss, ev, raw


def _case_id(path: str) -> str:
    name = Path(path).name
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return name


def cmd_eval(args) -> int:
    if len(args.gt) != len(args.pred):
        log.error("need equally many --gt and --pred paths")
        return 1
    try:
        _, eval_cfg, raw_cfg = _load_config(args.config)
        if args.connectivity:
            eval_cfg = EvalConfig(
                **{**eval_cfg.__dict__, "connectivity": args.connectivity}
            )
        if args.skeleton_iters:
            eval_cfg = EvalConfig(
                **{**eval_cfg.__dict__, "skeleton_iterations": args.skeleton_iters}
            )
    except (OSError, json.JSONDecodeError, HepevalError, TypeError) as exc:
        log.error("config error: %s", exc)
        return 1

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pairs = list(zip(args.gt, args.pred))

    def run_one(pair):
        gt_path, pred_path = pair
        case = _case_id(gt_path)
        gt = read_label_volume(gt_path)
        pred = read_label_volume(pred_path)
        report = evaluate_case(gt, pred, eval_cfg, case_id=case)
        _write_json(out / f"case_{case}.report.json", report.to_json_dict())
        return report

    jobs = args.jobs or os.cpu_count() or 1
    reports: list[CaseReport] = []
    failures: list[str] = []
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        for pair, result in zip(pairs, pool.map(lambda p: _try(run_one, p), pairs)):
            if isinstance(result, Exception):
                log.error("case %s failed: %s", _case_id(pair[0]), result)
                failures.append(_case_id(pair[0]))
            else:
                reports.append(result)

    digests = {}
    for gt_path, pred_path in pairs:
        for p in (gt_path, pred_path):
            try:
                digests[str(p)] = _sha256(Path(p))
            except OSError:
                digests[str(p)] = None
    if args.config:
        digests[str(args.config)] = _sha256(Path(args.config))
    manifest = RunManifest(command=["eval", *map(str, args.gt), *map(str, args.pred)], config=raw_cfg, input_digests=digests)
    _write_json(out / "manifest.json", manifest.to_json_dict())

    if reports:
        summary = aggregate(reports)
        _write_json(out / "summary.json", summary.to_json_dict())
        _write_csv(out / "summary.csv", summary.to_csv_rows())
        _write_csv(out / "cases.csv", _case_rows(reports))
    return 2 if failures else 0


def _try(fn, arg):
    try:
        return fn(arg)
    except Exception as exc:  # per-case isolation: batch keeps going
        return exc


def _case_rows(reports: list[CaseReport]) -> list[list]:
    rows = [["case_id", "structure", "dsc", "central_dsc", "peripheral_dsc", "cl_dice"]]
    for r in sorted(reports, key=lambda r: r.case_id):
        for name, value in r.dsc.items():
            rows.append(
                [
                    r.case_id,
                    name,
                    value,
                    _blank(r.central_dsc.get(name)),
                    _blank(r.peripheral_dsc.get(name)),
                    _blank(r.cl_dice.get(name)),
                ]
            )
    return rows


def _blank(v):
    return "" if v is None else v


def cmd_phantom(args) -> int:
    try:
        with open(args.spec) as fh:
            raw = json.load(fh)
        if getattr(args, "seed", None) is not None:
            raw["seed"] = args.seed
        spec = spec_from_json_dict(raw)
        truth = generate_case(spec)
    except (OSError, json.JSONDecodeError, HepevalError) as exc:
        log.error("invalid phantom spec: %s", exc)
        return 1

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_nifti(truth.label_volume, out / "truth.nii.gz")
    geometry = truth.label_volume.geometry
    write_int_nifti(geometry, truth.edge_tag, out / "edge_tags.nii.gz")
    write_int_nifti(geometry, truth.generation_tag.astype(np.int32), out / "generation_tags.nii.gz")
    manifest = truth_manifest(truth)

    if args.degrade:
        try:
            with open(args.degrade) as fh:
                dspec = degrade_from_json_dict(json.load(fh))
            degraded = degrade(truth, dspec)
        except (OSError, json.JSONDecodeError, HepevalError) as exc:
            log.error("invalid degrade spec: %s", exc)
            return 1
        write_nifti(degraded, out / "prediction.nii.gz")
        manifest["degrade_applied"] = True

    digests = {str(args.spec): _sha256(Path(args.spec))}
    if args.degrade:
        digests[str(args.degrade)] = _sha256(Path(args.degrade))
    manifest["run"] = RunManifest(
        command=["phantom", str(args.spec)], config={}, input_digests=digests
    ).to_json_dict()
    _write_json(out / "truth_manifest.json", manifest)
    return 0


def cmd_loss(args) -> int:
    try:
        loss_cfg, _, _ = _load_config(args.config)
        pred = read_prob_volume(args.pred)
        gt = read_binary_mask(args.gt)
        k = k_schedule(args.epoch, loss_cfg)
        cld = cl_dice_loss(pred, gt, loss_cfg.skeleton_iterations, loss_cfg.epsilon)
        bce = bootstrapped_ce_loss(pred, gt, k, loss_cfg.ce_clip)
        combined_value = loss_cfg.w_cldice * cld.value + loss_cfg.w_bce * bce.value
        combined_grad = loss_cfg.w_cldice * cld.gradient + loss_cfg.w_bce * bce.gradient
    except RangeError as exc:
        log.error("epoch out of range: %s", exc)
        return 1
    except (OSError, json.JSONDecodeError, HepevalError) as exc:
        log.error("%s", exc)
        return 1
    print(
        json.dumps(
            {
                "cl_dice": cld.value,
                "bootstrapped_ce": bce.value,
                "combined": combined_value,
                "k_used": k,
                "gradient_norm": float(np.linalg.norm(combined_grad)),
            },
            indent=2,
            sort_keys=True,
        )
    )
    return 0


def cmd_skeleton(args) -> int:
    try:
        mask = read_binary_mask(args.mask)
    except (OSError, HepevalError) as exc:
        log.error("%s", exc)
        return 1

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    iterations = args.skeleton_iters or 10
    skel = skeletonize(mask, iterations)
    if skel.popcount() == 0:
        log.warning("empty skeleton: input mask has no stable foreground")
    graph = build_graph(skel, mask)
    split = classify_central_peripheral(graph, mask)

    write_nifti(skel, out / "skeleton.nii.gz")
    write_nifti(split.central, out / "central.nii.gz")
    write_nifti(split.peripheral, out / "peripheral.nii.gz")
    _write_json(out / "graph.json", graph.to_json_dict())
    manifest = RunManifest(
        command=["skeleton", str(args.mask)],
        config={"skeleton_iterations": iterations},
        input_digests={str(args.mask): _sha256(Path(args.mask))},
    )
    _write_json(out / "manifest.json", manifest.to_json_dict())
    return 0


def cmd_stats(args) -> int:
    try:
        a = _read_case_csv(args.csv_a)
        b = _read_case_csv(args.csv_b)
    except (OSError, KeyError, ValueError) as exc:
        log.error("cannot read per-case CSV: %s", exc)
        return 1
    structures = sorted(set(a) & set(b))
    if not structures:
        log.error("the two CSV files share no structures")
        return 1
    results = {}
    for name in structures:
        try:
            r = mann_whitney_u(a[name], b[name])
        except ParameterError as exc:
            log.error("%s: %s", name, exc)
            return 1
        results[name] = {
            "U": r.U,
            "p_two_sided": r.p_two_sided,
            "method": r.method,
            "tie_correction_applied": r.tie_correction_applied,
            "n1": len(a[name]),
            "n2": len(b[name]),
        }
    print(json.dumps(results, indent=2, sort_keys=True))
    return 0


def _read_case_csv(path) -> dict[str, list[float]]:
    """Per-structure DSC samples from an eval run's cases.csv."""
    out: dict[str, list[float]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["dsc"] != "":
                out.setdefault(row["structure"], []).append(float(row["dsc"]))
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hepeval",
        description="Topology-aware losses and hepatic segmentation evaluation",
    )
    parser.add_argument("--version", action="version", version=f"hepeval {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_eval = sub.add_parser("eval", help="evaluate prediction/truth label volume pairs")
    p_eval.add_argument("--gt", nargs="+", required=True, help="ground-truth NIfTI paths")
    p_eval.add_argument("--pred", nargs="+", required=True, help="prediction NIfTI paths")
    p_eval.add_argument("--config", help="JSON config file")
    p_eval.add_argument("--out", required=True, help="output directory")
    p_eval.add_argument("--connectivity", type=int, choices=(6, 18, 26))
    p_eval.add_argument("--skeleton-iters", type=int, dest="skeleton_iters")
    p_eval.add_argument("--jobs", type=int, default=0, help="worker pool size")
    p_eval.set_defaults(func=cmd_eval)

    p_ph = sub.add_parser("phantom", help="generate a phantom case from a JSON spec")
    p_ph.add_argument("spec", help="phantom spec JSON")
    p_ph.add_argument("--degrade", help="optional degrade spec JSON producing a prediction")
    p_ph.add_argument("--out", required=True)
    p_ph.add_argument("--seed", type=int, default=None, help="override the spec's seed")
    p_ph.set_defaults(func=cmd_phantom)

    p_loss = sub.add_parser("loss", help="compute the combined training loss for one pair")
    p_loss.add_argument("--pred", required=True, help="probability volume NIfTI")
    p_loss.add_argument("--gt", required=True, help="binary mask NIfTI")
    p_loss.add_argument("--epoch", type=int, default=0)
    p_loss.add_argument("--config", help="JSON config file")
    p_loss.set_defaults(func=cmd_loss)

    p_sk = sub.add_parser("skeleton", help="skeletonize a vessel mask and export its graph")
    p_sk.add_argument("mask", help="binary mask NIfTI")
    p_sk.add_argument("--out", required=True)
    p_sk.add_argument("--skeleton-iters", type=int, dest="skeleton_iters")
    p_sk.set_defaults(func=cmd_skeleton)

    p_st = sub.add_parser("stats", help="Mann-Whitney U over two eval runs' per-case CSVs")
    p_st.add_argument("csv_a")
    p_st.add_argument("csv_b")
    p_st.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("HEPEVAL_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except HepevalError as exc:
        log.error("%s", exc)
        return 1


def entrypoint() -> None:
    sys.exit(main())
