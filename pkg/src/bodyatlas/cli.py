"""Command-line pipeline orchestration.

Subcommands mirror the study flow: ``cohort`` (group + reference selection),
``register`` (per-subject preprocess + affine + deformable), ``atlas``
(initial + unbiased anatomical and probabilistic label atlases), ``eval``
(Dice/HD95/folding report), ``vbm`` (voxelwise group comparison),
``phantom`` (synthetic cohort generation), ``render`` (PNG slices).

Exit codes: 0 success, 1 usage/config error, 2 partial subject failures,
3 fatal error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .atlas import (
    CohortRegistration,
    SubjectRegistration,
    build_initial_atlas,
    build_label_atlas,
    mean_inverse_field,
    unbias,
)
from .cohort import (
    partition,
    read_subject_table,
    select_healthy,
    select_reference,
    write_exclusion_report,
    write_subject_table,
)
from .metrics import RegistrationReport, SubjectMetrics, dice, hd95
from .nifti import (
    load_labels,
    load_scalar,
    load_vector_field,
    save_vector_field,
    save_volume,
)
from .phantom import LABEL_NAMES, PhantomSpec, make_cohort
from .pipeline import (
    ConfigError,
    PipelineConfig,
    RunManifest,
    StageTimer,
    load_config,
    sha256_file,
    stage_is_current,
)
from .preprocess import (
    PreprocessConfig,
    body_mask,
    com_init,
    contrast_clip,
    mask_background,
)
from .registration import RegConfig, register_affine, register_ffd
from .render import Overlay, render_to_png
from .transforms import (
    AffineTransform,
    BSplineLattice,
    DisplacementField,
    VelocityField,
    affine_invert,
    folding_ratio,
    load_affine,
    save_affine,
    warp_labels,
)
from .volume import ImageGrid, LabelVolume, Mask, ScalarVolume

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PARTIAL = 2
EXIT_FATAL = 3


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    """Argparse that raises instead of calling sys.exit."""

    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config plumbing


def _preprocess_config(cfg: PipelineConfig) -> PreprocessConfig:
    s = cfg.preprocess
    if isinstance(s.threshold, (int, float)) and not isinstance(s.threshold, bool):
        mode, fixed = "fixed", float(s.threshold)
    elif s.threshold == "otsu":
        mode, fixed = "otsu", 0.1
    else:
        raise ConfigError(f"preprocess.threshold must be 'otsu' or a number, got {s.threshold!r}")
    return PreprocessConfig(
        clip_low=s.clip_low_pct,
        clip_high=s.clip_high_pct,
        mask_threshold_mode=mode,
        fixed_threshold=fixed,
        morph_radius=s.morph_radius,
    )


def _reg_config(cfg: PipelineConfig) -> RegConfig:
    s = cfg.registration
    return RegConfig(
        metric=s.metric,
        lam=s.lam,
        levels=s.levels,
        max_iters=s.max_iters,
        level_max_iters=tuple(s.level_max_iters),
        affine_max_iters=s.affine_max_iters,
    )


def _load_run_manifest(out_root: Path, cfg: PipelineConfig) -> RunManifest:
    path = out_root / "run_manifest.json"
    if path.is_file():
        m = RunManifest.load(path)
        if m.config_hash == cfg.content_hash():
            return m
    return RunManifest(config_hash=cfg.content_hash())


def _resolve(root: str, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else Path(root) / q


def _structure_names(cfg: PipelineConfig, ids) -> dict[int, str]:
    if cfg.atlas.structures:
        return {int(i): str(n) for i, n in cfg.atlas.structures}
    return {int(i): LABEL_NAMES.get(int(i), f"label{int(i)}") for i in ids}


# ---------------------------------------------------------------------------
# velocity lattice serialization (coefficients as a vector field on the
# control grid; the lattice origin is one control spacing before the domain)


def save_velocity(v: VelocityField, path) -> None:
    lat = v.lattice
    cs = np.asarray(lat.control_spacing)
    origin = np.asarray(lat.domain_origin) - lat.direction @ cs
    grid = ImageGrid(lat.control_dims, tuple(cs), tuple(origin), lat.direction)
    save_vector_field(lat.coefficients, grid, path)


def load_velocity(path) -> VelocityField:
    coef, grid = load_vector_field(path)
    cs = np.asarray(grid.spacing)
    domain_origin = np.asarray(grid.origin) + grid.direction @ cs
    lat = BSplineLattice(grid.dims, grid.spacing, tuple(domain_origin), coef, grid.direction)
    return VelocityField(lat)


# ---------------------------------------------------------------------------
# cohort


def cmd_cohort(cfg: PipelineConfig, out_root: Path, resume: bool) -> int:
    table_path = _resolve(cfg.paths.image_root, cfg.paths.subject_table)
    records = read_subject_table(table_path)
    healthy = select_healthy(records)
    dropped = [
        (r, "health exclusion (cancer/disease/operation record)")
        for r in records
        if r not in healthy
    ]
    groups, underweight = partition(healthy)
    excluded = dropped + underweight

    cdir = out_root / "cohort"
    cdir.mkdir(parents=True, exist_ok=True)
    manifest = _load_run_manifest(out_root, cfg)
    inputs = {"subject_table": sha256_file(table_path)}
    if resume and stage_is_current(manifest, "cohort", inputs, out_root):
        print("cohort: up to date, skipping")
        return EXIT_OK

    references = {}
    outputs = []
    with StageTimer() as timer:
        for name in sorted(groups):
            path = cdir / f"{name}.csv"
            write_subject_table(groups[name], path)
            outputs.append(path)
            if groups[name]:
                references[name] = select_reference(groups[name]).id
        ref_path = cdir / "references.json"
        ref_path.write_text(json.dumps(references, indent=2, sort_keys=True) + "\n")
        excl_path = cdir / "exclusions.csv"
        write_exclusion_report(excluded, excl_path)
        review = [f"subjects read: {len(records)}", f"healthy: {len(healthy)}", f"excluded: {len(excluded)}"]
        for name in sorted(groups):
            ref = references.get(name, "-")
            review.append(f"group {name}: n={len(groups[name])} reference={ref}")
        review_path = cdir / "review.txt"
        review_path.write_text("\n".join(review) + "\n")
        outputs += [ref_path, excl_path, review_path]

    out_hashes = {str(p.relative_to(out_root)): sha256_file(p) for p in outputs}
    manifest.add_stage("cohort", inputs, out_hashes, timer.seconds)
    manifest.save(out_root / "run_manifest.json")
    print(f"cohort: {len(healthy)} subjects in {len([g for g in groups.values() if g])} groups")
    return EXIT_OK


# ---------------------------------------------------------------------------
# register


def _subject_out_paths(rdir: Path, sid: str) -> dict:
    return {
        "affine": rdir / f"{sid}_affine.txt",
        "velocity": rdir / f"{sid}_velocity.nii.gz",
        "field": rdir / f"{sid}_field.nii.gz",
        "warped": rdir / f"{sid}_warped.nii.gz",
        "trace": rdir / f"{sid}_trace.csv",
    }


def _preprocess_image(path: Path, pcfg: PreprocessConfig):
    vol = load_scalar(path)
    clipped = contrast_clip(vol, pcfg.clip_low, pcfg.clip_high)
    m = body_mask(clipped, pcfg)
    return mask_background(clipped, m), m


def _write_trace(path: Path, trace) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "cost"])
        for i, c in enumerate(trace):
            w.writerow([i, repr(float(c))])


def _register_subject(payload: dict) -> dict:
    """One subject's full pipeline; runs in a worker process."""
    sid = payload["id"]
    try:
        pcfg = PreprocessConfig(**payload["pre_cfg"])
        rcfg = RegConfig(**payload["reg_cfg"])
        rdir = Path(payload["out_dir"])
        out = _subject_out_paths(rdir, sid)
        fixed, fixed_mask = _preprocess_image(Path(payload["reference_image"]), pcfg)

        if payload["is_reference"]:
            affine = AffineTransform.identity()
            lat = BSplineLattice.for_grid(fixed.grid, 8.0 * np.asarray(fixed.grid.spacing))
            velocity = VelocityField(lat)
            total = DisplacementField.zero(fixed.grid)
            warped = fixed
            trace = [0.0]
        else:
            moving, moving_mask = _preprocess_image(Path(payload["image"]), pcfg)
            init = affine_invert(com_init(fixed_mask, moving_mask, pcfg))
            affine = register_affine(fixed, moving, init=init, cfg=rcfg)
            res = register_ffd(fixed, moving, affine, cfg=rcfg)
            velocity = res.velocity
            total = res.total_field
            from .transforms import warp_scalar

            warped = warp_scalar(moving, [total], fixed.grid)
            trace = res.metric_trace

        save_affine(affine, out["affine"])
        save_velocity(velocity, out["velocity"])
        save_vector_field(total.vectors, fixed.grid, out["field"])
        save_volume(warped, out["warped"])
        _write_trace(out["trace"], trace)
        return {"id": sid, "ok": True, "error": ""}
    except Exception as exc:  # failure isolation: never poison siblings
        return {"id": sid, "ok": False, "error": f"{type(exc).__name__}: {exc}"}


def _load_group(cfg: PipelineConfig, out_root: Path, group: str):
    gpath = out_root / "cohort" / f"{group}.csv"
    if not gpath.is_file():
        raise UsageError(f"group table {gpath} not found; run `cohort` first")
    records = read_subject_table(gpath)
    if not records:
        raise UsageError(f"group {group!r} is empty")
    refs = json.loads((out_root / "cohort" / "references.json").read_text())
    if group not in refs:
        raise UsageError(f"group {group!r} has no reference")
    return records, refs[group]


def cmd_register(cfg: PipelineConfig, out_root: Path, group: str, workers: int, resume: bool) -> int:
    records, ref_id = _load_group(cfg, out_root, group)
    ref = next(r for r in records if r.id == ref_id)
    ref_image = _resolve(cfg.paths.image_root, ref.image_path)
    rdir = out_root / "register" / group
    rdir.mkdir(parents=True, exist_ok=True)
    manifest = _load_run_manifest(out_root, cfg)

    payloads = []
    skipped = []
    for r in sorted(records, key=lambda r: r.id):
        image = _resolve(cfg.paths.image_root, r.image_path)
        inputs = {
            "image": sha256_file(image),
            "reference": sha256_file(ref_image),
        }
        stage = f"register/{group}/{r.id}"
        if resume and stage_is_current(manifest, stage, inputs, out_root):
            skipped.append(r.id)
            continue
        payloads.append(
            {
                "id": r.id,
                "image": str(image),
                "reference_image": str(ref_image),
                "is_reference": r.id == ref_id,
                "out_dir": str(rdir),
                "pre_cfg": _preprocess_config(cfg).__dict__,
                "reg_cfg": {
                    k: getattr(_reg_config(cfg), k)
                    for k in ("metric", "lam", "levels", "max_iters", "level_max_iters", "affine_max_iters")
                },
                "inputs": inputs,
                "stage": stage,
            }
        )

    with StageTimer() as timer:
        if workers > 1 and len(payloads) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_register_subject, payloads))
        else:
            results = [_register_subject(p) for p in payloads]

    failures = [r for r in results if not r["ok"]]
    per_payload = {p["id"]: p for p in payloads}
    for r in results:
        if not r["ok"]:
            print(f"register: subject {r['id']} FAILED: {r['error']}", file=sys.stderr)
            continue
        p = per_payload[r["id"]]
        outs = _subject_out_paths(rdir, r["id"])
        out_hashes = {str(q.relative_to(out_root)): sha256_file(q) for q in outs.values()}
        manifest.add_stage(p["stage"], p["inputs"], out_hashes, timer.seconds / max(len(payloads), 1))
    manifest.save(out_root / "run_manifest.json")
    done = len(results) - len(failures)
    print(f"register/{group}: {done} registered, {len(skipped)} skipped, {len(failures)} failed")
    return EXIT_PARTIAL if failures else EXIT_OK


# ---------------------------------------------------------------------------
# atlas


def _load_cohort_registration(cfg: PipelineConfig, out_root: Path, group: str) -> tuple[CohortRegistration, dict[int, str]]:
    records, ref_id = _load_group(cfg, out_root, group)
    rdir = out_root / "register" / group
    grid = None
    subjects = []
    names: dict[int, str] = {}
    for r in sorted(records, key=lambda r: r.id):
        outs = _subject_out_paths(rdir, r.id)
        missing = [str(p) for p in outs.values() if not p.is_file()]
        if missing:
            raise UsageError(f"subject {r.id}: missing registration outputs; run `register` first")
        warped = load_scalar(outs["warped"])
        grid = warped.grid if grid is None else grid
        vectors, _ = load_vector_field(outs["field"])
        total = DisplacementField(grid, vectors)
        affine = load_affine(outs["affine"])
        velocity = load_velocity(outs["velocity"])
        soft = {}
        if r.label_paths:
            lab = load_labels(_resolve(cfg.paths.image_root, r.label_paths[0]))
            chain = [DisplacementField.zero(grid)] if r.id == ref_id else [total]
            _, soft = warp_labels(lab, chain, grid)
            names.update(_structure_names(cfg, lab.ids()))
        subjects.append(
            SubjectRegistration(
                subject_id=r.id,
                total_field=total,
                warped_image=warped,
                warped_soft_labels=soft,
                affine=affine,
                velocity=velocity,
            )
        )
    return CohortRegistration(reference_id=ref_id, subjects=subjects), names


def cmd_atlas(cfg: PipelineConfig, out_root: Path, group: str) -> int:
    reg, names = _load_cohort_registration(cfg, out_root, group)
    adir = out_root / "atlas" / group
    adir.mkdir(parents=True, exist_ok=True)
    manifest = _load_run_manifest(out_root, cfg)

    outputs = []
    with StageTimer() as timer:
        initial = build_initial_atlas(reg, group)
        phi = mean_inverse_field(reg, include_affine=cfg.atlas.include_affine_in_unbiasing)
        unbiased = unbias(initial, phi)
        save_volume(initial.volume, adir / "initial.nii.gz")
        save_volume(unbiased.volume, adir / "unbiased.nii.gz")
        save_vector_field(phi.field.vectors, reg.grid, adir / "mean_inverse.nii.gz")
        outputs += [adir / "initial.nii.gz", adir / "unbiased.nii.gz", adir / "mean_inverse.nii.gz"]
        common = set.intersection(*(set(s.warped_soft_labels) for s in reg.subjects)) if reg.subjects else set()
        for lid in sorted(common):
            name = names.get(lid, f"label{lid}")
            prob = build_label_atlas(reg, lid, name, group)
            prob_u = unbias(prob, phi)
            save_volume(prob.volume, adir / f"prob_{name}_initial.nii.gz")
            save_volume(prob_u.volume, adir / f"prob_{name}_unbiased.nii.gz")
            outputs += [adir / f"prob_{name}_initial.nii.gz", adir / f"prob_{name}_unbiased.nii.gz"]
        sidecar = {
            "group": group,
            "n_subjects": reg.n,
            "reference_id": reg.reference_id,
            "include_affine_in_unbiasing": cfg.atlas.include_affine_in_unbiasing,
            "inverse_fields_used": phi.n_subjects,
        }
        side_path = adir / "provenance.json"
        side_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
        outputs.append(side_path)

    out_hashes = {str(p.relative_to(out_root)): sha256_file(p) for p in outputs}
    manifest.add_stage(f"atlas/{group}", {}, out_hashes, timer.seconds)
    manifest.save(out_root / "run_manifest.json")
    print(f"atlas/{group}: averaged {reg.n} subjects ({phi.n_subjects} inverse fields)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def cmd_eval(cfg: PipelineConfig, out_root: Path, group: str) -> int:
    records, ref_id = _load_group(cfg, out_root, group)
    rdir = out_root / "register" / group
    ref = next(r for r in records if r.id == ref_id)
    if not ref.label_paths:
        raise UsageError("evaluation needs label maps in the subject table")
    ref_labels = load_labels(_resolve(cfg.paths.image_root, ref.label_paths[0]))
    grid = ref_labels.grid
    names = _structure_names(cfg, ref_labels.ids())

    rows = []
    with StageTimer() as timer:
        for r in sorted(records, key=lambda r: r.id):
            if r.id == ref_id:
                continue
            outs = _subject_out_paths(rdir, r.id)
            mov_labels = load_labels(_resolve(cfg.paths.image_root, r.label_paths[0]))
            affine = load_affine(outs["affine"])
            vectors, _ = load_vector_field(outs["field"])
            total = DisplacementField(grid, vectors)
            fold = folding_ratio(total)
            staged = {
                "pre-reg": mov_labels,
                "affine": warp_labels(mov_labels, [affine], grid)[0],
                "deformable": warp_labels(mov_labels, [total], grid)[0],
            }
            for stage, lab in staged.items():
                for lid, name in sorted(names.items()):
                    a = Mask(grid, ref_labels.labels == lid)
                    b = Mask(grid, lab.labels == lid)
                    rows.append(
                        SubjectMetrics(
                            subject_id=r.id,
                            stage=stage,
                            structure=name,
                            dice=dice(a, b),
                            hd95_mm=hd95(a, b),
                            folding_ratio=fold if stage == "deformable" else None,
                        )
                    )

        report = RegistrationReport(rows)
        edir = out_root / "eval" / group
        edir.mkdir(parents=True, exist_ok=True)
        report.write_csv(edir / "metrics.csv")
        lines = [f"{'stage':<12} {'structure':<16} {'dice':>14} {'hd95 mm':>16}"]
        for (stage, structure), s in report.summary().items():
            lines.append(
                f"{stage:<12} {structure:<16} "
                f"{s['dice_mean']:.3f} +/- {s['dice_sd']:.3f} "
                f"{s['hd95_mean']:8.2f} +/- {s['hd95_sd']:.2f}"
            )
        for stage, (mu, sd) in report.folding_summary().items():
            lines.append(f"folding[{stage}]: {mu:.5f} +/- {sd:.5f}")
        (edir / "summary.txt").write_text("\n".join(lines) + "\n")

    manifest = _load_run_manifest(out_root, cfg)
    outputs = [edir / "metrics.csv", edir / "summary.txt"]
    out_hashes = {str(p.relative_to(out_root)): sha256_file(p) for p in outputs}
    manifest.add_stage(f"eval/{group}", {}, out_hashes, timer.seconds)
    manifest.save(out_root / "run_manifest.json")
    print((edir / "summary.txt").read_text(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# vbm


def cmd_vbm(cfg: PipelineConfig, out_root: Path, healthy_dir: str, case_dir: str) -> int:
    from .vbm import vbm_pipeline

    def _load_dir(d: str):
        paths = sorted(Path(d).glob("*.nii*"))
        if not paths:
            raise UsageError(f"no NIfTI maps found in {d}")
        return [load_scalar(p) for p in paths]

    group_a = _load_dir(healthy_dir)
    group_b = _load_dir(case_dir)
    vdir = out_root / "vbm"
    vdir.mkdir(parents=True, exist_ok=True)
    with StageTimer() as timer:
        stat = vbm_pipeline(
            group_a,
            group_b,
            sigma_mm=cfg.vbm.sigma_mm,
            alpha=cfg.vbm.alpha,
            two_sided=cfg.vbm.two_sided,
            correction=cfg.vbm.correction,
        )
        save_volume(stat.t, vdir / "t.nii.gz")
        save_volume(stat.z, vdir / "z.nii.gz")
        save_volume(stat.p, vdir / "p.nii.gz")
        save_volume(stat.significant, vdir / "significant.nii.gz")
        n_sig = stat.significant.count
        n_mask = stat.analysis_mask.count
        summary = (
            f"healthy n={len(group_a)}, cases n={len(group_b)}, df={stat.df}\n"
            f"correction={stat.correction}, alpha={stat.alpha}\n"
            f"significant voxels: {n_sig} / {n_mask} in mask ({n_sig / n_mask:.4%})\n"
        )
        (vdir / "summary.txt").write_text(summary)

    manifest = _load_run_manifest(out_root, cfg)
    outputs = [vdir / p for p in ("t.nii.gz", "z.nii.gz", "p.nii.gz", "significant.nii.gz", "summary.txt")]
    out_hashes = {str(p.relative_to(out_root)): sha256_file(p) for p in outputs}
    manifest.add_stage("vbm", {}, out_hashes, timer.seconds)
    manifest.save(out_root / "run_manifest.json")
    print(summary, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# phantom


def cmd_phantom(cfg: PipelineConfig, out_root: Path, n: int, variation: float, seed: int) -> int:
    pdir = out_root / "phantom"
    pdir.mkdir(parents=True, exist_ok=True)
    cohort = make_cohort(n, PhantomSpec(seed=seed), variation, seed)
    with StageTimer() as timer:
        records = []
        outputs = []
        for image, labels, record in cohort:
            img_path = pdir / f"{record.id}_image.nii.gz"
            lab_path = pdir / f"{record.id}_labels.nii.gz"
            save_volume(image, img_path)
            save_volume(labels, lab_path)
            outputs += [img_path, lab_path]
            records.append(
                type(record)(
                    **{
                        **record.__dict__,
                        "image_path": str(img_path.relative_to(out_root)),
                        "label_paths": (str(lab_path.relative_to(out_root)),),
                    }
                )
            )
        table_path = pdir / "subject_table.csv"
        write_subject_table(records, table_path)
        outputs.append(table_path)

    manifest = _load_run_manifest(out_root, cfg)
    out_hashes = {str(p.relative_to(out_root)): sha256_file(p) for p in outputs}
    manifest.add_stage("phantom", {"n": str(n), "variation": str(variation), "seed": str(seed)}, out_hashes, timer.seconds)
    manifest.save(out_root / "run_manifest.json")
    print(f"phantom: wrote {n} subjects to {pdir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# render


def _parse_overlay(spec: str) -> tuple:
    """'path[:alpha[:R,G,B]]' -> (path, alpha, color)."""
    parts = spec.split(":")
    path = parts[0]
    alpha = float(parts[1]) if len(parts) > 1 else 0.5
    color = tuple(int(c) for c in parts[2].split(",")) if len(parts) > 2 else (255, 64, 64)
    if len(color) != 3:
        raise UsageError(f"overlay color must be R,G,B: {spec!r}")
    return path, alpha, color


def cmd_render(out_path: Path, volume_path: str, overlays: list, plane: str, position: float) -> int:
    vol = load_scalar(volume_path)
    ovs = []
    for spec in overlays:
        path, alpha, color = _parse_overlay(spec)
        ovs.append(Overlay(load_scalar(path), color=color, alpha=alpha))
    out_path.parent.mkdir(parents=True, exist_ok=True)
    render_to_png(vol, out_path, overlays=ovs, plane=plane, position=position)
    print(f"render: wrote {out_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> _Parser:
    parser = _Parser(prog="bodyatlas", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, group=False):
        p.add_argument("--config", help="pipeline config YAML")
        p.add_argument("--out", help="output root (overrides config paths.output_root)")
        p.add_argument("--seed", type=int, help="seed override")
        p.add_argument("--workers", type=int, help="parallel worker count override")
        if group:
            p.add_argument("--group", required=True, help="cohort group name, e.g. female_normal")
        p.add_argument("--resume", dest="resume", action="store_true", default=True)
        p.add_argument("--no-resume", dest="resume", action="store_false")

    common(sub.add_parser("cohort", help="partition subjects and pick references"))
    common(sub.add_parser("register", help="register a group to its reference"), group=True)
    common(sub.add_parser("atlas", help="build initial and unbiased atlases"), group=True)
    common(sub.add_parser("eval", help="Dice/HD95/folding report for a group"), group=True)

    p_vbm = sub.add_parser("vbm", help="voxelwise group comparison")
    common(p_vbm)
    p_vbm.add_argument("healthy_dir", help="directory of healthy maps (atlas space)")
    p_vbm.add_argument("case_dir", help="directory of case maps (atlas space)")

    p_ph = sub.add_parser("phantom", help="generate a synthetic cohort")
    common(p_ph)
    p_ph.add_argument("--n", type=int, default=8)
    p_ph.add_argument("--variation", type=float, default=1.0)

    p_r = sub.add_parser("render", help="render a PNG slice")
    common(p_r)
    p_r.add_argument("volume", help="scalar NIfTI to render")
    p_r.add_argument("--overlay", action="append", default=[], help="path[:alpha[:R,G,B]]")
    p_r.add_argument("--plane", choices=("axial", "coronal", "sagittal"), default="axial")
    p_r.add_argument("--position", type=float, default=0.5)
    return parser


def _effective_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if getattr(args, "seed", None) is not None or getattr(args, "workers", None) is not None:
        d = cfg.to_dict()
        if args.seed is not None:
            d["seed"] = args.seed
        if args.workers is not None:
            d["workers"] = args.workers
        from .pipeline import config_from_dict

        cfg = config_from_dict(d)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _effective_config(args)
        if args.command == "render":
            # for render, --out names the PNG file itself
            out = Path(args.out) if args.out else Path(cfg.paths.output_root) / "render.png"
            return cmd_render(out, args.volume, args.overlay, args.plane, args.position)
        out_root = Path(args.out) if args.out else Path(cfg.paths.output_root)
        out_root.mkdir(parents=True, exist_ok=True)
        if args.command == "cohort":
            return cmd_cohort(cfg, out_root, args.resume)
        if args.command == "register":
            return cmd_register(cfg, out_root, args.group, cfg.workers, args.resume)
        if args.command == "atlas":
            return cmd_atlas(cfg, out_root, args.group)
        if args.command == "eval":
            return cmd_eval(cfg, out_root, args.group)
        if args.command == "vbm":
            return cmd_vbm(cfg, out_root, args.healthy_dir, args.case_dir)
        if args.command == "phantom":
            return cmd_phantom(cfg, out_root, args.n, args.variation, cfg.seed)
        raise UsageError(f"unknown command {args.command!r}")
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # argparse --version/--help
        code = exc.code if isinstance(exc.code, int) else 0
        return code
    except Exception:
        traceback.print_exc()
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
