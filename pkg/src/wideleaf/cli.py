"""Operator command line: split | crop | run | eval | render | simulate.

Every command is deterministic given its flags and --seed; all randomness
flows through per-entity hashed streams, so --workers never changes output
bytes. Machine-readable outputs are schema-validated before they are
written. Paths inside config files resolve against --root (default: the
config file's directory).
"""

from __future__ import annotations

import argparse
import contextlib
import sys
from pathlib import Path
from xml.sax.saxutils import quoteattr

from . import jsonio, schemas
from .dataset import (
    DatasetManifest,
    DatasetError,
    LeafLabel,
    Scene,
    TrainingProvenance,
    crop_record_to_dict,
    extract_crops,
    load_manifest,
    manifest_to_dict,
    resolve_image_ref,
    split_dataset,
)
from .evaluation import MatchConfig, MatchingError, evaluate, render_report, report_to_dict
from .geometry import GeometryError, ImageSize
from .pipeline import (
    PIPELINE_END_TO_END,
    PIPELINE_TWO_STAGE,
    ConstantDiagnoser,
    PipelineConfig,
    PipelineError,
    load_predictions,
    predictions_to_dict,
    run_over_manifest,
    save_predictions,
)
from .protocol import EndpointDetector, EndpointDiagnoser, ModelEndpoint, ProtocolError
from .raster import load_png
from .synthetic import (
    RegimeParams,
    StagePair,
    SyntheticDetector,
    SyntheticDiagnoser,
    SyntheticModelError,
    detector_params_from_dict,
    diagnoser_params_from_dict,
    manifest_area_range,
    run_shift_experiment,
)

COLOR_DISEASED = "#FE0000"
COLOR_HEALTHY = "#FFFFFF"
COLOR_AGNOSTIC = "#FFFF00"

_USAGE_ERRORS = (DatasetError, GeometryError, PipelineError, MatchingError,
                 SyntheticModelError, ProtocolError, schemas.SchemaValidationError,
                 jsonio.JsonFileError, OSError, KeyError)


class CliError(RuntimeError):
    pass


def _resolve(path: str, root: Path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else root / p


def _base(args) -> Path:
    return Path(args.root) if getattr(args, "root", None) else Path.cwd()


# ---------------------------------------------------------------------------
# split


def cmd_split(args) -> int:
    if not 0.0 < args.fraction < 1.0:
        raise CliError(f"fraction must be in (0, 1), got {args.fraction}")
    base = _base(args)
    manifest = load_manifest(_resolve(args.manifest, base))
    train, test = split_dataset(manifest, args.fraction, args.seed)
    for part, out_path in ((train, _resolve(args.out_train, base)),
                           (test, _resolve(args.out_test, base))):
        payload = manifest_to_dict(part)
        schemas.validate_output(payload, schemas.MANIFEST_SCHEMA, str(out_path))
        jsonio.write_json(out_path, payload)
    print(f"split '{manifest.name}': {len(train.scenes)} train / {len(test.scenes)} test scenes")
    return 0


# ---------------------------------------------------------------------------
# crop


def cmd_crop(args) -> int:
    base = _base(args)
    manifest_path = _resolve(args.manifest, base)
    manifest = load_manifest(manifest_path)
    manifest_dir = manifest_path.resolve().parent
    out_dir = _resolve(args.out_dir, base)
    out_dir.mkdir(parents=True, exist_ok=True)
    loader = None
    if args.with_pixels:
        def loader(scene: Scene):
            return load_png(resolve_image_ref(scene, manifest_dir))
    crop_size = _parse_size(args.crop_size)
    result = extract_crops(manifest, crop_size, image_loader=loader,
                           out_dir=out_dir if args.with_pixels else None)
    payload = [crop_record_to_dict(r) for r in result.records]
    schemas.validate_output(payload, schemas.CROP_SET_SCHEMA, "crop set")
    jsonio.write_json(out_dir / "crops.json", payload)
    counts = result.class_counts()
    print(f"extracted {len(result.records)} crops "
          f"({counts.healthy} healthy, {counts.diseased} diseased)")
    for failure in result.failures:
        print(f"warning: {failure}", file=sys.stderr)
    return 1 if result.failures else 0


def _parse_size(text: str) -> ImageSize:
    try:
        w, h = text.lower().split("x")
        return ImageSize(int(w), int(h))
    except (ValueError, GeometryError) as exc:
        raise CliError(f"bad size {text!r} (expected WIDTHxHEIGHT): {exc}") from None


# ---------------------------------------------------------------------------
# run


def _pipeline_config(data: dict | None) -> PipelineConfig:
    data = dict(data or {})
    if "crop_size" in data:
        w, h = data["crop_size"]
        data["crop_size"] = ImageSize(int(w), int(h))
    known = {"confidence_threshold", "nms_iou_threshold", "resize_policy", "crop_size"}
    unknown = set(data) - known
    if unknown:
        raise CliError(f"unknown pipeline_config fields: {sorted(unknown)}")
    return PipelineConfig(**data)


def _seeded(params: dict, run_seed: int) -> dict:
    out = dict(params)
    out.setdefault("seed", run_seed)
    return out


def _build_detector(spec: dict, manifest: DatasetManifest, manifest_dir: Path,
                    run_seed: int, stack: contextlib.ExitStack,
                    labeled_default: bool):
    kind = spec.get("kind")
    if kind == "replay":
        from .synthetic import replay_detector

        stage = replay_detector(labeled=spec.get("labeled", labeled_default),
                                seed=spec.get("seed", run_seed))
        return stage, "replay"
    if kind == "synthetic":
        params = detector_params_from_dict(_seeded(spec.get("params", {}), run_seed))
        labels = spec.get("labels")
        labeler = (diagnoser_params_from_dict(_seeded(labels, run_seed))
                   if labels is not None else None)
        stage = SyntheticDetector(params, labeler=labeler,
                                  area_range=manifest_area_range(manifest))
        return stage, "synthetic"
    if kind == "endpoint":
        command = spec.get("command")
        if not command:
            raise CliError("endpoint detector spec needs a 'command'")
        endpoint = stack.enter_context(ModelEndpoint(
            command, role="detector",
            request_timeout=float(spec.get("request_timeout", 60.0))))
        stage = EndpointDetector(endpoint,
                                 lambda scene: resolve_image_ref(scene, manifest_dir))
        return stage, f"endpoint:{endpoint.info.name or command}"
    raise CliError(f"unknown detector kind {kind!r}")


def _build_diagnoser(spec: dict, run_seed: int, stack: contextlib.ExitStack):
    """Returns (stage, description, needs_pixels)."""
    kind = spec.get("kind")
    if kind == "oracle":
        from .synthetic import oracle_diagnoser

        return oracle_diagnoser(seed=spec.get("seed", run_seed)), "oracle", False
    if kind == "synthetic":
        params = diagnoser_params_from_dict(_seeded(spec.get("params", {}), run_seed))
        return SyntheticDiagnoser(params), "synthetic", False
    if kind == "constant":
        label = LeafLabel.parse(spec.get("label", "diseased"))
        return (ConstantDiagnoser(label, float(spec.get("confidence", 1.0))),
                f"constant:{label.value}", False)
    if kind == "endpoint":
        command = spec.get("command")
        if not command:
            raise CliError("endpoint diagnoser spec needs a 'command'")
        endpoint = stack.enter_context(ModelEndpoint(
            command, role="diagnoser",
            request_timeout=float(spec.get("request_timeout", 60.0))))
        return (EndpointDiagnoser(endpoint),
                f"endpoint:{endpoint.info.name or command}", True)
    raise CliError(f"unknown diagnoser kind {kind!r}")


def cmd_run(args) -> int:
    config = jsonio.read_json(args.config)
    root = Path(args.root) if args.root else Path(args.config).resolve().parent
    if "manifest" not in config:
        raise CliError("run config needs a 'manifest' field")
    manifest_path = _resolve(config["manifest"], root)
    manifest = load_manifest(manifest_path)
    manifest_dir = manifest_path.resolve().parent
    kind = config.get("pipeline")
    if kind not in (PIPELINE_END_TO_END, PIPELINE_TWO_STAGE):
        raise CliError(f"unknown pipeline kind {kind!r}")
    run_seed = args.seed if args.seed is not None else int(config.get("seed", 0))
    cfg = _pipeline_config(config.get("pipeline_config"))
    provenance = (TrainingProvenance.from_dict(config["provenance"])
                  if config.get("provenance") else None)
    out_path = Path(args.out) if args.out else _resolve(
        config.get("output", "predictions.json"), root)

    failures: dict[str, str] = {}
    with contextlib.ExitStack() as stack:
        detector, det_desc = _build_detector(
            config.get("detector", {}), manifest, manifest_dir, run_seed, stack,
            labeled_default=(kind == PIPELINE_END_TO_END))
        diagnoser = None
        stages = {"detector": det_desc}
        pixels_loader = None
        if kind == PIPELINE_TWO_STAGE:
            diagnoser, diag_desc, needs_pixels = _build_diagnoser(
                config.get("diagnoser", {}), run_seed, stack)
            stages["diagnoser"] = diag_desc
            if needs_pixels:
                def pixels_loader(scene: Scene):
                    return load_png(resolve_image_ref(scene, manifest_dir))
        per_scene = run_over_manifest(
            manifest, kind, detector, diagnoser=diagnoser, cfg=cfg,
            workers=args.workers, pixels_loader=pixels_loader, failures=failures)

    system = config.get("system") or f"{kind}:{'+'.join(stages.values())}"
    payload = predictions_to_dict(system, kind, cfg, manifest, per_scene,
                                  stages=stages, seed=run_seed, provenance=provenance)
    if failures:
        payload["run"]["scene_failures"] = {k: failures[k] for k in sorted(failures)}
    schemas.validate_output(payload, schemas.PREDICTIONS_SCHEMA, str(out_path))
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_predictions(out_path, payload)
    total = sum(len(v) for v in per_scene.values())
    print(f"wrote {out_path} ({total} detections over {len(manifest.scenes)} scenes)")
    for scene_id, message in sorted(failures.items()):
        print(f"error: scene '{scene_id}': {message}", file=sys.stderr)
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    base = _base(args)
    manifest = load_manifest(_resolve(args.manifest, base))
    cfg = MatchConfig(iou_threshold=args.iou_threshold)
    reports = {}
    for pred_path in args.predictions:
        header, per_scene = load_predictions(_resolve(pred_path, base))
        system = str(header.get("system") or Path(pred_path).stem)
        if system in reports:
            system = f"{system}#{len(reports)}"
        reports[system] = evaluate(per_scene, manifest, cfg)
    text, payload = render_report(reports)
    schemas.validate_output(payload, schemas.REPORT_LIST_SCHEMA, "report")
    print(text, end="")
    warned = False
    for row in payload:
        for warning in row["warnings"]:
            print(f"warning [{row['system']}]: {warning}", file=sys.stderr)
            warned = True
    if args.out:
        out_dir = _resolve(args.out, base)
        out_dir.mkdir(parents=True, exist_ok=True)
        jsonio.write_json(out_dir / "report.json", payload)
        (out_dir / "report.txt").write_text(text, encoding="utf-8")
        print(f"wrote {out_dir / 'report.json'}")
    return 1 if warned else 0


# ---------------------------------------------------------------------------
# render


def _svg_polygon(box, color: str, dashed: bool = False) -> str:
    points = (f"{box.x_min},{box.y_min} {box.x_max},{box.y_min} "
              f"{box.x_max},{box.y_max} {box.x_min},{box.y_max}")
    dash = ' stroke-dasharray="6 4"' if dashed else ""
    return (f'  <polygon points="{points}" fill="none" stroke="{color}" '
            f'stroke-width="2"{dash}/>')


def _label_color(label: LeafLabel | None) -> str:
    if label is None:
        return COLOR_AGNOSTIC
    return COLOR_DISEASED if label is LeafLabel.DISEASED else COLOR_HEALTHY


def scene_svg(scene: Scene, detections, include_gold: bool = False) -> str:
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{scene.size.width}" '
        f'height="{scene.size.height}" '
        f'viewBox="0 0 {scene.size.width} {scene.size.height}">',
        f'  <image x="0" y="0" width="{scene.size.width}" '
        f'height="{scene.size.height}" href={quoteattr(scene.image_ref)}/>',
    ]
    if include_gold:
        for leaf in scene.leaves:
            lines.append(_svg_polygon(leaf.box, _label_color(leaf.label), dashed=True))
    for det in detections:
        lines.append(_svg_polygon(det.box, _label_color(det.label)))
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def cmd_render(args) -> int:
    base = _base(args)
    header, per_scene = load_predictions(_resolve(args.predictions, base))
    manifest = load_manifest(_resolve(args.manifest, base))
    out_dir = _resolve(args.out_dir, base)
    out_dir.mkdir(parents=True, exist_ok=True)
    count = 0
    for scene in manifest.scenes:
        svg = scene_svg(scene, per_scene.get(scene.scene_id, []),
                        include_gold=args.gold)
        (out_dir / f"{scene.scene_id}.svg").write_text(svg, encoding="utf-8")
        count += 1
    print(f"wrote {count} overlays to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# simulate


def _stage_pair(data: dict, run_seed: int) -> StagePair:
    return StagePair(
        detector=detector_params_from_dict(_seeded(data.get("detector", {}), run_seed)),
        labels=diagnoser_params_from_dict(_seeded(data.get("labels", {}), run_seed)),
    )


def _regime(data: dict, run_seed: int) -> RegimeParams:
    return RegimeParams(
        end_to_end=_stage_pair(data.get("end_to_end", {}), run_seed),
        two_stage=_stage_pair(data.get("two_stage", {}), run_seed),
    )


def cmd_simulate(args) -> int:
    base = _base(args)
    manifest = load_manifest(_resolve(args.manifest, base))
    config = jsonio.read_json(_resolve(args.config, base))
    run_seed = args.seed if args.seed is not None else int(config.get("seed", 0))
    in_dist = _regime(config.get("in_distribution", {}), run_seed)
    shifted = _regime(config.get("shifted", {}), run_seed)
    pipeline_cfg = _pipeline_config(config.get("pipeline_config"))
    match_cfg = MatchConfig(**config.get("match", {}))
    result = run_shift_experiment(manifest, in_dist, shifted, pipeline_cfg, match_cfg,
                                  workers=args.workers)
    text, payload = render_report(result.reports)
    schemas.validate_output(payload, schemas.REPORT_LIST_SCHEMA, "shift reports")
    schemas.validate_output(result.deltas, schemas.SHIFT_SUMMARY_SCHEMA, "shift summary")
    print(text, end="")
    if args.out:
        out_dir = _resolve(args.out, base)
        out_dir.mkdir(parents=True, exist_ok=True)
        jsonio.write_json(out_dir / "reports.json", payload)
        for key, report in result.reports.items():
            name = key.replace("/", "_")
            jsonio.write_json(out_dir / f"report_{name}.json",
                              report_to_dict(key, report))
        jsonio.write_json(out_dir / "shift_summary.json", result.deltas)
        print(f"wrote 4 reports and shift_summary.json to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wideleaf",
        description="Wide-angle leaf diagnosis pipelines, dataset prep and IoU evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_root(p):
        p.add_argument("--root", help="base directory for relative paths")

    p = sub.add_parser("split", help="seeded scene-level train/test split")
    p.add_argument("manifest")
    p.add_argument("fraction", type=float, help="train fraction in (0, 1)")
    p.add_argument("seed", type=int)
    p.add_argument("out_train")
    p.add_argument("out_test")
    add_root(p)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("crop", help="extract one crop record per annotated leaf")
    p.add_argument("manifest")
    p.add_argument("out_dir")
    p.add_argument("--crop-size", default="224x224")
    p.add_argument("--with-pixels", action="store_true",
                   help="materialize crop PNGs (needs resolvable scene images)")
    add_root(p)
    p.set_defaults(func=cmd_crop)

    p = sub.add_parser("run", help="execute a configured pipeline over a manifest")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--out", help="predictions output path (overrides config)")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--root", help="base for relative paths (default: config directory)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score prediction files against a manifest")
    p.add_argument("manifest")
    p.add_argument("predictions", nargs="+")
    p.add_argument("--iou-threshold", type=float, default=0.5)
    p.add_argument("--out", help="directory for report.json / report.txt")
    add_root(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="per-scene SVG overlays of predictions")
    p.add_argument("predictions")
    p.add_argument("manifest")
    p.add_argument("out_dir")
    p.add_argument("--gold", action="store_true", help="also draw gold boxes, dashed")
    add_root(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("simulate", help="closed-loop shift experiment (4 reports + deltas)")
    p.add_argument("manifest")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--workers", type=int, default=1)
    add_root(p)
    p.set_defaults(func=cmd_simulate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
