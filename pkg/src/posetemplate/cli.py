"""``posetemplate`` command line: render, synth, fit, eval and check-grad.

Every command resolves one flat configuration dictionary (built-in defaults,
then an optional ``--config`` JSON file, then explicit flags) and echoes it as
``config.json`` in its output directory, so ``--config out/config.json``
reruns the command with identical results.

Exit status: 0 success, 1 partial batch failure (or failing gradient check),
2 configuration, parse or input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from .diff import format_gradient_report, run_gradient_check
from .evaluate import score
from .fit import FitConfig, FitError, fit_pose, synthetic_fit_config
from .geometry import SingularTransformError, identity_params
from .losses import LossConfig, transformed_anchors
from .render import (
    MIN_RESOLUTION,
    PartMaps,
    PartMapsFormatError,
    composite_overlay,
    read_part_maps,
    render_analytic,
    to_uint8,
)
from .synth import (
    PoseRanges,
    SamplingExhaustedError,
    generate_dataset,
    keypoints_csv,
    read_keypoints_csv,
    write_atomic,
    write_dataset,
)
from .template import TemplateError, canonical_human_template, load_template

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2
CONFIG_NAME = "config.json"
PROFILES = ("default", "synthetic")


class ConfigError(Exception):
    """Bad configuration or unreadable input; maps to exit status 2."""


# ---------------------------------------------------------------- configuration

_COMMON = {"template": None, "resolution": 128}


def _fit_defaults(profile: str) -> dict:
    base = synthetic_fit_config() if profile == "synthetic" else FitConfig()
    return {"lr": base.learning_rate, "lr_final": base.lr_final, "max_iters": base.max_iters,
            "tol": base.convergence_tol, "init_noise": base.init_noise, "seed": base.seed,
            "lambda1": base.loss.lambda1, "lambda2": base.loss.lambda2,
            "boundary_b": base.loss.boundary_b, "features": base.loss.recon_features}


def _defaults(command: str, profile: str) -> dict:
    if command == "render":
        return {**_COMMON, "transforms": None, "out": None}
    if command == "synth":
        r = PoseRanges()
        return {**_COMMON, "n": 100, "seed": 0, "max_rotation": r.max_rotation, "scale_min": r.scale[0],
                "scale_max": r.scale[1], "root_translation": r.root_translation, "out": None}
    if command == "fit":
        return {**_COMMON, "resolution": None, "profile": profile, **_fit_defaults(profile),
                "input": None, "out": None,
                "jobs": 1, "overlays": False}
    if command == "eval":
        return {"predictions": None, "ground_truth": None, "out": None, "squared_metric": False}
    if command == "check-grad":
        return {"template": None, "resolution": 16, "draws": 100, "seed": 0,
                "features": "identity,pool:1,2,4,8,16", "tolerance": 1e-4, "fault": None, "out": None}
    raise ConfigError(f"unknown command {command!r}")


def _read_config_file(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return doc


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, overlaid by the config file, overlaid by flags that were given."""
    from_file = _read_config_file(args.config) if args.config else {}
    command = args.command
    if from_file.get("command", command) != command:
        raise ConfigError(f"config file is for {from_file['command']!r}, not {command!r}")
    profile = getattr(args, "profile", None) or from_file.get("profile") or "default"
    if command == "fit" and profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {', '.join(PROFILES)}")
    config = _defaults(command, profile)
    unknown = set(from_file) - set(config) - {"command"}
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    config.update({k: v for k, v in from_file.items() if k != "command"})
    for key in config:
        value = getattr(args, key, None)
        if value is not None:
            config[key] = value
    return {"command": command, **config}


def echo_config(config: dict, out: str) -> None:
    write_atomic(os.path.join(out, CONFIG_NAME), json.dumps(config, indent=2, sort_keys=True) + "\n")


def _require(config: dict, *keys: str) -> None:
    missing = [k for k in keys if config.get(k) in (None, "")]
    if missing:
        raise ConfigError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _template(config: dict):
    path = config.get("template")
    if path is None:
        return canonical_human_template()
    try:
        return load_template(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"template file not found: {path}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read template file {path}: {exc.strerror}") from exc
    except TemplateError as exc:
        raise ConfigError(f"invalid template {path}: {exc}") from exc


def _resolution(config: dict, optional: bool = False) -> int | None:
    res = config["resolution"]
    if optional and res is None:
        return None
    if not isinstance(res, int) or res < MIN_RESOLUTION:
        raise ConfigError(f"resolution must be an integer >= {MIN_RESOLUTION}, got {res!r}")
    return res


def fit_config_from(config: dict) -> FitConfig:
    try:
        loss = LossConfig(lambda1=config["lambda1"], lambda2=config["lambda2"],
                          boundary_b=config["boundary_b"], recon_features=config["features"])
        loss.features  # parse now so a bad spec is a configuration error
        return FitConfig(learning_rate=config["lr"], lr_final=config["lr_final"],
                         max_iters=config["max_iters"], convergence_tol=config["tol"],
                         init_noise=config["init_noise"], seed=config["seed"], loss=loss,
                         resolution=config["resolution"] or FitConfig.resolution)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid fit configuration: {exc}") from exc


# ---------------------------------------------------------------- helpers

def transforms_to_json(template, params) -> str:
    params = np.asarray(params, dtype=float).reshape(template.n_parts, 6)
    doc = {pid: [float(v) for v in row] for pid, row in zip(template.part_ids, params)}
    return json.dumps(doc, indent=2) + "\n"


def load_transforms(path: str, template) -> np.ndarray:
    """Read part transforms as ``{part_id: [a11, a12, a21, a22, tx, ty]}`` or a list of such rows.

    Parts missing from a mapping keep the identity.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read transforms file {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"transforms file {path} is not valid JSON: {exc}") from exc
    params = identity_params(template.n_parts).reshape(-1, 6)
    try:
        if isinstance(doc, dict):
            for pid, row in doc.items():
                if pid not in template.part_index:
                    raise ConfigError(f"transforms file {path}: unknown part {pid!r}")
                params[template.part_index[pid]] = np.asarray(row, dtype=float).reshape(6)
        else:
            params = np.asarray(doc, dtype=float).reshape(template.n_parts, 6)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"transforms file {path}: expected six numbers per part ({exc})") from exc
    if not np.all(np.isfinite(params)):
        raise ConfigError(f"transforms file {path}: non-finite values")
    return params


def overlay_image(template, maps: PartMaps, params, mark_anchors: bool = True) -> np.ndarray:
    """RGB uint8 composite of the part maps with transformed anchor points in red."""
    rgb = to_uint8(composite_overlay(maps))
    if mark_anchors:
        h = maps.height
        points = transformed_anchors(template, np.asarray(params, dtype=float).reshape(-1, 6))
        cols = np.round((points[:, 0] + 1.0) * h / 2.0 - 0.5).astype(int)
        rows = np.round((points[:, 1] + 1.0) * h / 2.0 - 0.5).astype(int)
        for r, c in zip(rows, cols):
            rgb[max(r - 1, 0):max(r + 2, 0), max(c - 1, 0):max(c + 2, 0)] = (255, 0, 0)
    return rgb


def png_bytes(rgb: np.ndarray) -> bytes:
    import io

    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(rgb, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def _make_out(config: dict) -> str:
    _require(config, "out")
    try:
        os.makedirs(config["out"], exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {config['out']}: {exc.strerror}") from exc
    return config["out"]


# ---------------------------------------------------------------- commands

def cmd_render(config: dict) -> int:
    template = _template(config)
    res = _resolution(config)
    if config["transforms"]:
        params = load_transforms(config["transforms"], template)
    else:
        params = identity_params(template.n_parts)
    try:
        maps = render_analytic(template, params, res)
    except SingularTransformError as exc:
        raise ConfigError(str(exc)) from exc
    out = _make_out(config)
    write_atomic(os.path.join(out, "render.pmap"), maps.to_bytes())
    write_atomic(os.path.join(out, "overlay.png"), png_bytes(overlay_image(template, maps, params)))
    echo_config(config, out)
    print(f"render: {maps.channels} parts at {res}x{res} -> {out}")
    return EXIT_OK


def cmd_synth(config: dict) -> int:
    template = _template(config)
    res = _resolution(config)
    try:
        ranges = PoseRanges(max_rotation=config["max_rotation"],
                            scale=(config["scale_min"], config["scale_max"]),
                            root_translation=config["root_translation"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid pose ranges: {exc}") from exc
    if not isinstance(config["n"], int) or config["n"] < 1:
        raise ConfigError(f"n must be a positive integer, got {config['n']!r}")
    try:
        dataset = generate_dataset(template, config["n"], ranges, res, seed=config["seed"])
    except SamplingExhaustedError as exc:
        raise ConfigError(str(exc)) from exc
    out = _make_out(config)
    write_dataset(out, template, dataset, ranges, res, config["seed"])
    echo_config(config, out)
    print(f"synth: {len(dataset)} samples -> {out}")
    return EXIT_OK


def _targets(path: str) -> list[tuple[str, str]]:
    if os.path.isdir(path):
        names = sorted(f for f in os.listdir(path) if f.endswith(".pmap"))
        if not names:
            raise ConfigError(f"no .pmap files in {path}")
        return [(name[:-5], os.path.join(path, name)) for name in names]
    if os.path.isfile(path):
        stem = os.path.basename(path)
        return [(stem[:-5] if stem.endswith(".pmap") else stem, path)]
    raise ConfigError(f"input not found: {path}")


def _trace_csv(trace) -> str:
    lines = ["iteration,recon,anchor,boundary,total"]
    lines += [f"{i},{b.recon!r},{b.anchor!r},{b.boundary!r},{b.total!r}" for i, b in enumerate(trace)]
    return "\n".join(lines) + "\n"


def _fit_one(job) -> dict:
    """Fit one target and write its files; failures are reported, never raised."""
    sample_id, path, out, template, fit_config, infer_resolution, overlays = job
    record = {"id": sample_id, "input": os.path.basename(path)}
    try:
        maps = read_part_maps(path)
        if infer_resolution:
            fit_config = replace(fit_config, resolution=maps.height)
        result = fit_pose(template, maps, fit_config)
    except (OSError, PartMapsFormatError, FitError, ValueError) as exc:
        return {**record, "status": "failed", "error": f"{type(exc).__name__}: {exc}"}
    prefix = os.path.join(out, sample_id)
    write_atomic(prefix + ".pred.csv", keypoints_csv(result.keypoints))
    write_atomic(prefix + ".trace.csv", _trace_csv(result.loss_trace))
    write_atomic(prefix + ".transforms.json", transforms_to_json(template, result.params))
    if overlays:
        fitted = render_analytic(template, result.params, maps.height)
        write_atomic(prefix + ".overlay.png", png_bytes(overlay_image(template, fitted, result.params)))
    final = result.final_loss
    return {**record, "status": "ok", "final_loss": final.total, "recon": final.recon,
            "anchor": final.anchor, "boundary": final.boundary, "iterations": result.iterations_used,
            "best_iteration": result.best_iteration, "converged": result.converged}


def cmd_fit(config: dict) -> int:
    template = _template(config)
    infer = _resolution(config, optional=True) is None
    fit_config = fit_config_from(config)
    _require(config, "input")
    targets = _targets(config["input"])
    jobs = config["jobs"]
    if not isinstance(jobs, int) or jobs < 1:
        raise ConfigError(f"jobs must be a positive integer, got {jobs!r}")
    out = _make_out(config)
    work = [(sid, path, out, template, fit_config, infer, bool(config["overlays"])) for sid, path in targets]
    if jobs == 1 or len(work) == 1:
        records = [_fit_one(job) for job in work]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_fit_one, work))
    records.sort(key=lambda r: r["id"])
    ok = [r for r in records if r["status"] == "ok"]
    failed = [r for r in records if r["status"] != "ok"]
    mean_loss = float(np.mean([r["final_loss"] for r in ok])) if ok else None
    summary = {"n_targets": len(records), "n_ok": len(ok), "n_failed": len(failed),
               "mean_final_loss": mean_loss, "targets": records}
    write_atomic(os.path.join(out, "summary.json"), json.dumps(summary, indent=2) + "\n")
    echo_config(config, out)
    for r in failed:
        print(f"fit: {r['id']} failed: {r['error']}", file=sys.stderr)
    shown = "n/a" if mean_loss is None else f"{mean_loss:.6g}"
    print(f"fit: {len(ok)}/{len(records)} targets ok, mean final loss {shown}")
    return EXIT_PARTIAL if failed else EXIT_OK


def _keypoint_files(directory: str, suffix: str) -> dict[str, str]:
    if not os.path.isdir(directory):
        raise ConfigError(f"directory not found: {directory}")
    return {f[: -len(suffix)]: os.path.join(directory, f)
            for f in sorted(os.listdir(directory)) if f.endswith(suffix)}


def cmd_eval(config: dict) -> int:
    _require(config, "predictions", "ground_truth")
    preds = _keypoint_files(config["predictions"], ".pred.csv")
    truth = _keypoint_files(config["ground_truth"], ".gt.csv")
    if not truth:
        raise ConfigError(f"no .gt.csv files in {config['ground_truth']}")
    missing = sorted(set(truth) - set(preds))
    if missing:
        raise ConfigError(f"missing prediction file {missing[0]}.pred.csv in {config['predictions']}")
    ids = sorted(truth)
    try:
        report = score([read_keypoints_csv(preds[i]) for i in ids],
                       [read_keypoints_csv(truth[i]) for i in ids],
                       squared=bool(config["squared_metric"]))
    except (OSError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    text = report.to_text()
    if config["out"]:
        out = _make_out(config)
        write_atomic(os.path.join(out, "report.txt"), text)
        write_atomic(os.path.join(out, "report.json"), report.to_json())
        echo_config(config, out)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_checkgrad(config: dict) -> int:
    template = _template(config)
    res = _resolution(config)
    features = tuple(_split_features(config["features"]))
    if config["fault"] not in (None, "sign-flip"):
        raise ConfigError(f"unknown fault {config['fault']!r}")
    try:
        rows = run_gradient_check(template, draws=config["draws"], seed=config["seed"], resolution=res,
                                  tolerance=config["tolerance"], features=features, fault=config["fault"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid gradient-check configuration: {exc}") from exc
    text = format_gradient_report(rows)
    if config["out"]:
        out = _make_out(config)
        write_atomic(os.path.join(out, "report.txt"), text)
        echo_config(config, out)
    sys.stdout.write(text)
    return EXIT_OK if all(r.passed for r in rows) else EXIT_PARTIAL


def _split_features(spec: str) -> list[str]:
    """``"identity,pool:1,2,4"`` -> ``["identity", "pool:1,2,4"]`` (numbers stay with their extractor)."""
    out: list[str] = []
    for token in str(spec).split(","):
        token = token.strip()
        if out and token.replace(".", "", 1).isdigit():
            out[-1] += "," + token
        elif token:
            out.append(token)
    if not out:
        raise ConfigError("no feature extractors given")
    return out


COMMANDS = {"render": cmd_render, "synth": cmd_synth, "fit": cmd_fit, "eval": cmd_eval,
            "check-grad": cmd_checkgrad}


# ---------------------------------------------------------------- argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="posetemplate", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, argument_default=None)
        p.add_argument("--config", help="JSON config file; explicit flags override it")
        return p

    def common(p, resolution_help="square image size in pixels"):
        p.add_argument("--template", help="template JSON (default: built-in 18-part human)")
        p.add_argument("--resolution", type=int, help=resolution_help)

    def loss_flags(p):
        p.add_argument("--lambda1", type=float, help="anchor loss weight")
        p.add_argument("--lambda2", type=float, help="boundary loss weight")
        p.add_argument("--boundary-b", type=float, help="half-width of the allowed region")
        p.add_argument("--features", help="reconstruction features: identity, pool:F1,F2,... or blur:S1,S2,...")

    p = command("render", "render part maps and an overlay for given part transforms")
    common(p)
    p.add_argument("--transforms", help="JSON file of part transforms (default: canonical pose)")
    p.add_argument("--out", help="output directory")

    p = command("synth", "generate a synthetic dataset of articulated poses")
    common(p)
    p.add_argument("--n", type=int, help="number of samples")
    p.add_argument("--seed", type=int, help="base random seed")
    p.add_argument("--max-rotation", type=float, help="max absolute part rotation, degrees")
    p.add_argument("--scale-min", type=float, help="min part scale")
    p.add_argument("--scale-max", type=float, help="max part scale")
    p.add_argument("--root-translation", type=float, help="max root offset, normalized units")
    p.add_argument("--out", help="output directory")

    p = command("fit", "fit the template to part-map targets")
    common(p, "expected target resolution (default: taken from each target)")
    loss_flags(p)
    p.add_argument("--profile", choices=PROFILES, help="base settings before overrides")
    p.add_argument("--lr", type=float, help="Adam learning rate")
    p.add_argument("--lr-final", type=float, help="learning rate reached by geometric decay at the last iteration")
    p.add_argument("--max-iters", type=int, help="iteration budget")
    p.add_argument("--tol", type=float, help="convergence tolerance on the change of the total loss")
    p.add_argument("--init-noise", type=float, help="std of Gaussian noise added to the identity start")
    p.add_argument("--seed", type=int, help="seed for the start noise")
    p.add_argument("--input", help="dataset directory or a single .pmap file")
    p.add_argument("--jobs", type=int, help="parallel worker processes")
    p.add_argument("--overlays", action="store_const", const=True, help="also write NNNN.overlay.png")
    p.add_argument("--out", help="output directory")

    p = command("eval", "score predicted keypoints against ground truth")
    p.add_argument("--predictions", help="directory of NNNN.pred.csv")
    p.add_argument("--ground-truth", help="directory of NNNN.gt.csv")
    p.add_argument("--squared-metric", action="store_const", const=True, help="report mean squared distance")
    p.add_argument("--out", help="directory for report.txt and report.json")

    p = command("check-grad", "compare closed-form gradients with finite differences")
    common(p, "resolution of the random targets")
    p.add_argument("--draws", type=int, help="random parameter draws per loss term")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--features", help="comma-separated reconstruction features to check")
    p.add_argument("--tolerance", type=float, help="max allowed relative error")
    p.add_argument("--fault", help=argparse.SUPPRESS)
    p.add_argument("--out", help="directory for report.txt")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
        return COMMANDS[args.command](config)
    except ConfigError as exc:
        print(f"posetemplate {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
