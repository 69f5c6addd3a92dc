"""Command-line pipeline: dataset -> detector -> patch -> model-level eval ->
closed-loop runs -> report. Every step reads one TOML config and writes
artifacts tagged with the config hash under the output directory."""
import argparse
import concurrent.futures
import copy
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:          # Python < 3.11
    import tomli as tomllib

from . import detector, harness, metrics, patchforge, scene

log = logging.getLogger("pedattack")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_DIVERGED = 0, 2, 3, 4

DEFAULTS = {
    "seed": 0,
    "out": "runs/default",
    "dataset": {"count": 2000, "split": 0.8, "presets": [1, 2, 3, 4, 5], "focal_range": [180.0, 300.0]},
    "detector": {"epochs": 30, "lr": 2e-3, "batch": 16, "optimizer": "adam", "precision": "float32",
                 "schedule": "cosine"},
    "patch": {"steps": 1500, "lr": 0.01, "batch": 8, "optimizer": "adam", "k_disguise": 0.05,
              "init": "disguise", "scale": [0.15, 0.40], "rotation_deg": [-20.0, 20.0], "jitter": 0.05,
              "disguise_step": "gradient", "w_cls": 1.0, "w_conf": 1.0, "w_box": 1.0},
    "eval": {"images": 300, "trials": 1, "overlap_iou": 0.3},
    "scenario": {"runs": 10, "seeds": []},
    "geometry": {},
    "controller": {},
}


class ConfigError(ValueError):
    pass


class MissingArtifact(RuntimeError):
    pass


def _merge(base, over, path=""):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path}{k}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{path}{k} must be a section")
            out[k] = _merge(base[k], v, f"{path}{k}.") if base[k] else dict(v)
        else:
            out[k] = v
    return out


def load_config(path=None, seed=None, out=None):
    raw = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}")
    cfg = _merge(DEFAULTS, raw)
    if seed is not None:
        cfg["seed"] = int(seed)
    if out is not None:
        cfg["out"] = str(out)
    _validate(cfg)
    return cfg


def _validate(cfg):
    ds = cfg["dataset"]
    if not 0 < ds["split"] < 1:
        raise ConfigError("dataset.split must be in (0, 1)")
    if ds["count"] < 2 or not set(ds["presets"]) <= set(range(1, 6)) or not ds["presets"]:
        raise ConfigError("dataset.count must be >= 2 and presets within 1..5")
    sc = cfg["scenario"]
    if sc["runs"] < 1:
        raise ConfigError("scenario.runs must be >= 1")
    if sc["seeds"] and (len(sc["seeds"]) != sc["runs"] or len(set(sc["seeds"])) != len(sc["seeds"])):
        raise ConfigError("scenario.seeds must list scenario.runs distinct seeds")
    if cfg["detector"]["precision"] not in ("float32", "float64"):
        raise ConfigError("detector.precision must be float32 or float64")
    if cfg["eval"]["images"] < 1 or cfg["eval"]["trials"] < 1:
        raise ConfigError("eval.images and eval.trials must be >= 1")
    names = {f.name for f in fields(harness.Geometry)}
    for k in cfg["geometry"]:
        if k not in names:
            raise ConfigError(f"unknown geometry key {k}")
    names = {f.name for f in fields(harness.ControllerParams)}
    for k in cfg["controller"]:
        if k not in names:
            raise ConfigError(f"unknown controller key {k}")
    try:
        eot_config(cfg)
        geometry(cfg)
        controller(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc))


def config_hash(cfg):
    """Hash of everything that affects results (not the output location)."""
    body = {k: v for k, v in cfg.items() if k != "out"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]


def eot_config(cfg):
    p = cfg["patch"]
    ranges = patchforge.TransformRanges(tuple(p["scale"]), tuple(np.deg2rad(p["rotation_deg"])), p["jitter"])
    return patchforge.EotConfig(steps=p["steps"], lr=p["lr"], batch=p["batch"], optimizer=p["optimizer"],
                                ranges=ranges,
                                weights=patchforge.LossWeights(p["w_cls"], p["w_conf"], p["w_box"]),
                                k_disguise=p["k_disguise"], seed=cfg["seed"], init=p["init"],
                                disguise_step=p["disguise_step"])


def geometry(cfg):
    return harness.Geometry(**cfg["geometry"])


def controller(cfg):
    return harness.ControllerParams(**cfg["controller"])


# ---------------------------------------------------------------- artifacts

def _out(cfg):
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory not writable: {out} ({exc})")
    return out


def _require(path):
    if not Path(path).exists():
        raise MissingArtifact(str(path))
    return Path(path)


def _write_json(path, data):
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _check_hash(meta_path, h):
    with open(_require(meta_path)) as fh:
        meta = json.load(fh)
    if meta.get("config_hash") != h:
        raise ConfigError(f"{meta_path} was produced by a different config (hash {meta.get('config_hash')})")
    return meta


def _load_split(out, split, limit=None):
    d = _require(out / "dataset" / split)
    stems = sorted(p.stem for p in d.glob("*.ppm"))[:limit]
    images = np.stack([scene.load_ppm(d / f"{s}.ppm") for s in stems]) if stems else np.zeros((0, 96, 96, 3))
    labels = [[(*l, 0.0) for l in scene.load_labels(d / f"{s}.txt")] for s in stems]
    return images, labels


# ---------------------------------------------------------------- commands

def cmd_gen_scenes(cfg):
    out = _out(cfg)
    h = config_hash(cfg)
    ds = cfg["dataset"]
    n_train, n_val = scene.split_counts(ds["count"], ds["split"])
    images, labels, towns = scene.render_dataset(cfg["seed"], ds["count"], tuple(ds["presets"]),
                                                 tuple(ds["focal_range"]))
    order = np.random.default_rng(cfg["seed"]).permutation(ds["count"])
    counts = {}
    for split, ids in (("train", order[:n_train]), ("validation", order[n_train:])):
        d = out / "dataset" / split
        d.mkdir(parents=True, exist_ok=True)
        for old in list(d.glob("*.ppm")) + list(d.glob("*.txt")):
            old.unlink()
        for i in sorted(ids):
            scene.save_ppm(d / f"{i:06d}.ppm", images[i])
            scene.save_labels(d / f"{i:06d}.txt",
                              [(l[0], tuple(v * 96 for v in l[1:5])) for l in labels[i]], 96, 96)
        counts[split] = {str(p): int(sum(towns[i] == p for i in ids)) for p in ds["presets"]}
    _write_json(out / "dataset" / "manifest.json",
                {"config_hash": h, "train": n_train, "validation": n_val, "towns": counts,
                 "total": ds["count"]})
    print(f"wrote {n_train} train and {n_val} validation images to {out / 'dataset'}")
    return EXIT_OK


def cmd_train_detector(cfg):
    out = _out(cfg)
    h = config_hash(cfg)
    _check_hash(out / "dataset" / "manifest.json", h)
    images, labels = _load_split(out, "train")
    val_images, val_labels = _load_split(out, "validation")
    dc = cfg["detector"]
    params = detector.init_detector(cfg["seed"])
    started = time.perf_counter()
    try:
        params, curve = detector.train(params, images.astype(np.float32), labels, dc["epochs"], dc["lr"],
                                       dc["batch"], cfg["seed"], dc["optimizer"], dc["precision"],
                                       schedule=dc["schedule"])
    except detector.TrainingDiverged as exc:
        detector.save_params(exc.params, out / "detector.diverged.bin")
        print("detector training diverged; last good weights in detector.diverged.bin", file=sys.stderr)
        return EXIT_DIVERGED
    seconds = time.perf_counter() - started
    detector.save_params(params, out / "detector.bin")
    report = detector.match_report(params, val_images, val_labels) if len(val_images) else {}
    _write_json(out / "detector.json", {"config_hash": h, "loss_curve": curve, "validation": report,
                                           "train_seconds": seconds})
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def _load_detector(out, h):
    _check_hash(out / "detector.json", h)
    return detector.load_params(_require(out / "detector.bin"))


def cmd_train_patch(cfg):
    out = _out(cfg)
    h = config_hash(cfg)
    params = _load_detector(out, h)
    images, _ = _load_split(out, "train")
    try:
        patch, curve = patchforge.train_patch(params, images, eot_config(cfg))
    except patchforge.PatchDiverged as exc:
        patchforge.save_patch(out / "patch.diverged.ppm", exc.patch, cfg["seed"], h)
        print("patch training diverged; last good patch in patch.diverged.ppm", file=sys.stderr)
        return EXIT_DIVERGED
    patchforge.save_patch(out / "patch.ppm", patch, cfg["seed"], h)
    _write_json(out / "patch_curve.json", {"config_hash": h, "loss_curve": curve})
    print(f"patch written to {out / 'patch.ppm'}; final loss {curve[-1] if curve else float('nan'):.4f}")
    return EXIT_OK


def _load_patch(out, h):
    _check_hash(out / "patch.ppm.json", h)
    patch, _ = patchforge.load_patch(_require(out / "patch.ppm"))
    return patch


def cmd_eval_model(cfg):
    out = _out(cfg)
    h = config_hash(cfg)
    params = _load_detector(out, h)
    patch = _load_patch(out, h)
    images, _ = _load_split(out, "validation", cfg["eval"]["images"])
    if not len(images):
        raise MissingArtifact(str(out / "dataset" / "validation"))
    ev = cfg["eval"]
    ranges = eot_config(cfg).ranges
    result = {"config_hash": h}
    for name, pixels in (("patch", patch.pixels), ("disguise", patch.disguise)):
        a, outcomes = patchforge.eval_model_level(params, pixels, images, ev["trials"], ev["overlap_iou"],
                                                  cfg["seed"], ranges)
        patchforge.write_outcomes_csv(out / f"eval_{name}.csv", outcomes)
        result[f"asr_{name}"] = a
        print(f"{name}: model-level ASR {a:.4f} over {len(outcomes)} trials")
    _write_json(out / "eval_model.json", result)
    return EXIT_OK


def _textures(patch):
    return {"patch": patch.pixels, "camellia": patch.disguise}


def _run_one(args):
    scfg, params_path, patch_path, ctl, h = args
    params = detector.load_params(params_path)
    patch, _ = patchforge.load_patch(patch_path)
    rec = harness.run_scenario(scfg, params, _textures(patch), ctl, config_hash=h)
    return scfg.name, scfg.seed, rec.to_json()


def run_seeds(cfg):
    """The explicit seed list if the config has one, else seed*1000 + run index."""
    if cfg["scenario"]["seeds"]:
        return [int(s) for s in cfg["scenario"]["seeds"]]
    return [cfg["seed"] * 1000 + i for i in range(cfg["scenario"]["runs"])]


def cmd_run_system(cfg, names=None, jobs=None):
    out = _out(cfg)
    h = config_hash(cfg)
    _load_detector(out, h)
    _load_patch(out, h)
    geo, ctl = geometry(cfg), controller(cfg)
    configs = harness.enumerate_configs(geo)
    if names is not None:
        unknown = set(names) - {c.name for c in configs}
        if unknown:
            raise ConfigError(f"unknown scenario(s): {', '.join(sorted(unknown))}")
        configs = [c for c in configs if c.name in names]
    tasks = [(replace(c, seed=s), str(out / "detector.bin"), str(out / "patch.ppm"), ctl, h)
             for c in configs for s in run_seeds(cfg)]
    jobs = jobs or os.cpu_count() or 1
    if jobs > 1 and len(tasks) > 1:
        with concurrent.futures.ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_run_one, tasks))
    else:
        results = [_run_one(t) for t in tasks]
    for name, seed, text in results:
        d = out / "runs" / name
        d.mkdir(parents=True, exist_ok=True)
        (d / f"run-{seed}.json").write_text(text + "\n")
    print(f"completed {len(results)} runs over {len(configs)} configurations")
    return EXIT_OK


def load_records(out):
    recs = {}
    for p in sorted((Path(out) / "runs").glob("*/run-*.json")):
        r = harness.RunRecord.from_json(p.read_text())
        recs.setdefault(r.config, []).append(r)
    for v in recs.values():
        v.sort(key=lambda r: r.seed)
    return recs


def summaries_from_records(recs):
    out = []
    for c in harness.enumerate_configs():
        if c.name in recs:
            out.append(metrics.ScenarioSummary.from_records(c.configuration, c.dynamic, recs[c.name]))
    return out


def cmd_report(cfg, speed_trace=False):
    out = _out(cfg)
    h = config_hash(cfg)
    recs = load_records(out)
    if not recs:
        raise MissingArtifact(str(out / "runs"))
    hashes = {r.config_hash for v in recs.values() for r in v}
    if hashes != {h}:
        raise ConfigError(f"run records carry config hashes {sorted(hashes)}; expected {h}")
    summaries = summaries_from_records(recs)
    (out / "summary.csv").write_text(metrics.summary_csv(summaries))
    (out / "fisher.csv").write_text(metrics.fisher_csv(summaries))
    text = metrics.report(summaries)
    (out / "report.txt").write_text(text)
    _write_json(out / "report.json", {"config_hash": h, "runs": {k: len(v) for k, v in sorted(recs.items())}})
    if speed_trace:
        _write_speed_traces(out / "speed", recs)
    print(text, end="")
    return EXIT_OK


def _write_speed_traces(d, recs, bin_m=2.0):
    d.mkdir(parents=True, exist_ok=True)
    for name, runs in sorted(recs.items()):
        rd = d / name
        rd.mkdir(exist_ok=True)
        bins = {}
        for r in runs:
            lines = ["frame,t,speed,mode"] + [f"{f},{t!r},{s!r},{m}" for f, t, s, m in harness.speed_trace(r)]
            (rd / f"run-{r.seed}.csv").write_text("\n".join(lines) + "\n")
            for f in r.frames:
                dist = r.intersection - f["position"]
                bins.setdefault(int(np.floor(dist / bin_m)), []).append(f["speed"])
        rows = ["distance_to_intersection,mean_speed,frames"]
        for b in sorted(bins, reverse=True):
            rows.append(f"{(b + 0.5) * bin_m!r},{float(np.mean(bins[b]))!r},{len(bins[b])}")
        (d / f"{name}.csv").write_text("\n".join(rows) + "\n")


# ---------------------------------------------------------------- entry point

def build_parser():
    p = argparse.ArgumentParser(prog="pedattack", description=__doc__)
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--jobs", type=int, default=None, help="worker processes (default: all cores)")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-scenes", help="render the labelled dataset")
    sub.add_parser("train-detector", help="train the grid detector")
    sub.add_parser("train-patch", help="train the adversarial patch")
    sub.add_parser("eval-model", help="model-level ASR of patch and disguise")
    rs = sub.add_parser("run-system", help="closed-loop scenario runs")
    rs.add_argument("--all", action="store_true", help="all 20 configurations")
    rs.add_argument("--scenario", action="append", help="e.g. patch-both-dynamic (repeatable)")
    rp = sub.add_parser("report", help="tables and CSVs from stored runs")
    rp.add_argument("--speed-trace", action="store_true", help="also write speed-vs-distance CSVs")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed, args.out)
        if args.jobs is not None and args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        if args.command == "gen-scenes":
            return cmd_gen_scenes(cfg)
        if args.command == "train-detector":
            return cmd_train_detector(cfg)
        if args.command == "train-patch":
            return cmd_train_patch(cfg)
        if args.command == "eval-model":
            return cmd_eval_model(cfg)
        if args.command == "run-system":
            if not args.all and not args.scenario:
                raise ConfigError("run-system needs --all or --scenario NAME")
            return cmd_run_system(cfg, None if args.all else args.scenario, args.jobs)
        if args.command == "report":
            return cmd_report(cfg, args.speed_trace)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
