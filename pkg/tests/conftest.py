"""Shared fixtures. The full pipeline (dataset, detector, patch, closed-loop
runs) is expensive, so it is built once per config hash under ``.cache/`` and
reused; set ``PEDATTACK_REFRESH=1`` to rebuild it."""
import json
import os
import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pedattack import cli  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
DEFAULT_CONFIG = ROOT / "configs" / "default.toml"
CACHE = ROOT / ".cache" / "pipeline"

STAGES = (
    ("gen-scenes", "dataset/manifest.json"),
    ("train-detector", "detector.json"),
    ("train-patch", "patch.ppm.json"),
    ("eval-model", "eval_model.json"),
    ("run-system", "runs.done"),
    ("report", "report.json"),
)


def _hash_matches(path, h):
    if not path.exists():
        return False
    if path.suffix != ".json":
        return path.read_text().strip() == h
    with open(path) as fh:
        return json.load(fh).get("config_hash") == h


def build_pipeline(config, out, refresh=False):
    """Run every CLI stage whose artifact is missing or stale; returns per-stage wall seconds."""
    cfg = cli.load_config(config, out=out)
    h = cli.config_hash(cfg)
    timings = {}
    for command, artifact in STAGES:
        target = Path(out) / artifact
        if not refresh and _hash_matches(target, h):
            continue
        argv = ["--config", str(config), "--out", str(out), command]
        if command == "run-system":
            argv.append("--all")
        if command == "report":
            argv.append("--speed-trace")
        started = time.perf_counter()
        code = cli.main(argv)
        timings[command] = time.perf_counter() - started
        if code != cli.EXIT_OK:
            raise RuntimeError(f"pipeline stage {command} exited with {code}")
        if command == "run-system":
            target.write_text(h + "\n")
    if timings:
        timing_file = Path(out) / "stage_seconds.json"
        old = json.loads(timing_file.read_text()) if timing_file.exists() else {}
        old.update(timings)
        timing_file.write_text(json.dumps(old, indent=2, sort_keys=True) + "\n")
    return cfg


@pytest.fixture(scope="session")
def pipeline():
    """(config dict, output directory) for the shipped default config, built on demand."""
    cfg = cli.load_config(DEFAULT_CONFIG)
    out = CACHE / cli.config_hash(cfg)
    out.mkdir(parents=True, exist_ok=True)
    cfg = build_pipeline(DEFAULT_CONFIG, out, os.environ.get("PEDATTACK_REFRESH") == "1")
    return cfg, out


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES
    if LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(LINES):
            terminalreporter.write_line(LINES[n])
