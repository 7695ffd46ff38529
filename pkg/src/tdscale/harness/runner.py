"""Run a preset and write its artifacts.

Layout of ``<out>/<preset>/``: one CSV per table, ``summary.json`` (checks
and scalar results, deterministic) and ``manifest.json`` (config echo,
seed, input hash, file hashes, wall time).
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import time
from pathlib import Path
from typing import Optional

from .. import __version__
from .config import defaults
from .presets import PRESETS, PresetResult

SUMMARY_SCHEMA = 1


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def content_hash(text: str) -> str:
    """Git blob hash of ``text``."""
    data = text.encode()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def merged_config(name: str, overrides: Optional[dict]) -> dict:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; expected one of {', '.join(PRESETS)}")
    cfg = defaults()
    cfg.update(PRESETS[name][1])
    cfg.update(overrides or {})
    return cfg


def execute(name: str, overrides: Optional[dict] = None, seed: int = 0) -> tuple:
    cfg = merged_config(name, overrides)
    fn = PRESETS[name][0]
    return cfg, fn(cfg, seed)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if hasattr(x, "item"):
        return x.item()
    return x


def run_preset(name: str, overrides: Optional[dict] = None, seed: int = 0, out=".") -> int:
    """Run ``name``, write artifacts under ``out/name``; 0 if every check passed, else 1."""
    if not 0 <= seed < 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    start = time.time()
    cfg, result = execute(name, overrides, seed)
    root = Path(out) / name
    files = {}
    for fname, body in sorted(result.csvs.items()):
        write_atomic(root / fname, body)
        files[fname] = content_hash(body)
    summary = {"schema_version": SUMMARY_SCHEMA, "preset": name, "seed": seed,
               "passed": result.passed, "checks": result.checks, "results": result.summary}
    body = json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n"
    write_atomic(root / "summary.json", body)
    files["summary.json"] = content_hash(body)
    inputs = json.dumps({"preset": name, "seed": seed, "config": cfg, "version": __version__},
                        sort_keys=True)
    manifest = {"preset": name, "seed": seed, "config": cfg, "version": __version__,
                "input_hash": content_hash(inputs), "files": files,
                "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(start)),
                "wall_seconds": round(time.time() - start, 3)}
    write_atomic(root / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return 0 if result.passed else 1


def report_lines(result: PresetResult) -> list:
    return [f"{'PASS' if ok else 'FAIL'} {name}" for name, ok in result.checks.items()]
