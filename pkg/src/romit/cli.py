"""Config-driven experiment runner.

``romit <subcommand> --config CONFIG.json [--seed N] [--out DIR] [--threads N]``

Subcommands: ``confusion-scan``, ``mrc-characterize``, ``qprc-bench`` and
``mcm-bench``.  Data files (CSV, JSON, distribution text) depend only on
the config and seed and are byte-identical across reruns; each carries a
metadata block with the tool version, config hash and seed.  Wall time and
host details go to ``run_info.json`` alone.

Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any

import jsonschema

from . import __version__
from .bench import EXP_CHARACTERIZE, confusion_scan, qprc_bench
from .bitdist import from_text, marginalize, to_text
from .errors import NumericalError, ValidationError
from .mcm import MODES, run_mcm_experiment
from .mrc import TWIRL_SAMPLING, TwirlConfig, characterize_error_distribution
from .qprc import INVERSE_SPEC_SCHEMA, InverseSpec, provenance
from .simcore import MAX_QUBITS, NOISE_SPEC_SCHEMA, composite, model_from_spec, noise_from_spec

log = logging.getLogger("romit")

EXPERIMENTS = ("confusion-scan", "mrc-characterize", "qprc-bench", "mcm-bench")
EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3

_REQUIRED = {
    "confusion-scan": ["n", "shots"],
    "mrc-characterize": ["n", "shots"],
    "qprc-bench": ["n"],
    "mcm-bench": ["rounds", "shots"],
}

CONFIG_SCHEMA: dict[str, Any] = {
    "type": "object",
    "properties": {
        "experiment": {"enum": list(EXPERIMENTS)},
        "seed": {"type": "integer", "minimum": 0},
        "n": {"type": "integer", "minimum": 1, "maximum": MAX_QUBITS},
        "model": {"type": "array", "items": NOISE_SPEC_SCHEMA},
        "model_label": {"type": "string"},
        "shots": {"type": "integer", "minimum": 1},
        "K": {"type": "integer", "minimum": 1},
        "sampling": {"enum": list(TWIRL_SAMPLING)},
        "inverse": INVERSE_SPEC_SCHEMA,
        "circuits_per_family": {"type": "integer", "minimum": 1},
        "calibration_shots": {"type": "integer", "minimum": 1},
        "characterization_shots": {"type": "integer", "minimum": 1},
        "rounds": {"type": "integer", "minimum": 1},
        "modes": {"type": "array", "items": {"enum": list(MODES)}, "minItems": 1, "uniqueItems": True},
        "p1": {"type": "number", "minimum": 0, "exclusiveMaximum": 0.5},
        "p1_file": {"type": "string"},
        "memory_noise": {"type": "array", "items": NOISE_SPEC_SCHEMA},
        "output": {"type": "string"},
    },
    "required": ["experiment"],
    "additionalProperties": False,
}

META_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["tool", "version", "experiment", "config_sha256", "seed"],
    "properties": {
        "tool": {"const": "romit"},
        "version": {"type": "string"},
        "experiment": {"enum": list(EXPERIMENTS)},
        "config_sha256": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "seed": {"type": "integer"},
    },
}


def _canonical(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _sha(obj: Any) -> str:
    return hashlib.sha256(_canonical(obj).encode()).hexdigest()


def load_config(path: Path, experiment: str, seed: int | None) -> dict[str, Any]:
    """Read, validate and seed-resolve a config; errors name the offending location."""
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ValidationError(f"config file {path} does not exist") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if isinstance(doc, dict):
        doc.setdefault("experiment", experiment)
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ValidationError(f"{path}: at {where}: {exc.message}") from exc
    if doc["experiment"] != experiment:
        raise ValidationError(f"{path}: config is for {doc['experiment']!r}, not {experiment!r}")
    if seed is not None:
        doc["seed"] = seed
    if "seed" not in doc:
        raise ValidationError(f"{path}: a seed is required (config 'seed' or --seed)")
    missing = [k for k in _REQUIRED[experiment] if k not in doc]
    if missing:
        raise ValidationError(f"{path}: {experiment} needs {', '.join(missing)}")
    if experiment == "confusion-scan" and doc["n"] > 4:
        raise ValidationError(f"{path}: at n: full confusion scans are limited to n <= 4")
    if "p1_file" in doc:
        p1_path = (Path(path).parent / doc["p1_file"]).resolve()
        if not p1_path.exists():
            raise ValidationError(f"{path}: at p1_file: {doc['p1_file']} does not exist")
        doc["_p1_path"] = str(p1_path)
    model = doc.get("model", [])
    width = doc.get("n", 2 if experiment == "mcm-bench" else None)
    for i, spec in enumerate(model):
        qubits = [spec.get(k) for k in ("qubit", "control", "target") if k in spec] + spec.get("qubits", [])
        if width is not None and any(q >= width for q in qubits):
            raise ValidationError(f"{path}: at model/{i}: qubit index outside the {width}-qubit register")
    return doc


def _meta(cfg: dict[str, Any]) -> dict[str, Any]:
    public = {k: v for k, v in cfg.items() if not k.startswith("_")}
    meta = {
        "tool": "romit",
        "version": __version__,
        "experiment": cfg["experiment"],
        "config_sha256": _sha(public),
        "seed": cfg["seed"],
    }
    jsonschema.validate(meta, META_SCHEMA)
    return meta


def _write_csv(path: Path, rows: list[dict[str, Any]], meta: dict[str, Any]) -> None:
    buf = io.StringIO()
    buf.write("# " + _canonical(meta) + "\n")
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: format(v, ".17g") if isinstance(v, float) else v for k, v in row.items()})
    path.write_text(buf.getvalue())


def _write_json(path: Path, body: dict[str, Any], meta: dict[str, Any]) -> None:
    path.write_text(json.dumps({"meta": meta, **body}, indent=2, sort_keys=True) + "\n")


def _model(cfg: dict[str, Any]):
    return model_from_spec(cfg.get("model", []), cfg.get("model_label", ""))


def _model_hash(cfg: dict[str, Any]) -> str:
    return _sha(cfg.get("model", []))


def cmd_confusion_scan(cfg: dict[str, Any], out: Path, threads: int = 1) -> list[Path]:
    meta = _meta(cfg)
    res = confusion_scan(_model(cfg), cfg["n"], cfg["shots"], cfg.get("K", 100), cfg["seed"], cfg.get("sampling", "iid"))
    paths = [out / "confusion_raw.csv", out / "confusion_mrc.csv", out / "diagnostics.json"]
    for path, key in zip(paths, ("raw", "twirled")):
        path.write_text("# " + _canonical(meta) + "\n" + res[key].to_csv())
    _write_json(
        paths[2],
        {"raw": res["raw_diagnostics"], "mrc": res["twirled_diagnostics"], "shots_per_prep": cfg["shots"]},
        meta,
    )
    return paths


def cmd_mrc_characterize(cfg: dict[str, Any], out: Path, threads: int = 1) -> list[Path]:
    meta = _meta(cfg)
    tcfg = TwirlConfig.from_total(cfg["shots"], cfg.get("K", 100), cfg["seed"], cfg.get("sampling", "iid"))
    p_hat = characterize_error_distribution(_model(cfg), cfg["n"], tcfg, stream=(EXP_CHARACTERIZE,))
    header = {**meta, "model_sha256": _model_hash(cfg)}
    paths = [out / "p_hat.txt", out / "characterize_summary.json"]
    paths[0].write_text(to_text(p_hat, header))
    marg = {str(q): float(marginalize(p_hat, [q]).weight(1)) for q in range(cfg["n"])}
    _write_json(paths[1], {"p0": float(p_hat.weight(0)), "marginal_flip": marg, "support": len(p_hat)}, meta)
    return paths


def cmd_qprc_bench(cfg: dict[str, Any], out: Path, threads: int = 1) -> list[Path]:
    meta = _meta(cfg)
    spec = InverseSpec.from_json(cfg.get("inverse", {"order": 2}))
    res = qprc_bench(
        _model(cfg),
        cfg["n"],
        circuits_per_family=cfg.get("circuits_per_family", 100),
        shots=cfg.get("shots", 20_000),
        K=cfg.get("K", 100),
        inverse=spec,
        calibration_shots=cfg.get("calibration_shots", 100_000),
        characterization_shots=cfg.get("characterization_shots", 100_000),
        seed=cfg["seed"],
        sampling=cfg.get("sampling", "iid"),
        threads=threads,
    )
    paths = [out / "qprc_bench.csv", out / "qprc_summary.json", out / "p_hat.txt"]
    _write_csv(paths[0], res.rows, meta)
    _write_json(paths[1], {"summary": res.summary, "inverse_spec": spec.to_json()}, meta)
    paths[2].write_text(to_text(res.p_hat, {**meta, "model_sha256": _model_hash(cfg), **provenance(res.p_hat, spec)}))
    return paths


def _p1_from_file(path: str) -> float:
    p_hat = from_text(Path(path).read_text())
    return float(marginalize(p_hat, [0]).weight(1))


def cmd_mcm_bench(cfg: dict[str, Any], out: Path, threads: int = 1) -> list[Path]:
    meta = _meta(cfg)
    model = _model(cfg)
    mem = cfg.get("memory_noise")
    memory_noise = composite(noise_from_spec(s) for s in mem) if mem else None
    p1 = cfg.get("p1")
    if p1 is None and "_p1_path" in cfg:
        p1 = _p1_from_file(cfg["_p1_path"])
    rows: list[dict[str, Any]] = []
    curves = {}
    for mode in cfg.get("modes", list(MODES)):
        curve = run_mcm_experiment(
            cfg["rounds"], mode, model, cfg["shots"], cfg["seed"],
            K=cfg.get("K", 100), p1=p1, memory_noise=memory_noise, sampling=cfg.get("sampling", "iid"),
            characterization_shots=cfg.get("characterization_shots", 100_000),
        )
        rows.extend(curve.rows())
        curves[mode] = {"p_mem0": curve.p0, "stderr": curve.stderr, "meta": curve.meta}
    paths = [out / "mcm_curves.csv", out / "mcm_summary.json"]
    _write_csv(paths[0], rows, meta)
    _write_json(paths[1], {"curves": curves, "rounds": cfg["rounds"]}, meta)
    return paths


COMMANDS = {
    "confusion-scan": cmd_confusion_scan,
    "mrc-characterize": cmd_mrc_characterize,
    "qprc-bench": cmd_qprc_bench,
    "mcm-bench": cmd_mcm_bench,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="romit", description="Readout error mitigation experiments.")
    parser.add_argument("--version", action="version", version=f"romit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path, help="experiment config (JSON)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", type=Path, help="output directory (default: config 'output' or '.')")
        p.add_argument("--threads", type=int, default=1, help="worker threads for independent circuits")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    started = time.time()
    try:
        if args.threads < 1:
            raise ValidationError("--threads must be at least 1")
        cfg = load_config(args.config, args.command, args.seed)
        out = args.out or Path(cfg.get("output", "."))
        out.mkdir(parents=True, exist_ok=True)
        paths = COMMANDS[args.command](cfg, out, args.threads)
        info = {
            "meta": _meta(cfg),
            "wall_time_s": round(time.time() - started, 3),
            "started_unix": round(started, 3),
            "files": [p.name for p in paths],
        }
        (out / "run_info.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
        for p in paths:
            log.info("wrote %s", p)
    except ValidationError as exc:
        print(f"romit: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"romit: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
