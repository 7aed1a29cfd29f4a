"""Batch experiment driver.

Subcommands:
  fedstat synth  --config cfg.json --out dir     synthetic-cluster tables
  fedstat emnist --config cfg.json --out dir     character-image tables
  fedstat report --manifest dir/manifest.json    consolidated summary

Exit codes: 0 success, 2 config error, 3 numeric abort, 4 missing input.
CSV output uses '.' decimals, comma delimiters, a header row, and four
decimal places; a config run twice produces byte-identical CSVs.  The
manifest echoes the fully resolved config so a run is diffable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .numerics import NumericError
from .federation import ConfigError, FederationConfig, run
from .synthdata import SeededRng, build_federation, derive_stream
from . import emnist as em

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_MISSING = 4

SYNTH_SETUPS = ("global", "cluster", "client", "cond_linear", "ensemble", "mlp")
_BASELINE_NAMES = {"global": "baseline_global", "cluster": "baseline_cluster",
                   "client": "baseline_client"}

_SYNTH_DEFAULTS = {
    "clusters": 3, "peers_per_cluster": 20, "n_per_client": 100,
    "n_test_per_client": None, "features": 10, "rounds": 100,
    "local_epochs": 40, "batch_size": 100, "lr": 0.02, "wd": 0.001,
    "aggregation": "fedavg", "seed": 42, "ensemble_width": 8,
}

_EMNIST_DEFAULTS = {
    "images": None, "labels": None, "image_size": 14,
    "clients_per_group": 2, "points_per_client": 500, "test_per_client": 125,
    "nc": 1, "rounds": 10, "local_epochs": 8, "batch_size": 50,
    "lr": 0.01, "wd": 0.001, "seed": 42,
    "triplets": [["z", "Z", "2"], ["i", "I", "1"]],
    "nc_sweep": [], "allow_fallback": False, "fallback_per_class": None,
}

_INT_FIELDS = {"clusters", "peers_per_cluster", "n_per_client", "features",
               "rounds", "local_epochs", "batch_size", "seed",
               "ensemble_width", "image_size", "clients_per_group",
               "points_per_client", "test_per_client", "nc",
               "n_test_per_client", "fallback_per_class"}
_FLOAT_FIELDS = {"lr", "wd"}


def _load_config(path: str, defaults: dict) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = fh.read()
    except FileNotFoundError:
        raise em.MissingInputError(f"config file not found: {path}")
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: not valid JSON ({exc})")
    if not isinstance(doc, dict):
        raise ConfigError("config: top level must be an object")
    resolved = dict(defaults)
    for key, value in doc.items():
        if key not in defaults:
            raise ConfigError(f"{key}: unknown config field")
        if key in _INT_FIELDS and value is not None:
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{key}: expected integer, got {value!r}")
        elif key in _FLOAT_FIELDS:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{key}: expected number, got {value!r}")
        resolved[key] = value
    return resolved


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and not np.isfinite(x)):
        return "nan"
    return f"{x:.4f}"


def _write_csv(path: str, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(str(c) for c in row) + "\n")


def _write_manifest(out_dir: str, track: str, config: dict, outputs: dict,
                    extra: dict, started: float) -> str:
    path = os.path.join(out_dir, "manifest.json")
    doc = {
        "version": __version__,
        "track": track,
        "seed": config.get("seed"),
        "config": config,
        "outputs": outputs,
        "wall_time_s": round(time.time() - started, 3),
    }
    doc.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# --- synthetic track ------------------------------------------------------------

def _synth_fed_config(resolved: dict, task: str, model: str) -> FederationConfig:
    cfg = FederationConfig(
        task=task, model=model,
        clusters=resolved["clusters"],
        peers_per_cluster=resolved["peers_per_cluster"],
        n_per_client=resolved["n_per_client"],
        features=resolved["features"],
        rounds=resolved["rounds"],
        local_epochs=resolved["local_epochs"],
        batch_size=resolved["batch_size"],
        lr=resolved["lr"], wd=resolved["wd"],
        aggregation=resolved["aggregation"],
        seed=resolved["seed"],
        n_test_per_client=resolved["n_test_per_client"],
        ensemble_width=resolved["ensemble_width"],
    )
    cfg.validate()
    return cfg


def run_synth_experiments(resolved: dict) -> dict:
    """All set-ups for both tasks; returns {task: {setup: RunResult}}."""
    results = {}
    for task in ("regression", "classification"):
        shards = build_federation(_synth_fed_config(resolved, task, "cond_linear"))
        per_task = {}
        for setup in SYNTH_SETUPS:
            model = _BASELINE_NAMES.get(setup, setup)
            cfg = _synth_fed_config(resolved, task, model)
            per_task[setup] = run(cfg, shards=shards)
        results[task] = per_task
    return results


def synth_table(results: dict) -> tuple:
    header = ["task_metric", *SYNTH_SETUPS]
    rows = []
    for task, metric in (("regression", "rmse"), ("classification", "accuracy")):
        per_task = results[task]
        row = [f"{task}_{metric}"]
        row += [_fmt(per_task[s].final_report.global_mean) for s in SYNTH_SETUPS]
        rows.append(row)
    return header, rows


def cmd_synth(config_path: str, out_dir: str) -> int:
    started = time.time()
    resolved = _load_config(config_path, _SYNTH_DEFAULTS)
    os.makedirs(out_dir, exist_ok=True)
    results = run_synth_experiments(resolved)
    header, rows = synth_table(results)
    csv_path = os.path.join(out_dir, "comparison.csv")
    _write_csv(csv_path, header, rows)
    _write_manifest(out_dir, "synth", resolved,
                    {"comparison": "comparison.csv"}, {}, started)
    print(f"wrote {csv_path}")
    return EXIT_OK


# --- character-image track --------------------------------------------------------

_ACQUISITION_NOTE = """\
character dataset not found.
Expected IDX files at the config's 'images' and 'labels' paths, e.g.
  emnist-byclass-train-images-idx3-ubyte.gz
  emnist-byclass-train-labels-idx1-ubyte.gz
from the EMNIST 'gzip' bundle on the NIST page
(https://www.nist.gov/itl/products-and-services/emnist-dataset).
Point the config at those files, or pass --allow-fallback to run on the
built-in synthetic glyphs instead."""


def _emnist_clients(resolved: dict):
    """Load-and-partition; returns (clients, source string)."""
    size = resolved["image_size"]
    if size not in (14, 28):
        raise ConfigError(f"image_size: must be 14 or 28, got {size}")
    images_path, labels_path = resolved["images"], resolved["labels"]
    have_files = (images_path and labels_path
                  and os.path.exists(images_path) and os.path.exists(labels_path))
    if have_files:
        images, labels = em.load_dataset(images_path, labels_path)
        if images.shape[1] % size:
            raise ConfigError(
                f"image_size: {images.shape[1]} px input does not reduce to {size}")
        factor = images.shape[1] // size
        data = em.downsample_images(images, factor) / 255.0 if factor > 1 \
            else images.astype(np.float64) / 255.0
        source = "idx"
    else:
        if not resolved["allow_fallback"]:
            raise em.MissingInputError(_ACQUISITION_NOTE)
        need = resolved["clients_per_group"] * (
            resolved["points_per_client"] + resolved["test_per_client"])
        per_class = resolved["fallback_per_class"] or -(-need // 10)
        data, labels = em.make_fallback_pool(per_class, size=size,
                                             seed=resolved["seed"])
        source = "fallback"
    rng = derive_stream(resolved["seed"], [em._PARTITION_LABEL])
    clients = em.partition_clients(data, labels,
                                   resolved["clients_per_group"],
                                   resolved["points_per_client"], rng,
                                   test_per_client=resolved["test_per_client"])
    return clients, source


def _emnist_fed_config(resolved: dict) -> FederationConfig:
    cfg = FederationConfig(
        task="emnist", model="cnn", clusters=3,
        peers_per_cluster=resolved["clients_per_group"],
        n_per_client=resolved["points_per_client"],
        features=resolved["image_size"] ** 2,
        rounds=resolved["rounds"],
        local_epochs=resolved["local_epochs"],
        batch_size=resolved["batch_size"],
        lr=resolved["lr"], wd=resolved["wd"],
        seed=resolved["seed"])
    cfg.validate()
    return cfg


def _per_char_rows(setups: dict, clients, chars) -> list:
    names = list(setups)
    tables = {n: dict((ch, (acc, cnt)) for ch, acc, cnt
                      in em.confusion_report(setups[n], clients, chars))
              for n in names}
    rows = []
    for ch in chars:
        row = [ch]
        row += [_fmt(tables[n][ch][0]) for n in names]
        row.append(tables[names[0]][ch][1])
        rows.append(row)
    return rows


def cmd_emnist(config_path: str, out_dir: str, allow_fallback: bool = False) -> int:
    started = time.time()
    resolved = _load_config(config_path, _EMNIST_DEFAULTS)
    if allow_fallback:
        resolved["allow_fallback"] = True
    for t in resolved["triplets"]:
        for ch in t:
            try:
                em.char_to_label(ch)
            except ValueError:
                raise ConfigError(f"triplets: no class for character {ch!r}")
    os.makedirs(out_dir, exist_ok=True)

    clients, source = _emnist_clients(resolved)
    fedcfg = _emnist_fed_config(resolved)
    setups = em.run_comparison(clients, fedcfg, nc=resolved["nc"])

    outputs = {}
    names = ["conditional", "global", "cluster", "client"]
    _write_csv(os.path.join(out_dir, "comparison.csv"),
               ["setup", "accuracy"],
               [[n, _fmt(setups[n].accuracy)] for n in names])
    outputs["comparison"] = "comparison.csv"

    header = ["char", *names, "count"]
    digits = [c for c in em.CHAR_ORDER if c.isdigit()]
    letters = [c for c in em.CHAR_ORDER if not c.isdigit()]
    _write_csv(os.path.join(out_dir, "characters_numbers.csv"), header,
               _per_char_rows(setups, clients, digits))
    outputs["characters_numbers"] = "characters_numbers.csv"
    _write_csv(os.path.join(out_dir, "characters_letters.csv"), header,
               _per_char_rows(setups, clients, letters))
    outputs["characters_letters"] = "characters_letters.csv"

    triplet_chars = [ch for t in resolved["triplets"] for ch in t]
    _write_csv(os.path.join(out_dir, "triplets.csv"), header,
               _per_char_rows(setups, clients, triplet_chars))
    outputs["triplets"] = "triplets.csv"

    if resolved["nc_sweep"]:
        sweep = em.component_sweep(fedcfg, resolved["nc_sweep"], clients)
        _write_csv(os.path.join(out_dir, "nc_sweep.csv"),
                   ["nc", "variant", "accuracy"],
                   [[nc, variant, _fmt(acc)] for nc, variant, acc in sweep])
        outputs["nc_sweep"] = "nc_sweep.csv"

    _write_manifest(out_dir, "emnist", resolved, outputs,
                    {"data_source": source}, started)
    print(f"wrote {len(outputs)} tables to {out_dir} (data: {source})")
    return EXIT_OK


# --- report ---------------------------------------------------------------------

def _read_csv(path: str) -> list:
    with open(path, "r", encoding="utf-8") as fh:
        return [line.rstrip("\n").split(",") for line in fh if line.strip()]


def cmd_report(manifest_path: str) -> int:
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise em.MissingInputError(f"manifest not found: {manifest_path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"manifest: not valid JSON ({exc})")
    outputs = manifest.get("outputs", {})
    if not outputs:
        print("no experiments recorded in manifest")
        return EXIT_OK
    base = os.path.dirname(os.path.abspath(manifest_path))
    print(f"run: track={manifest.get('track')} seed={manifest.get('seed')} "
          f"version={manifest.get('version')}")
    for name in sorted(outputs):
        path = os.path.join(base, outputs[name])
        if not os.path.exists(path):
            raise em.MissingInputError(f"listed output missing: {path}")
        rows = _read_csv(path)
        print(f"\n[{name}] {outputs[name]}")
        if name == "comparison" and manifest.get("track") == "synth":
            header, body = rows[0], rows[1:]
            for row in body:
                pairs = list(zip(header[1:], (float(v) for v in row[1:])))
                reverse = row[0].endswith("accuracy")
                ranked = sorted(pairs, key=lambda p: p[1], reverse=reverse)
                order = "  >  ".join(f"{n}={v:.4f}" for n, v in ranked)
                print(f"  {row[0]}: {order}")
        elif name == "comparison":
            for row in sorted(rows[1:], key=lambda r: -float(r[1])):
                print(f"  {row[0]:>12}: {row[1]}")
        else:
            for row in rows[:8]:
                print("  " + ",".join(row))
            if len(rows) > 8:
                print(f"  ... {len(rows) - 8} more rows")
    return EXIT_OK


# --- entry point ----------------------------------------------------------------

def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fedstat",
        description="Federated experiments conditioned on local statistics.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="synthetic cluster experiments")
    p_synth.add_argument("--config", required=True)
    p_synth.add_argument("--out", required=True)

    p_em = sub.add_parser("emnist", help="character-image experiments")
    p_em.add_argument("--config", required=True)
    p_em.add_argument("--out", required=True)
    p_em.add_argument("--allow-fallback", action="store_true",
                      help="use synthetic glyphs when IDX files are absent")

    p_rep = sub.add_parser("report", help="summarize a run manifest")
    p_rep.add_argument("--manifest", required=True)

    args = parser.parse_args(argv)
    try:
        if args.command == "synth":
            return cmd_synth(args.config, args.out)
        if args.command == "emnist":
            return cmd_emnist(args.config, args.out, args.allow_fallback)
        return cmd_report(args.manifest)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except em.MissingInputError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_MISSING
    except (em.FormatError, em.LengthError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
