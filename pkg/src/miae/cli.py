"""Command-line entry points.

Every command resolves its configuration from an optional JSON file, the
``--seed``/``--out`` flags and ``--key=value`` overrides (dotted keys reach
into sections, e.g. ``--train.base_lr=1e-3``), writes the resolved copy to
``<out>/config.json`` and only then starts work.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from collections import Counter
from pathlib import Path

import numpy as np
import torch

from miae import __version__
from miae.datatools import (DEFAULT_RATIOS, SPLIT_NAMES, ManifestRow, process_cath_labels,
                            read_manifest, read_splits, stratified_split,
                            write_labelmap, write_manifest, write_splits)
from miae.errors import (ConfigError, DegenerateFrameError, DomainError, InvalidMaskError,
                         LabelError, LengthError, MiAEError, ParseError, ProbeError, ShapeError,
                         SplitError, StepError)
from miae.evaluation import PROBE_GRID, classification_metrics, embed_many, linear_probe
from miae.geometry import backbone_rmsd
from miae.masking import STRATEGIES
from miae.model import (FoldClassifier, MiAE, ModelConfig, collate, load_checkpoint,
                         model_from_checkpoint)
from miae.structure_io import (load_backbones, passes_plddt_filter, read_pdb, save_backbones,
                               write_pdb)
from miae.synthetic import FAMILIES, make_dataset
from miae.training import (TrainConfig, classifier_from_pretrained, reconstruct,
                           run_classification, run_pretraining)

log = logging.getLogger("miae")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "MIAE_NUM_THREADS"

# stand-in CATH codes so synthetic families flow through prepare-data
FAMILY_CODES = {"helix": "1.10.10", "beta_hairpin": "2.10.10", "helix_loop_helix": "1.10.20"}

DEFAULTS = {
    "prepare-data": {"manifest": None, "cutoff": None, "ratios": list(DEFAULT_RATIOS),
                     "plddt_threshold": 80.0},
    "pretrain": {"model": {"preset": "tiny"}, "train": {}, "data": {}},
    "scratch": {"model": {"preset": "tiny"}, "train": {}, "data": {}},
    "finetune": {"checkpoint": None, "train": {}, "data": {}},
    "probe": {"checkpoint": None, "pooling": "mean", "grid": list(PROBE_GRID), "data": {}},
    "embed": {"checkpoint": None, "pooling": "mean", "data": {}},
    "reconstruct": {"checkpoint": None, "ratios": [0.0, 0.5, 0.7, 0.9], "strategy": "random",
                    "limit": 0, "data": {}},
    "synth": {"count": 60, "families": list(FAMILIES), "min_length": 24, "max_length": 48},
}
DATA_KEYS = {"manifest", "backbones", "splits", "split"}
COMMON_KEYS = {"seed", "out"}


# ---------------------------------------------------------------- config


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(tokens: list[str]) -> dict:
    """``--a.b=1 --c 2`` -> {"a.b": 1, "c": 2}; values are JSON when they parse."""
    out, i = {}, 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or len(tok) < 3:
            raise ConfigError(f"unexpected argument {tok!r}; overrides take the form --key=value")
        key, eq, val = tok[2:].partition("=")
        if not eq:
            if i + 1 >= len(tokens) or tokens[i + 1].startswith("--"):
                raise ConfigError(f"override --{key} needs a value")
            i += 1
            val = tokens[i]
        out[key.replace("-", "_")] = _parse_value(val)
        i += 1
    return out


def _set_dotted(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {key!r}: {p!r} is not a section")
    node[parts[-1]] = value


def resolve_config(command: str, config_path=None, seed=None, out=None,
                   overrides: dict | None = None) -> dict:
    """Merge defaults, the config file and flag overrides, then validate."""
    cfg = copy.deepcopy(DEFAULTS[command])
    cfg.update(seed=0, out=None)
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {config_path}: {e}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{config_path}: top level must be an object")
        saved_cmd = loaded.pop("command", command)
        loaded.pop("version", None)
        if saved_cmd != command:
            raise ConfigError(f"{config_path} was written by '{saved_cmd}', not '{command}'")
        for k, v in loaded.items():
            if isinstance(v, dict) and isinstance(cfg.get(k), dict):
                cfg[k] = {**cfg[k], **v}
            else:
                cfg[k] = v
    for k, v in (overrides or {}).items():
        _set_dotted(cfg, k, v)
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = out
    try:
        _validate(command, cfg)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"invalid configuration: {e}") from None
    return cfg


def _validate(command: str, cfg: dict) -> None:
    allowed = set(DEFAULTS[command]) | COMMON_KEYS
    unknown = set(cfg) - allowed
    if unknown:
        raise ConfigError(f"unknown option(s) for {command}: {sorted(unknown)}")
    if not cfg.get("out"):
        raise ConfigError("an output directory is required (--out)")
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    if "data" in cfg:
        bad = set(cfg["data"]) - DATA_KEYS
        if bad:
            raise ConfigError(f"unknown data option(s): {sorted(bad)}")
        if command != "synth" and not (cfg["data"].get("manifest") or cfg["data"].get("backbones")):
            raise ConfigError("data.manifest or data.backbones is required")
    if "checkpoint" in cfg and not cfg["checkpoint"]:
        raise ConfigError(f"{command} needs --checkpoint")
    if "pooling" in cfg and cfg["pooling"] not in ("mean", "cls"):
        raise ConfigError("pooling must be 'mean' or 'cls'")
    if "model" in cfg:
        ModelConfig.from_dict(cfg["model"])
    if "train" in cfg:
        mode = "pretrain" if command == "pretrain" else command
        TrainConfig.for_mode(mode, **{"seed": cfg["seed"], **cfg["train"]})
    if command == "prepare-data":
        if not cfg["manifest"]:
            raise ConfigError("prepare-data needs --manifest")
        if cfg["cutoff"] is None:
            raise ConfigError("prepare-data needs an explicit --cutoff (minimum class size)")
        if not isinstance(cfg["cutoff"], int) or cfg["cutoff"] < 1:
            raise ConfigError("cutoff must be a positive integer")
        ratios = cfg["ratios"]
        if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1) > 1e-9:
            raise ConfigError("ratios must be three positive numbers summing to 1")
    if command == "reconstruct":
        if cfg["strategy"] not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}")
        if any(not 0 <= r < 1 for r in cfg["ratios"]):
            raise ConfigError("masking ratios must lie in [0, 1)")
    if command == "probe" and not cfg["data"].get("splits"):
        raise ConfigError("probe needs data.splits")
    if command in ("finetune", "scratch") and not cfg["data"].get("splits"):
        raise ConfigError(f"{command} needs data.splits")


def write_resolved(command: str, cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "version": __version__, **cfg}
    (out / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return out


# ------------------------------------------------------------------ data


def load_data(data: dict) -> list:
    """Backbones from a .npz container or from the PDB paths of a manifest."""
    if data.get("backbones"):
        backbones = load_backbones(data["backbones"])
    else:
        backbones = [read_pdb(r.path, id=r.id) for r in read_manifest(data["manifest"])]
    if data.get("splits") and data.get("split"):
        keep = {sid for sid, _, split in read_splits(data["splits"]) if split == data["split"]}
        backbones = [b for b in backbones if b.id in keep]
    if not backbones:
        raise LabelError("no structures selected")
    return backbones


def labelled_splits(backbones, splits_path) -> tuple[dict, list]:
    """{split: (backbones, label indices)} plus the sorted label list."""
    rows = read_splits(splits_path)
    labels = sorted({lab for _, lab, _ in rows})
    index = {lab: i for i, lab in enumerate(labels)}
    by_id = {b.id: b for b in backbones}
    parts = {s: ([], []) for s in SPLIT_NAMES}
    for sid, lab, split in rows:
        if sid not in by_id:
            raise LabelError(f"split file lists unknown structure {sid!r}")
        parts[split][0].append(by_id[sid])
        parts[split][1].append(index[lab])
    return {s: (bs, np.array(ys, dtype=np.int64)) for s, (bs, ys) in parts.items()}, labels


def _write_json(path, record) -> None:
    Path(path).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


# -------------------------------------------------------------- commands


def cmd_prepare_data(cfg, out: Path) -> dict:
    rows = read_manifest(cfg["manifest"])
    kept, dropped = [], 0
    for r in rows:
        plddt = r.plddt
        if np.isnan(plddt):
            ok = passes_plddt_filter(read_pdb(r.path, id=r.id), cfg["plddt_threshold"])
        else:
            ok = plddt > cfg["plddt_threshold"]
        if ok:
            kept.append(r)
        else:
            dropped += 1
    if not kept:
        raise LabelError("no structure passes the pLDDT filter")
    lm = process_cath_labels([r.cath for r in kept], cfg["cutoff"])
    sm = stratified_split(lm.assignment, cfg["ratios"], cfg["seed"])
    ids = [r.id for r in kept]
    write_labelmap(lm, out / "labelmap.tsv")
    write_splits(ids, lm, sm, out / "splits.tsv")
    counts = np.asarray(lm.counts)
    summary = {
        "input": len(rows),
        "plddt_filtered": dropped,
        "below_cutoff_dropped": int(np.sum(lm.assignment < 0)),
        "classes": len(lm.labels),
        "min_class_size": int(counts.min()) if counts.size else 0,
        "max_class_size": int(counts.max()) if counts.size else 0,
        "split_sizes": {s: int(np.sum(sm.assignment == k)) for k, s in enumerate(SPLIT_NAMES)},
    }
    _write_json(out / "summary.json", summary)
    return summary


def cmd_synth(cfg, out: Path) -> dict:
    backbones, fams = make_dataset(cfg["count"], seed=cfg["seed"], families=tuple(cfg["families"]),
                                   min_length=cfg["min_length"], max_length=cfg["max_length"])
    (out / "pdb").mkdir(exist_ok=True)
    rows = []
    for b, fam in zip(backbones, fams):
        path = out / "pdb" / f"{b.id}.pdb"
        write_pdb(b, path)
        rows.append(ManifestRow(b.id, FAMILY_CODES.get(fam, fam), float(np.mean(b.plddt)),
                                f"pdb/{b.id}.pdb"))
    write_manifest(rows, out / "manifest.tsv")
    save_backbones(backbones, out / "backbones.npz")
    return {"structures": len(backbones), "families": dict(Counter(fams))}


def _train_cfg(cfg, mode) -> TrainConfig:
    return TrainConfig.for_mode(mode, **{"seed": cfg["seed"], **cfg["train"]})


def _progress(every=50):
    def report(step, rec):
        if step % every == 0:
            d = rec.as_dict() if hasattr(rec, "as_dict") else rec
            log.info("step %d %s", step, {k: round(float(v), 4) for k, v in d.items()})
    return report


def cmd_pretrain(cfg, out: Path) -> dict:
    torch.manual_seed(cfg["seed"])
    tcfg = _train_cfg(cfg, "pretrain")
    model = MiAE(ModelConfig.from_dict(cfg["model"]))
    state = run_pretraining(load_data(cfg["data"]), model, tcfg, out, progress=_progress())
    return {"steps": state.step, "checkpoint": str(out / "final.pt")}


def _classify(cfg, out: Path, model: FoldClassifier, mode: str) -> dict:
    parts, labels = labelled_splits(load_data({**cfg["data"], "split": None}), cfg["data"]["splits"])
    if model.head.out_features != len(labels):
        raise ConfigError(f"model has {model.head.out_features} classes, splits have {len(labels)}")
    tcfg = _train_cfg(cfg, mode)
    train_b, train_y = parts["train"]
    state = run_classification(train_b, train_y, model, tcfg, out, progress=_progress())
    report = {"steps": state.step, "labels": labels}
    for split in ("val", "test"):
        bs, ys = parts[split]
        if bs:
            report[split] = classification_metrics(predict(state.model, bs), ys,
                                                   labels=range(len(labels)))
    _write_json(out / "eval.json", report)
    return report


@torch.no_grad()
def predict(model: FoldClassifier, backbones, batch_size: int = 32) -> np.ndarray:
    model.eval()
    dtype = next(model.parameters()).dtype
    preds = []
    for i in range(0, len(backbones), batch_size):
        batch = collate(backbones[i:i + batch_size], dtype=dtype, max_length=model.cfg.max_length)
        preds.append(model(batch).argmax(-1).numpy())
    return np.concatenate(preds)


def _num_labels(cfg) -> int:
    return len({lab for _, lab, _ in read_splits(cfg["data"]["splits"])})


def cmd_scratch(cfg, out: Path) -> dict:
    torch.manual_seed(cfg["seed"])
    model = FoldClassifier(ModelConfig.from_dict(cfg["model"]), _num_labels(cfg),
                           _train_cfg(cfg, "scratch").pooling)
    return _classify(cfg, out, model, "scratch")


def _load_autoencoder(path) -> MiAE:
    payload = load_checkpoint(path)
    if payload["kind"] != "autoencoder":
        raise ConfigError(f"{path} holds a {payload['kind']} checkpoint, expected an autoencoder")
    return model_from_checkpoint(payload)


def cmd_finetune(cfg, out: Path) -> dict:
    torch.manual_seed(cfg["seed"])
    mae = _load_autoencoder(cfg["checkpoint"])
    model = classifier_from_pretrained(mae, _num_labels(cfg), _train_cfg(cfg, "finetune").pooling)
    return _classify(cfg, out, model, "finetune")


def _encoder_model(path):
    return model_from_checkpoint(path).double()


def cmd_embed(cfg, out: Path) -> dict:
    model = _encoder_model(cfg["checkpoint"])
    emb = embed_many(load_data(cfg["data"]), model, cfg["pooling"])
    emb.save(out / "embeddings")
    return {"structures": len(emb.ids), "dim": int(emb.vectors.shape[1])}


def cmd_probe(cfg, out: Path) -> dict:
    model = _encoder_model(cfg["checkpoint"])
    parts, labels = labelled_splits(load_data({**cfg["data"], "split": None}), cfg["data"]["splits"])
    emb = {s: embed_many(bs, model, cfg["pooling"]).vectors if bs else None
           for s, (bs, _) in parts.items()}
    if emb["val"] is None:
        raise LabelError("probing needs a non-empty validation split")
    res = linear_probe(emb["train"], parts["train"][1], emb["val"], parts["val"][1],
                       grid=cfg["grid"])
    report = {"C": res.C, "val_accuracy": res.val_accuracy,
              "grid_accuracy": {f"{c:g}": a for c, a in res.grid_accuracy.items()},
              "labels": labels}
    for split in ("val", "test"):
        if emb[split] is not None:
            report[split] = classification_metrics(res.predict(emb[split]), parts[split][1],
                                                   labels=range(len(labels)))
    _write_json(out / "probe.json", report)
    return report


def cmd_reconstruct(cfg, out: Path) -> dict:
    model = _load_autoencoder(cfg["checkpoint"]).double()
    backbones = load_data(cfg["data"])
    if cfg["limit"]:
        backbones = backbones[:cfg["limit"]]
    (out / "pdb").mkdir(exist_ok=True)
    means = {}
    with open(out / "rmsd.tsv", "w") as fh:
        fh.write("id\tratio\tlength\tmasked\trmsd_backbone\trmsd_ca\n")
        for r in cfg["ratios"]:
            vals = []
            for i, b in enumerate(backbones):
                coords, plan = reconstruct(model, b, r, cfg["strategy"], seed=cfg["seed"] + i)
                flags = plan.mask.astype(float)
                write_pdb(b.replace(coords=coords), out / "pdb" / f"{b.id}_r{r:.2f}.pdb",
                          bfactors=flags)
                bb = backbone_rmsd(coords, b.coords)
                ca = backbone_rmsd(coords, b.coords, atoms="ca")
                fh.write(f"{b.id}\t{r:g}\t{len(b)}\t{int(flags.sum())}\t{bb:.4f}\t{ca:.4f}\n")
                vals.append(bb)
            means[f"{r:g}"] = float(np.mean(vals))
    _write_json(out / "rmsd_summary.json", {"mean_rmsd_backbone": means})
    return {"mean_rmsd_backbone": means}


COMMANDS = {
    "prepare-data": (cmd_prepare_data, "aggregate CATH labels and write stratified splits"),
    "pretrain": (cmd_pretrain, "masked autoencoder pretraining"),
    "scratch": (cmd_scratch, "supervised fold classification from random initialization"),
    "finetune": (cmd_finetune, "fine-tune a pretrained encoder for fold classification"),
    "probe": (cmd_probe, "linear probe on frozen embeddings"),
    "embed": (cmd_embed, "export pooled encoder embeddings"),
    "reconstruct": (cmd_reconstruct, "reconstruct masked structures and score RMSD"),
    "synth": (cmd_synth, "write a synthetic toy dataset (PDBs + manifest)"),
}


# ------------------------------------------------------------------ main


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="miae", description="Masked invariant autoencoders for protein backbones.")
    parser.add_argument("--version", action="version", version=f"miae {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text,
                           epilog="additional options: --key=value (dotted keys for sections)")
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (StepError, DomainError)):
        return EXIT_NUMERIC
    if isinstance(exc, (ParseError, LabelError, SplitError, ProbeError, LengthError, ShapeError,
                        DegenerateFrameError, InvalidMaskError, OSError)):
        return EXIT_DATA
    return EXIT_DATA if isinstance(exc, MiAEError) else EXIT_NUMERIC


def main(argv=None) -> int:
    args, rest = build_parser().parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    threads = os.environ.get(THREADS_ENV)
    if threads:
        try:
            torch.set_num_threads(int(threads))
        except ValueError:
            print(f"miae: error: {THREADS_ENV} must be an integer", file=sys.stderr)
            return EXIT_CONFIG
    try:
        cfg = resolve_config(args.command, args.config, args.seed, args.out, parse_overrides(rest))
        out = write_resolved(args.command, cfg)
        result = COMMANDS[args.command][0](cfg, out)
    except Exception as exc:  # mapped onto the documented exit codes
        if args.verbose or not isinstance(exc, (MiAEError, OSError)):
            log.error("traceback", exc_info=exc)
        print(f"miae {args.command}: error: {exc}", file=sys.stderr)
        return exit_code(exc)
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
