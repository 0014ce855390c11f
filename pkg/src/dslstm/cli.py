"""Command-line entry point: synth, preprocess, train, evaluate, gradcheck, params.

Exit codes: 0 success, 1 validation error, 2 runtime or numeric failure.
Option values resolve as flag > ``--config`` file > built-in default.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import audio, dataset_io, gradcheck, synth, train
from .model import VARIANTS, ModelConfig, build_variant, count_parameters, parameter_table

log = logging.getLogger("dslstm")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class ConfigError(ValueError):
    pass


def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


@dataclass(frozen=True)
class Opt:
    name: str
    type: Callable[[str], Any]
    default: Any
    help: str
    choices: tuple | None = None


SEED = Opt("seed", int, 0, "single source of all randomness")
JOBS = Opt("jobs", int, 1, "worker processes for preprocessing / folds")

COMMANDS: dict[str, tuple[str, list[Opt]]] = {
    "synth": (
        "write a synthetic four-class corpus (WAVs + manifest)",
        [
            Opt("out", str, None, "output directory"),
            Opt("per_class", int, 50, "utterances per class"),
            Opt("min_duration", float, 1.0, "shortest clip in seconds"),
            Opt("max_duration", float, 3.0, "longest clip in seconds"),
            Opt("sample_rate", int, 16000, "sample rate in Hz"),
            SEED,
        ],
    ),
    "preprocess": (
        "extract MFCC and the two log-mel spectrograms into a DSL1 archive",
        [
            Opt("manifest", str, None, "CSV manifest (id,path,label,group)"),
            Opt("out", str, None, "archive path to write"),
            JOBS,
        ],
    ),
    "train": (
        "k-fold cross-validation of one model variant",
        [
            Opt("archive", str, None, "DSL1 feature archive"),
            Opt("out", str, "runs/train", "directory for checkpoints and reports"),
            Opt("variant", str, "dual", "model variant", VARIANTS),
            Opt("folds", int, 5, "number of folds"),
            Opt("split", str, "stratified_random", "fold strategy", ("stratified_random", "by_group")),
            Opt("manifest", str, None, "manifest supplying group keys for by_group"),
            Opt("epochs", int, 50, "maximum epochs per fold"),
            Opt("batch_size", int, 32, "mini-batch size"),
            Opt("patience", int, 8, "early-stop patience in epochs"),
            Opt("lr", float, 1e-4, "Adam learning rate"),
            Opt("clip_norm", float, 5.0, "global gradient-norm clip"),
            Opt("val_fraction", float, 0.1, "stratified validation holdout"),
            Opt("hidden", int, 200, "LSTM / DS-LSTM hidden units"),
            Opt("use_rbn", _bool, True, "recurrent batch norm on DS-LSTM gates"),
            Opt("rbn_position", str, "post_sigmoid", "where gate batch norm sits", ("post_sigmoid", "pre_sigmoid")),
            SEED,
            JOBS,
        ],
    ),
    "evaluate": (
        "score a checkpoint on an archive",
        [
            Opt("checkpoint", str, None, "DSLP checkpoint"),
            Opt("archive", str, None, "DSL1 feature archive"),
            Opt("split", str, "test", "test: ids stored in the checkpoint; all: whole archive", ("test", "all")),
            Opt("out", str, None, "confusion CSV path (default: next to the checkpoint)"),
        ],
    ),
    "gradcheck": (
        "finite-difference check of every differentiable op in float64",
        [
            Opt("scope", str, "all", "which suite", ("all", *gradcheck.SCOPES)),
            Opt("instances", int, gradcheck.INSTANCES, "random instances per op"),
            SEED,
        ],
    ),
    "params": (
        "per-layer parameter counts",
        [
            Opt("variant", str, "all", "model variant or all", ("all", *VARIANTS)),
            Opt("hidden", int, 200, "hidden units"),
            Opt("s1_mels", int, 64, "mel rows of the fine-time spectrogram"),
            Opt("s2_mels", int, 128, "mel rows of the fine-frequency spectrogram"),
        ],
    ),
}

REQUIRED = {"synth": ["out"], "preprocess": ["manifest", "out"], "train": ["archive"], "evaluate": ["checkpoint", "archive"]}


class _Parser(argparse.ArgumentParser):
    # usage mistakes are validation errors, not argparse's default exit 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dslstm", description="Dual-sequence LSTM speech emotion recognition toolkit.")
    sub = p.add_subparsers(dest="command", required=True)
    for cmd, (desc, opts) in COMMANDS.items():
        sp = sub.add_parser(cmd, help=desc, description=desc)
        sp.add_argument("--config", help="key=value file; flags override it")
        for o in opts:
            flag = "--" + o.name.replace("_", "-")
            kw = {"dest": o.name, "default": None, "help": f"{o.help} (default: {o.default})"}
            if o.choices:
                kw["choices"] = o.choices
            sp.add_argument(flag, type=str if o.type is _bool else o.type, **kw)
    return p


def read_config_file(path: str | Path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path} line {n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def resolve(command: str, ns: argparse.Namespace) -> dict[str, Any]:
    opts = {o.name: o for o in COMMANDS[command][1]}
    from_file = read_config_file(ns.config) if ns.config else {}
    unknown = sorted(set(from_file) - set(opts))
    if unknown:
        raise ConfigError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
    cfg = {}
    for name, o in opts.items():
        flag = getattr(ns, name)
        if flag is not None:
            raw = flag
        elif name in from_file:
            raw = from_file[name]
        else:
            cfg[name] = o.default
            continue
        try:
            val = o.type(raw)
        except ValueError as e:
            raise ConfigError(f"bad value for {name}: {e}") from None
        if o.choices and val not in o.choices:
            raise ConfigError(f"{name} must be one of {', '.join(o.choices)}, got {val!r}")
        cfg[name] = val
    missing = [k for k in REQUIRED.get(command, []) if cfg[k] is None]
    if missing:
        raise ConfigError(f"{command} needs " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return cfg


def _format_config(cfg: dict) -> str:
    return " ".join(f"{k}={v}" for k, v in sorted(cfg.items()))


# ---------------------------------------------------------------- commands


def cmd_synth(cfg) -> int:
    spec = synth.SyntheticSpec(cfg["per_class"], (cfg["min_duration"], cfg["max_duration"]), cfg["sample_rate"], cfg["seed"])
    out = Path(cfg["out"])
    wav_dir = out / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for u in synth.generate_synthetic(spec):
        path = wav_dir / f"{u.utterance_id}.wav"
        dataset_io.write_wav(path, u.clip)
        entries.append(dataset_io.ManifestEntry(u.utterance_id, str(path), u.label))
    dataset_io.write_manifest(out / "manifest.csv", entries)
    print(f"wrote {len(entries)} utterances and {out / 'manifest.csv'}")
    return EXIT_OK


def cmd_preprocess(cfg) -> int:
    entries = dataset_io.load_manifest(cfg["manifest"])
    if not entries:
        raise ConfigError("manifest has no utterances")
    clips, failures = [], {}
    for e in entries:
        try:
            clips.append(dataset_io.read_wav(e.wav_path))
        except (ValueError, OSError) as err:
            failures[e.utterance_id] = str(err)
    if failures:
        raise audio.CorpusError(failures)
    feats, (m1, m2) = audio.preprocess_corpus(clips, [e.utterance_id for e in entries], jobs=cfg["jobs"])
    records = [
        dataset_io.FeatureRecord(e.utterance_id, e.label_index, f.mfcc.values, f.s1.values, f.s2.values)
        for e, f in zip(entries, feats)
    ]
    dataset_io.write_features(cfg["out"], records)
    print(f"median frames: S1={m1} S2={m2}")
    print(f"wrote {len(records)} records to {cfg['out']}")
    return EXIT_OK


def cmd_train(cfg) -> int:
    records = dataset_io.read_features(cfg["archive"])
    if not records:
        raise ConfigError("archive holds no records")
    groups = None
    if cfg["split"] == "by_group":
        if not cfg["manifest"]:
            raise ConfigError("by_group split needs --manifest with a group column")
        gmap = {e.utterance_id: e.group for e in dataset_io.load_manifest(cfg["manifest"], check_files=False)}
        missing = [r.utterance_id for r in records if gmap.get(r.utterance_id) is None]
        if missing:
            raise ConfigError(f"no group for {len(missing)} utterance(s), e.g. {missing[0]}")
        groups = [gmap[r.utterance_id] for r in records]
    plan = train.make_folds(
        [r.utterance_id for r in records], [r.label for r in records], cfg["folds"], cfg["split"], cfg["seed"], groups
    )
    mcfg = ModelConfig(
        variant=cfg["variant"],
        hidden=cfg["hidden"],
        seed=cfg["seed"],
        s1_mels=records[0].s1.shape[0],
        s2_mels=records[0].s2.shape[0],
        mfcc_dim=records[0].mfcc.shape[1],
        use_rbn=cfg["use_rbn"],
        rbn_position=cfg["rbn_position"],
    )
    tcfg = train.TrainConfig(
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        patience=cfg["patience"],
        lr=cfg["lr"],
        clip_norm=cfg["clip_norm"],
        val_fraction=cfg["val_fraction"],
    )
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text("".join(f"{k}={v}\n" for k, v in sorted(cfg.items())))
    try:
        report = train.train_run(mcfg, tcfg, records, plan, cfg["seed"], out, cfg["jobs"])
    except train.TrainingDiverged as e:
        print(f"training diverged: {e}; partial report in {out}", file=sys.stderr)
        return EXIT_RUNTIME
    print(report.table(), end="")
    return EXIT_OK


def cmd_evaluate(cfg) -> int:
    ckpt = Path(cfg["checkpoint"])
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint {ckpt} not found")
    model, meta = train.load_checkpoint(ckpt)
    records = dataset_io.read_features(cfg["archive"])
    if cfg["split"] == "test":
        if "test_ids" not in meta:
            raise ConfigError("checkpoint stores no test split; use --split all")
        by_id = {r.utterance_id: r for r in records}
        missing = [i for i in meta["test_ids"] if i not in by_id]
        if missing:
            raise ConfigError(f"{len(missing)} test id(s) absent from the archive, e.g. {missing[0]}")
        records = [by_id[i] for i in meta["test_ids"]]
    res = train.evaluate(model, records, meta.get("train", {}).get("batch_size", 32))
    out = Path(cfg["out"]) if cfg["out"] else ckpt.with_name(f"{ckpt.stem}_{cfg['split']}_confusion.csv")
    train.write_confusion_csv(out, res.confusion)
    print(f"utterances {len(records)}")
    print(f"WA {res.wa:.6f}")
    print(f"UA {res.ua:.6f}")
    for name, r in zip(dataset_io.LABELS, res.recalls):
        print(f"recall {name:<8} {'n/a' if np.isnan(r) else f'{r:.6f}'}")
    print(f"confusion written to {out}")
    return EXIT_OK


def cmd_gradcheck(cfg) -> int:
    results = gradcheck.run_gradcheck(cfg["scope"], cfg["instances"], cfg["seed"])
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<28} max rel err {r.max_rel_err:.3e}  ({r.instances} instances)")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} ops within {gradcheck.TOLERANCE:g}")
    return EXIT_RUNTIME if failed else EXIT_OK


def variant_counts(variant: str, hidden: int, s1_mels: int, s2_mels: int):
    model = build_variant(ModelConfig(variant=variant, hidden=hidden, s1_mels=s1_mels, s2_mels=s2_mels))
    return parameter_table(model), count_parameters(model)


def cmd_params(cfg) -> int:
    dims = (cfg["hidden"], cfg["s1_mels"], cfg["s2_mels"])
    variants = VARIANTS if cfg["variant"] == "all" else (cfg["variant"],)
    for v in variants:
        table, total = variant_counts(v, *dims)
        print(f"[{v}]")
        for name, n in table:
            print(f"  {name:<28} {n:>12,}")
        print(f"  {'total':<28} {total:>12,}")
    _, base4 = variant_counts("base4", *dims)
    _, ds_only = variant_counts("ds_only", *dims)
    print(f"ds_only / base4 parameter ratio: {ds_only / base4:.3f}")
    return EXIT_OK


HANDLERS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "params": cmd_params,
}


def _setup_logging() -> None:
    level = os.environ.get("DSLSTM_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    ns = build_parser().parse_args(argv)
    try:
        cfg = resolve(ns.command, ns)
        log.info("%s resolved config: %s", ns.command, _format_config(cfg))
        return HANDLERS[ns.command](cfg)
    except (train.TrainingDiverged, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except RuntimeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
