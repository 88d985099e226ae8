"""Batch command-line runner: ``python -m lavender <command> [flags]``.

Every command writes under ``--out`` and finishes with a ``manifest.json``
of sha256 hashes. Exit codes: 0 success, 1 usage error, 2 data or config error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
from typing import Sequence

import numpy as np

from . import analysis
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .io import FormatError
from .spatial import export_map
from .teacher import COLORS, dataset_from_json, dataset_to_json, make_split, teacher_dir_save
from .tensor import NonFiniteError
from .trainer import TrainConfig, read_config_file, train, train_config_from, write_config_file
from .vlm import ToyVLM, VlmConfig, accuracy

__all__ = ["main", "run", "UsageError"]

COMMANDS = ("gen-data", "gen-teacher", "train", "eval", "inspect-attn", "entropy-report", "calibrate",
            "export-maps", "ablate-layers")
AGG_CHOICES = ("mean-mean", "mean-max", "max-mean", "max-max", "flow-mul", "flow-add", "learn")
ALIGNER_CHOICES = tuple(f"{d}-{k}" for d in ("light", "sim", "deep") for k in ("conv", "mlp"))


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# -- files --------------------------------------------------------------------------

def sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: str) -> str:
    files = {}
    for root, _, names in os.walk(out):
        for n in names:
            rel = os.path.relpath(os.path.join(root, n), out)
            if rel != "manifest.json":
                files[rel.replace(os.sep, "/")] = sha256(os.path.join(root, n))
    path = os.path.join(out, "manifest.json")
    with open(path, "w") as fh:
        json.dump({"files": dict(sorted(files.items()))}, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def load_data(folder: str, synth: bool = False):
    path = os.path.join(folder, "dataset.json")
    if not os.path.exists(path):
        raise DataError(f"no dataset.json in {folder}; run gen-data first")
    with open(path) as fh:
        doc = json.load(fh)
    teacher = None if synth else os.path.join(folder, "teacher")
    if teacher is not None and not os.path.isdir(teacher):
        raise DataError(f"no teacher/ directory in {folder}; run gen-teacher first")
    splits, vocab = dataset_from_json(doc, teacher)
    return doc, splits, vocab


# -- config assembly ------------------------------------------------------------------

def _vlm_keys(values: dict[str, str]) -> dict:
    out = {}
    for key, raw in values.items():
        name = key[len("vlm."):]
        if name in ("cross_layer_indices", "patch_grid"):
            out[name] = tuple(int(x) for x in raw.split(",") if x.strip())
        elif name in ("variant", "dtype"):
            out[name] = raw
        elif name == "zero_head":
            out[name] = raw.lower() in ("1", "true", "yes")
        else:
            out[name] = int(raw)
    return out


def build_configs(args) -> tuple[TrainConfig, dict, dict[str, str]]:
    values: dict[str, str] = {}
    if getattr(args, "config", None):
        if not os.path.exists(args.config):
            raise DataError(f"config file {args.config} not found")
        values.update(read_config_file(args.config))
    overrides = {
        "lambda": getattr(args, "lam", None),
        "seed": getattr(args, "seed", None),
        "agg_mode": getattr(args, "agg", None),
        "match_mode": getattr(args, "match", None),
        "ft_mode": getattr(args, "ft", None),
        "pretrain_epochs": getattr(args, "pretrain_epochs", None),
        "layer_subset": getattr(args, "layers", None),
        "aligner": getattr(args, "aligner", None),
        "epochs": getattr(args, "epochs", None),
    }
    values.update({k: str(v) for k, v in overrides.items() if v is not None})
    vlm = _vlm_keys({k: v for k, v in values.items() if k.startswith("vlm.")})
    train_values = {k: v for k, v in values.items() if not k.startswith("vlm.")}
    if "epochs" in train_values and "pretrain_epochs" not in train_values:
        train_values["pretrain_epochs"] = str(math.ceil(int(train_values["epochs"]) / 3))
    try:
        cfg = train_config_from(train_values)
    except (KeyError, ValueError) as exc:
        raise DataError(f"bad training config: {exc}") from None
    return cfg, vlm, values


# -- commands -------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    colors = list(COLORS)[: args.colors]
    grid = (args.grid, args.grid)
    train_set, test_set = make_split(args.n, args.n_test, grid=grid, seed=args.seed, colors=colors,
                                     sigma=args.sigma)
    os.makedirs(args.out, exist_ok=True)
    doc = dataset_to_json({"train": train_set, "test": test_set}, grid, colors, args.sigma, args.seed)
    with open(os.path.join(args.out, "dataset.json"), "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")
    if not args.no_teacher:
        teacher_dir_save(train_set + test_set, os.path.join(args.out, "teacher"))
    write_manifest(args.out)
    print(f"wrote {len(train_set)} train / {len(test_set)} held-out samples to {args.out}")
    return 0


def cmd_gen_teacher(args) -> int:
    _, splits, _ = load_data(args.data, synth=True)
    if args.sigma is not None:
        with open(os.path.join(args.data, "dataset.json")) as fh:
            doc = json.load(fh)
        doc["sigma"] = args.sigma
        splits, _ = dataset_from_json(doc, None)
    out = args.out or args.data
    paths = teacher_dir_save([p for data in splits.values() for p in data], os.path.join(out, "teacher"))
    write_manifest(out)
    print(f"wrote {len(paths)} teacher map files")
    return 0


def _new_model(vocab, cfg: TrainConfig, vlm: dict, grid) -> ToyVLM:
    vlm = {"vocab_size": len(vocab), "patch_grid": tuple(grid), **vlm}
    try:
        vcfg = VlmConfig(**vlm)
    except (TypeError, ValueError) as exc:
        raise DataError(f"bad model config: {exc}") from None
    return ToyVLM.init(vcfg, int(np.random.SeedSequence(cfg.seed).generate_state(1)[0]))


def _train_run(args, cfg: TrainConfig, vlm: dict, values: dict[str, str], out: str) -> tuple[float, object]:
    doc, splits, vocab = load_data(args.data)
    model = _new_model(vocab, cfg, vlm, doc["grid"])
    result = train(model, splits["train"], cfg, eval_data=splits.get("test"), vocab=vocab)
    os.makedirs(out, exist_ok=True)
    ck = Checkpoint(model, result.aligner, result.parallel, cfg.to_flat(), vocab,
                    {"vlm_overrides": {k: v for k, v in values.items() if k.startswith("vlm.")}})
    save_checkpoint(os.path.join(out, "checkpoint.lavm"), ck)
    result.log.write_csv(os.path.join(out, "trainlog.csv"))
    result.log.write_epochs_csv(os.path.join(out, "epochs.csv"))
    write_config_file(os.path.join(out, "config.txt"),
                      {**cfg.to_flat(), **{k: v for k, v in values.items() if k.startswith("vlm.")}})
    acc = accuracy(model, [s for s, _ in splits["test"]]) if splits.get("test") else float("nan")
    return acc, result


def cmd_train(args) -> int:
    cfg, vlm, values = build_configs(args)
    acc, _ = _train_run(args, cfg, vlm, values, args.out)
    write_manifest(args.out)
    print(f"held-out accuracy {acc:.4f}")
    return 0


def _load_ck(path: str) -> Checkpoint:
    if not os.path.exists(path):
        raise DataError(f"checkpoint {path} not found")
    return load_checkpoint(path)


def cmd_eval(args) -> int:
    ck = _load_ck(args.checkpoint)
    _, splits, _ = load_data(args.data, synth=True)
    if args.split not in splits:
        raise DataError(f"split {args.split!r} not in dataset")
    acc = accuracy(ck.model, [s for s, _ in splits[args.split]])
    print(f"{args.split} accuracy {acc:.4f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "eval.csv"), "w", newline="") as fh:
            csv.writer(fh).writerows([["split", "n", "accuracy"], [args.split, len(splits[args.split]), repr(acc)]])
        write_manifest(args.out)
    return 0


def _cfg_from_ck(ck: Checkpoint) -> TrainConfig:
    return train_config_from(ck.train_config) if ck.train_config else TrainConfig()


def cmd_inspect_attn(args) -> int:
    ck = _load_ck(args.checkpoint)
    _, splits, _ = load_data(args.data)
    pairs = {s.sample_id: (s, t) for data in splits.values() for s, t in data}
    if args.sample not in pairs:
        raise DataError(f"unknown sample id {args.sample!r}")
    cfg = _cfg_from_ck(ck)
    if ck.aligner is None:
        raise DataError("checkpoint has no aligner; train with lambda > 0 objective")
    maps = analysis.student_maps(ck.model, [pairs[args.sample]], cfg, ck.aligner, ck.parallel)
    os.makedirs(args.out, exist_ok=True)
    for sid, word, raw, aligned, teacher in maps:
        export_map(args.out, sid, word, raw, "_student_raw")
        export_map(args.out, sid, word, aligned, "_student_aligned")
        export_map(args.out, sid, word, teacher, "_teacher")
        print(f"{sid} {word}: entropy raw {analysis.map_entropy(raw):.3f} aligned "
              f"{analysis.map_entropy(aligned):.3f} teacher {analysis.map_entropy(teacher):.3f} nats")
    if not maps:
        print("no matched words for this sample")
    write_manifest(args.out)
    return 0


def cmd_entropy_report(args) -> int:
    doc, splits, vocab = load_data(args.data)
    data = splits[args.split]
    os.makedirs(args.out, exist_ok=True)
    reports = [analysis.entropy_histogram([m for _, t in data for m in t.maps.values()], args.bins, "teacher")]
    if args.checkpoint:
        ck = _load_ck(args.checkpoint)
        cfg = _cfg_from_ck(ck)
        fresh = ToyVLM.init(ck.model.config, int(np.random.SeedSequence(cfg.seed).generate_state(1)[0]))
        from .aggregation import ParallelAttnParams

        par0 = None
        if cfg.agg_mode.kind == "learned":
            par0 = ParallelAttnParams.init(fresh, ck.parallel.selected_layers, cfg.seed)
        pre = analysis.student_maps(fresh, data, cfg, None, par0)
        post = analysis.student_maps(ck.model, data, cfg, ck.aligner, ck.parallel)
        reports.append(analysis.entropy_histogram([m[2] for m in pre], args.bins, "student-pre"))
        reports.append(analysis.entropy_histogram([m[3] for m in post], args.bins, "student-post"))
    with open(os.path.join(args.out, "entropy_summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "n_maps", "mean_entropy_nats"])
        for r in reports:
            w.writerow([r.group, len(r.entropies), repr(r.mean)])
            r.write_csv(os.path.join(args.out, f"entropy_{r.group}.csv"))
            r.write_gnuplot(os.path.join(args.out, f"entropy_{r.group}.dat"))
            print(f"{r.group}: {len(r.entropies)} maps, mean entropy {r.mean:.4f} nats")
    write_manifest(args.out)
    return 0


def cmd_calibrate(args) -> int:
    from .trainer import TrainLog

    path = os.path.join(args.run, "epochs.csv")
    if not os.path.exists(path):
        raise DataError(f"no epochs.csv in {args.run}")
    log = TrainLog(epochs=TrainLog.read_epochs_csv(path))
    series = analysis.calibration_series(log)
    os.makedirs(args.out, exist_ok=True)
    series.write_csv(os.path.join(args.out, "calibration.csv"))
    r = series.correlation
    print("pearson r: " + ("absent (constant series)" if r is None else f"{r:.4f}"))
    write_manifest(args.out)
    return 0


def cmd_export_maps(args) -> int:
    _, splits, _ = load_data(args.data)
    data = splits[args.split]
    if args.limit is not None:
        data = data[: args.limit]
    os.makedirs(args.out, exist_ok=True)
    n = 0
    for sample, tset in data:
        for word, smap in tset.maps.items():
            export_map(args.out, sample.sample_id, word, smap.grid, "_teacher")
            n += 1
    write_manifest(args.out)
    print(f"exported {n} teacher maps")
    return 0


def layer_subsets(recorded: Sequence[int], k: int) -> dict[str, tuple[int, ...]]:
    recorded = list(recorded)
    k = max(1, min(k, len(recorded)))
    mid = (len(recorded) - k) // 2
    return {"first": tuple(recorded[:k]), "mid": tuple(recorded[mid:mid + k]),
            "last": tuple(recorded[-k:]), "all": tuple(recorded)}


def cmd_ablate_layers(args) -> int:
    cfg, vlm, values = build_configs(args)
    doc, _, vocab = load_data(args.data)
    recorded = _new_model(vocab, cfg, vlm, doc["grid"]).config.recorded_layers
    rows = []
    for name, subset in layer_subsets(recorded, args.k).items():
        sub_cfg = train_config_from({**cfg.to_flat(), "layer_subset": ",".join(str(i) for i in subset)})
        sub_values = {**values, **sub_cfg.to_flat()}
        acc, result = _train_run(args, sub_cfg, vlm, sub_values, os.path.join(args.out, name))
        last = result.log.epochs[-1]
        rows.append([name, " ".join(str(i) for i in subset), repr(acc),
                     "" if last.l_att is None else repr(last.l_att)])
        print(f"{name:5s} layers {subset}: held-out accuracy {acc:.4f}")
    with open(os.path.join(args.out, "layer_ablation.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subset", "layers", "heldout_acc", "final_l_att"])
        w.writerows(rows)
    write_manifest(args.out)
    return 0


# -- parser ---------------------------------------------------------------------------

def _add_train_flags(p) -> None:
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--agg", choices=AGG_CHOICES)
    p.add_argument("--match", choices=("exact", "root"))
    p.add_argument("--ft", choices=("full", "lora"))
    p.add_argument("--pretrain-epochs", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--layers")
    p.add_argument("--aligner", choices=ALIGNER_CHOICES)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lavender", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("gen-data", help="generate the colour-grid dataset and teacher maps")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--n-test", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", type=int, default=4)
    p.add_argument("--colors", type=int, default=8, choices=range(2, 9))
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--no-teacher", action="store_true", help="skip the LAVT files (see gen-teacher)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("gen-teacher", help="(re)write teacher LAVT files for a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--sigma", type=float)
    p.set_defaults(func=cmd_gen_teacher)

    p = sub.add_parser("train", help="train and write checkpoint plus logs")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="exact-match accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-attn", help="dump raw, aligned and teacher maps for one sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sample", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect_attn)

    p = sub.add_parser("entropy-report", help="entropy histograms of teacher and student maps")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="train")
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_entropy_report)

    p = sub.add_parser("calibrate", help="L_att versus held-out accuracy per epoch")
    p.add_argument("--run", required=True, help="output directory of a train run")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("export-maps", help="write teacher maps as PGM and CSV rasters")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--limit", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_maps)

    p = sub.add_parser("ablate-layers", help="train on first/mid/last/all layer subsets and compare")
    _add_train_flags(p)
    p.add_argument("-k", type=int, default=1, help="subset size")
    p.set_defaults(func=cmd_ablate_layers)
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except (DataError, FormatError, FileNotFoundError, KeyError, ValueError, NonFiniteError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
