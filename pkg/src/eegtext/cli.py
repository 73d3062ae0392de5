"""Command-line entry point.

Exit status: 0 success, 1 I/O failure, 2 argument or configuration error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import Config, ConfigError
from .container import ContainerError
from .dsp import EpochTensor, assemble_epochs, load_epochs, save_epochs
from .ingest import (DatasetManifest, IngestError, LabelMap, ManifestEntry, NoMatch, SynthSpec,
                     compile_pattern, parse_filename, read_trial, serialize_trial,
                     split_train_val, synth_generate)
from .model import Model
from .tensor import NonFiniteError
from .textgen import (BackendError, GenerationResult, PplRow, generate, ppl_table_csv,
                      score_predictions, summarize_ppl)
from .trainer import (LabelMismatch, TrainConfig, accuracy_table_csv, evaluate, fit,
                      load_checkpoint, save_checkpoint, sweep_data_efficiency, sweep_table_csv)

log = logging.getLogger("eegtext")

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    """Bad arguments discovered after parsing (exit 2)."""


# ----------------------------------------------------------------------
# helpers

def _config(args) -> Config:
    return Config.load(getattr(args, "config", None), getattr(args, "set", None) or [])


def _write(path, text: str) -> None:
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _read_manifest_trials(manifest_path, cfg: Config):
    manifest = DatasetManifest.read(manifest_path)
    root = Path(manifest_path).parent
    trials = []
    for e in manifest.entries:
        path = Path(e.path) if Path(e.path).is_absolute() else root / e.path
        if not path.exists():
            raise FileNotFoundError(f"trial file not found: {path}")
        tr = read_trial(path, cfg["paths.filename_pattern"])
        tr.label = e.label
        trials.append(tr)
    return manifest, trials


def _ensure_split(manifest: DatasetManifest, cfg: Config) -> DatasetManifest:
    if manifest.indices("val").size:
        return manifest
    return split_train_val(manifest, cfg["train.val_fraction"], cfg.seed_for("split"))


def _epochs_from_manifest(manifest_path, cfg: Config, dump_dir=None) -> EpochTensor:
    manifest, trials = _read_manifest_trials(manifest_path, cfg)
    manifest = _ensure_split(manifest, cfg)
    if dump_dir:
        Path(dump_dir).mkdir(parents=True, exist_ok=True)
    try:
        return assemble_epochs(trials, cfg.pipeline(), manifest.class_names,
                               [e.split for e in manifest.entries], dump_dir)
    except ValueError as exc:
        raise IngestError(str(exc)) from None


def _split_epochs(ep: EpochTensor, cfg: Config) -> tuple[EpochTensor, EpochTensor]:
    if not (ep.split == "val").any():
        m = DatasetManifest.from_trials([], ep.class_names)
        m.entries = [ManifestEntry(str(i), "", int(l)) for i, l in enumerate(ep.labels)]
        m = split_train_val(m, cfg["train.val_fraction"], cfg.seed_for("split"))
        ep.split = np.array([e.split for e in m.entries])
    return ep.where("train"), ep.where("val")


def _select(ep: EpochTensor, split: str) -> EpochTensor:
    if split == "all":
        return ep
    sub = ep.where(split)
    if len(sub) == 0:
        raise UsageError(f"epoch file has no {split!r} trials")
    return sub


def _new_model(cfg: Config, n_classes: int, class_names) -> Model:
    return Model.init(cfg.encoder(), cfg.classifier(n_classes), cfg.seed_for("init"), cfg.dtype,
                      class_names or None, cfg["dsp.length"])


def _parse_ks(text: str) -> list[int]:
    try:
        ks = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--k expects comma-separated integers, got {text!r}") from None
    if not ks or any(k < 1 for k in ks):
        raise UsageError("--k values must be positive")
    return ks


# ----------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    if args.classes < 2:
        raise UsageError("--classes must be at least 2")
    if args.per_class < 2:
        raise UsageError("--per-class must be at least 2")
    cfg = _config(args)
    seed = cfg.seed_for("synth") if args.seed is None else args.seed
    spec = SynthSpec(n_classes=args.classes, trials_per_class=args.per_class, seed=seed,
                     noise_sigma=args.noise, freq_step=args.freq_step)
    label_map = LabelMap.default(args.classes)
    try:
        trials = synth_generate(spec, label_map)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for tr in trials:
        (out / tr.path).write_text(serialize_trial(tr), encoding="utf-8")
    manifest = DatasetManifest.from_trials(trials, label_map.class_names)
    manifest = split_train_val(manifest, cfg["train.val_fraction"],
                               cfg.seed_for("split") if args.seed is None else args.seed + 1)
    manifest.write(out / "manifest.tsv")
    print(f"wrote {len(trials)} trials and {out / 'manifest.tsv'}")
    return EXIT_OK


def cmd_manifest(args) -> int:
    cfg = _config(args)
    label_map = LabelMap.default(args.classes)
    root = Path(args.data)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    rx = compile_pattern(cfg["paths.filename_pattern"])
    rows, skipped = [], 0
    for path in sorted(root.rglob("*.csv")):
        try:
            meta = parse_filename(path.name, rx)
        except NoMatch:
            skipped += 1
            continue
        label = label_map.synset_to_class.get(meta["synset"])
        if label is None:
            skipped += 1
            continue
        rows.append(ManifestEntry(str(path.resolve()), meta["synset"], label, "train",
                                  meta["session"], meta["global"]))
    if not rows:
        raise UsageError(f"no trial files in {root} match the {args.classes}-class label map")
    manifest = split_train_val(DatasetManifest(rows, label_map.class_names),
                               cfg["train.val_fraction"], cfg.seed_for("split"))
    manifest.write(args.out)
    print(f"{len(rows)} trials listed, {skipped} files skipped")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cfg = _config(args)
    ep = _epochs_from_manifest(args.manifest, cfg, args.debug_dump)
    save_epochs(ep, args.out)
    print(f"epochs {tuple(ep.data.shape)} -> {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    ep = load_epochs(args.epochs)
    train, val = _split_epochs(ep, cfg)
    n_classes = len(ep.class_names) or int(ep.labels.max()) + 1
    model = _new_model(cfg, n_classes, ep.class_names)
    tcfg = cfg.train()
    if tcfg.batch_size > len(train):
        tcfg = TrainConfig(**{**tcfg.to_dict(), "batch_size": len(train)})

    def report(row):
        if not args.quiet:
            print(f"epoch {row.epoch:3d}  loss {row.train_loss:.4f}  acc {row.train_acc:.3f}  "
                  f"val_loss {row.val_loss:.4f}  val_acc {row.val_acc:.3f}  lr {row.lr:.6f}")

    ck, metrics = fit(train, val, model, tcfg, report)
    save_checkpoint(ck, args.out)
    metrics.write(args.metrics)
    print(f"best epoch {ck.epoch} (val loss {ck.best_val_loss:.4f}); "
          f"{model.count_parameters()} parameters -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.ckpt)
    data = _select(load_epochs(args.epochs), args.split)
    rep = evaluate(ck, data)
    _write(args.out, accuracy_table_csv([(rep.n_classes, rep.accuracy)]))
    if args.confusion:
        names = rep.class_names
        lines = ["true\\pred," + ",".join(names)]
        lines += [names[i] + "," + ",".join(map(str, row)) for i, row in enumerate(rep.confusion)]
        _write(args.confusion, "\n".join(lines) + "\n")
    print(f"accuracy {rep.accuracy:.4f} on {len(data)} trials, loss {rep.mean_loss:.4f}")
    for name, acc in zip(rep.class_names, rep.per_class):
        print(f"  {name:<12s} {acc:.3f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    ks = _parse_ks(args.k)
    ep = _epochs_from_manifest(args.manifest, cfg)
    n_classes = len(ep.class_names)
    try:
        rows = sweep_data_efficiency(ep, ks, lambda: _new_model(cfg, n_classes, ep.class_names),
                                     cfg.train(), cfg.seed_for("subsample"))
    except ValueError as exc:
        if "infeasible" in str(exc):
            raise UsageError(str(exc)) from None
        raise
    _write(args.out, sweep_table_csv(rows))
    for r in rows:
        print(f"k={r.samples_per_class:<4d} accuracy {r.accuracy:.4f}")
    return EXIT_OK


def _backend(cfg: Config, text: str | None):
    try:
        return cfg.backend(text).build()
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_generate(args) -> int:
    cfg = _config(args)
    backend = _backend(cfg, args.backend)
    ck = load_checkpoint(args.ckpt)
    data = _select(load_epochs(args.epochs), args.split)
    preds = ck.model.predict(data.data)
    results = generate(preds, backend, cfg.template(), cfg["textgen.max_tokens"],
                       cfg["textgen.concurrency"])
    nc = ck.model.classifier.n_classes
    lines = [r.to_json(n_classes=nc, trial=(data.paths[i] if data.paths else i))
             for i, r in enumerate(results)]
    _write(args.out, "\n".join(lines) + ("\n" if lines else ""))
    print(f"{len(results)} generations -> {args.out}")
    return EXIT_OK


def _ppl_from_generations(path) -> list[PplRow]:
    groups: dict[int, list[list[float]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if rec.get("logprobs") is None:
                raise UsageError(f"{path}:{lineno}: generation has no log-probabilities")
            res = GenerationResult(rec.get("prompt", ""), rec["tokens"], rec["logprobs"],
                                   rec.get("backend", ""))
            nc = int(rec.get("n_classes", len(rec.get("probs", [])) or 0))
            groups.setdefault(nc, []).append(res.logprobs)
    return [summarize_ppl(nc, seqs) for nc, seqs in sorted(groups.items())]


def cmd_ppl(args) -> int:
    cfg = _config(args)
    if args.generations:
        if args.ckpt:
            raise UsageError("give either --generations or --ckpt, not both")
        rows = _ppl_from_generations(args.generations)
    else:
        if not args.ckpt or not args.epochs:
            raise UsageError("--ckpt and --epochs are required without --generations")
        epochs = args.epochs if len(args.epochs) == len(args.ckpt) else args.epochs * len(args.ckpt)
        if len(args.epochs) not in (1, len(args.ckpt)):
            raise UsageError("give one --epochs file, or one per --ckpt")
        backend = _backend(cfg, args.backend)
        refs = None
        ref_path = args.references or cfg["textgen.references"]
        if ref_path:
            refs = json.loads(Path(ref_path).read_text(encoding="utf-8"))
        rows = []
        for ck_path, ep_path in zip(args.ckpt, epochs):
            ck = load_checkpoint(ck_path)
            data = _select(load_epochs(ep_path), args.split)
            preds = ck.model.predict(data.data)
            seqs = score_predictions(preds, backend, cfg.template(), refs,
                                     cfg["textgen.max_tokens"])
            rows.append(summarize_ppl(ck.model.classifier.n_classes, seqs))
        rows.sort(key=lambda r: r.n_classes)
    _write(args.out, ppl_table_csv(rows))
    for r in rows:
        print(f"n_classes={r.n_classes:<3d} ppl {r.mean_ppl:.3f}  bpc {r.mean_bpc:.3f}  "
              f"({r.n_sequences} sequences)")
    return EXIT_OK


# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eegtext", description="EEG classification and "
                                "class-conditioned text generation pipeline.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="configuration file (section.key = value lines)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")

    sp = sub.add_parser("synth", help="write synthetic trials and a manifest")
    sp.add_argument("--classes", type=int, required=True)
    sp.add_argument("--per-class", type=int, required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--noise", type=float, default=1.0, help="noise standard deviation")
    sp.add_argument("--freq-step", type=float, default=3.0, help="Hz between class frequencies")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("manifest", help="index a directory of recorded trial files")
    sp.add_argument("--data", required=True)
    sp.add_argument("--classes", type=int, required=True, choices=(2, 5, 10))
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_manifest)

    sp = sub.add_parser("preprocess", help="filter trials into an epoch file")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--debug-dump", metavar="DIR", help="also write <trial>.filtered.csv files")
    common(sp)
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("train", help="fit a model on an epoch file")
    sp.add_argument("--epochs", required=True, help="epoch file from 'preprocess'")
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--metrics", required=True, help="per-epoch metrics CSV")
    sp.add_argument("-q", "--quiet", action="store_true")
    common(sp)
    sp.set_defaults(func=cmd_train)

    def split_arg(sp, default):
        sp.add_argument("--split", choices=("train", "val", "all"), default=default)

    sp = sub.add_parser("eval", help="accuracy and confusion matrix of a checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--epochs", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--confusion", help="optional confusion-matrix CSV")
    split_arg(sp, "val")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="accuracy against training trials per class")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--k", default="10,25,50,100")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("generate", help="class-conditioned completions as JSON lines")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--epochs", required=True)
    sp.add_argument("--backend", help="builtin[:CORPUS] | uniform:V | remote:URL")
    sp.add_argument("--out", required=True)
    split_arg(sp, "val")
    common(sp)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("ppl", help="perplexity table per class count")
    sp.add_argument("--generations", help="JSONL written by 'generate'")
    sp.add_argument("--ckpt", action="append", help="checkpoint (repeatable)")
    sp.add_argument("--epochs", action="append", help="epoch file (one, or one per --ckpt)")
    sp.add_argument("--backend", help="builtin[:CORPUS] | uniform:V | remote:URL")
    sp.add_argument("--references", help="JSON object mapping class name to reference text")
    sp.add_argument("--out", required=True)
    split_arg(sp, "val")
    common(sp)
    sp.set_defaults(func=cmd_ppl)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, LabelMismatch) as exc:
        print(f"eegtext {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"eegtext {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, IngestError, ContainerError, BackendError, KeyError) as exc:
        print(f"eegtext {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"eegtext {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
