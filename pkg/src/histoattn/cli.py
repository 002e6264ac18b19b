"""Command-line entry point: synth, preprocess, train, eval, gradcheck, report.

Exit codes: 0 ok, 1 check failure, 2 configuration, 3 data or I/O, 4 numeric.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data as data_mod
from .backbone import ModelConfig, build_model, load_checkpoint, save_checkpoint, spatial_attention_maps
from .checks import TARGETS, run_target
from .errors import ConfigError, ContractError, DataError, IoError, NumericError
from .formats import (IMAGE_SUFFIXES, config_hash, heatmap_to_image, read_image,
                      write_image, write_raw_tensor)
from .metrics import evaluate
from .preprocess import PreprocessConfig, clahe, median_filter, run_pipeline, zero_pad
from .training import TrainConfig, train

log = logging.getLogger("histoattn")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass
class DataConfig:
    root: Optional[str] = None
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    by_patient: bool = True
    magnification: Optional[str] = None

    def __post_init__(self):
        self.split_fractions = tuple(float(v) for v in self.split_fractions)


@dataclass
class RunConfig:
    """Everything that determines a run's results, plus where it writes.

    ``seed`` is the single source of randomness; ``resolve`` copies it into the
    preprocess, model and train sections.
    """
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out: Optional[str] = None
    seed: int = 0

    def resolve(self) -> "RunConfig":
        self.preprocess.seed = self.model.seed = self.train.seed = self.seed
        self.preprocess.validate()
        self.model.validate()
        self.train.validate()
        mag = self.data.magnification
        if mag is not None and mag not in data_mod.MAGNIFICATIONS:
            raise ConfigError(f"magnification must be one of {data_mod.MAGNIFICATIONS}, got {mag!r}")
        return self

    def to_dict(self) -> dict:
        return {"preprocess": self.preprocess.to_dict(), "model": self.model.to_dict(),
                "train": self.train.to_dict(),
                "data": {"root": self.data.root, "split_fractions": list(self.data.split_fractions),
                         "by_patient": self.data.by_patient, "magnification": self.data.magnification},
                "out": self.out, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {"preprocess", "model", "train", "data", "out", "seed", "config_hash"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            return cls(preprocess=PreprocessConfig.from_dict(d.get("preprocess", {})),
                       model=ModelConfig.from_dict(d.get("model", {})),
                       train=TrainConfig.from_dict(d.get("train", {})),
                       data=DataConfig(**d.get("data", {})),
                       out=d.get("out"), seed=int(d.get("seed", 0)))
        except TypeError as exc:
            raise ConfigError(f"bad config: {exc}") from exc

    @property
    def hash(self) -> str:
        return config_hash(_hashable(self))


def _hashable(rc: RunConfig) -> dict:
    # locations do not change results: the data content is tracked by the
    # manifest fingerprint instead
    d = rc.to_dict()
    d.pop("out")
    d["data"] = {k: v for k, v in d["data"].items() if k != "root"}
    return d


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc


def _set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    for p in parts[:-1]:
        d = d.setdefault(p, {})
    d[parts[-1]] = value


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_run_config(path=None, overrides: Sequence[tuple[str, object]] = ()) -> RunConfig:
    """JSON file (optional) with ``section.key`` overrides applied on top."""
    d = _read_json(path) if path else {}
    for key, value in overrides:
        if value is not None:
            _set_dotted(d, key, value)
    return RunConfig.from_dict(d).resolve()


def _write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _with_hash_line(text: str, h: str) -> str:
    return f"# config_hash={h}\n{text}"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    try:
        paths = data_mod.generate_synthetic(args.out, args.n_per_class, tuple(args.size), args.seed)
    except IoError as exc:
        # synth reports write failures as a usage problem with --out
        log.error("%s", exc)
        return EXIT_CONFIG
    m = data_mod.scan_dataset(args.out)
    counts = m.counts()
    print(f"wrote {len(paths)} images to {args.out}")
    for label, cls in enumerate(data_mod.CLASS_DIRS):
        row = " ".join(f"{mag}={counts[(label, mag, None)]}" for mag in data_mod.MAGNIFICATIONS)
        print(f"  {cls:9s} {row}")
    print(f"fingerprint {m.fingerprint}")
    return EXIT_OK


def _infer_channels(records) -> int:
    img = read_image(records[0].path)
    return 1 if img.ndim == 2 else img.shape[2]


def _split_manifest(rc: RunConfig) -> data_mod.Manifest:
    m = data_mod.scan_dataset(rc.data.root)
    for w in m.warnings:
        log.warning("skipped %s", w)
    if not m.records:
        raise DataError(f"no images found under {rc.data.root}")
    return data_mod.split_stratified(m, rc.data.split_fractions, rc.seed, rc.data.by_patient)


def cmd_train(args) -> int:
    rc = load_run_config(args.config, [
        ("data.root", str(args.data)), ("seed", args.seed), ("train.max_epochs", args.epochs),
        ("train.learning_rate", args.lr), ("train.batch_size", args.batch_size),
        ("train.optimizer", args.optimizer), ("train.early_stopping_patience", args.patience),
        ("model.attention", args.attention), ("data.magnification", args.magnification),
        ("preprocess.target_size", args.image_size and [args.image_size] * 2),
        *(_split_set(s) for s in args.set or ()),
    ])
    rc.out = str(args.out)
    m = _split_manifest(rc)
    train_recs = m.select("train", rc.data.magnification)
    val_recs = m.select("val", rc.data.magnification)
    if not train_recs or not val_recs:
        raise DataError("train and val splits must both be non-empty")
    rc.model.in_channels = _infer_channels(train_recs)
    h = rc.hash
    out = Path(args.out)
    train_set = data_mod.ImageSet(train_recs, rc.preprocess, augment_train=True)
    val_set = data_mod.ImageSet(val_recs, rc.preprocess, augment_train=False)
    model = build_model(rc.model)
    print(f"config {h}: {len(train_set)} train / {len(val_set)} val images, "
          f"{model.parameter_count} parameters")

    def show(r):
        print(f"epoch {r.epoch:3d}  train {r.train_loss:.4f}  val {r.val_loss:.4f}  acc {r.val_acc:.4f}")

    model, tlog = train(model, train_set, val_set, rc.train, log_fn=None if args.quiet else show)
    save_checkpoint(out / "best.ckpt", model, extra={"config_hash": h, "run_config": {**rc.to_dict(), "out": None},
                                                    "best_epoch": tlog.best_epoch})
    _write_text(out / "trainlog.csv", _with_hash_line(tlog.to_csv(), h))
    body = json.loads(tlog.to_json())
    body["config_hash"] = h
    _write_text(out / "trainlog.json", json.dumps(body, indent=2))
    _write_text(out / "run_config.json", json.dumps({**rc.to_dict(), "config_hash": h}, indent=2))
    _write_text(out / "manifest.csv", m.to_csv())
    print(f"best epoch {tlog.best_epoch}; wrote {out / 'best.ckpt'}")
    return EXIT_OK


def _split_set(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), _parse_value(v)


def cmd_eval(args) -> int:
    model, header = load_checkpoint(args.checkpoint)
    extra = header.get("extra", {})
    if "run_config" not in extra:
        raise DataError(f"{args.checkpoint} carries no run configuration")
    rc = RunConfig.from_dict(extra["run_config"]).resolve()
    if args.data:
        rc.data.root = str(args.data)
    if args.config:
        asked = PreprocessConfig.from_dict(_read_json(args.config).get("preprocess", {}))
        asked.seed = rc.seed
        if config_hash(asked.to_dict()) != config_hash(rc.preprocess.to_dict()):
            log.warning("preprocessing config differs from the one the checkpoint was trained with; "
                        "using the supplied one")
            rc.preprocess = asked
    m = _split_manifest(rc)
    split = None if args.split == "all" else args.split
    recs = m.select(split, rc.data.magnification)
    if not recs:
        raise DataError(f"split {args.split!r} is empty")
    report = evaluate(model, recs, rc.preprocess, batch_size=rc.train.batch_size)
    h = rc.hash
    ckpt_digest = hashlib.sha256(Path(args.checkpoint).read_bytes()).hexdigest()
    report.meta = {"config_hash": h, "checkpoint_sha256": ckpt_digest, "split": args.split,
                   "data_fingerprint": m.fingerprint}
    out = Path(args.out)
    _write_text(out / "report.json", report.to_json())
    for mag, rep in report.per_magnification.items():
        if rep.roc is None:
            log.warning("%s: single-class selection, no ROC written", mag)
            continue
        _write_text(out / f"roc_{mag}.csv", _with_hash_line(_roc_csv(rep.roc), h))
    print(f"{'mag':>6} {'n':>5} {'acc':>7} {'prec':>7} {'rec':>7} {'f1':>7} {'auc':>7}")
    rows = list(report.per_magnification.items()) + [("all", report.overall)]
    for mag, r in rows:
        auc = "n/a" if r.auc is None else f"{r.auc:.4f}"
        print(f"{mag:>6} {r.n:5d} {r.accuracy:7.4f} {r.precision:7.4f} {r.recall:7.4f} {r.f1:7.4f} {auc:>7}")
    return EXIT_OK


def _roc_csv(roc: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["threshold", "fpr", "tpr"])
    for row in zip(roc["threshold"], roc["fpr"], roc["tpr"]):
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def cmd_gradcheck(args) -> int:
    names = list(TARGETS) if args.which == "all" else [args.which]
    failed = 0
    print(f"{'target':<11}{'seed':>5}  {'group':<28}{'checked':>8}{'refined':>8}{'max_rel_err':>13}  result")
    for name in names:
        for seed in range(args.seed, args.seed + args.seeds):
            for r in run_target(name, seed):
                ok = r.passed
                failed += not ok
                print(f"{name:<11}{seed:>5}  {r.name:<28}{r.checked:>8}{r.refined:>8}"
                      f"{r.max_rel_error:>13.3e}  {'pass' if ok else 'FAIL'}")
    print(f"{failed} failing group(s)")
    return EXIT_CHECK if failed else EXIT_OK


def _image_files(root: Path) -> list[Path]:
    if not root.is_dir():
        raise IoError(f"{root} is not a readable directory")
    return sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def cmd_preprocess(args) -> int:
    rc = load_run_config(args.config, [("seed", args.seed)])
    rc.out = str(args.out)
    h = rc.hash
    src, out = Path(args.input), Path(args.out)
    files = _image_files(src)
    model = None
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
    images = []
    for f in files:
        try:
            images.append((f, read_image(f)))
        except DataError as exc:
            raise IoError(f"unreadable input {f}: {exc}") from exc
    cfg = rc.preprocess
    for i, (f, img) in enumerate(images):
        rel = f.relative_to(src).with_suffix("")
        seed = int(np.random.SeedSequence([rc.seed, i]).generate_state(1)[0])
        t = run_pipeline(img, cfg, training=args.augment, seed=seed)
        write_raw_tensor(out / rel.with_suffix(".f64"), t.data, h,
                         {"source": f.relative_to(src).as_posix(), "augmented": bool(args.augment)})
        contrast = clahe(median_filter(zero_pad(img, cfg.pad), cfg.median_kernel),
                         cfg.clahe_tiles, cfg.clahe_clip_limit)
        ext = ".pgm" if contrast.ndim == 2 else ".ppm"
        write_image(out / f"{rel}.contrast{ext}", contrast, comment=f"config_hash={h}")
        if model is not None:
            if t.shape[0] != model.config.in_channels:
                raise DataError(f"{f}: {t.shape[0]} channels but the model expects {model.config.in_channels}")
            for si, ms in enumerate(spatial_attention_maps(model, t.data[None])):
                write_image(out / f"{rel}.attention{si}.pgm", heatmap_to_image(ms[0, 0]),
                            comment=f"config_hash={h}")
    if images:
        _write_text(out / "run_config.json", json.dumps({**rc.to_dict(), "config_hash": h}, indent=2))
    print(f"processed {len(images)} image(s) into {out} (config {h})")
    return EXIT_OK


def _artifact_hashes(run: Path) -> list[tuple[str, Optional[str]]]:
    found = []
    ck = run / "best.ckpt"
    if ck.exists():
        try:
            _, header = load_checkpoint(ck)
            found.append((ck.name, header.get("extra", {}).get("config_hash")))
        except (DataError, IoError):
            found.append((ck.name, None))
    for p in sorted(run.rglob("*")):
        if not p.is_file() or p.name == "run_config.json":
            continue
        if p.suffix == ".json":
            try:
                d = json.loads(p.read_text())
            except json.JSONDecodeError:
                found.append((str(p.relative_to(run)), None))
                continue
            h = d.get("config_hash") or d.get("meta", {}).get("config_hash")
            found.append((str(p.relative_to(run)), h))
        elif p.suffix == ".csv" and p.name != "manifest.csv":
            first = p.read_text().split("\n", 1)[0]
            h = first.split("=", 1)[1] if first.startswith("# config_hash=") else None
            found.append((str(p.relative_to(run)), h))
        elif p.suffix in (".pgm", ".ppm"):
            head = p.read_bytes()[:200].split(b"\n")
            tag = next((ln[2:].decode() for ln in head if ln.startswith(b"# config_hash=")), "")
            found.append((str(p.relative_to(run)), tag.split("=", 1)[1] if tag else None))
    return found


def cmd_report(args) -> int:
    run = Path(args.run)
    cfg_path = run / "run_config.json"
    if not cfg_path.exists():
        raise IoError(f"{run} has no run_config.json")
    d = json.loads(cfg_path.read_text())
    stated = d.get("config_hash")
    actual = RunConfig.from_dict(d).hash
    bad = 0
    print(f"run_config.json  stated {stated}  recomputed {actual}  {'ok' if stated == actual else 'MISMATCH'}")
    bad += stated != actual
    for name, h in _artifact_hashes(run):
        ok = h == actual
        bad += not ok
        print(f"{name:<40} {h or '-':<18} {'ok' if ok else 'MISMATCH'}")
    rep = run / "report.json"
    if rep.exists():
        overall = json.loads(rep.read_text()).get("overall") or {}
        keys = ("accuracy", "precision", "recall", "f1", "auc")
        print("overall " + " ".join(f"{k}={overall.get(k)}" for k in keys))
    print("consistent" if not bad else f"{bad} inconsistent artifact(s)")
    return EXIT_CHECK if bad else EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="histoattn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic two-class dataset tree")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--n-per-class", type=int, default=25, help="images per class and magnification")
    s.add_argument("--size", type=int, nargs=2, default=(96, 96), metavar=("H", "W"))
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="run the preprocessing pipeline over a directory")
    s.add_argument("--in", dest="input", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--config", type=Path)
    s.add_argument("--checkpoint", type=Path, help="also export CBAM spatial attention heatmaps")
    s.add_argument("--augment", action="store_true", help="apply training-time augmentation")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="train a model and write its best checkpoint")
    s.add_argument("--data", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--config", type=Path)
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--optimizer", choices=("adam", "sgd"))
    s.add_argument("--patience", type=int)
    s.add_argument("--attention", choices=("none", "cbam", "self", "deformable"))
    s.add_argument("--magnification", choices=data_mod.MAGNIFICATIONS)
    s.add_argument("--image-size", type=int)
    s.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config field, e.g. model.head.hidden=64")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint per magnification")
    s.add_argument("--checkpoint", required=True, type=Path)
    s.add_argument("--data", type=Path, help="defaults to the training data root")
    s.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--config", type=Path, help="preprocessing settings to evaluate with")
    s.add_argument("--seed", type=int, help="accepted for uniformity; the checkpoint's seed is used")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("--which", choices=("all", *TARGETS), default="all")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("report", help="verify config hashes across a run directory")
    s.add_argument("--run", required=True, type=Path)
    s.add_argument("--seed", type=int, help="accepted for uniformity; unused")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s: %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config: %s", exc)
        return EXIT_CONFIG
    except (DataError, IoError) as exc:
        log.error("data: %s", exc)
        return EXIT_DATA
    except NumericError as exc:
        log.error("numeric: %s", exc)
        return EXIT_NUMERIC
    except ContractError as exc:
        log.error("internal: %s", exc)
        return EXIT_CHECK


def entry() -> None:
    sys.exit(main())
