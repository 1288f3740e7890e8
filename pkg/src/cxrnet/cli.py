"""Command line: split, train, eval, compare, probe, gradcam.

Every command reads a flat ``key = value`` config file. Any key can be
overridden from the environment as ``CXRNET_<KEY>`` with dots replaced by
underscores and upper-cased (``train.lr`` -> ``CXRNET_TRAIN_LR``).

Exit codes: 0 success, 2 input or config error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import fcntl
import json
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from cxrnet import functional as F
from cxrnet.checkpoint import export_checkpoint, import_pretrained, load_model, read_checkpoint
from cxrnet.data.dataset import RecordDataset
from cxrnet.data.records import parse_entry_csv
from cxrnet.data.schema import LABELS
from cxrnet.data.splits import SplitPlan, make_splits, official_split, read_image_list
from cxrnet.data.transforms import AgeScaler, load_image, preprocess_eval
from cxrnet.errors import CxrNetError, NumericError
from cxrnet.gradcam import export_heatmap, grad_cam
from cxrnet.metrics import EvalRow, aggregate_folds, label_aucs, mae, roc_auc, spearman_matrix, youden_operating_point
from cxrnet.models import ModelConfig, ResNet, build_probe
from cxrnet.reports import ScoreSet, auc_grid, correlation_table, read_scores, single_split_table, write_scores
from cxrnet.tensor import Tensor, no_grad
from cxrnet.training import ArrayDataset, TrainPlan, train, write_history_csv

log = logging.getLogger("cxrnet")

ENV_PREFIX = "CXRNET_"
EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

DEFAULTS = {
    "seed": "0",
    "out": "runs",
    "run.tag": "run",
    "data.csv": "",
    "data.images": "",
    "split.file": "",
    "split.resamples": "5",
    "split.tolerance": "0.015",
    "model.variant": "",
    "model.depth": "50",
    "model.input_size": "224",
    "model.input_channels": "1",
    "model.width": "64",
    "model.use_meta": "false",
    "model.freeze": "none",
    "model.extra_pool": "false",
    "model.pretrained": "",
    "train.batch_size": "16",
    "train.lr": "0.01",
    "train.max_epochs": "50",
    "train.patience": "1",
    "train.plateau_factor": "0.5",
    "train.min_lr": "1e-6",
    "train.augment": "true",
    "eval.setup": "",
    "probe.max_epochs": "20",
    "probe.lr": "0.01",
}


class InputError(CxrNetError):
    """Bad command-line input, config or dataset; maps to exit code 2."""


# ---------------------------------------------------------------- config


@dataclass
class Config:
    values: dict[str, str]
    path: Path | None = None

    def get(self, key: str) -> str:
        return self.values[key]

    def int(self, key: str) -> int:
        return self._typed(key, int)

    def float(self, key: str) -> float:
        return self._typed(key, float)

    def bool(self, key: str) -> bool:
        v = self.values[key].strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise InputError(f"config key {key}: expected a boolean, got {v!r}")

    def _typed(self, key, kind):
        try:
            return kind(self.values[key])
        except ValueError:
            raise InputError(f"config key {key}: cannot read {self.values[key]!r} as {kind.__name__}") from None

    def path_of(self, key: str) -> Path | None:
        v = self.values[key].strip()
        if not v:
            return None
        p = Path(v).expanduser()
        if not p.is_absolute() and self.path is not None:
            p = self.path.parent / p
        return p


def load_config(path: str | None, environ=None) -> Config:
    environ = os.environ if environ is None else environ
    values = dict(DEFAULTS)
    cfg_path = None
    if path:
        cfg_path = Path(path)
        parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read_string("[config]\n" + cfg_path.read_text(), source=str(cfg_path))
        except OSError as exc:
            raise InputError(f"cannot read config {cfg_path}: {exc}") from exc
        except configparser.Error as exc:
            raise InputError(f"malformed config {cfg_path}: {exc}") from exc
        for key, value in parser["config"].items():
            if key not in DEFAULTS:
                raise InputError(f"{cfg_path}: unknown config key {key!r}")
            values[key] = value.strip()
    for key in DEFAULTS:
        env = ENV_PREFIX + key.replace(".", "_").upper()
        if env in environ:
            values[key] = environ[env]
    return Config(values, cfg_path)


def model_config(cfg: Config) -> ModelConfig:
    over = dict(
        depth=cfg.int("model.depth"),
        input_size=cfg.int("model.input_size"),
        input_channels=cfg.int("model.input_channels"),
        width=cfg.int("model.width"),
        use_meta=cfg.bool("model.use_meta"),
        freeze=cfg.get("model.freeze"),
        extra_pool_after_conv2=cfg.bool("model.extra_pool"),
    )
    variant = cfg.get("model.variant")
    try:
        if variant:
            return ModelConfig.variant(variant, width=over["width"])
        return ModelConfig(**over).validate()
    except (ValueError, TypeError) as exc:
        raise InputError(f"invalid model config: {exc}") from exc


def train_plan(cfg: Config, seed: int) -> TrainPlan:
    return TrainPlan(
        batch_size=cfg.int("train.batch_size"),
        initial_lr=cfg.float("train.lr"),
        plateau_factor=cfg.float("train.plateau_factor"),
        patience=cfg.int("train.patience"),
        max_epochs=cfg.int("train.max_epochs"),
        min_lr=cfg.float("train.min_lr"),
        seed=seed,
    )


# ---------------------------------------------------------------- helpers


def _out_dir(cfg: Config, args) -> Path:
    return Path(args.out) if args.out else (cfg.path_of("out") or Path("runs"))


def _seed(cfg: Config, args) -> int:
    return args.seed if args.seed is not None else cfg.int("seed")


def _records(cfg: Config):
    csv_path = cfg.path_of("data.csv")
    if csv_path is None:
        raise InputError("config needs data.csv")
    return parse_entry_csv(csv_path)


def _image_dir(cfg: Config) -> Path | None:
    return cfg.path_of("data.images")


def _split_file(cfg: Config, out: Path) -> Path:
    return cfg.path_of("split.file") or out / "splits.json"


def _run_dir(cfg: Config, out: Path) -> Path:
    return out / cfg.get("run.tag")


@contextmanager
def _locked(directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    with (directory / ".lock").open("w") as fh:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise InputError(f"{directory} is in use by another command") from None
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _fold_datasets(cfg: Config, records, plan: SplitPlan, resample: int, mcfg: ModelConfig, scaler=None):
    if not 0 <= resample < plan.n_resamples:
        raise InputError(f"split plan has {plan.n_resamples} re-sample(s); --resample {resample} is out of range")
    idx = {s: plan.indices(records, resample, s) for s in ("train", "val", "test")}
    if scaler is None:
        scaler = AgeScaler.fit([records[i].age_years for i in idx["train"]])
    images = _image_dir(cfg)
    common = dict(size=mcfg.input_size, scaler=scaler, image_dir=images,
                  channels=mcfg.input_channels, use_meta=mcfg.use_meta)
    out = {}
    for s, ix in idx.items():
        out[s] = RecordDataset([records[i] for i in ix], train=(s == "train" and cfg.bool("train.augment")), **common)
    return out, scaler


def _fold_ckpt(run: Path, resample: int) -> Path:
    return run / f"fold{resample}" / "model"


# ---------------------------------------------------------------- commands


def cmd_split(cfg: Config, args) -> int:
    out = _out_dir(cfg, args)
    records = _records(cfg)
    seed = _seed(cfg, args)
    if args.official_split_list:
        tv, test = (read_image_list(p) for p in args.official_split_list)
        plan = official_split(records, tv, test, seed)
    else:
        plan = make_splits(records, seed, cfg.int("split.resamples"), tolerance=cfg.float("split.tolerance"))
    path = _split_file(cfg, out)
    path.parent.mkdir(parents=True, exist_ok=True)
    plan.save(path)
    for r in range(plan.n_resamples):
        c = plan.counts(records, r)
        print(f"resample {r}: " + "  ".join(
            f"{s} {c[s]['patients']} patients / {c[s]['images']} images" for s in ("train", "val", "test")))
    print(f"wrote {path}")
    return EXIT_OK


def cmd_train(cfg: Config, args) -> int:
    out = _out_dir(cfg, args)
    seed = _seed(cfg, args)
    split_path = _split_file(cfg, out)
    if not split_path.exists():
        raise InputError(f"split plan {split_path} not found; run `cxrnet split` first")
    plan = SplitPlan.load(split_path)
    records = _records(cfg)
    mcfg = model_config(cfg)
    resample = args.resample or 0
    data, scaler = _fold_datasets(cfg, records, plan, resample, mcfg)
    model = ResNet(mcfg, seed)
    pretrained = cfg.path_of("model.pretrained")
    if pretrained is not None:
        import_pretrained(model, pretrained)
    run = _run_dir(cfg, out)
    ckpt = _fold_ckpt(run, resample)
    extra = {"age_scaler": scaler.to_dict(), "resample": resample, "train_seed": seed}
    with _locked(run):
        try:
            result = train(model, train_plan(cfg, seed), data["train"], data["val"],
                           on_epoch=lambda r: print(f"epoch {r.epoch}: train {r.train_loss:.5f} "
                                                    f"val {r.val_loss:.5f} lr {r.lr:.2e}"))
        except NumericError as exc:
            if getattr(exc, "last_good_state", None) is not None:
                model.load_state_dict(exc.last_good_state)
                export_checkpoint(model, ckpt.with_name("last_good"), extra)
                print(f"diverged; last good state saved to {ckpt.with_name('last_good')}.json", file=sys.stderr)
            raise
        export_checkpoint(result.model, ckpt, extra)
        write_history_csv(result.history, ckpt.with_name("history.csv"))
    print(f"best epoch {result.best_epoch} val loss {result.best_val_loss:.5f}; wrote {ckpt}.json")
    return EXIT_OK


def _load_fold_model(run: Path, resample: int):
    path = _fold_ckpt(run, resample)
    manifest, _ = read_checkpoint(path)
    scaler = AgeScaler(**manifest["extra"]["age_scaler"]) if "extra" in manifest else None
    return load_model(path), scaler


def _predict(model: ResNet, data: RecordDataset, batch_size: int = 32) -> np.ndarray:
    outs = []
    for i in range(0, len(data), batch_size):
        images, meta, _ = data.batch(np.arange(i, min(i + batch_size, len(data))), None)
        outs.append(model.predict(images, meta, batch_size))
    return np.concatenate(outs) if outs else np.zeros((0, len(LABELS)))


def _resamples(args, run: Path) -> list[int]:
    if args.resample is not None:
        return [args.resample]
    found = sorted(int(p.name[4:]) for p in run.glob("fold*") if (p / "model.json").exists())
    if not found:
        raise InputError(f"no trained folds under {run}")
    return found


def cmd_eval(cfg: Config, args) -> int:
    out = _out_dir(cfg, args)
    run = _run_dir(cfg, out)
    plan = SplitPlan.load(_split_file(cfg, out))
    records = _records(cfg)
    tag = cfg.get("run.tag")
    rows, sets = [], []
    with _locked(run):
        for r in _resamples(args, run):
            model, scaler = _load_fold_model(run, r)
            data, _ = _fold_datasets(cfg, records, plan, r, model.config, scaler)
            test = data["test"]
            scores = _predict(model, test)
            aucs = label_aucs(scores, test.labels)
            for name, v in aucs.items():
                if v is None:
                    log.warning("fold %d: %s has a single class in the test set; AUC marked missing", r, name)
            rows.append(EvalRow(r, aucs))
            sets.append(ScoreSet([rec.image_ref for rec in test.records], r, tag, scores))
        eval_dir = run / "eval"
        eval_dir.mkdir(parents=True, exist_ok=True)
        write_scores(sets, eval_dir / "scores.csv")
        if len(rows) >= 2:
            report = aggregate_folds(rows)
            setup = cfg.get("eval.setup") or ("With" if model.config.use_meta else "Without") + "/" + tag
            group, _, name = setup.partition("/")
            table = auc_grid({(group, name): report})
            _write_json(eval_dir / "summary.json", {
                n: {"mean": s.mean, "std": s.std, "folds": s.n_folds, "missing": s.n_missing}
                for n, s in list(report.rows.items()) + [("Average", report.average)]
            })
        else:
            table = single_split_table({tag: rows[0].aucs})
        table.write(eval_dir / "auc")
    print(table.text, end="")
    print(f"wrote {eval_dir}")
    return EXIT_OK


def cmd_compare(cfg: Config, args) -> int:
    out = _out_dir(cfg, args)
    if len(args.scores) < 2:
        raise InputError("compare needs at least two score files")
    per_file = [read_scores(p) for p in args.scores]
    tags = []
    by_fold: dict[int, list] = {}
    ids: dict[int, list] = {}
    for path, sets in zip(args.scores, per_file):
        tags.append(sets[0].model_tag if sets else Path(path).stem)
        for s in sets:
            by_fold.setdefault(s.fold, []).append(s.scores)
            ids.setdefault(s.fold, []).append(s.image_ids)
    folds = sorted(by_fold)
    for f in folds:
        if len(by_fold[f]) != len(args.scores):
            raise InputError(f"fold {f} is not scored by every model")
    matrix = spearman_matrix([by_fold[f] for f in folds], mode=args.mode, ids=[ids[f] for f in folds])
    table = correlation_table(matrix, tags)
    out.mkdir(parents=True, exist_ok=True)
    table.write(out / "compare")
    print(table.text, end="")
    return EXIT_OK


def cmd_probe(cfg: Config, args) -> int:
    out = _out_dir(cfg, args)
    run = _run_dir(cfg, out)
    plan = SplitPlan.load(_split_file(cfg, out))
    records = _records(cfg)
    resample = args.resample or 0
    seed = _seed(cfg, args)
    base, scaler = _load_fold_model(run, resample)
    data, _ = _fold_datasets(cfg, records, plan, resample, base.config, scaler)
    probe = build_probe(base, args.target, seed)

    def probe_set(ds: RecordDataset):
        images, _, _ = ds.batch(np.arange(len(ds)), None)
        feats = probe.base_features(images)
        if args.target == "age":
            y = scaler(np.array([r.age_years for r in ds.records]))
        else:
            y = np.array([getattr(r, "gender" if args.target == "gender" else "view") for r in ds.records])
        return feats, np.asarray(y, dtype=np.float32).reshape(-1, 1)

    sets = {s: probe_set(data[s]) for s in ("train", "val", "test")}
    # the frozen base is evaluated once; the probe head then trains on cached features
    head_model = _FeatureHead(probe)
    plan_ = TrainPlan(batch_size=cfg.int("train.batch_size"), initial_lr=cfg.float("probe.lr"),
                      max_epochs=cfg.int("probe.max_epochs"), patience=cfg.int("train.patience"), seed=seed)
    train(head_model, plan_, ArrayDataset(sets["train"][0], sets["train"][1]),
          ArrayDataset(sets["val"][0], sets["val"][1]))
    feats, y = sets["test"]
    pred = head_model.predict(feats)[:, 0]
    if args.target == "age":
        span = scaler.max_age - scaler.min_age
        m = mae(pred * span + scaler.min_age, y[:, 0] * span + scaler.min_age)
        result = {"target": "age", "mae": m.mean, "mae_std": m.std}
        print(f"age MAE {m.mean:.2f} ± {m.std:.2f} years")
    else:
        auc = roc_auc(pred, y[:, 0])
        op = youden_operating_point(pred, y[:, 0])
        result = {"target": args.target, "auc": auc, "threshold": op.threshold,
                  "sensitivity": op.sensitivity, "specificity": op.specificity}
        print(f"{args.target} AUC {auc:.4f}; sensitivity {op.sensitivity:.3f} specificity {op.specificity:.3f}")
    probe_dir = run / f"fold{resample}"
    export_checkpoint(probe, probe_dir / f"probe_{args.target}")
    _write_json(probe_dir / f"probe_{args.target}_metrics.json", result)
    return EXIT_OK


class _FeatureHead:
    """Adapter that trains a probe's head directly on cached pooled features."""

    def __init__(self, probe):
        self._p = probe
        self.loss = probe.loss
        self.output_activation = probe.output_activation

    def __getattr__(self, name):
        return getattr(self._p, name)

    def forward(self, feats, meta=None, training=False):
        z = self._p.head(Tensor(feats))
        return F.sigmoid(z) if self.output_activation == "sigmoid" else z

    def predict(self, feats, meta=None, batch_size=256):
        with no_grad():
            return self.forward(feats).data


def cmd_gradcam(cfg: Config, args) -> int:
    out = Path(args.out) if args.out else _out_dir(cfg, args) / "gradcam"
    path = Path(args.checkpoint)
    manifest, _ = read_checkpoint(path)
    model = load_model(path)
    scaler = AgeScaler(**manifest["extra"]["age_scaler"]) if "extra" in manifest else None
    if not 0 <= args.label < model.config.num_labels:
        raise InputError(f"label must lie in [0, {model.config.num_labels}), got {args.label}")
    meta = None
    if model.config.use_meta:
        if args.meta is None or scaler is None:
            raise InputError("this model fuses non-image features; pass --meta AGE GENDER VIEW")
        age, gender, view = args.meta
        meta = np.array([[scaler(age), gender, view]], dtype=np.float32)
    for img_path in args.images:
        raw = load_image(img_path)
        x = preprocess_eval(raw, model.config.input_size, model.config.input_channels)
        hm = grad_cam(model, x, meta, args.label, image_ref=str(img_path))
        paths = export_heatmap(hm, x, out / f"{Path(img_path).stem}_label{args.label}")
        print(f"{img_path}: peak {hm.peak}; wrote {paths['grid.csv']}")
    return EXIT_OK


COMMANDS = {
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "probe": cmd_probe,
    "gradcam": cmd_gradcam,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cxrnet", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("split", parents=[common], help="write patient-disjoint re-sampling splits")
    s.add_argument("--official-split-list", nargs=2, metavar=("TRAIN_VAL", "TEST"),
                   help="use externally provided image lists instead of re-sampling")
    t = sub.add_parser("train", parents=[common], help="train one re-sample")
    t.add_argument("--resample", type=int, default=0)
    e = sub.add_parser("eval", parents=[common], help="score test sets and write AUC tables")
    e.add_argument("--resample", type=int, help="evaluate one fold only (default: all trained folds)")
    c = sub.add_parser("compare", parents=[common], help="Spearman similarity between score files")
    c.add_argument("scores", nargs="+", help="score CSVs written by eval")
    c.add_argument("--mode", choices=("flatten", "per_label"), default="flatten")
    pr = sub.add_parser("probe", parents=[common], help="linear probe on frozen pooled features")
    pr.add_argument("--target", choices=("age", "gender", "view"), required=True)
    pr.add_argument("--resample", type=int, default=0)
    g = sub.add_parser("gradcam", parents=[common], help="export Grad-CAM heatmaps")
    g.add_argument("checkpoint", help="checkpoint stem or .json manifest")
    g.add_argument("images", nargs="+")
    g.add_argument("--label", type=int, required=True, help="label index in [0, 15)")
    g.add_argument("--meta", type=float, nargs=3, metavar=("AGE", "GENDER", "VIEW"))
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](cfg, args)
    except NumericError as exc:
        print(f"cxrnet {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CxrNetError, OSError, KeyError) as exc:
        print(f"cxrnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
