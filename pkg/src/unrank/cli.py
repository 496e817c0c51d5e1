"""Command line entry point: ``unrank {train,unlearn,retrain,compare,sweep}``.

Settings come from built-in defaults, then an optional flat ``key = value``
config file (``--config``), then command-line flags. Keys use the long flag
names with dashes or underscores, e.g. ``forget-ratio = 0.05``.
"""

import argparse
import configparser
import csv
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cg import CGBreakdown, CGConfig, write_history_csv
from .data import (
    FORGET_MODES,
    ForgetRequest,
    build_dataset,
    generate_forget_set,
    load_interactions,
    write_remap,
)
from .influence import quantify, uniform, write_influence_csv
from .metrics import URRReport, mia_fpr, pair_ranks, ranking_metrics, speedup, unranking_rate
from .models import (
    BACKBONES,
    LIGHTGCN,
    MF,
    BPRRecommender,
    load_checkpoint,
    make_propagation,
    save_checkpoint,
)
from .scoping import direct_entities, expand_scope, full_scope, write_scope_csv
from .unlearn import (
    BCE_LOSS,
    FULL,
    NO_SCOPING,
    SIGNS,
    UNIFORM_WEIGHTS,
    VARIANTS,
    UnlearnConfig,
    unlearn,
)

logger = logging.getLogger("unrank")

BUNDLED = {"toy": Path(__file__).with_name("datasets") / "toy50.tsv"}
DELIMITERS = {"tab": "\t", "\\t": "\t", "comma": ",", "space": " "}
SWEEP_PARAMS = ("alpha", "eta", "p")
METHODS = (FULL, NO_SCOPING, UNIFORM_WEIGHTS, BCE_LOSS, "retrain")


class ConfigError(ValueError):
    pass


def _optional_int(text):
    return None if str(text).lower() in ("", "none", "auto") else int(text)


def _ks(text):
    ks = tuple(int(k) for k in str(text).replace(" ", "").split(",") if k)
    if not ks or min(ks) < 1:
        raise ValueError("ks must be positive integers")
    return ks


# name -> (type, default, help)
SCHEMA = {
    "dataset": (str, None, "interaction file, or 'toy' for the bundled 50-edge sample"),
    "delimiter": (str, "\t", "field separator ('tab', 'comma', '::', ...)"),
    "backbone": (str, MF, "mf or lightgcn"),
    "layers": (int, 1, "LightGCN propagation layers K"),
    "dim": (int, 64, "embedding dimension"),
    "epochs": (int, 20, "training epochs"),
    "lr": (float, 1e-3, "learning rate"),
    "batch-size": (int, 1024, "training minibatch size"),
    "weight-decay": (float, 0.0, "decoupled weight decay"),
    "negatives": (int, 1, "negatives per positive"),
    "forget-mode": (str, "entity-item", "entity-item or interaction-user"),
    "forget-ratio": (float, 0.05, "fraction of items/users to forget"),
    "p": (_optional_int, None, "scope hops (default: 1 for lightgcn, 0 for mf)"),
    "alpha": (float, 0.5, "structural vs semantic balance"),
    "eta": (float, 0.1, "update divisor in (0, 1]"),
    "damping": (float, 0.01, "Hessian damping"),
    "variant": (str, FULL, "full, no_scoping, uniform_weights or bce_loss"),
    "sign": (str, "flipped", "update direction: flipped or paper"),
    "cg-tol": (float, 1e-6, "CG relative residual tolerance"),
    "cg-max-iter": (_optional_int, None, "CG iteration cap (default min(n, 1000))"),
    "ks": (_ks, (5, 10, 20), "comma-separated cutoffs"),
    "seed": (int, 0, "root seed"),
    "out": (str, "runs", "output directory"),
    "checkpoint": (str, None, "trained checkpoint (unlearn; optional for compare/sweep)"),
    "param": (str, None, "sweep parameter: alpha, eta or p"),
    "values": (str, None, "comma-separated sweep values"),
}


@dataclass
class ExperimentConfig:
    dataset: Path
    delimiter: str = "\t"
    backbone: str = MF
    layers: int = 1
    dim: int = 64
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 1024
    weight_decay: float = 0.0
    negatives: int = 1
    forget_mode: str = "entity-item"
    forget_ratio: float = 0.05
    p: int | None = None
    alpha: float = 0.5
    eta: float = 0.1
    damping: float = 0.01
    variant: str = FULL
    sign: str = "flipped"
    cg_tol: float = 1e-6
    cg_max_iter: int | None = None
    ks: tuple = (5, 10, 20)
    seed: int = 0
    out: Path = Path("runs")
    checkpoint: Path | None = None
    param: str | None = None
    values: str | None = None
    dumps: set = field(default_factory=set)

    def validate(self):
        if not self.dataset.is_file():
            raise ConfigError(f"dataset not found: {self.dataset}")
        if self.checkpoint is not None and not self.checkpoint.is_file():
            raise ConfigError(f"checkpoint not found: {self.checkpoint}")
        if self.backbone not in BACKBONES:
            raise ConfigError(f"backbone must be one of {BACKBONES}")
        if self.forget_mode not in FORGET_MODES:
            raise ConfigError(f"forget-mode must be one of {FORGET_MODES}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.sign not in SIGNS:
            raise ConfigError(f"sign must be one of {tuple(SIGNS)}")
        checks = [
            (self.layers >= 1, "layers must be >= 1"),
            (self.dim >= 1, "dim must be >= 1"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.lr > 0, "lr must be > 0"),
            (self.batch_size >= 1, "batch-size must be >= 1"),
            (self.weight_decay >= 0, "weight-decay must be >= 0"),
            (self.negatives >= 1, "negatives must be >= 1"),
            (0.0 <= self.forget_ratio <= 1.0, "forget-ratio must lie in [0, 1]"),
            (self.p is None or self.p >= 0, "p must be >= 0"),
            (0.0 <= self.alpha <= 1.0, "alpha must lie in [0, 1]"),
            (0.0 < self.eta <= 1.0, "eta must lie in (0, 1]"),
            (self.damping >= 0, "damping must be >= 0"),
            (self.cg_tol > 0, "cg-tol must be > 0"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        return self

    def train_estimator(self):
        return BPRRecommender(
            backbone=self.backbone, n_layers=self.layers if self.backbone == LIGHTGCN else 0,
            dim=self.dim, lr=self.lr, epochs=self.epochs, batch_size=self.batch_size,
            weight_decay=self.weight_decay, negatives=self.negatives, seed=self.seed,
        )

    def unlearn_config(self, **overrides):
        kw = dict(
            p=self.p, alpha=self.alpha, eta=self.eta, damping=self.damping,
            negatives=self.negatives, variant=self.variant, update_sign=self.sign,
            seed=self.seed, cg=CGConfig(tol=self.cg_tol, max_iter=self.cg_max_iter),
        )
        kw.update(overrides)
        return UnlearnConfig(**kw)

    def forget_request(self):
        return ForgetRequest(self.forget_mode, self.forget_ratio, self.seed)

    def as_dict(self):
        out = {}
        for key in SCHEMA:
            value = getattr(self, key.replace("-", "_"))
            out[key] = str(value) if isinstance(value, Path) else value
        out["ks"] = list(self.ks)
        return out


def read_config_file(path):
    """Parse flat ``key = value`` lines (``#`` comments allowed)."""
    parser = configparser.ConfigParser(
        interpolation=None, comment_prefixes=("#", ";"), inline_comment_prefixes=("#",)
    )
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + Path(path).read_text())
    except (configparser.Error, OSError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    out = {}
    for key, value in parser["run"].items():
        name = key.strip().replace("_", "-")
        if name not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r} in {path}")
        out[name] = value.strip()
    return out


def resolve_config(args):
    """Merge defaults, the config file and flags into a validated config."""
    raw = {}
    if args.config:
        raw.update(read_config_file(args.config))
    for name in SCHEMA:
        value = getattr(args, name.replace("-", "_"), None)
        if value is not None:
            raw[name] = value
    values = {}
    for name, (kind, default, _) in SCHEMA.items():
        text = raw.get(name)
        if text is None:
            values[name] = default
            continue
        try:
            values[name] = kind(text)
        except ValueError as exc:
            raise ConfigError(f"bad value for {name}: {text!r} ({exc})") from exc
    if values["dataset"] is None:
        raise ConfigError("no dataset given (use --dataset or a config file)")
    dataset = BUNDLED.get(values["dataset"], Path(values["dataset"]))
    delimiter = DELIMITERS.get(values["delimiter"], values["delimiter"])
    kwargs = {k.replace("-", "_"): v for k, v in values.items()}
    kwargs.update(
        dataset=dataset,
        delimiter=delimiter,
        out=Path(values["out"]),
        checkpoint=Path(values["checkpoint"]) if values["checkpoint"] else None,
        dumps={d for d in ("scope", "influence", "cg", "ranks") if getattr(args, f"dump_{d}", False)},
    )
    return ExperimentConfig(**kwargs).validate()


# --------------------------------------------------------------------- helpers

def _write_json(path, record):
    with open(path, "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, (Path, set)):
        return str(obj) if isinstance(obj, Path) else sorted(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _write_rows(path, rows, columns):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({c: _fmt(row.get(c)) for c in columns})


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6g}"
    return value


def _ms(seconds):
    return round(seconds, 3)


def load_data(cfg):
    raw = load_interactions(cfg.dataset, cfg.delimiter)
    ds = build_dataset(raw, seed=cfg.seed)
    logger.info("dataset %s: %d users, %d items, %d train edges", cfg.dataset.name,
                ds.n_users, ds.n_items, len(ds.train))
    return ds


def fit_model(cfg, ds):
    t = time.perf_counter()
    model = cfg.train_estimator().fit(ds)
    return model, time.perf_counter() - t


def load_model(cfg, ds):
    params = load_checkpoint(cfg.checkpoint, n_users=ds.n_users, n_items=ds.n_items)
    prop = make_propagation(ds, params.n_layers) if params.backbone == LIGHTGCN else None
    return BPRRecommender.from_params(params, ds, prop)


def forget_split(cfg, ds, allow_empty=False):
    part = generate_forget_set(ds, cfg.forget_request())
    if len(part.forget) == 0 and not allow_empty:
        raise ConfigError(
            f"forget set is empty (forget-ratio={cfg.forget_ratio}); nothing to unlearn"
        )
    return part


def evaluate(cfg, ds, params, prop, original, part):
    """Test metrics with retained edges excluded, plus URR and MIA against ``original``."""
    row = {}
    m = ranking_metrics(params, prop, ds, cfg.ks, split="test", exclude=part.retain)
    for k in cfg.ks:
        row[f"ndcg@{k}"] = m.ndcg[k]
        row[f"recall@{k}"] = m.recall[k]
    # each model ranks on its own propagation (a retrained LightGCN has a new graph)
    before = pair_ranks(original.params_, original.propagation_, part.forget)
    after = pair_ranks(params, prop, part.forget)
    value, worsened = unranking_rate(before, after)
    rep = URRReport(value, worsened, part.forget, before, after)
    row["urr"] = rep.urr
    row["worsened"] = rep.worsened_fraction
    row["mean_rank_before"] = float(np.mean(rep.before))
    row["mean_rank_after"] = float(np.mean(rep.after))
    try:
        row["fpr"] = mia_fpr(original.params_, params, prop, ds, part.forget, seed=cfg.seed).fpr
    except ValueError as exc:
        row["fpr"] = None
        row["fpr_note"] = str(exc)
    return row, rep


def dump_debug(cfg, ds, model, part, config, result, out):
    params = model.params_
    if config.variant == NO_SCOPING:
        scope = full_scope(ds, part.forget)
    else:
        scope = expand_scope(ds, part.forget, config.hops(params.backbone))
    if "scope" in cfg.dumps:
        write_scope_csv(scope, out / "scope.csv")
    if "influence" in cfg.dumps:
        w = uniform(scope) if config.variant == UNIFORM_WEIGHTS else quantify(
            scope, params, direct_entities(part.forget, ds.n_users), config.alpha
        )
        write_influence_csv(scope, w, out / "influence.csv")
    if "cg" in cfg.dumps:
        write_history_csv(result.cg_report, out / "cg_history.csv")


# -------------------------------------------------------------------- commands

def cmd_train(cfg):
    ds = load_data(cfg)
    model, seconds = fit_model(cfg, ds)
    val = ranking_metrics(model.params_, model.propagation_, ds, cfg.ks, split="val")
    cfg.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model.params_, cfg.out / "model.ckpt")
    _write_rows(cfg.out / "loss_trace.csv",
                [{"epoch": e + 1, "loss": v} for e, v in enumerate(model.loss_trace_)],
                ["epoch", "loss"])
    write_remap(ds, cfg.out / "dataset")
    record = {
        "command": "train",
        "config": cfg.as_dict(),
        "dataset": {"n_users": ds.n_users, "n_items": ds.n_items, "n_train": len(ds.train),
                    "n_val": len(ds.val), "n_test": len(ds.test)},
        "val": val.as_dict(),
        "final_loss": float(model.loss_trace_[-1]),
        "time_s": _ms(seconds),
    }
    _write_json(cfg.out / "train.json", record)
    print("val NDCG " + "  ".join(f"@{k} {val.ndcg[k]:.4f}" for k in cfg.ks))
    print(f"checkpoint written to {cfg.out / 'model.ckpt'}")
    return record


def cmd_unlearn(cfg):
    if cfg.checkpoint is None:
        raise ConfigError("unlearn needs --checkpoint")
    ds = load_data(cfg)
    model = load_model(cfg, ds)
    part = forget_split(cfg, ds)
    config = cfg.unlearn_config()
    new_params, result = unlearn(model.params_, ds, part.forget, config, model.propagation_)
    row, rep = evaluate(cfg, ds, new_params, model.propagation_, model, part)
    cfg.out.mkdir(parents=True, exist_ok=True)
    if cfg.dumps:
        dump_debug(cfg, ds, model, part, config, result, cfg.out)
    if "ranks" in cfg.dumps:
        rep.write_csv(cfg.out / "forget_ranks.csv")
    save_checkpoint(new_params, cfg.out / "unlearned.ckpt")
    record = {
        "command": "unlearn",
        "config": cfg.as_dict(),
        "variant": config.variant,
        "n_forget": len(part.forget),
        "result": result.as_dict(),
        "metrics": row,
    }
    _write_json(cfg.out / "unlearn.json", record)
    print(f"unlearned {len(part.forget)} edges in {result.timing['total']:.3f}s: "
          f"URR {row['urr']:.4f}, NDCG@{cfg.ks[0]} {row[f'ndcg@{cfg.ks[0]}']:.4f}")
    return record


def cmd_retrain(cfg):
    ds = load_data(cfg)
    part = forget_split(cfg, ds, allow_empty=True)
    retain_ds = ds.with_train(part.retain)
    model, seconds = fit_model(cfg, retain_ds)
    m = ranking_metrics(model.params_, model.propagation_, ds, cfg.ks, split="test", exclude=part.retain)
    cfg.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model.params_, cfg.out / "retrain.ckpt")
    record = {
        "command": "retrain",
        "config": cfg.as_dict(),
        "n_forget": len(part.forget),
        "n_retain": len(part.retain),
        "test": m.as_dict(),
        "time_s": _ms(seconds),
    }
    _write_json(cfg.out / "retrain.json", record)
    print(f"retrained on {len(part.retain)} edges in {seconds:.3f}s")
    return record


def _columns(ks, extra):
    return extra + [f"ndcg@{k}" for k in ks] + [f"recall@{k}" for k in ks] + [
        "urr", "worsened", "mean_rank_before", "mean_rank_after", "fpr"
    ]


def cmd_compare(cfg):
    ds = load_data(cfg)
    part = forget_split(cfg, ds)
    if cfg.checkpoint is not None:
        model, train_seconds = load_model(cfg, ds), None
    else:
        model, train_seconds = fit_model(cfg, ds)
    cfg.out.mkdir(parents=True, exist_ok=True)
    rows = []
    for method in METHODS:
        row = {"method": method}
        try:
            t = time.perf_counter()
            if method == "retrain":
                retrained = cfg.train_estimator().fit(ds.with_train(part.retain))
                seconds = time.perf_counter() - t
                params, prop = retrained.params_, retrained.propagation_
            else:
                config = cfg.unlearn_config(variant=method)
                params, result = unlearn(model.params_, ds, part.forget, config, model.propagation_)
                seconds = time.perf_counter() - t
                prop = model.propagation_
                row.update(scope_size=result.scope_size, cg_iterations=result.cg_report.iterations,
                           update_norm=result.delta.norm())
            row["time_s"] = _ms(seconds)
            row["_seconds"] = seconds
            metrics, _ = evaluate(cfg, ds, params, prop, model, part)
            row.update(metrics)
        except (CGBreakdown, ArithmeticError, ValueError, RuntimeError) as exc:
            logger.warning("%s failed: %s", method, exc)
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    retrain_time = rows[-1].get("_seconds")
    for row in rows:
        seconds = row.pop("_seconds", None)
        if retrain_time is not None and seconds is not None:
            row["speedup"] = speedup(retrain_time, seconds)
    columns = _columns(cfg.ks, ["method", "time_s", "speedup"]) + [
        "scope_size", "cg_iterations", "update_norm", "error"
    ]
    _write_rows(cfg.out / "compare.csv", rows, columns)
    record = {
        "command": "compare",
        "config": cfg.as_dict(),
        "n_forget": len(part.forget),
        "train_time_s": None if train_seconds is None else _ms(train_seconds),
        "methods": rows,
    }
    _write_json(cfg.out / "compare.json", record)
    for row in rows:
        status = row.get("error") or f"URR {row['urr']:.4f}  NDCG@{cfg.ks[0]} {row[f'ndcg@{cfg.ks[0]}']:.4f}"
        print(f"{row['method']:<16} {status}")
    return record


def _sweep_values(cfg):
    if cfg.param not in SWEEP_PARAMS:
        raise ConfigError(f"sweep needs --param in {SWEEP_PARAMS}")
    if not cfg.values:
        raise ConfigError("sweep needs --values, e.g. --values 0,0.5,1")
    kind = int if cfg.param == "p" else float
    try:
        return [kind(v) for v in cfg.values.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad sweep values {cfg.values!r}") from exc


def cmd_sweep(cfg):
    values = _sweep_values(cfg)
    ds = load_data(cfg)
    part = forget_split(cfg, ds)
    model = load_model(cfg, ds) if cfg.checkpoint is not None else fit_model(cfg, ds)[0]
    cfg.out.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in values:
        row = {"param": cfg.param, "value": value}
        try:
            config = cfg.unlearn_config(**{cfg.param: value})
            params, result = unlearn(model.params_, ds, part.forget, config, model.propagation_)
            row.update(time_s=_ms(result.timing["total"]), scope_size=result.scope_size,
                       cg_iterations=result.cg_report.iterations, update_norm=result.delta.norm())
            metrics, _ = evaluate(cfg, ds, params, model.propagation_, model, part)
            row.update(metrics)
        except (CGBreakdown, ArithmeticError, ValueError, RuntimeError) as exc:
            logger.warning("%s=%s failed: %s", cfg.param, value, exc)
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    columns = _columns(cfg.ks, ["param", "value", "time_s"]) + [
        "scope_size", "cg_iterations", "update_norm", "error"
    ]
    _write_rows(cfg.out / f"sweep_{cfg.param}.csv", rows, columns)
    _write_json(cfg.out / f"sweep_{cfg.param}.json",
                {"command": "sweep", "config": cfg.as_dict(), "rows": rows})
    for row in rows:
        print(f"{cfg.param}={row['value']}: " + (row.get("error") or f"URR {row['urr']:.4f}"))
    return rows


COMMANDS = {
    "train": cmd_train,
    "unlearn": cmd_unlearn,
    "retrain": cmd_retrain,
    "compare": cmd_compare,
    "sweep": cmd_sweep,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="unrank", description="Train recommenders and unlearn interactions by unranking."
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value settings file")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        for key, (_, default, help_text) in SCHEMA.items():
            shown = "" if default is None else f" (default: {default!r})"
            p.add_argument(f"--{key}", default=None, help=help_text + shown)
        for d in ("scope", "influence", "cg", "ranks"):
            p.add_argument(f"--dump-{d}", action="store_true", help=f"write {d} debug CSV")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](cfg)
    except (ConfigError, CGBreakdown) as exc:
        print(f"unrank {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"unrank {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0
