"""Command-line entry point: ``bitformer <verb> [options]``.

Settings come from an INI file (``--config``) with sections ``[model]``,
``[data]``, ``[distill]`` and ``[run]``; command-line flags override it.
Every verb writes its tables as CSV to stdout and, where it makes sense,
to files under ``--out`` together with PNG figures.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import io
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import binkernel, checkpoint, plotting
from .data import SYNTH_KINDS, TsvSchema, Vocab, encode, load_tsv, synth_task
from .distill import (Dataset, DistillConfig, MetricsLog, accuracy, multi_distill, parse_schedule,
                      schedule_sweep, train_supervised, validate_schedule)
from .errors import BitformerError, ConfigError, InputError
from .model import Encoder, ModelConfig, count_cost, preset
from .quantizers import QuantSpec

log = logging.getLogger("bitformer")

DEFAULT_SCHEDULE = "1-1-2,1-1-1"
TABLE_SPECS = ("32-32-32", "1-1-1", "1-1-2", "1-1-4", "1-1-8")
SWEEP_LRS = (1e-4, 2e-4, 5e-4)
SWEEP_BATCHES = (16, 32)
SWEEP_PATHS = "1-1-1;1-1-2,1-1-1;1-1-4,1-1-1;1-1-8,1-1-1;1-1-4,1-1-2,1-1-1"

EXIT_CODES = {"config": 2, "input": 2, "schema": 3, "row": 3, "format": 4, "schedule": 5,
              "architecture": 5, "training": 6, "io": 7}


# ------------------------------------------------------------------ configuration

@dataclass
class DataSpec:
    task: str = "keyword-presence"
    n: int = 2000
    max_len: int = 16
    min_words: int = 6
    max_words: int = 14
    train: str = ""
    dev: str = ""
    text_column: str = "sentence"
    label_column: str = "label"

    @property
    def synthetic(self) -> bool:
        return not self.train


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)
    data: DataSpec = field(default_factory=DataSpec)
    distill: dict = field(default_factory=dict)
    out: Path = Path("runs")
    seed: int = 0
    spec: str | None = None
    schedule: str | None = None
    teacher: str | None = None

    def distill_config(self) -> DistillConfig:
        return DistillConfig(seed=self.seed, **self.distill)


def _cast(raw: str, like, key: str):
    try:
        if isinstance(like, bool):
            v = raw.strip().lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def _section(parser, name, cls, skip=()):
    if not parser.has_section(name):
        return {}
    defaults = {f.name: (f.default if f.default is not dataclasses.MISSING else f.default_factory())
                for f in dataclasses.fields(cls)}
    out = {}
    for key, raw in parser.items(name):
        if key in skip:
            out[key] = raw
            continue
        if key not in defaults:
            raise ConfigError(f"unknown key [{name}] {key}")
        out[key] = _cast(raw, defaults[key], f"[{name}] {key}")
    return out


def load_config(path=None, seed=None, out=None, schedule=None) -> RunConfig:
    parser = configparser.ConfigParser()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise InputError(f"config file not found: {p}")
        try:
            parser.read(p, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"{p}: {exc.message.splitlines()[0]}") from None
    model = _section(parser, "model", ModelConfig, skip=("preset", "quant"))
    data = DataSpec(**_section(parser, "data", DataSpec))
    dist = _section(parser, "distill", DistillConfig)
    dist.pop("seed", None)
    run = dict(parser.items("run")) if parser.has_section("run") else {}
    unknown = set(run) - {"seed", "out", "spec", "schedule", "teacher"}
    if unknown:
        raise ConfigError(f"unknown key [run] {sorted(unknown)[0]}")
    cfg = RunConfig(model=model, data=data, distill=dist,
                    out=Path(run.get("out", "runs")), seed=_cast(run.get("seed", "0"), 0, "[run] seed"),
                    spec=run.get("spec"), schedule=run.get("schedule"), teacher=run.get("teacher"))
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.out = Path(out)
    if schedule is not None:
        cfg.schedule, cfg.spec = schedule, None
    if cfg.spec and cfg.schedule:
        raise ConfigError("give either [run] spec or [run] schedule, not both")
    if cfg.data.task not in SYNTH_KINDS and cfg.data.synthetic:
        raise ConfigError(f"unknown synthetic task {cfg.data.task!r}; choose from {SYNTH_KINDS}")
    for p in (cfg.data.train, cfg.data.dev):
        if p and not Path(p).is_file():
            raise InputError(f"data file not found: {p}")
    if cfg.data.train and not cfg.data.dev:
        raise ConfigError("[data] train given without [data] dev")
    try:
        cfg.distill_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[distill]: {exc}") from None
    return cfg


# ------------------------------------------------------------------ data

def _examples(spec: DataSpec, seed: int):
    if spec.synthetic:
        return synth_task(spec.task, spec.n, seed=seed, length=(spec.min_words, spec.max_words))
    schema = TsvSchema(text=spec.text_column, label=spec.label_column)
    return load_tsv(spec.train, schema), load_tsv(spec.dev, schema)


def load_data(spec: DataSpec, seed: int, vocab: Vocab | None = None):
    tr, dv = _examples(spec, seed)
    vocab = vocab or Vocab.build(e.text for e in tr)
    return vocab, Dataset(*encode(tr, vocab, spec.max_len)), Dataset(*encode(dv, vocab, spec.max_len))


def _provenance(cfg: RunConfig, vocab: Vocab) -> dict:
    return {"data": dataclasses.asdict(cfg.data), "seed": cfg.seed, "vocab": vocab.itos[4:]}


def _data_from_checkpoint(meta: dict, cfg: RunConfig | None):
    extra = meta.get("extra", {})
    if "data" not in extra:
        raise InputError("checkpoint carries no data provenance; pass --config with a [data] section")
    spec = cfg.data if cfg is not None and cfg.data.train else DataSpec(**extra["data"])
    vocab = Vocab(extra["vocab"])
    return load_data(spec, extra.get("seed", 0), vocab)


def _emit(rows, header, path=None, stream=None):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    text = buf.getvalue()
    (stream or sys.stdout).write(text)
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")


def _fmt(x):
    return f"{x:.6g}" if isinstance(x, float) else x


# ------------------------------------------------------------------ verbs

def _model_config(cfg: RunConfig, vocab_size: int) -> ModelConfig:
    kw = dict(cfg.model)
    name = kw.pop("preset", "desk")
    kw.setdefault("max_seq_len", cfg.data.max_len)
    kw["vocab_size"] = vocab_size
    try:
        return preset(name, **kw)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"[model]: {exc}") from None


def cmd_train_fp(cfg: RunConfig, args) -> int:
    if cfg.spec and not QuantSpec.parse(cfg.spec).is_full_precision:
        raise ConfigError(f"train-fp needs spec 32-32-32, got {cfg.spec}")
    vocab, train, dev = load_data(cfg.data, cfg.seed)
    mc = _model_config(cfg, len(vocab))
    cfg.out.mkdir(parents=True, exist_ok=True)
    metrics = MetricsLog(cfg.out / "metrics.tsv", run_id=f"train-fp-seed{cfg.seed}")
    model = Encoder(mc, seed=cfg.seed)
    res = train_supervised(model, train, dev, cfg.distill_config(), metrics)
    path = cfg.out / "teacher.ckpt"
    checkpoint.save(path, model, extra=_provenance(cfg, vocab))
    vocab.save(cfg.out / "vocab.txt")
    _emit([(e, _fmt(l), _fmt(a)) for e, l, a in res.history], ("epoch", "train_loss", "dev_accuracy"))
    print(f"# best dev accuracy {res.dev_acc:.4f} at epoch {res.best_epoch}; wrote {path}")
    return 0


def _teacher(cfg, args):
    path = args.teacher or cfg.teacher
    if not path:
        raise ConfigError("no teacher checkpoint: pass --teacher or set [run] teacher")
    if not Path(path).is_file():
        raise InputError(f"teacher checkpoint not found: {path}")
    return path, checkpoint.load(path), checkpoint.read_meta(path)


def cmd_distill(cfg: RunConfig, args) -> int:
    if cfg.spec and not cfg.schedule:
        cfg.schedule = cfg.spec
    schedule = parse_schedule(cfg.schedule or DEFAULT_SCHEDULE)
    path, h0, meta = _teacher(cfg, args)
    validate_schedule(schedule, h0.quant)
    vocab, train, dev = _data_from_checkpoint(meta, cfg)
    cfg.out.mkdir(parents=True, exist_ok=True)
    mode = "progressive" if args.progressive else "multi"
    metrics = MetricsLog(cfg.out / "metrics.tsv", run_id=f"distill-{mode}-seed{cfg.seed}")
    run = multi_distill(h0, schedule, train, dev, cfg.distill_config(), metrics,
                        progressive=args.progressive)
    rows = []
    teacher_name = "32-32-32"
    for res in run.stages:
        rows.append((res.stage, str(res.spec), "32-32-32" if args.progressive else teacher_name,
                     res.best_epoch, _fmt(res.dev_acc)))
        teacher_name = str(res.spec)
    extra = dict(meta.get("extra", {}), mode=mode, schedule=[str(s) for s in schedule])
    for res, student in zip(run.stages, run.students):
        out = cfg.out / f"stage{res.stage}_{res.spec}.ckpt"
        checkpoint.save(out, student, latent=True, deployed=True, extra=extra)
    _emit(rows, ("stage", "spec", "teacher", "best_epoch", "dev_accuracy"))
    print(f"# {mode} distillation finished; final dev accuracy {run.stages[-1].dev_acc:.4f}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    if not Path(args.checkpoint).is_file():
        raise InputError(f"checkpoint not found: {args.checkpoint}")
    meta = checkpoint.read_meta(args.checkpoint)
    model = checkpoint.load(args.checkpoint)
    _, train, dev = _data_from_checkpoint(meta, cfg if args.config else None)
    data = train if args.split == "train" else dev
    acc = accuracy(model, data)
    header = ["checkpoint", "spec", "split", "n", "accuracy"]
    row = [args.checkpoint, str(model.quant), args.split, len(data), _fmt(acc)]
    if args.deploy:
        dep = model.deployed()
        latent = model.predict(data.ids)
        packed = dep.predict(data.ids)
        header += ["deploy_accuracy", "max_logit_deviation"]
        row += [_fmt(float((packed.argmax(1) == data.labels).mean())),
                _fmt(float(np.abs(latent - packed).max()))]
    _emit([row], header)
    return 0


def alpha_rows(model) -> list:
    rows = []
    for name, s in model.sites.items():
        layer, site = name.split(".", 1)
        rows.append({"layer": int(layer[1:]), "site": site, "kind": s.kind.value,
                     "alpha": s.alpha_value, "beta": s.beta_value})
    return rows


def cmd_inspect_alpha(cfg: RunConfig, args) -> int:
    if not Path(args.checkpoint).is_file():
        raise InputError(f"checkpoint not found: {args.checkpoint}")
    model = checkpoint.load(args.checkpoint)
    header = ("layer", "site", "kind", "alpha", "beta")
    cfg.out.mkdir(parents=True, exist_ok=True)
    if model.quant.a_bits == 32:
        _emit([], header, cfg.out / "alpha.csv")
        print("# full-precision activations: no quantization sites")
        return 0
    rows = alpha_rows(model)
    _emit([[r[k] if not isinstance(r[k], float) else _fmt(r[k]) for k in header] for r in rows],
          header, cfg.out / "alpha.csv")
    alphas = np.array([r["alpha"] for r in rows])
    png = plotting.plot_alphas(rows, cfg.out / "alpha.png", title=f"alpha per site ({model.quant.label})")
    print(f"# sites {len(rows)} alpha min {alphas.min():.6g} max {alphas.max():.6g} "
          f"ratio {alphas.max() / alphas.min():.3g}; figure {png}")
    return 0


def cmd_flops(cfg: RunConfig, args) -> int:
    mc = preset(args.preset) if args.preset else _model_config(cfg, cfg.model.get("vocab_size", 1000))
    specs = args.spec.split(";") if args.spec else list(TABLE_SPECS)
    rows = []
    for s in specs:
        c = count_cost(mc, QuantSpec.parse(s), seq_len=args.seq_len)
        rows.append((s, f"{c.size_mb:.2f}", f"{c.flops_g:.3f}", c.params))
    _emit(rows, ("spec", "size_mb", "flops_g", "params"))
    return 0


def cmd_bench(cfg: RunConfig, args) -> int:
    rep = binkernel.bench(args.m, args.k, args.n, reps=args.reps, seed=cfg.seed)
    print(rep.table())
    return 0


def cmd_sweep(cfg: RunConfig, args) -> int:
    cfg.out.mkdir(parents=True, exist_ok=True)
    if args.mode == "paths":
        path, h0, meta = _teacher(cfg, args)
        _, train, dev = _data_from_checkpoint(meta, cfg)
        schedules = [parse_schedule(p) for p in (args.paths or SWEEP_PATHS).split(";")]
        metrics = MetricsLog(cfg.out / "metrics.tsv", run_id=f"sweep-paths-seed{cfg.seed}")
        rows = schedule_sweep(h0, schedules, train, dev, cfg.distill_config(), metrics)
        _emit([(p, st, sp, _fmt(a)) for p, st, sp, a in rows], ("path", "stage", "spec", "dev_accuracy"),
              cfg.out / "paths.csv")
        png = plotting.plot_paths(rows, cfg.out / "paths.png")
        print(f"# figure {png}")
        return 0
    vocab, train, dev = load_data(cfg.data, cfg.seed)
    mc = _model_config(cfg, len(vocab))
    metrics = MetricsLog(cfg.out / "metrics.tsv", run_id=f"sweep-hparam-seed{cfg.seed}")
    rows, best = [], None
    for lr in SWEEP_LRS:
        for bs in SWEEP_BATCHES:
            dc = dataclasses.replace(cfg.distill_config(), lr=lr, batch_size=bs)
            model = Encoder(mc, seed=cfg.seed)
            metrics.run_id = f"sweep-hparam-seed{cfg.seed}-lr{lr:g}-bs{bs}"
            res = train_supervised(model, train, dev, dc, metrics)
            rows.append({"lr": lr, "batch_size": bs, "dev_acc": res.dev_acc})
            if best is None or res.dev_acc > best[0]["dev_acc"]:
                best = (rows[-1], model)
    _emit([(f"{r['lr']:g}", r["batch_size"], _fmt(r["dev_acc"])) for r in rows],
          ("lr", "batch_size", "dev_accuracy"), cfg.out / "sweep.csv")
    checkpoint.save(cfg.out / "best.ckpt", best[1], extra=_provenance(cfg, vocab))
    png = plotting.plot_sweep(rows, cfg.out / "sweep.png")
    print(f"# best lr {best[0]['lr']:g} batch {best[0]['batch_size']} dev {best[0]['dev_acc']:.4f}; "
          f"wrote {cfg.out / 'best.ckpt'} and {png}")
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI file with [model] [data] [distill] [run]")
    common.add_argument("--seed", type=int, help="overrides [run] seed")
    common.add_argument("--out", metavar="DIR", help="overrides [run] out")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="bitformer", description="Binarized transformer toolkit.")
    sub = ap.add_subparsers(dest="verb", required=True)

    sub.add_parser("train-fp", parents=[common], help="train the full-precision teacher")

    p = sub.add_parser("distill", parents=[common], help="multi-step distillation from a teacher")
    p.add_argument("--teacher", metavar="CKPT")
    p.add_argument("--schedule", metavar="SPECS", help=f"comma-separated e-w-a specs (default {DEFAULT_SCHEDULE})")
    p.add_argument("--progressive", action="store_true", help="keep the full-precision teacher at every stage")

    p = sub.add_parser("eval", parents=[common], help="accuracy of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--split", choices=("dev", "train"), default="dev")
    p.add_argument("--deploy", action="store_true", help="also run packed-kernel inference")

    p = sub.add_parser("inspect-alpha", parents=[common], help="per-site alpha/beta table and figure")
    p.add_argument("checkpoint")

    p = sub.add_parser("flops", parents=[common], help="model size and FLOPs table")
    p.add_argument("--preset", default=None, help="model preset, e.g. bert-base (default: [model] section)")
    p.add_argument("--spec", help="semicolon-separated specs (default: the standard table)")
    p.add_argument("--seq-len", type=int, default=128)

    p = sub.add_parser("bench", parents=[common], help="packed vs float matmul timing")
    p.add_argument("--m", type=int, default=512)
    p.add_argument("--k", type=int, default=512)
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--reps", type=int, default=5)

    p = sub.add_parser("sweep", parents=[common], help="hyperparameter grid or distillation paths")
    p.add_argument("--mode", choices=("hparam", "paths"), default="hparam")
    p.add_argument("--teacher", metavar="CKPT", help="teacher for --mode paths")
    p.add_argument("--paths", help=f"';'-separated schedules (default {SWEEP_PATHS})")
    return ap


COMMANDS = {"train-fp": cmd_train_fp, "distill": cmd_distill, "eval": cmd_eval,
            "inspect-alpha": cmd_inspect_alpha, "flops": cmd_flops, "bench": cmd_bench,
            "sweep": cmd_sweep}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out,
                          schedule=getattr(args, "schedule", None))
        return COMMANDS[args.verb](cfg, args)
    except BitformerError as exc:
        print(f"bitformer: {exc.category} error: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except OSError as exc:
        print(f"bitformer: io error: {exc}", file=sys.stderr)
        return EXIT_CODES["io"]


if __name__ == "__main__":
    sys.exit(main())
