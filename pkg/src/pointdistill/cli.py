"""Command-line entry point: ``pointdistill <command> [options]``.

Settings resolve in order: explicit flag, then the ``--config`` file (flat
``key=value`` lines, ``#`` comments, model fields as ``model.<field>``), then
built-in defaults. Every command writes the effective settings to
``config.dump`` in ``--out-dir``.
"""
from __future__ import annotations

import argparse
import contextlib
import sys
from dataclasses import fields
from pathlib import Path

from . import __version__
from .errors import IncompatibleError, MissingInputError, PointDistillError, UsageError
from .model import PROFILES, Classifier, ModelConfig
from .persistence import (Checkpoint, atomic_write, load_checkpoint, load_dataset, load_state,
                          save_checkpoint, save_dataset)
from .training import (AugmentConfig, FinetuneConfig, TrainConfig, evaluate, finetune_classify,
                       format_record, generate_dataset, make_checkpoint, pretrain, teacher_for)
from .teacher import load_fixtures, write_fixtures

# option name -> (type, default); None defaults mean "unset"
COMMON = {"seed": (int, 0), "profile": (str, "full"), "threads": (int, None), "out_dir": (str, "out")}
SCHEMAS = {
    "gen-data": {"classes": (int, 4), "samples_per_class": (int, 16), "points": (int, None),
                 "noise": (float, 0.01), "teacher_noise": (float, 0.1), "prototype_seed": (int, 0),
                 "id_offset": (int, 0), "out": (str, None)},
    "pretrain": {"data": (str, None), "teacher": (str, None), "loss": (str, "distill"),
                 "no_concept": (bool, False), "epochs": (int, 250), "warmup_epochs": (int, 10),
                 "batch_size": (int, 32), "lr": (float, 1e-3), "weight_decay": (float, 0.05),
                 "min_lr": (float, 1e-6), "max_steps": (int, None), "decoder_seed": (int, None),
                 "freeze_decoder": (bool, False), "augment": (bool, True), "resume": (str, None),
                 "force": (bool, False)},
    "finetune": {"data": (str, None), "ckpt": (str, None), "test_data": (str, None),
                 "epochs": (int, 300), "warmup_epochs": (int, 10), "batch_size": (int, 32),
                 "lr": (float, 5e-4), "weight_decay": (float, 0.05), "min_lr": (float, 1e-6),
                 "max_steps": (int, None), "votes": (int, 1), "augment": (bool, True)},
    "eval": {"ckpt": (str, None), "data": (str, None), "votes": (int, 1), "augment": (bool, True)},
    "gradcheck": {"scope": (str, "all"), "samples": (int, 64)},
    "inspect": {"ckpt": (str, None)},
}
REQUIRED = {"pretrain": ("data",), "finetune": ("data",), "eval": ("ckpt", "data"), "inspect": ("ckpt",)}
CHOICES = {"loss": ("distill", "recon", "both", "none"), "scope": ("ops", "model", "all"),
           "profile": tuple(PROFILES)}


def _parse_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def _convert(kind, text):
    if kind is bool:
        return _parse_bool(text)
    try:
        return kind(text)
    except ValueError as exc:
        raise UsageError(f"bad value {text!r}: {exc}") from exc


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` pairs; blank lines and ``#`` comments ignored."""
    try:
        text = Path(path).read_text()
    except FileNotFoundError as exc:
        raise MissingInputError(f"config file not found: {path}") from exc
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = val
    return out


_MODEL_FIELDS = {f.name: f for f in fields(ModelConfig)}


def _model_override(key: str, text: str):
    f = _MODEL_FIELDS.get(key)
    if f is None:
        raise UsageError(f"unknown model setting {key!r}")
    if key == "tokenizer_channels":
        return tuple(int(x) for x in text.replace(",", " ").split())
    default = getattr(ModelConfig(), key)
    return _convert(type(default), text)


def resolve(command: str, args: argparse.Namespace) -> tuple[dict, ModelConfig]:
    schema = {**COMMON, **SCHEMAS[command]}
    filecfg = read_config_file(args.config) if args.config else {}
    settings, model_over = {}, {}
    for key, text in filecfg.items():
        if key.startswith("model."):
            model_over[key[6:]] = _model_override(key[6:], text)
        elif key not in schema:
            raise UsageError(f"unknown setting {key!r} in {args.config}")
    for key, (kind, default) in schema.items():
        val = getattr(args, key, None)
        if val is None and key in filecfg:
            val = _convert(kind, filecfg[key])
        settings[key] = default if val is None else val
        if key in CHOICES and settings[key] not in CHOICES[key]:
            raise UsageError(f"{key} must be one of {CHOICES[key]}, got {settings[key]!r}")
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, text = item.split("=", 1)
        model_over[key.strip()] = _model_override(key.strip(), text.strip())
    for key in REQUIRED.get(command, ()):
        if settings[key] is None:
            raise UsageError(f"{command} needs --{key.replace('_', '-')}")
    try:
        cfg = PROFILES[settings["profile"]](**model_over)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid model settings: {exc}") from exc
    return settings, cfg


def dump_config(path: Path, command: str, settings: dict, cfg: ModelConfig) -> None:
    lines = [f"# pointdistill {__version__}", f"command={command}"]
    lines += [f"{k}={'' if v is None else v}" for k, v in sorted(settings.items())]
    for k, v in sorted(cfg.to_dict().items()):
        v = ",".join(map(str, v)) if isinstance(v, list) else v
        lines.append(f"model.{k}={v}")
    atomic_write(path, ("\n".join(lines) + "\n").encode())


def write_metrics(path: Path, metrics: dict) -> None:
    atomic_write(path, "".join(f"{k}={v}\n" for k, v in metrics.items()).encode())


def _augment(settings) -> AugmentConfig:
    return AugmentConfig(enabled=settings["augment"])


# --- commands -------------------------------------------------------------------

def cmd_gen_data(s: dict, cfg: ModelConfig, out: Path) -> int:
    """Generate a synthetic shape dataset and paired teacher fixtures."""
    points = s["points"] or cfg.num_points
    if s["classes"] < 1 or s["samples_per_class"] < 0 or points < 1 or s["noise"] < 0 or s["teacher_noise"] < 0:
        raise UsageError("classes >= 1, samples-per-class >= 0, points >= 1 and noise >= 0 required")
    ds = generate_dataset(s["classes"], s["samples_per_class"], points, s["noise"], s["seed"], s["id_offset"])
    fx = teacher_for(ds, cfg.prefix_len, cfg.teacher_dim, s["teacher_noise"], s["seed"], s["prototype_seed"])
    data_path = Path(s["out"]) if s["out"] else out / "dataset.pdds"
    data_path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(data_path, ds)
    write_fixtures(data_path.with_suffix(".pdtf"), fx)
    write_metrics(out / "metrics.txt", {"samples": len(ds), "fixtures": len(fx), "points": points,
                                        "classes": s["classes"]})
    print(f"wrote {len(ds)} samples to {data_path} and {len(fx)} fixtures to {data_path.with_suffix('.pdtf')}")
    return 0


def _teacher_path(s: dict) -> Path:
    return Path(s["teacher"]) if s["teacher"] else Path(s["data"]).with_suffix(".pdtf")


def cmd_pretrain(s: dict, cfg: ModelConfig, out: Path) -> int:
    """Pre-train the encoder with distill, recon, both or no loss."""
    ds = load_dataset(s["data"])
    tc = TrainConfig(loss=s["loss"], no_concept=s["no_concept"], batch_size=s["batch_size"], seed=s["seed"],
                     lr=s["lr"], weight_decay=s["weight_decay"], epochs=s["epochs"],
                     warmup_epochs=s["warmup_epochs"], min_lr=s["min_lr"], max_steps=s["max_steps"],
                     decoder_seed=s["decoder_seed"], freeze_decoder=s["freeze_decoder"], augment=_augment(s))
    teacher = None
    if tc.uses_distill:
        path = _teacher_path(s)
        if not path.exists():
            raise MissingInputError(f"distillation needs teacher fixtures; {path} not found")
        teacher = load_fixtures(path)
    resume = load_checkpoint(s["resume"], expected=cfg, force=s["force"]) if s["resume"] else None
    mode = "a" if resume is not None else "w"
    with open(out / "train.log", mode) as log, open(out / "timing.log", mode) as timing:
        def emit(rec):
            log.write(format_record(rec) + "\n")
            log.flush()
            timing.write(f'{{"epoch": {rec["epoch"]}, "wall": {rec["wall"]}}}\n')
        result = pretrain(ds, cfg, tc, teacher, resume=resume, on_record=emit, abort_path=out / "model.ckpt")
    save_checkpoint(out / "model.ckpt", result.checkpoint)
    metrics = {"steps": result.step}
    if result.step_losses and result.step_losses[0]:
        metrics["first_loss"] = result.step_losses[0]["total"]
        metrics["final_loss"] = result.step_losses[-1]["total"]
    write_metrics(out / "metrics.txt", metrics)
    print(" ".join(f"{k}={v}" for k, v in metrics.items()))
    return 0


def _classifier_from(ck: Checkpoint) -> Classifier:
    if ck.meta.get("kind") != "finetune":
        raise IncompatibleError("checkpoint holds no classification head (not a fine-tune checkpoint)")
    model = Classifier(ck.config, int(ck.meta["num_classes"]), seed=ck.seed)
    load_state(model, ck.tensors)
    return model


def cmd_finetune(s: dict, cfg: ModelConfig, out: Path) -> int:
    """Fine-tune a classifier from a checkpoint or from scratch."""
    ds = load_dataset(s["data"])
    init = load_checkpoint(s["ckpt"]) if s["ckpt"] else None
    fc = FinetuneConfig(batch_size=s["batch_size"], seed=s["seed"], lr=s["lr"], weight_decay=s["weight_decay"],
                        epochs=s["epochs"], warmup_epochs=s["warmup_epochs"], min_lr=s["min_lr"],
                        max_steps=s["max_steps"], augment=_augment(s))
    k = len(ds.class_names) or int(ds.labels.max()) + 1
    with open(out / "train.log", "w") as log:
        result = finetune_classify(ds, cfg, fc, init, num_classes=k,
                                   on_record=lambda rec: log.write(format_record(rec) + "\n"))
    meta = {"kind": "finetune", "num_classes": k, "train": fc.to_dict(), "init": "checkpoint" if init else "scratch"}
    save_checkpoint(out / "model.ckpt", make_checkpoint(result.model, None, cfg, s["seed"], result.step, meta))
    metrics = {"steps": result.step, "order_hash": result.order_hash,
               "train_acc": result.records[-1]["train_acc"] if result.records else float("nan")}
    if s["test_data"]:
        test = load_dataset(s["test_data"])
        metrics["test_acc"] = evaluate(result.model, test, s["votes"], s["seed"], _augment(s))["accuracy"]
    write_metrics(out / "metrics.txt", metrics)
    print(" ".join(f"{k}={v}" for k, v in metrics.items()))
    return 0


def cmd_eval(s: dict, cfg: ModelConfig, out: Path) -> int:
    """Evaluate a fine-tuned classifier, optionally with voting."""
    if s["votes"] < 1:
        raise UsageError("votes must be >= 1")
    model = _classifier_from(load_checkpoint(s["ckpt"]))
    metrics = evaluate(model, load_dataset(s["data"]), s["votes"], s["seed"], _augment(s))
    write_metrics(out / "metrics.txt", metrics)
    print(" ".join(f"{k}={v}" for k, v in metrics.items()))
    return 0


def cmd_gradcheck(s: dict, cfg: ModelConfig, out: Path) -> int:
    """Finite-difference check of every op and the end-to-end losses."""
    from .gradcheck_suite import OP_CASES, run_suite
    results = run_suite(s["scope"], samples=s["samples"], seed=s["seed"])
    lines = [f"{r.name:16s} max_rel_error={r.max_rel_error:.3e} tol={r.tolerance:g} "
             f"raw={r.raw_rel_error:.3e} samples={r.samples} {'ok' if r.passed else 'FAIL'}" for r in results]
    if s["scope"] in ("ops", "all"):
        lines.append(f"coverage: {len(OP_CASES)} registered differentiable ops")
    text = "\n".join(lines) + "\n"
    atomic_write(out / "gradcheck.txt", text.encode())
    sys.stdout.write(text)
    return 0 if all(r.passed for r in results) else 1


def inspect_text(ck: Checkpoint, path) -> str:
    c = ck.config
    lines = [f"file: {path}", "format: PDCK v1", f"config digest: {c.digest().hex()}",
             f"seed: {ck.seed}", f"step: {ck.step}", f"kind: {ck.meta.get('kind', 'unknown')}",
             f"encoder: depth={c.depth} heads={c.heads} dim={c.dim} patches={c.num_patches}x{c.patch_size} "
             f"points={c.num_points}",
             f"concept: tokens={c.concept_tokens} prefix_len={c.prefix_len} teacher_dim={c.teacher_dim}",
             f"optimizer state: {'yes (step %d)' % ck.optimizer.step if ck.optimizer else 'no'}",
             "tensors:"]
    params = 0
    for name, arr in ck.tensors.items():
        lines.append(f"  {name} {'x'.join(map(str, arr.shape)) or 'scalar'} {arr.size}")
        if not name.endswith(("running_mean", "running_var")):
            params += arr.size
    lines.append(f"tensor count: {len(ck.tensors)}")
    lines.append(f"parameters: {params}")
    lines.append(f"total elements: {sum(a.size for a in ck.tensors.values())}")
    return "\n".join(lines) + "\n"


def cmd_inspect(s: dict, cfg: ModelConfig, out: Path) -> int:
    """Summarise a checkpoint file."""
    sys.stdout.write(inspect_text(load_checkpoint(s["ckpt"]), s["ckpt"]))
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "eval": cmd_eval, "gradcheck": cmd_gradcheck, "inspect": cmd_inspect}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value settings file")
    common.add_argument("--profile", choices=CHOICES["profile"], help="model size profile (default full)")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="cap on numerics kernel threads")
    common.add_argument("--out-dir", dest="out_dir")
    common.add_argument("--set", action="append", metavar="FIELD=VALUE", help="override a model setting")
    parser = argparse.ArgumentParser(prog="pointdistill", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, schema in SCHEMAS.items():
        p = sub.add_parser(name, parents=[common], help=COMMANDS[name].__doc__)
        for key, (kind, _) in schema.items():
            flag = "--" + key.replace("_", "-")
            if kind is bool:
                p.add_argument(flag, dest=key, type=_parse_bool, nargs="?", const=True, metavar="BOOL")
            else:
                p.add_argument(flag, dest=key, type=kind, choices=CHOICES.get(key))
    return parser


def _threads(n):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings, cfg = resolve(args.command, args)
        out = Path(settings["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        dump_config(out / "config.dump", args.command, settings, cfg)
        with _threads(settings["threads"]):
            return COMMANDS[args.command](settings, cfg, out)
    except PointDistillError as exc:
        print(f"pointdistill {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"pointdistill {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
