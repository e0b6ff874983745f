"""``dapmae`` command-line entry point.

Exit codes: 0 success, 1 training divergence, 2 configuration/format/mode error,
3 gradient-check failure. Errors are also written to stderr as one JSON line.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .checkpoint import ModeError, load_checkpoint, save_checkpoint
from .config import ConfigError, TrainConfig, apply_overrides, desk_config, finetune_defaults, from_dict, tiny_config
from .data import MANIFEST_NAME, FormatError, load_corpus, read_manifest, save_dpc, synthesize, write_manifest
from .geometry import DomainId
from .network import TrainingDivergence

EXIT_OK, EXIT_DIVERGED, EXIT_CONFIG, EXIT_GRADCHECK = 0, 1, 2, 3

PROFILES = {
    "full": lambda phase: finetune_defaults(TrainConfig()) if phase == "finetune" else TrainConfig(),
    "desk": desk_config,
    "tiny": lambda phase: tiny_config(phase=phase),
}


class CliError(Exception):
    def __init__(self, code: str, message: str, exit_code: int, context: dict | None = None):
        super().__init__(message)
        self.code, self.message, self.exit_code = code, message, exit_code
        self.context = context or {}


def _emit_error(err: CliError) -> int:
    line = json.dumps({"code": err.code, "message": err.message, "context": err.context}, sort_keys=True, ensure_ascii=False)
    print(line, file=sys.stderr)
    return err.exit_code


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for key, val in extra.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def resolve_config(args, phase: str) -> TrainConfig:
    """Profile defaults, then the JSON file, then ``--set`` overrides; validated once."""
    base = PROFILES[args.profile](phase).to_dict()
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc.msg})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{args.config}: config must be a JSON object")
        base = _merge(base, data)
    base["phase"] = phase
    # validated once, after the overrides
    return apply_overrides(from_dict(base, validate=False), args.set)


def _require(value, key: str):
    if value is None:
        raise ConfigError(f"{key} is required for this command", key)
    return value


def _corpus(path, key: str):
    return load_corpus(_require(path, key))


# -- commands -------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.count < 1:
        raise CliError("invalid_argument", "count must be ≥ 1", EXIT_CONFIG, {"count": args.count})
    domain = DomainId.parse(args.domain)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        entries = {}
        if (out / MANIFEST_NAME).exists():
            entries = {e["path"]: e for e in read_manifest(out)["entries"]}
        for i in range(args.count):
            cloud, label = synthesize(domain, args.seed * 100003 + i, args.points)
            name = f"{domain.slug}_{args.seed}_{i}.dpc"
            save_dpc(cloud, out / name)
            entry = {"path": name, "domain": int(domain)}
            if label is not None:
                entry["label"] = label
            entries[name] = entry
        write_manifest(out, list(entries.values()))
    except OSError as exc:
        raise CliError("io_error", f"cannot write to {out}: {exc.strerror or exc}", EXIT_CONFIG,
                       {"path": str(out)}) from None
    print(f"wrote {args.count} {domain.slug} clouds to {out}")
    return EXIT_OK


def _write_json(path, doc) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_pretrain(args) -> int:
    from .trainer import pretrain

    cfg = resolve_config(args, "pretrain")
    p = cfg.paths
    out = _require(p.checkpoint_out, "paths.checkpoint_out")
    corpus = _corpus(p.corpus, "paths.corpus")
    val = load_corpus(p.val_corpus) if p.val_corpus else None
    init = load_checkpoint(p.checkpoint_in) if p.checkpoint_in else None
    ckpt, history = pretrain(cfg, corpus, val, init=init, metrics_path=p.metrics_out)
    n = save_checkpoint(ckpt, out)
    last = history[-1] if history else {}
    print(json.dumps({"checkpoint": out, "bytes": n, "last": last}, sort_keys=True))
    return EXIT_OK


def cmd_finetune(args) -> int:
    from .trainer import finetune

    cfg = resolve_config(args, "finetune")
    p = cfg.paths
    out = _require(p.checkpoint_out, "paths.checkpoint_out")
    source = load_checkpoint(_require(p.checkpoint_in, "paths.checkpoint_in"))
    corpus = _corpus(p.corpus, "paths.corpus")
    val = load_corpus(p.val_corpus) if p.val_corpus else None
    ckpt, history = finetune(cfg, source, corpus, val, metrics_path=p.metrics_out)
    n = save_checkpoint(ckpt, out)
    print(json.dumps({"checkpoint": out, "bytes": n, "last": history[-1] if history else {}}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .trainer import evaluate

    paths = resolve_config(args, "pretrain").paths
    ckpt = load_checkpoint(_require(args.checkpoint or paths.checkpoint_in, "paths.checkpoint_in"))
    corpus = _corpus(args.corpus or paths.corpus, "paths.corpus")
    probe_path = args.probe_corpus or paths.probe_corpus
    probe = load_corpus(probe_path) if probe_path else None
    metrics = evaluate(ckpt, corpus, probe_train=probe)
    print(json.dumps(metrics, sort_keys=True))
    report = args.report or paths.report_out
    if report:
        _write_json(report, metrics)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import grad_check

    cfg = resolve_config(args, "pretrain")
    report = grad_check(cfg, components=args.component or None, losses=args.loss or ("pretrain", "finetune"),
                        tolerance=args.tolerance)
    out = args.report or cfg.paths.report_out or "gradcheck_report.json"
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    Path(out).write_text(report.to_json())
    print(report.to_text())
    if not report.passed:
        raise CliError("gradcheck_failed", "gradient check failed on " + ", ".join(r.block for r in report.failures),
                       EXIT_GRADCHECK, {"blocks": [r.block for r in report.failures],
                                        "max_rel_err": report.max_rel_err, "report": out})
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = Path(args.checkpoint)
    raw = path.read_bytes()
    from .checkpoint import VERSION, decode

    ckpt = decode(raw)
    counts = ckpt.param_counts()
    lines = [
        f"version={VERSION}",
        f"phase={ckpt.phase}",
        f"mode={ckpt.hda_mode}",
        f"epoch={ckpt.epoch}",
    ]
    lines += [f"params.{name}={n}" for name, n in counts.items()]
    lines += [f"params.total={sum(counts.values())}", f"bytes={len(raw)}"]
    print("\n".join(lines))
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------

def _add_config_args(p, default_profile: str) -> None:
    p.add_argument("--config", help="JSON config file; keys mirror the training config")
    p.add_argument("--profile", choices=sorted(PROFILES), default=default_profile,
                   help=f"defaults for keys the config file omits (default: {default_profile})")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-path override, e.g. optimizer.lr=1e-3 (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dapmae", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dapmae {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch metrics to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate synthetic clouds as DPC1 files plus a manifest")
    g.add_argument("--domain", required=True, choices=[d.slug for d in DomainId])
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--points", type=int, default=512)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    for name, func, help_ in (("pretrain", cmd_pretrain, "cross-domain masked pre-training"),
                              ("finetune", cmd_finetune, "classification fine-tuning in fusion mode")):
        p = sub.add_parser(name, help=help_)
        _add_config_args(p, "full")
        p.set_defaults(func=func)

    e = sub.add_parser("eval", help="accuracy, reconstruction loss and domain probe for a checkpoint")
    _add_config_args(e, "full")
    e.add_argument("--checkpoint")
    e.add_argument("--corpus")
    e.add_argument("--probe-corpus")
    e.add_argument("--report", help="also write the metrics JSON here")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient check at tiny dimensions")
    _add_config_args(c, "tiny")
    c.add_argument("--component", action="append", help="block path or glob to check (repeatable)")
    c.add_argument("--loss", action="append", choices=["pretrain", "finetune"])
    c.add_argument("--tolerance", type=float, default=1e-5)
    c.add_argument("--report", help="report file (default: paths.report_out or gradcheck_report.json)")
    c.set_defaults(func=cmd_gradcheck)

    i = sub.add_parser("inspect", help="summarize a checkpoint")
    i.add_argument("--checkpoint", required=True)
    i.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as err:
        return _emit_error(err)
    except ConfigError as exc:
        return _emit_error(CliError("config_error", str(exc), EXIT_CONFIG, {"key": exc.key}))
    except FormatError as exc:
        return _emit_error(CliError("format_error", str(exc), EXIT_CONFIG, {"offset": exc.offset}))
    except ModeError as exc:
        return _emit_error(CliError("mode_error", str(exc), EXIT_CONFIG, {}))
    except TrainingDivergence as exc:
        return _emit_error(CliError("training_divergence", str(exc), EXIT_DIVERGED,
                                    {"step": exc.step, **(exc.context or {})}))
    except FileNotFoundError as exc:
        return _emit_error(CliError("not_found", f"{exc.filename}: no such file", EXIT_CONFIG,
                                    {"path": exc.filename}))
    except (OSError, ValueError) as exc:
        return _emit_error(CliError("invalid_input", str(exc), EXIT_CONFIG, {}))


if __name__ == "__main__":
    sys.exit(main())
