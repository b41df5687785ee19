"""Batch command-line interface.

Subcommands cover corpus synthesis, text fabrication, rationale generation
and validation, training, evaluation, routing analysis and the ablation
grid. Every artifact-producing run writes a run.json beside its outputs
recording the effective config, the seed and content hashes of the inputs.

Exit codes: 0 success, 1 usage or configuration problem, 2 data problem,
3 runtime failure. Errors print as a single machine-parseable stderr line.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import cot as cot_mod
from . import data as data_mod
from . import evalkit
from . import textforge
from . import trainer as trainer_mod
from .errors import ConfigError, DataError, TemplateError, UmfdetError
from .instruct import Vocabulary, default_template, load_template
from .model import ModelConfig, init_model
from .trainer import TrainConfig, config_hash

ENDPOINT_ENV = "UMFDET_GEN_ENDPOINT"
TOKEN_ENV = "UMFDET_GEN_TOKEN"


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems on exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"umfdet: error: usage: {message}", file=sys.stderr)
        sys.exit(1)


def blob_hash(path) -> str:
    """Git-style blob hash of a file's content."""
    content = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(content) + content).hexdigest()


def write_run_record(out_dir, command, args_ns, effective, inputs, started):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "argv": sys.argv[1:],
        "seed": effective.get("seed"),
        "effective_config": effective,
        "config_hash": config_hash(effective),
        "inputs": {str(p): blob_hash(p) for p in inputs if p and Path(p).exists()},
        "started_unix": round(started, 3),
        "duration_s": round(time.time() - started, 3),
    }
    with open(out / "run.json", "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# config file handling


def parse_config_file(path) -> dict:
    """Flat key=value lines; blank lines and # comments are skipped."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            key = key.strip()
            if key in out:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = value.strip()
    return out


def _coerce(raw: str, target_type):
    if target_type is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if target_type is int:
        return int(raw)
    if target_type is float:
        return float(raw)
    return raw


_MODEL_FIELDS = {f.name: f for f in fields(ModelConfig)}
_TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig)}
_EXTRA_KEYS = {"split_seed": int, "min_count": int, "max_vocab": int}


def resolve_configs(config_path, flag_model: dict, flag_train: dict, flag_extra: dict):
    """defaults < config file < explicit flags; unknown keys are rejected."""
    model_kv, train_kv, extra_kv = {}, {}, {}
    if config_path:
        for key, raw in parse_config_file(config_path).items():
            if key in _TRAIN_FIELDS:
                base = _TRAIN_FIELDS[key].default
                target = type(base) if base is not None else float
                train_kv[key] = _coerce(raw, target)
            elif key in _MODEL_FIELDS:
                target = type(_MODEL_FIELDS[key].default)
                model_kv[key] = _coerce(raw, target)
            elif key in _EXTRA_KEYS:
                extra_kv[key] = _coerce(raw, _EXTRA_KEYS[key])
            else:
                raise ConfigError(f"unknown config key {key!r} in {config_path}")
    model_kv.update({k: v for k, v in flag_model.items() if v is not None})
    train_kv.update({k: v for k, v in flag_train.items() if v is not None})
    extra_kv.update({k: v for k, v in flag_extra.items() if v is not None})
    extra = {"split_seed": 0, "min_count": 2, "max_vocab": 8192}
    extra.update(extra_kv)
    return model_kv, train_kv, extra


def make_gen_client(args) -> cot_mod.GenClient:
    endpoint = os.environ.get(ENDPOINT_ENV)
    if getattr(args, "mock", False) or not endpoint:
        return cot_mod.MockGenClient()
    return cot_mod.HttpGenClient(endpoint, auth_token=os.environ.get(TOKEN_ENV))


def _load_corpus(path):
    samples = data_mod.load_manifest(path)
    kept, _ = data_mod.similarity_gate(samples)
    return kept


def _split_corpus(samples, split_seed):
    return data_mod.split(samples, data_mod.SplitSpec(seed=split_seed))


def _template(args):
    if getattr(args, "template", None):
        return load_template(args.template)
    return default_template()


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth_toy(args):
    started = time.time()
    samples = data_mod.synth_toy_corpus(args.n, args.cue_strength, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data_mod.save_manifest(samples, out)
    stats = data_mod.corpus_stats(samples)
    write_run_record(out.parent, "synth-toy", args,
                     {"n": args.n, "cue_strength": args.cue_strength, "seed": args.seed,
                      "out": str(out)},
                     [], started)
    by = stats["by_label"]
    print(f"wrote {stats['total']} samples to {out} "
          f"(real={by['real']}, human_crafted={by['human_crafted']}, "
          f"ai_synthesized={by['ai_synthesized']})")
    return 0


def cmd_fabricate_text(args):
    started = time.time()
    samples = data_mod.load_manifest(args.manifest)
    rng = np.random.default_rng(args.seed)
    client = make_gen_client(args)
    lexicon = textforge.default_lexicon()
    gaz = cot_mod.default_gazetteer()
    label = data_mod.Category.parse(args.label)
    if label is None:
        raise ConfigError(f"--label must be one of {data_mod.CATEGORY_NAMES}, "
                          f"got {args.label!r}")
    fabricated = []
    for s in samples:
        entities = cot_mod.extract_entities(s.title, gaz)
        if args.strategy == "keyword_distortion":
            title, log = textforge.keyword_distortion(s.title, entities, lexicon, rng,
                                                      gen=client)
        else:
            title, log = textforge.pure_fake_rewrite(s.title, entities, client)
        kind = ("keyword_distortion" if log.strategy == "keyword_distortion"
                else "pure_fake_text")
        annotation = data_mod.ManipulationAnnotation(kind=kind,
                                                     rewrite_log=log.to_manifest())
        fabricated.append(data_mod.NewsSample(
            id=f"{s.id}-fab", title=title, image=s.image, label=label,
            annotation=annotation, cot=None))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data_mod.save_manifest(fabricated, out)
    write_run_record(out.parent, "fabricate-text", args,
                     {"strategy": args.strategy, "label": args.label, "seed": args.seed,
                      "manifest": str(args.manifest), "out": str(out)},
                     [args.manifest], started)
    print(f"fabricated {len(fabricated)} titles ({args.strategy}) -> {out}")
    return 0


def cmd_cot_gen(args):
    started = time.time()
    samples = data_mod.load_manifest(args.manifest)
    client = make_gen_client(args)
    records = cot_mod.generate_corpus_cots(samples, client, k_attempts=args.attempts,
                                           max_workers=args.workers)
    accepted = 0
    for s, rec in zip(samples, records):
        s.cot = rec.to_note()
        accepted += int(rec.accepted)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data_mod.save_manifest(samples, out)
    write_run_record(out.parent, "cot-gen", args,
                     {"attempts": args.attempts, "workers": args.workers,
                      "manifest": str(args.manifest), "out": str(out), "seed": None},
                     [args.manifest], started)
    print(f"rationales: {accepted}/{len(samples)} accepted "
          f"({len(samples) - accepted} rejected) -> {out}")
    return 0


def cmd_cot_validate(args):
    samples = data_mod.load_manifest(args.manifest)
    gaz = cot_mod.default_gazetteer()
    counts = {"accepted": 0, "missing": 0}
    reasons = {}
    for s in samples:
        if s.cot is None or not s.cot.think:
            counts["missing"] += 1
            continue
        raw = f"<think>{s.cot.think}</think><answer>{s.cot.answer}</answer>"
        rec = cot_mod.parse_cot(raw)
        rec = cot_mod.validate_cot(rec, s, cot_mod.extract_entities(s.title, gaz),
                                   gazetteer=gaz)
        if rec.accepted:
            counts["accepted"] += 1
        else:
            reasons[rec.reject_reason] = reasons.get(rec.reject_reason, 0) + 1
    report = {"n_samples": len(samples), **counts, "rejected_by_reason": reasons}
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(f"validated {len(samples)} rationales: {counts['accepted']} accepted, "
          f"{sum(reasons.values())} rejected, {counts['missing']} missing")
    return 0


def _build_vocab(train_samples, template, min_count, max_vocab):
    from .instruct import render_prompt

    texts = []
    for s in train_samples:
        texts.append(render_prompt(template, s.title))
        if s.cot is not None:
            texts.append(f"<think>{s.cot.think}</think><answer>{s.cot.answer}</answer>")
    return Vocabulary.build(texts, min_count=min_count, max_size=max_vocab)


def cmd_train(args):
    started = time.time()
    flag_model = {"lambda_cot": args.lambda_cot, "dropout_rate": args.dropout,
                  "moe_enabled": False if args.no_moe else None,
                  "gate_scaling": False if args.no_gate_scaling else None}
    flag_train = {"lr": args.lr, "max_steps": args.steps, "batch_size": args.batch_size,
                  "seed": args.seed, "eval_every": args.eval_every,
                  "routing_aux_coeff": args.routing_aux,
                  "target_val_acc": args.target_val_acc,
                  "freeze_patch_embedder": True if args.freeze_patch_embedder else None}
    model_kv, train_kv, extra = resolve_configs(args.config, flag_model, flag_train, {})
    tcfg = TrainConfig.from_json({**TrainConfig().to_json(), **train_kv})
    template = _template(args)
    samples = _load_corpus(args.manifest)
    train_s, val_s, _ = _split_corpus(samples, extra["split_seed"])

    if args.resume:
        params, vocab = ckpt.load_model(Path(args.out) / "checkpoint")
        mcfg = params.config
    else:
        vocab = _build_vocab(train_s, template, extra["min_count"], extra["max_vocab"])
        model_kv["vocab_size"] = len(vocab)
        mcfg = ModelConfig.from_json({**ModelConfig().to_json(), **model_kv})
        params = init_model(mcfg, np.random.default_rng(tcfg.seed))

    result = trainer_mod.train(params, train_s, val_s, vocab, template, tcfg,
                               args.out, resume=args.resume)
    write_run_record(args.out, "train", args,
                     {"model": mcfg.to_json(), "train": tcfg.to_json(),
                      "split_seed": extra["split_seed"], "seed": tcfg.seed,
                      "manifest": str(args.manifest)},
                     [args.manifest, args.config], started)
    acc = "n/a" if result.final_val_accuracy is None else f"{result.final_val_accuracy:.4f}"
    print(f"trained steps={result.steps_run} val_acc={acc} "
          f"checkpoint={result.checkpoint_dir}")
    return 0


def _load_eval_inputs(args):
    samples = _load_corpus(args.manifest)
    splits = _split_corpus(samples, args.split_seed)
    chosen = {"train": splits[0], "val": splits[1], "test": splits[2]}[args.split]
    params, vocab = ckpt.load_model(args.checkpoint)
    return chosen, params, vocab


def cmd_eval(args):
    started = time.time()
    chosen, params, vocab = _load_eval_inputs(args)
    template = _template(args)
    result = evalkit.evaluate_model(params, chosen, vocab, template)
    print(result.metrics.render_text())
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        payload = {"metrics": result.metrics.to_json(),
                   "routing": result.routing.to_json() if result.routing else None,
                   "predictions": [
                       {"id": i, "true": t, "pred": p, "text": x}
                       for i, t, p, x in result.predictions]}
        with open(out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        write_run_record(out.parent, "eval", args,
                         {"split": args.split, "split_seed": args.split_seed,
                          "checkpoint": str(args.checkpoint),
                          "manifest": str(args.manifest), "seed": None},
                         [args.manifest], started)
    print(f"accuracy={result.metrics.accuracy:.4f}")
    return 0


def cmd_route_report(args):
    started = time.time()
    chosen, params, vocab = _load_eval_inputs(args)
    if not params.config.moe_enabled:
        raise ConfigError("route-report needs a mixture-enabled checkpoint")
    template = _template(args)
    from . import model as model_mod
    from . import ndtensor as nd

    labeled = []
    with nd.no_grad():
        for s in chosen:
            _, decisions = model_mod.encode(params, s, vocab, template, training=False)
            labeled.append((s.label, decisions))
    report = evalkit.routing_report(labeled)
    print(report.render_text())
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", encoding="utf-8") as fh:
            json.dump(report.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        write_run_record(out.parent, "route-report", args,
                         {"split": args.split, "split_seed": args.split_seed,
                          "checkpoint": str(args.checkpoint),
                          "manifest": str(args.manifest), "seed": None},
                         [args.manifest], started)
    return 0


def cmd_ablate(args):
    started = time.time()
    flag_train = {"max_steps": args.steps, "seed": args.seed,
                  "batch_size": args.batch_size, "eval_every": args.eval_every,
                  "target_val_acc": args.target_val_acc}
    model_kv, train_kv, extra = resolve_configs(args.config, {}, flag_train, {})
    tcfg = TrainConfig.from_json({**TrainConfig().to_json(), **train_kv})
    template = _template(args)
    samples = _load_corpus(args.manifest)
    splits = _split_corpus(samples, extra["split_seed"])
    vocab = _build_vocab(splits[0], template, extra["min_count"], extra["max_vocab"])
    model_kv["vocab_size"] = len(vocab)
    mcfg = ModelConfig.from_json({**ModelConfig().to_json(), **model_kv})
    rows = trainer_mod.ablate(splits, vocab, template, mcfg, tcfg, args.out)
    write_run_record(args.out, "ablate", args,
                     {"model": mcfg.to_json(), "train": tcfg.to_json(),
                      "split_seed": extra["split_seed"], "seed": tcfg.seed,
                      "manifest": str(args.manifest)},
                     [args.manifest, args.config], started)
    width = max(len(r["name"]) for r in rows)
    for r in rows:
        print(f"{r['name']:<{width}}  acc {r['test_accuracy']:.4f}  "
              f"macro_f1 {r['macro_f1']:.4f}  steps {r['steps']}  "
              f"cfg {r['config_hash']}  {r['duration_s']}s")
    return 0


# ---------------------------------------------------------------------------
# parser wiring


def build_parser() -> _Parser:
    p = _Parser(prog="umfdet", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth-toy", help="synthesize a labeled toy corpus")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--cue-strength", type=float, default=0.9)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth_toy)

    sp = sub.add_parser("fabricate-text", help="rewrite titles into fakes")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--strategy", choices=("pure_fake", "keyword_distortion"),
                    default="keyword_distortion")
    sp.add_argument("--label", default="ai_synthesized")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--mock", action="store_true",
                    help="force the offline mock generator")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_fabricate_text)

    sp = sub.add_parser("cot-gen", help="generate quality-gated rationales")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--attempts", type=int, default=3)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--mock", action="store_true")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_cot_gen)

    sp = sub.add_parser("cot-validate", help="re-check stored rationales")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_cot_validate)

    sp = sub.add_parser("train", help="train a detector on a manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--config", help="flat key=value config file")
    sp.add_argument("--template")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--eval-every", type=int)
    sp.add_argument("--lambda-cot", type=float)
    sp.add_argument("--dropout", type=float)
    sp.add_argument("--routing-aux", type=float)
    sp.add_argument("--target-val-acc", type=float)
    sp.add_argument("--no-moe", action="store_true")
    sp.add_argument("--no-gate-scaling", action="store_true")
    sp.add_argument("--freeze-patch-embedder", action="store_true")
    sp.add_argument("--resume", action="store_true")
    sp.set_defaults(func=cmd_train)

    for name, fn in (("eval", cmd_eval), ("route-report", cmd_route_report)):
        sp = sub.add_parser(name)
        sp.add_argument("--manifest", required=True)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--split", choices=("train", "val", "test"), default="test")
        sp.add_argument("--split-seed", type=int, default=0)
        sp.add_argument("--template")
        sp.add_argument("--out")
        sp.set_defaults(func=fn)

    sp = sub.add_parser("ablate", help="run the six-variant ablation grid")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--config")
    sp.add_argument("--template")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--eval-every", type=int)
    sp.add_argument("--target-val-acc", type=float)
    sp.set_defaults(func=cmd_ablate)
    return p


def _fail(code: int, exc: BaseException) -> int:
    message = str(exc).replace("\n", " ")
    print(f"umfdet: error: {type(exc).__name__}: {message}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, TemplateError) as exc:
        return _fail(1, exc)
    except DataError as exc:
        return _fail(2, exc)
    except UmfdetError as exc:
        return _fail(3, exc)
    except OSError as exc:
        return _fail(2, exc)
    except Exception as exc:  # unexpected runtime failure
        if os.environ.get("UMFDET_DEBUG"):
            raise
        return _fail(3, exc)


if __name__ == "__main__":
    sys.exit(main())
