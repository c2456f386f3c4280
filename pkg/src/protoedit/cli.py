"""Command-line entry point: ``protoedit <subcommand> ...``.

Every subcommand writes a run manifest (JSON) holding the resolved
configuration, seed, paths and artifact format versions. Log verbosity comes
from the ``PROTOEDIT_LOG_LEVEL`` environment variable (default WARNING).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from . import __version__
from .checkpoint import FORMAT_VERSION as CHECKPOINT_VERSION
from .checkpoint import load_checkpoint, save_checkpoint
from .decoding import generate
from .metrics import evaluate
from .model import ModelConfig, build_model
from .retrieval import INDEX_VERSION, PrototypeIndex, build_index, cooccurrence_histogram, retrieve
from .text import build_vocab, detokenize, load_corpus, load_dataset, normalize_concepts, tokenize
from .training import (
    GradcheckError,
    TrainConfig,
    attach_prototypes,
    gradcheck,
    make_example,
    train,
)

log = logging.getLogger("protoedit")

PRESETS = {
    "bart": dict(ge=False, sm=False, ppi=False),
    "eki": dict(ge=True, sm=True, ppi=True),
}


def _concepts(value: str) -> list[str]:
    return [c.strip() for c in value.split(",") if c.strip()]


def write_manifest(path: str | Path, command: str, args: argparse.Namespace, **extra) -> None:
    config = {k: v for k, v in vars(args).items() if k not in ("func", "command")}
    manifest = {
        "subcommand": command,
        "config": config,
        "seed": getattr(args, "seed", None),
        "versions": {"package": __version__, "checkpoint": CHECKPOINT_VERSION, "index": INDEX_VERSION},
        **extra,
    }
    Path(path).write_text(json.dumps(manifest, indent=2, default=str) + "\n", encoding="utf-8")


def _manifest_path(args, default: str | Path) -> Path:
    return Path(args.manifest) if args.manifest else Path(default)


def _hard_mask(args) -> str | None:
    if args.hm1 and args.hm2:
        raise ValueError("--hm1 and --hm2 are mutually exclusive")
    return "hm1" if args.hm1 else "hm2" if args.hm2 else None


# -- subcommands --------------------------------------------------------------


def cmd_build_index(args) -> int:
    index = build_index(load_corpus(args.corpus), label=args.label)
    index.save(args.out)
    write_manifest(_manifest_path(args, f"{args.out}.manifest.json"), "build-index", args,
                   outputs=[args.out], sentences=len(index))
    print(f"indexed {len(index)} sentences, {len(index.postings)} stems -> {args.out}")
    return 0


def cmd_retrieve(args) -> int:
    index = PrototypeIndex.load(args.index)
    results = retrieve(index, normalize_concepts(_concepts(args.concepts)), k=args.k, exclude=args.exclude)
    for r in results:
        print(json.dumps({"id": r.sentence_id, "score": r.score, "matched": list(r.matched_concepts),
                          "sentence": detokenize(r.tokens)}))
    write_manifest(_manifest_path(args, "retrieve.manifest.json"), "retrieve", args,
                   inputs=[args.index], results=len(results))
    return 0


def _resolve_mechanisms(args) -> dict:
    flags = dict(PRESETS[args.preset]) if args.preset else dict(ge=True, sm=True, ppi=True)
    for name in ("ge", "sm", "ppi"):
        if getattr(args, name) is not None:
            flags[name] = getattr(args, name)
    if args.sm0:
        flags["sm"] = True
    return flags


def cmd_train(args) -> int:
    torch.set_num_threads(args.threads)
    flags = _resolve_mechanisms(args)
    instances = load_dataset(args.data)
    if args.index:
        instances = attach_prototypes(instances, PrototypeIndex.load(args.index), k=args.k,
                                      exclude_target=args.exclude_target)
    vocab = build_vocab([i.target for i in instances] + [i.prototype for i in instances]
                        + [i.concepts for i in instances], min_freq=args.min_freq)
    mconf = ModelConfig(
        vocab_size=len(vocab), d_model=args.d_model, n_heads=args.heads, d_scale=args.d_scale,
        n_enc_layers=args.enc_layers, n_dec_layers=args.dec_layers, d_ff=args.d_ff,
        max_len=args.max_len, max_distance=args.max_distance, dropout=args.dropout,
        init_std=args.init_std, init_std_new=args.init_std_new,
        group_embedding=flags["ge"], scaling_module=flags["sm"],
        position_indicator=flags["ppi"],
    )
    tconf = TrainConfig(
        loss_weight=args.loss_weight, label_smoothing=args.label_smoothing, lr=args.lr,
        warmup=args.warmup, max_updates=args.max_updates, max_tokens=args.max_tokens,
        beta1=args.beta1, beta2=args.beta2, adam_eps=args.adam_eps, seed=args.seed,
        hm1=args.hm1, hm2=args.hm2, sm0=args.sm0,
    )
    examples = [make_example(i, vocab, mconf) for i in instances]
    model = build_model(mconf, args.seed)
    log_path = Path(args.log or f"{args.out}.log.jsonl")
    with open(log_path, "w", encoding="utf-8") as f:
        def on_step(report):
            f.write(report.to_json() + "\n")
            if report.step % 100 == 0:
                log.info("step %d L_D=%.4f L_E=%.4f", report.step, report.loss_decoder, report.loss_encoder)

        reports = train(model, examples, tconf, on_step=on_step)
    save_checkpoint(args.out, model, vocab, args.seed,
                    extra={"train_config": tconf.to_dict(), "steps": len(reports)})
    write_manifest(_manifest_path(args, f"{args.out}.manifest.json"), "train", args,
                   model_config=mconf.to_dict(), train_config=tconf.to_dict(),
                   inputs=[args.data, args.index], outputs=[args.out, str(log_path)])
    last = reports[-1] if reports else None
    print(f"trained {len(reports)} steps"
          + (f", final L_D={last.loss_decoder:.4f} L_E={last.loss_encoder:.4f}" if last else "")
          + f" -> {args.out}")
    return 0


def _load_model(args, hard_mask):
    model, vocab, header = load_checkpoint(args.ckpt)
    if hard_mask and model.config.scaling_module:
        log.warning("hard mask requested on a checkpoint with a scaling module")
    return model, vocab


def cmd_generate(args) -> int:
    hm = _hard_mask(args)
    model, vocab = _load_model(args, hm)
    index = PrototypeIndex.load(args.index) if args.index else None
    prototype = tokenize(args.prototype) if args.prototype is not None else None
    max_len = min(args.max_len, model.config.max_len - 1)
    out, proto = generate(model, vocab, _concepts(args.concepts), index=index, prototype=prototype,
                          beam_size=args.beam, max_len=max_len, hard_mask=hm)
    print(detokenize(out))
    write_manifest(_manifest_path(args, "generate.manifest.json"), "generate", args,
                   inputs=[args.ckpt, args.index], prototype=detokenize(proto), output=detokenize(out))
    return 0


def cmd_evaluate(args) -> int:
    hm = _hard_mask(args)
    model, vocab = _load_model(args, hm)
    index = PrototypeIndex.load(args.index) if args.index else None
    instances = load_dataset(args.data)
    max_len = min(args.max_len, model.config.max_len - 1)
    report, outputs = evaluate(instances, model, vocab, index, beam_size=args.beam, max_len=max_len,
                               hard_mask=hm, exclude_target=args.exclude_target)
    payload = report.to_dict()
    Path(args.report).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(payload))
    write_manifest(_manifest_path(args, f"{args.report}.manifest.json"), "evaluate", args,
                   inputs=[args.ckpt, args.data, args.index], outputs=[args.report])
    return 0


def cmd_gradcheck(args) -> int:
    from .experiments import gradcheck_setup

    model, batch, tconf = gradcheck_setup(args.config, args.seed)
    try:
        report = gradcheck(model, batch, tconf, tolerance=args.tolerance, n_coords=args.coords, seed=args.seed)
        status = 0
    except GradcheckError as e:
        report, status = e.report, 1
        print(str(e), file=sys.stderr)
    width = max(len(n) for n in report)
    print(f"{'array':<{width}}  max_rel_err")
    for name, err in report.items():
        print(f"{name:<{width}}  {err:.3e}{'' if err <= args.tolerance else '  FAIL'}")
    write_manifest(_manifest_path(args, "gradcheck.manifest.json"), "gradcheck", args,
                   max_rel_err=max(report.values()), passed=status == 0)
    return status


def cmd_stats(args) -> int:
    index = PrototypeIndex.load(args.index)
    pairs = []
    for inst in load_dataset(args.data):
        hits = retrieve(index, inst.concepts, k=1, exclude=inst.target if args.exclude_target else None)
        if hits:
            pairs.append((hits[0], inst.target))
    hist = cooccurrence_histogram(pairs)
    print(json.dumps({"label": index.label, "retrieved": len(pairs),
                      "histogram": {str(k): v for k, v in hist.items()}}))
    write_manifest(_manifest_path(args, "stats.manifest.json"), "stats", args,
                   inputs=[args.data, args.index], histogram=hist)
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="protoedit", description=__doc__.splitlines()[0], formatter_class=fmt)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        sp = sub.add_parser(name, help=help, formatter_class=fmt)
        sp.set_defaults(func=func)
        sp.add_argument("--manifest", help="run manifest path (default: next to the main output)")
        return sp

    sp = add("build-index", cmd_build_index, "index a one-sentence-per-line corpus")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--label", default="in-domain")

    sp = add("retrieve", cmd_retrieve, "retrieve prototypes for a concept set")
    sp.add_argument("--index", required=True)
    sp.add_argument("--concepts", required=True, help="comma-separated concepts")
    sp.add_argument("--k", type=int, default=1)
    sp.add_argument("--exclude", default=None, help="skip a sentence with exactly this text")

    sp = add("train", cmd_train, "train a model")
    sp.add_argument("--data", required=True, help="JSON-lines training set")
    sp.add_argument("--index", default=None, help="prototype index for instances without a prototype")
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--log", default=None, help="JSON-lines step log (default: <out>.log.jsonl)")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--preset", choices=sorted(PRESETS), default=None,
                    help="mechanism bundle; explicit --ge/--sm/--ppi flags override it")
    sp.add_argument("--ge", action=argparse.BooleanOptionalAction, default=None, help="group embeddings (on unless preset says otherwise)")
    sp.add_argument("--sm", action=argparse.BooleanOptionalAction, default=None, help="scaling module (on unless preset says otherwise)")
    sp.add_argument("--ppi", action=argparse.BooleanOptionalAction, default=None, help="prototype position indicator (on unless preset says otherwise)")
    sp.add_argument("--hm1", action="store_true", help="hard mask: cross-attend to concepts only")
    sp.add_argument("--hm2", action="store_true", help="hard mask: drop prototype tokens matching no concept")
    sp.add_argument("--sm0", action="store_true", help="keep the scaling module but drop its classification loss")
    sp.add_argument("--k", type=int, default=1, help="retrieval depth (top hit is used)")
    sp.add_argument("--exclude-target", action=argparse.BooleanOptionalAction, default=True,
                    help="never retrieve the instance's own target as its prototype")
    sp.add_argument("--min-freq", type=int, default=1)
    sp.add_argument("--d-model", type=int, default=64)
    sp.add_argument("--heads", type=int, default=4)
    sp.add_argument("--d-scale", type=int, default=32)
    sp.add_argument("--enc-layers", type=int, default=2)
    sp.add_argument("--dec-layers", type=int, default=2)
    sp.add_argument("--d-ff", type=int, default=128)
    sp.add_argument("--max-len", type=int, default=64)
    sp.add_argument("--max-distance", type=int, default=16)
    sp.add_argument("--dropout", type=float, default=0.1)
    sp.add_argument("--init-std", type=float, default=0.02)
    sp.add_argument("--init-std-new", type=float, default=5e-3)
    sp.add_argument("--loss-weight", type=float, default=1.0, help="weight of the encoder classification loss")
    sp.add_argument("--label-smoothing", type=float, default=0.1)
    sp.add_argument("--lr", type=float, default=4e-5)
    sp.add_argument("--warmup", type=int, default=500)
    sp.add_argument("--max-updates", type=int, default=5000)
    sp.add_argument("--max-tokens", type=int, default=1024)
    sp.add_argument("--beta1", type=float, default=0.9)
    sp.add_argument("--beta2", type=float, default=0.999)
    sp.add_argument("--adam-eps", type=float, default=1e-8)
    sp.add_argument("--threads", type=int, default=1)

    for name, func, help in (("generate", cmd_generate, "generate a sentence for a concept set"),
                             ("evaluate", cmd_evaluate, "score a checkpoint on a dataset")):
        sp = add(name, func, help)
        sp.add_argument("--ckpt", required=True)
        sp.add_argument("--index", default=None)
        sp.add_argument("--beam", type=int, default=5)
        sp.add_argument("--max-len", type=int, default=32)
        sp.add_argument("--hm1", action="store_true")
        sp.add_argument("--hm2", action="store_true")
        if name == "generate":
            sp.add_argument("--concepts", required=True, help="comma-separated concepts")
            sp.add_argument("--prototype", default=None, help="use this prototype instead of retrieving")
        else:
            sp.add_argument("--data", required=True)
            sp.add_argument("--report", required=True, help="JSON report output path")
            sp.add_argument("--exclude-target", action=argparse.BooleanOptionalAction, default=False,
                            help="skip the first reference sentence when retrieving")

    sp = add("gradcheck", cmd_gradcheck, "finite-difference check of every gradient")
    sp.add_argument("--config", choices=["tiny", "desk"], default="tiny")
    sp.add_argument("--tolerance", type=float, default=1e-4)
    sp.add_argument("--coords", type=int, default=50, help="sampled coordinates per array")
    sp.add_argument("--seed", type=int, default=0)

    sp = add("stats", cmd_stats, "histogram of retrieved concepts that co-occur in the target")
    sp.add_argument("--data", required=True)
    sp.add_argument("--index", required=True)
    sp.add_argument("--exclude-target", action=argparse.BooleanOptionalAction, default=True)
    return p


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("PROTOEDIT_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as e:  # one machine-parseable line, nonzero exit
        print(f"error: {type(e).__name__}: {' '.join(str(e).split())}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
