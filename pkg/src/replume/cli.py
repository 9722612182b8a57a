"""Command-line entry point.

Exit codes: 0 success, 1 runtime or data failure, 2 usage error.
Every command except ``paper-check`` writes a ``manifest.json`` into its
output directory; the output directory must exist unless ``--create`` is given.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import SynthSpec, distribution_report, filter_unrelated, load_tsv, synth_generate, write_tsv
from .errors import PlanError, ReplumeError
from .metrics import evaluate, format_improvement, relative_improvement, render_report
from .model import PRESETS, preset_config
from .modes import MODE_PRESETS, ModeSpec, Router, partition_by_language, train_mode
from .sweep import Grid, sweep, write_best_by, write_table
from .text import clean_text
from .tokenizer import Vocabulary, build_vocab
from .training import TrainPlan, pretrain_mlm

log = logging.getLogger("replume")

# Published Mode 2 scores against the unweighted baseline, with the relative
# improvements quoted for them (percent).
REPORTED_SCORES = {
    "accuracy": {"ours": 0.73, "baseline": 0.69, "reported": 5.8},
    "balanced_accuracy": {"ours": 0.66, "baseline": 0.52, "reported": 26.9},
    "f_score": {"ours": 0.67, "baseline": 0.55, "reported": 21.8},
}
CHECK_TOLERANCE = 0.05

# Languages each preset is pretrained on: English-only stand-ins vs the bilingual one.
PRETRAIN_LANGUAGES = {"mini-base": ("EN",), "mini-large": ("EN",), "mini-multilingual": ("EN", "ES")}


class UsageError(Exception):
    pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _out_dir(args) -> Path:
    out = Path(args.out)
    if not out.is_dir():
        if not args.create:
            raise UsageError(f"output directory {out} does not exist (pass --create)")
        out.mkdir(parents=True)
    return out


def _write_manifest(out: Path, args, started: str, inputs: list[Path], artifacts: list[Path]) -> None:
    flags = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = {
        "command": args.command,
        "version": __version__,
        "flags": flags,
        "seed": getattr(args, "seed", None),
        "config_hashes": {str(p): _sha256(p) for p in inputs if p.is_file()},
        "started": started,
        "finished": _now(),
        "artifacts": sorted(str(p.relative_to(out)) for p in artifacts),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str) + "\n", encoding="utf-8")


def _plan(args, epochs=None) -> TrainPlan:
    try:
        return TrainPlan(
            epochs=args.epochs if epochs is None else epochs,
            batch_size=args.batch_size,
            base_lr=args.lr,
            seed=args.seed,
            class_weighting=not getattr(args, "no_class_weights", False),
            output_activation=getattr(args, "output_activation", "softmax"),
            allow_off_grid=args.allow_off_grid,
        )
    except PlanError as exc:
        raise UsageError(str(exc)) from exc


def _load_records(path: str) -> list:
    return filter_unrelated(load_tsv(path))


def _vocab_for(args, records, out: Path) -> tuple[Vocabulary, Path]:
    path = out / "vocab.txt"
    if getattr(args, "vocab", None):
        vocab = Vocabulary.load(args.vocab)
    else:
        vocab = build_vocab([clean_text(r.text) for r in records], args.vocab_size)
    vocab.save(path)
    return vocab, path


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    started = _now()
    out = _out_dir(args)
    inputs = []
    if args.spec:
        spec_path = Path(args.spec)
        spec = SynthSpec.from_dict(json.loads(spec_path.read_text(encoding="utf-8")))
        inputs.append(spec_path)
    else:
        spec = SynthSpec.from_totals(args.total)
    split = synth_generate(spec, seed=args.seed)
    train_p, test_p, report_p = out / "train.tsv", out / "test.tsv", out / "report.json"
    write_tsv(split.train, train_p)
    write_tsv(split.test, test_p)
    report = {"spec": spec.to_dict(), "seed": args.seed, "all": distribution_report(split.train + split.test), **split.distribution}
    report_p.write_text(json.dumps(report, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    print(json.dumps(report["all"]["label_counts"]), f"train={len(split.train)} test={len(split.test)}")
    _write_manifest(out, args, started, inputs, [train_p, test_p, report_p])
    return 0


def _pretrain_slots(presets, records, vocab, plan, max_len) -> dict:
    parts = partition_by_language(records)
    out = {}
    for preset in presets:
        corpus = [r for lang in PRETRAIN_LANGUAGES[preset] for r in parts[lang]]
        config = preset_config(preset, len(vocab), max_len=max_len)
        ckpt, history = pretrain_mlm(corpus, config, plan, vocab)
        out[preset] = (ckpt, history)
    return out


def cmd_pretrain(args) -> int:
    started = _now()
    plan = _plan(args)
    out = _out_dir(args)
    records = _load_records(args.train)
    vocab, vocab_p = _vocab_for(args, records, out)
    (ckpt, history), = _pretrain_slots([args.preset], records, vocab, plan, args.max_len).values()
    ckpt_p = save_checkpoint(ckpt.params, ckpt.config, out / f"{args.preset}.ckpt", vocab=vocab, meta={"objective": "mlm"})
    hist_p = out / "mlm_history.json"
    hist_p.write_text(json.dumps({args.preset: history}, indent=2) + "\n", encoding="utf-8")
    print(f"pretrained {args.preset}: loss {history[0] if history else float('nan'):.4f} -> {history[-1] if history else float('nan'):.4f}")
    _write_manifest(out, args, started, [Path(args.train)], [vocab_p, ckpt_p, hist_p])
    return 0


def cmd_train(args) -> int:
    started = _now()
    plan = _plan(args)
    out = _out_dir(args)
    records = _load_records(args.train)
    inputs = [Path(args.train)]
    if args.vocab:
        inputs.append(Path(args.vocab))
    vocab, vocab_p = _vocab_for(args, records, out)
    mode = ModeSpec.for_mode(args.mode)

    pretrained = {}
    if args.pretrained:
        for preset in mode.slot_names:
            p = Path(args.pretrained) / f"{preset}.ckpt"
            if p.is_file():
                pretrained[preset] = load_checkpoint(p)
                inputs.append(p)
    if args.pretrain_epochs:
        pre_plan = _plan(args, epochs=args.pretrain_epochs)
        todo = [p for p in mode.slot_names if p not in pretrained]
        for preset, (ckpt, _) in _pretrain_slots(todo, records, vocab, pre_plan, args.max_len).items():
            pretrained[preset] = ckpt

    audit: list = []
    trained, histories = train_mode(mode, records, plan, vocab, out, max_len=args.max_len, pretrained=pretrained, audit=audit)
    mode_p = out / "mode.json"
    rel = ModeSpec(trained.mode_id, trained.slots)
    spec_dict = rel.to_dict()
    for s in spec_dict["slots"].values():
        s["checkpoint"] = Path(s["checkpoint"]).name
    mode_p.write_text(json.dumps(spec_dict, indent=2) + "\n", encoding="utf-8")
    log_p = out / "train_log.json"
    log_p.write_text(json.dumps(histories, indent=2) + "\n", encoding="utf-8")
    audit_p = out / "train_audit.tsv"
    audit_p.write_text("tweet_id\tlanguage\tslot\n" + "".join(f"{a}\t{b}\t{c}\n" for a, b, c in audit), encoding="utf-8")
    ckpts = [Path(s.checkpoint) for s in {s.preset: s for s in trained.slots.values()}.values()]
    for name, h in histories.items():
        last = h[-1] if h else {}
        print(f"slot {name}: {len(h)} epochs, final loss {last.get('loss', float('nan')):.4f}")
    _write_manifest(out, args, started, inputs, [vocab_p, mode_p, log_p, audit_p, *ckpts])
    return 0


def cmd_eval(args) -> int:
    started = _now()
    out = _out_dir(args)
    mode = ModeSpec.load(args.mode_config)
    records = _load_records(args.test)
    if not records:
        raise ReplumeError(f"test file {args.test} has no evaluable records")
    router = Router(mode)
    preds = router.predict_many(records)
    report = evaluate(
        [r.label for r in records],
        [p.label for p in preds],
        languages=[p.language for p in preds],
        domains=[r.domain for r in records],
    )
    json_p, table_p, pred_p = out / "report.json", out / "report.txt", out / "predictions.tsv"
    json_p.write_text(render_report(report, "json") + "\n", encoding="utf-8")
    table = render_report(report, "table", label=f"mode{mode.mode_id}")
    table_p.write_text(table, encoding="utf-8")
    pred_p.write_text(
        "tweet_id\tlanguage\tslot\tlabel\tpredicted\n"
        + "".join(f"{r.tweet_id}\t{p.language}\t{p.slot}\t{r.label}\t{p.label}\n" for r, p in zip(records, preds)),
        encoding="utf-8",
    )
    sys.stdout.write(table)
    inputs = [Path(args.mode_config), Path(args.test)] + [Path(s.checkpoint) for s in mode.slots.values()]
    _write_manifest(out, args, started, inputs, [json_p, table_p, pred_p])
    return 0


def cmd_sweep(args) -> int:
    started = _now()
    out = _out_dir(args)
    inputs = [Path(args.train), Path(args.test)]
    if args.grid:
        grid = Grid.from_dict(json.loads(Path(args.grid).read_text(encoding="utf-8")))
        inputs.append(Path(args.grid))
    else:
        grid = Grid()
    for e, b, lr in grid.combinations():
        try:
            TrainPlan(epochs=e, batch_size=b, base_lr=lr, allow_off_grid=args.allow_off_grid)
        except PlanError as exc:
            raise UsageError(str(exc)) from exc
    train = _load_records(args.train)
    test = _load_records(args.test)
    vocab, vocab_p = _vocab_for(args, train, out)
    rows, trained = sweep(
        grid, args.mode, train, test, vocab, out,
        base_seed=args.seed, class_weighting=not args.no_class_weights,
        allow_off_grid=args.allow_off_grid, max_len=args.max_len, jobs=args.jobs,
    )
    csv_p = out / "sweep.csv"
    write_table(rows, csv_p)
    artifacts = [vocab_p, csv_p, *sorted((out / "runs").glob("*.json"))]
    for key in ("batch_size", "epochs", "learning_rate"):
        p = out / f"best_by_{key}.csv"
        write_best_by(rows, key, p)
        artifacts.append(p)
    ok = [r for r in rows if r.get("status") == "ok"]
    failed = [r for r in rows if r.get("status") != "ok"]
    summary_p = out / "summary.json"
    summary_p.write_text(json.dumps({
        "combinations": len(rows), "trained_this_run": trained, "succeeded": len(ok),
        "failed": [{k: r.get(k) for k in ("epochs", "batch_size", "learning_rate", "error")} for r in failed],
        "best": ok[0] if ok else None,
    }, indent=2) + "\n", encoding="utf-8")
    artifacts.append(summary_p)
    print(f"{len(rows)} combinations ({trained} trained now), {len(ok)} ok, {len(failed)} failed")
    if ok:
        b = ok[0]
        print(f"best: epochs={b['epochs']} lr={b['learning_rate']:g} batch={b['batch_size']} "
              f"P={b['precision']:.2f} R={b['recall']:.2f} F={b['f_score']:.2f} acc={b['accuracy']:.2f}")
    for r in failed:
        print(f"failed: epochs={r['epochs']} lr={r['learning_rate']:g} batch={r['batch_size']}: {r.get('error')}")
    _write_manifest(out, args, started, inputs, artifacts)
    return 0 if ok else 1


def paper_check_rows() -> list[dict]:
    rows = []
    for metric, v in REPORTED_SCORES.items():
        pct = relative_improvement(v["ours"], v["baseline"])
        rows.append({
            "metric": metric, "new": v["ours"], "old": v["baseline"], "computed": pct,
            "reported": v["reported"], "ok": abs(pct - v["reported"]) <= CHECK_TOLERANCE,
        })
    return rows


def cmd_paper_check(args) -> int:
    rows = paper_check_rows()
    print(f"{'metric':<18} {'new':>5} {'old':>5} {'computed':>9} {'reported':>9}  result")
    for r in rows:
        print(f"{r['metric']:<18} {r['new']:>5.2f} {r['old']:>5.2f} {format_improvement(r['computed']):>9} "
              f"{r['reported']:>8.1f}%  {'PASS' if r['ok'] else 'FAIL'}")
    return 0 if all(r["ok"] for r in rows) else 1


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def _add_out(p):
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--create", action="store_true", help="create --out if missing")


def _add_plan(p, epochs=20):
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--allow-off-grid", action="store_true", help="permit values outside the reference grid")
    p.add_argument("--max-len", type=int, default=64)
    p.add_argument("--vocab-size", type=int, default=4000)
    p.add_argument("--vocab", help="existing vocabulary file (skips induction)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="replume", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic bilingual dataset")
    _add_out(p)
    p.add_argument("--spec", help="JSON SynthSpec (counts or from_totals arguments)")
    p.add_argument("--total", type=int, default=3000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="masked-LM pretraining of one preset")
    _add_out(p)
    p.add_argument("--train", required=True)
    p.add_argument("--preset", choices=sorted(PRESETS), default="mini-base")
    _add_plan(p, epochs=10)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="fine-tune the slots of a mode")
    _add_out(p)
    p.add_argument("--mode", type=int, choices=sorted(MODE_PRESETS), required=True)
    p.add_argument("--train", required=True)
    _add_plan(p)
    p.add_argument("--no-class-weights", action="store_true")
    p.add_argument("--output-activation", choices=["softmax", "log_softmax"], default="softmax")
    p.add_argument("--pretrained", help="directory holding <preset>.ckpt files from `pretrain`")
    p.add_argument("--pretrain-epochs", type=int, default=0, help="MLM epochs per slot before fine-tuning")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained mode on a test file")
    _add_out(p)
    p.add_argument("--mode-config", required=True, help="mode.json written by `train`")
    p.add_argument("--test", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="hyperparameter grid sweep (resumable)")
    _add_out(p)
    p.add_argument("--mode", type=int, choices=sorted(MODE_PRESETS), required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--grid", help='JSON: {"epochs": [...], "batch_sizes": [...], "learning_rates": [...]}')
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-class-weights", action="store_true")
    p.add_argument("--allow-off-grid", action="store_true")
    p.add_argument("--max-len", type=int, default=64)
    p.add_argument("--vocab-size", type=int, default=4000)
    p.add_argument("--vocab")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("paper-check", help="recompute the reported improvement percentages")
    p.set_defaults(func=cmd_paper_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("REPLUME_LOG", "WARNING").upper(),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"replume {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ReplumeError, OSError, ValueError, KeyError) as exc:
        print(f"replume {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
