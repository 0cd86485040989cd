"""Command-line entry point: ``villa {generate,train,eval,infer}``.

Exit codes: 0 ok, 1 usage or configuration error, 2 data or format error,
3 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .bench import SPLITS, encode_rle, generate_episodes, load_manifest, load_split, split_dataset, write_manifest
from .checkpoint import load_checkpoint
from .config import RunConfig, apply_ablation, load_config
from .errors import FormatError, VillaError

log = logging.getLogger("villa")

U64_MAX = 2**64 - 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _seed(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value <= U64_MAX:
        raise argparse.ArgumentTypeError(f"seed must fit in an unsigned 64-bit integer, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="villa", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, data=True):
        p.add_argument("--config", type=Path, help="JSON run config (unknown keys are rejected)")
        p.add_argument("--seed", type=_seed, help="overrides the config seeds")
        p.add_argument("--ablate", action="append", default=[], metavar="KEY=VAL", help="ablation toggle (repeatable)")
        if data:
            p.add_argument("--data", type=Path, required=True, help="dataset directory with manifest.json")

    p = sub.add_parser("generate", help="write a synthetic dataset")
    common(p, data=False)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="train from scratch on the train split")
    common(p)
    p.add_argument("--out", type=Path, required=True, help="receives loss.csv, checkpoint.bin, config.json")
    p.add_argument("--split", choices=SPLITS, default="train")

    for name, text in (("eval", "score a checkpoint on one split"), ("infer", "write predicted tracklets")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--checkpoint", type=Path, required=True)
        p.add_argument("--data", type=Path, required=True)
        p.add_argument("--split", choices=SPLITS, default="val")
        p.add_argument("--out", type=Path)
        if name == "infer":
            p.add_argument("--episode", action="append", default=[], help="episode id (repeatable; default all)")
    return parser


def resolve_config(path: Optional[Path], seed: Optional[int], ablations: Sequence[str]) -> RunConfig:
    cfg = load_config(path)
    if seed is not None:
        cfg.seed = seed
        cfg.data.seed = seed
    for spec in ablations:
        cfg = apply_ablation(cfg, spec)
    cfg.validate()
    return cfg


def cmd_generate(args) -> int:
    cfg = resolve_config(args.config, args.seed, args.ablate)
    episodes = generate_episodes(cfg.data.seed, cfg.generator, cfg.data.episodes)
    manifest = split_dataset([ep.id for ep in episodes], cfg.data.ratios, cfg.data.seed)
    manifest.config_digest = cfg.generator.digest()
    manifest.generator = json.loads(json.dumps(cfg.to_json()["generator"]))
    write_manifest(manifest, episodes, args.out)
    counts = " ".join(f"{s}={len(manifest.splits[s])}" for s in SPLITS)
    print(f"wrote {len(episodes)} episodes to {args.out}: {counts}")
    return 0


def cmd_train(args) -> int:
    from .train import train

    cfg = resolve_config(args.config, args.seed, args.ablate)
    episodes = load_split(args.data, args.split)
    if not episodes:
        raise FormatError(f"{args.data}: split {args.split!r} is empty")
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.json").write_text(cfg.dumps(), encoding="utf-8")
    result = train(cfg, episodes, out_dir=args.out)
    print(
        f"trained {cfg.max_iters} iters on {len(episodes)} episodes: "
        f"loss {result.initial_loss:.4f} -> {result.final_loss:.4f}; checkpoint {args.out / 'checkpoint.bin'}"
    )
    return 0


def _report(result, cfg: RunConfig, split: str, iteration: int, n: int) -> dict:
    from .train import MC_RULE

    report = dict(result.summary())
    report["per_episode"] = result.per_episode
    report.update(
        config_digest=cfg.digest(),
        split=split,
        episodes=n,
        iteration=iteration,
        lr=cfg.optimizer.lr,
        ablation=cfg.to_json()["ablation"],
        mc_rule=MC_RULE,
    )
    return report


def cmd_eval(args) -> int:
    from .train import evaluate

    model, cfg, iteration, _ = load_checkpoint(args.checkpoint)
    episodes = load_split(args.data, args.split)
    if not episodes:
        raise FormatError(f"{args.data}: split {args.split!r} is empty")
    result = evaluate(model, episodes)
    report = _report(result, cfg, args.split, iteration, len(episodes))
    for key, value in result.summary().items():
        print(f"{key:<12} {value:.4f}")
    print(f"{'episodes':<12} {len(episodes)}")
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        path = args.out / "report.json"
        path.write_text(json.dumps(report, sort_keys=True, indent=1), encoding="utf-8")
        print(f"report {path}")
    return 0


def cmd_infer(args) -> int:
    from .train import predictions

    model, _, _, _ = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.data)
    episodes = load_split(args.data, args.split, manifest)
    if args.episode:
        wanted = set(args.episode)
        missing = wanted - {ep.id for ep in episodes}
        if missing:
            raise FormatError(f"{args.data}: episodes not in split {args.split!r}: {sorted(missing)}")
        episodes = [ep for ep in episodes if ep.id in wanted]
    rows = []
    for ep in episodes:
        tracks, response = model.infer(ep)
        ranked = predictions(tracks)
        text = " ".join(w for w in response.text_tokens if not w.startswith("<"))
        print(f"{ep.id}: {ep.query!r} -> {text!r}, {len(ranked)} tracklets")
        rows.append({
            "id": ep.id,
            "query": ep.query,
            "answer": text,
            "tracklets": [
                {"token": t.token_index, "confidence": t.confidence, "rle": [encode_rle(m) for m in t.masks]}
                for t in ranked
            ],
        })
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "predictions.json").write_text(json.dumps(rows, sort_keys=True), encoding="utf-8")
    return 0


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except VillaError as exc:
        print(f"villa {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"villa {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
