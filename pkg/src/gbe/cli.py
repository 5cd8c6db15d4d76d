"""``gbe <subcommand> --config PATH [--seed N] [--out DIR]``.

Exit codes: 0 success, 2 invalid config or usage, 3 corrupt data file.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from gbe.config import RunConfig
from gbe.data import gen_dataset, write_dataset
from gbe.errors import ConfigError, CorruptFileError, UsageError
from gbe.gradcheck import format_table, gradcheck
from gbe import harness

EXIT_OK, EXIT_CONFIG, EXIT_CORRUPT = 0, 2, 3
DEFAULT_GRID = {"n_groups": [4, 8], "lam": [0.0, 0.1, 1.0]}


def build_parser():
    p = argparse.ArgumentParser(prog="gbe", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=["gen-data", "train", "evaluate", "gradcheck", "sweep", "ablate"])
    p.add_argument("--config", required=True, help="JSON file with RunConfig fields")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="output directory (default: config out_dir, or dataset for gen-data)")
    p.add_argument("--checkpoint", help="evaluate: checkpoint file (default: OUT/checkpoint.gbet)")
    p.add_argument("--protocol", choices=["zsl", "gzsl", "both"], default="both")
    p.add_argument("--grid", help="sweep: JSON object field -> list of values")
    p.add_argument("--variants", help="ablate: comma-separated rows (default a,b,c,d,e,f,full)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _protocols(choice):
    return ("zsl", "gzsl") if choice == "both" else (choice,)


def run(args):
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    cfg.validate()
    out = Path(args.out or (cfg.dataset if args.command == "gen-data" else cfg.out_dir))

    if args.command == "gen-data":
        data = gen_dataset(harness.benchmark_for(cfg))
        manifest = write_dataset(data, out)
        print(f"wrote {len(data.images)} images to {out} (checksum {manifest['checksum'][:12]})")
        return EXIT_OK

    if args.command == "gradcheck":
        rows = gradcheck(cfg, seed=cfg.seed)
        print(format_table(rows))
        return EXIT_OK if all(r.passed for r in rows) else 1

    data = harness.load_data(cfg)
    if args.command == "train":
        result = harness.train(cfg, data, out)
        last = result.log[-1] if result.log else {}
        print(f"trained {cfg.epochs} epochs -> {out} (final loss {last.get('train_loss', float('nan')):.4f})")
    elif args.command == "evaluate":
        model = harness.load_model(cfg, args.checkpoint or out / "checkpoint.gbet")
        for protocol in _protocols(args.protocol):
            for row in harness.evaluate(model, data, protocol, cfg.ks, out):
                print(json.dumps(row))
    elif args.command == "sweep":
        try:
            grid = json.loads(args.grid) if args.grid else DEFAULT_GRID
        except ValueError as exc:
            raise ConfigError(f"--grid is not valid JSON: {exc}", fields=["grid"]) from exc
        for row in harness.sweep(cfg, grid, data, out):
            print(json.dumps(row))
    elif args.command == "ablate":
        variants = args.variants.split(",") if args.variants else None
        unknown = sorted(set(variants or ()) - set(harness.ABLATION_ROWS))
        if unknown:
            raise ConfigError(f"unknown ablation rows: {', '.join(unknown)}", fields=["variants"])
        print(harness.ablation_table(harness.ablate(cfg, data, out, variants)), end="")
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CorruptFileError as exc:
        print(f"corrupt data: {exc}", file=sys.stderr)
        return EXIT_CORRUPT


if __name__ == "__main__":
    sys.exit(main())
