import argparse
import json
import sys

from .server import AdapterConfig, AdapterError, serve


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="leaf-adapter",
        description="Reference model-protocol endpoint: manifest replay detector "
                    "or green-dominance diagnoser (protocol conformance only).",
    )
    parser.add_argument("--mode", required=True, choices=["detector", "diagnoser"])
    parser.add_argument("--manifest", help="annotation manifest (detector mode)")
    parser.add_argument("--green-threshold", type=float, default=100.0,
                        help="mean green channel above this reads as healthy")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--miss-rate", type=float, default=0.0)
    parser.add_argument("--spurious-rate", type=float, default=0.0)
    parser.add_argument("--jitter-sigma", type=float, default=0.0)
    args = parser.parse_args(argv)
    try:
        config = AdapterConfig(
            mode=args.mode,
            manifest=args.manifest,
            green_threshold=args.green_threshold,
            seed=args.seed,
            miss_rate=args.miss_rate,
            spurious_rate=args.spurious_rate,
            jitter_sigma=args.jitter_sigma,
        )
        return serve(config)
    except AdapterError as exc:
        print(f"leaf-adapter: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as exc:  # manifest unreadable
        print(f"leaf-adapter: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
