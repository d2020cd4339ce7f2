import argparse
import sys

from .extract import EncoderError, InputError, extract


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embed-extract",
        description="encode JSONL {key, text} records into RGEM embedding files",
    )
    parser.add_argument("--input", required=True, help="JSON-lines input file")
    parser.add_argument(
        "--model",
        required=True,
        help="sentence-transformers model name, or hash:<dim>[:<seed>] for the offline encoder",
    )
    parser.add_argument("--batch", type=int, default=64, help="encoding batch size")
    parser.add_argument("--out", required=True, help="output prefix (writes PREFIX.rgem + PREFIX.keys)")
    parser.add_argument("--max-tokens", type=int, default=256, help="text truncation length")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        emb_path, keys_path = extract(
            args.input, args.model, args.batch, args.out, max_tokens=args.max_tokens
        )
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    except EncoderError as exc:
        print(f"environment error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {emb_path} and {keys_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
