"""Command-line entry point: ``hrconvert dalia SRC DST [--drop-ppg]`` and
``hrconvert wesad SRC DST``."""

from __future__ import annotations

import argparse
import sys

from .convert import ConversionError, convert_ppg_dalia, convert_wesad


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hrconvert",
        description="Convert wearable-sensor archives into the CSV+manifest dataset layout",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    dalia = sub.add_parser("dalia", help="convert an unpacked PPG-DaLiA archive")
    dalia.add_argument("src", help="directory holding S<n>/S<n>.pkl")
    dalia.add_argument("dst", help="output dataset directory")
    dalia.add_argument(
        "--drop-ppg", action="store_true",
        help="omit the wrist optical pulse channel (accelerometer-only variant)",
    )

    wesad = sub.add_parser("wesad", help="convert an unpacked WESAD archive")
    wesad.add_argument("src", help="directory holding S<n>/S<n>.pkl")
    wesad.add_argument("dst", help="output dataset directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "dalia":
            report = convert_ppg_dalia(args.src, args.dst, include_ppg=not args.drop_ppg)
        else:
            report = convert_wesad(args.src, args.dst)
    except ConversionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for sid in report.subjects:
        print(f"{sid}: {len(report.channels[sid])} channels, {report.sample_counts[sid]} samples")
    print(f"converted {len(report.subjects)} subjects -> {args.dst} ({len(report.warnings)} warnings)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
