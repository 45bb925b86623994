"""Command line front end.

    converter <dataset> <source_dir> <out_dir>   convert an upstream release
    converter validate <bundle_dir>              re-check an existing bundle

Exit codes: 0 success, 2 input/validation error.
"""

from __future__ import annotations

import argparse
import sys

from .converter import ConversionError, convert
from .validate import validate_bundle

EXIT_OK = 0
EXIT_INPUT = 2


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv[:1] == ["validate"]:
        parser = argparse.ArgumentParser(
            prog="converter validate", description="Validate a bundle directory.")
        parser.add_argument("bundle_dir")
        args = parser.parse_args(argv[1:])
        report = validate_bundle(args.bundle_dir)
        print(report.render())
        return EXIT_OK if report.ok else EXIT_INPUT

    parser = argparse.ArgumentParser(
        prog="converter",
        description="Convert a pickled citation-network release into a "
                    "graph bundle directory.")
    parser.add_argument("dataset", help="release name, e.g. cora")
    parser.add_argument("source_dir", help="directory with the ind.<name>.* parts")
    parser.add_argument("out_dir", help="bundle directory to write")
    args = parser.parse_args(argv)

    try:
        manifest = convert(args.dataset, args.source_dir, args.out_dir)
    except ConversionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    print(manifest.summary())
    report = validate_bundle(args.out_dir)
    print(report.render())
    return EXIT_OK if report.ok else EXIT_INPUT


if __name__ == "__main__":
    raise SystemExit(main())
