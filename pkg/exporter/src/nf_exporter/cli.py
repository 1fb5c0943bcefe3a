"""nf-export: convert a PyTorch checkpoint into a toolkit model directory."""

from __future__ import annotations

import argparse
import json
import sys

from .convert import ExportError, export


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="nf-export", description=__doc__)
    parser.add_argument("--in", dest="source", required=True,
                        help="checkpoint holding a pickled nn.Module")
    parser.add_argument("--out", required=True, help="output model directory")
    parser.add_argument("--input-shape", required=True,
                        help="comma-separated input dims, e.g. 1,16,16")
    args = parser.parse_args(argv)
    shape = tuple(int(d) for d in args.input_shape.split(","))
    try:
        manifest = export(args.source, args.out, shape)
    except ExportError as err:
        print(json.dumps({"error": "ExportError", "detail": str(err)}), file=sys.stderr)
        return 1
    print(f"exported {len(manifest.layer_map)} layers -> {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
