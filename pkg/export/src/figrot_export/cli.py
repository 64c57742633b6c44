"""figrot-export command-line entry point.

Encodes a list of images or text lines into a FIGE embedding store
with a JSON manifest written next to it. Text exports append the
"__EMPTY__" row by default so the store plugs straight into the
retrieval engine's training and evaluation commands.
"""

from __future__ import annotations

import argparse
import sys

from .encoders import HEADS, ImageEncoder, TextEncoder, get_encoder
from .exporter import (export_embeddings, read_image_items, read_text_items)

_DEFAULT_ENCODERS = {"image": ImageEncoder.revision,
                     "text": TextEncoder.revision}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="figrot-export",
        description="Export image or text embeddings to a FIGE store.")
    p.add_argument("--modality", required=True, choices=("image", "text"))
    p.add_argument("--encoder", default=None,
                   help="encoder revision id (default per modality)")
    p.add_argument("--input", required=True,
                   help="text file: lines to embed; image file: one "
                        "image path per line")
    p.add_argument("--out", required=True, help="output .fige store path")
    p.add_argument("--dim", type=int, default=256,
                   help="embedding dimension (default 256)")
    p.add_argument("--head", choices=HEADS, default="projection",
                   help="feature head recorded in the manifest")
    p.add_argument("--on-error", choices=("abort", "skip"), default="abort",
                   help="unreadable items abort the export or are "
                        "skipped with a report")
    p.add_argument("--no-empty", action="store_true",
                   help="text only: do not append the __EMPTY__ row")
    return p


def run(args) -> int:
    encoder_id = args.encoder or _DEFAULT_ENCODERS[args.modality]
    encoder = get_encoder(encoder_id, args.modality, args.dim, args.head)
    if args.modality == "text":
        items = read_text_items(args.input)
        include_empty = not args.no_empty
    else:
        items = read_image_items(args.input)
        include_empty = False
    manifest = export_embeddings(items, args.modality, encoder, args.out,
                                 on_error=args.on_error,
                                 include_empty=include_empty)
    print(f"wrote {manifest.count} x {manifest.dim} embeddings to "
          f"{args.out} ({manifest.encoder} {manifest.revision}, "
          f"head={manifest.head})")
    for line in manifest.skipped:
        print(f"skipped {line}", file=sys.stderr)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return run(args)
    except Exception as exc:  # single-line machine-parsable failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
