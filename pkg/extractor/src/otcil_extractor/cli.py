"""otcil-extract: fulfil attribute requests and emit an embedding bundle.

Subcommands:
    extract    encode images, describe classes, write a bundle
    validate   re-check an existing bundle directory

Exit codes: 0 success, 1 extraction or validation failure, 2 bad usage.
"""

import argparse
import sys
import warnings

from .backends import BackendError
from .bundle import validate_bundle_dir
from .encoder import UnknownEncoder
from .job import ExtractionJob, load_requests, run_job
from .parsing import InsufficientAttributes


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="otcil-extract",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    ep = sub.add_parser("extract", help="produce a bundle from images + requests")
    ep.add_argument("--requests", required=True,
                    help="attribute_requests.json from the consumer")
    ep.add_argument("--images", required=True,
                    help="root directory holding <class_name>/ image folders")
    ep.add_argument("--out", required=True, help="bundle directory to write")
    ep.add_argument("--encoder", default="stub")
    ep.add_argument("--backend", default="fixture",
                    help='"fixture" or "http"')
    ep.add_argument("--min-attrs", type=int, default=5)
    ep.add_argument("--base-url", default="",
                    help="chat-completion endpoint base (http backend)")
    ep.add_argument("--model", default="", help="model name (http backend)")
    ep.add_argument("--retries", type=int, default=2,
                    help="extra attempts per class before falling back")

    vp = sub.add_parser("validate", help="re-check a bundle directory")
    vp.add_argument("--bundle", required=True)
    return p


def _extract(args) -> int:
    if args.min_attrs < 1:
        print("error: --min-attrs must be >= 1", file=sys.stderr)
        return 2
    try:
        requests = load_requests(args.requests)
    except OSError as exc:
        print(f"error: cannot read requests: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    job = ExtractionJob(
        images_root=args.images,
        requests=requests,
        encoder_id=args.encoder,
        backend_id=args.backend,
        out_dir=args.out,
        min_attrs=args.min_attrs,
        base_url=args.base_url,
        model=args.model,
        retries=args.retries,
    )
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            summary = run_job(job)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
    except InsufficientAttributes as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (UnknownEncoder, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except BackendError as exc:
        print(f"error: backend failed: {exc}", file=sys.stderr)
        return 1

    for name, note in summary.notes.items():
        print(f"note [{name}]: {note}")
    print(f"wrote {summary.out_dir}: {summary.num_images} images, "
          f"{summary.num_classes} classes"
          + (f", {len(summary.skipped)} skipped" if summary.skipped else ""))
    if summary.problems:
        for prob in summary.problems:
            print(f"invalid: {prob}", file=sys.stderr)
        return 1
    print("bundle validates")
    return 0


def _validate(args) -> int:
    problems = validate_bundle_dir(args.bundle)
    if problems:
        for prob in problems:
            print(f"fail: {prob}")
        return 1
    print("pass")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "extract":
        return _extract(args)
    return _validate(args)


if __name__ == "__main__":
    sys.exit(main())
