"""gelda-export command line.

Export (the default mode):

    gelda-export --modality {audio,image,text} --model <id> --listing <csv>
                 --out <path> [--prompt <template>]

Verification:

    gelda-export verify <path>

Exit codes: 0 success, 1 usage error, 2 data/format error.
"""

from __future__ import annotations

import argparse
import sys

from .encoders import EncoderError
from .export import DEFAULT_PROMPT, ExportJob, export, read_listing
from .format import GeldFormatError, GeldIntegrityError, verify_geld

MODALITY_ALIASES = {"audio": "audio", "image": "image", "text": "text_semantic"}


def run_verify(path) -> int:
    summary = verify_geld(path)
    print(f"{summary['path']}: {summary['n']} records, M={summary['m']}, "
          f"C={summary['c']}, K={summary['k']}")
    hist = summary["histogram"]
    for c, cname in enumerate(summary["class_names"]):
        for k, kname in enumerate(summary["subdomain_names"]):
            train, test = hist[c, k]
            if train or test:
                print(f"  {cname} / {kname}: train={train} test={test}")
    return 0


def run_export(args) -> int:
    listing = read_listing(args.listing)
    job = ExportJob(
        modality=MODALITY_ALIASES[args.modality],
        model_id=args.model,
        listing=listing,
        out_path=args.out,
        prompt=args.prompt,
        pooling="class_token" if args.modality != "audio" else "mean_over_time",
    )
    summary = export(job)
    print(
        f"wrote {summary['records']} records (M={summary['m']}, {summary['bytes']} bytes) "
        f"to {summary['out']}; {summary['failures']} failures"
    )
    return 0


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        if argv and argv[0] == "verify":
            parser = argparse.ArgumentParser(prog="gelda-export verify")
            parser.add_argument("path")
            args = parser.parse_args(argv[1:])
            return run_verify(args.path)
        parser = argparse.ArgumentParser(prog="gelda-export", description=__doc__)
        parser.add_argument("--modality", required=True, choices=sorted(MODALITY_ALIASES))
        parser.add_argument("--model", required=True, help="builtin/<name> or hf/<model-id>")
        parser.add_argument("--listing", required=True, help="CSV: path,class,subdomain,split")
        parser.add_argument("--out", required=True)
        parser.add_argument("--prompt", default=DEFAULT_PROMPT,
                            help="text prompt template; [label] is replaced per class")
        args = parser.parse_args(argv)
        return run_export(args)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    except (GeldFormatError, GeldIntegrityError, EncoderError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
