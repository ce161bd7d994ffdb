"""`synth <spec.json> <out_dir>`: generate a synthetic dataset."""

import argparse

from app.config import load_synthetic_spec
from app.core.logging import get_logger
from app.services.synthetic_service import generate_synthetic

logger = get_logger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("synth", help="generate a synthetic dataset with exact ground truth")
    parser.add_argument("spec", help="synthetic spec JSON file")
    parser.add_argument("out_dir", help="output dataset directory")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    spec = load_synthetic_spec(args.spec)
    manifest, frames = generate_synthetic(spec, args.out_dir)
    print(f"wrote {len(frames)} frames, manifest {manifest}")
    return 0
