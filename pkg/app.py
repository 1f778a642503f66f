import argparse
import logging
import os
import sys

from dotenv import load_dotenv

load_dotenv()

from commands import data, evaluation, latents, pipeline, training
from torch_init import initialize_runtime

COMMAND_GROUPS = (data, training, latents, evaluation, pipeline)


def build_parser():
    parser = argparse.ArgumentParser(
        prog='latentcad',
        description='Latent-space optimization of voxelized CAD components',
    )
    subparsers = parser.add_subparsers(dest='command', required=True)
    for group in COMMAND_GROUPS:
        group.register(subparsers)
    return parser


def main(argv=None):
    logging.basicConfig(
        level=os.getenv('LATENTCAD_LOG_LEVEL', 'INFO').upper(),
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
        stream=sys.stderr,
    )
    args = build_parser().parse_args(argv)
    if not initialize_runtime():
        logging.getLogger(__name__).warning("⚠️  Continuing with default torch settings")
    return args.handler(args)


if __name__ == '__main__':
    sys.exit(main())
