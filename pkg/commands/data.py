"""
Data commands: gen-data and render
"""
from pathlib import Path

from commands import fail, respond
from services.pipeline import write_dataset
from services.shapegen import make_component_dataset, make_pair_dataset
from utils.voxel_io import render_slices


def register(subparsers):
    gen = subparsers.add_parser('gen-data', help='generate synthetic screws and oracle-labelled pairs')
    gen.add_argument('--out', required=True, help='output directory')
    gen.add_argument('--count', type=int, default=200, help='number of components')
    gen.add_argument('--pairs', type=int, default=1000, help='number of comparator pairs')
    gen.add_argument('--seed', type=int, required=True)
    gen.add_argument('--resolution', type=int, default=32)
    gen.set_defaults(handler=gen_data)

    slices = subparsers.add_parser('render', help='write the middle slices of a VOXB grid as PGM images')
    slices.add_argument('--in', dest='grid', required=True, help='VOXB file')
    slices.add_argument('--out-dir', required=True)
    slices.set_defaults(handler=render)


def gen_data(args):
    try:
        components = make_component_dataset(args.count, args.seed, args.resolution)
        pairs = make_pair_dataset(args.pairs, args.seed + 1, args.resolution)
        manifests = write_dataset(args.out, components, pairs)
        return respond({
            'components': len(components),
            'pairs': len(pairs),
            'manifests': {name: str(path) for name, path in manifests.items()},
        })
    except Exception as e:
        return fail(f'Failed to generate data: {e}')


def render(args):
    try:
        paths = render_slices(args.grid, Path(args.out_dir))
        return respond({'images': [str(p) for p in paths]})
    except Exception as e:
        return fail(f'Failed to render {args.grid}: {e}')
