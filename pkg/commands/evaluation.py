"""
Evaluation command: eval-fid
"""
import json
from pathlib import Path

from commands import fail, respond
from services.fid_eval import RandomConvExtractor, slice_fid
from services.gan3d import load_gan
from services.pipeline import read_components


def register(subparsers):
    fid = subparsers.add_parser('eval-fid', help='slice-wise Fréchet distances of a generator')
    fid.add_argument('--gan', required=True)
    fid.add_argument('--data', required=True, help='component manifest of the real set')
    fid.add_argument('--per-label', type=int, default=2)
    fid.add_argument('--seed', type=int, required=True, help='seed of the synthesized samples')
    fid.add_argument('--extractor-seed', type=int, default=0)
    fid.add_argument('--out', required=True, help='report JSON path')
    fid.set_defaults(handler=eval_fid)


def eval_fid(args):
    try:
        generator, _, _ = load_gan(args.gan)
        components = read_components(args.data)
        report = slice_fid(
            [grid for grid, _ in components],
            generator,
            [class_id for _, class_id in components],
            args.per_label,
            RandomConvExtractor(seed=args.extractor_seed),
            seed=args.seed,
        )
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(report.to_dict(), indent=2))
        return respond(report.to_dict())
    except Exception as e:
        return fail(f'FID evaluation failed: {e}')
