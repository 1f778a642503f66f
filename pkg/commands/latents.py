"""
Latent commands: invert, optimize-latent and apply-mapper
"""
from commands import fail, respond
from services.comparator import load_comparator
from services.gan3d import load_gan, synthesize
from services.inversion import InversionConfig, invert, load_latent, save_latent
from services.optimize import OptConfig, apply_mapper, load_mapper, run_latent_optimization
from services.voxel_core import binarize, iou
from utils.checkpoint import state_hash
from utils.config import build_config, read_config, sections
from utils.run_log import write_trace
from utils.voxel_io import read_voxb, write_voxb


def register(subparsers):
    inv = subparsers.add_parser('invert', help='embed a VOXB component into W space')
    inv.add_argument('--gan', required=True)
    inv.add_argument('--in', dest='grid', required=True)
    inv.add_argument('--config', help='inversion keys (steps, lr, seed, ...)')
    inv.add_argument('--seed', type=int, help='overrides the config seed; 0 when neither is given')
    inv.add_argument('--out', required=True, help='latent JSON path')
    inv.set_defaults(handler=invert_command)

    opt = subparsers.add_parser('optimize-latent', help='comparator-driven latent optimization')
    opt.add_argument('--gan', required=True)
    opt.add_argument('--comparator', required=True)
    opt.add_argument('--in', dest='grid', required=True)
    opt.add_argument('--latent', help='latent JSON of the input; inverted on the fly when omitted')
    opt.add_argument('--mask', help='VOXB mask of protected voxels')
    opt.add_argument('--config', help='optimization keys plus optional inversion.* keys')
    opt.add_argument('--seed', type=int, help='overrides the config seed; 0 when neither is given')
    opt.add_argument('--out', required=True, help='optimized VOXB path')
    opt.add_argument('--trace', help='JSON-lines trace path (default: <out>.trace.jsonl)')
    opt.set_defaults(handler=optimize_latent_command)

    mapper = subparsers.add_parser('apply-mapper', help='apply a trained latent mapper')
    mapper.add_argument('--gan', required=True)
    mapper.add_argument('--mapper', required=True)
    mapper.add_argument('--latent', required=True)
    mapper.add_argument('--out', required=True)
    mapper.add_argument('--latent-out', help='optional JSON path for the moved latent')
    mapper.set_defaults(handler=apply_mapper_command)


def command_values(args):
    """Config file keys with --seed applied; the seed only picks the mean-latent samples"""
    values = read_config(args.config) if args.config else {}
    if args.seed is not None:
        values['seed'] = str(args.seed)
    values.setdefault('seed', '0')
    return values


def invert_command(args):
    try:
        config = build_config(InversionConfig, command_values(args))
        generator, _, _ = load_gan(args.gan)
        target = read_voxb(args.grid)
        result = invert(generator, target, config)
        save_latent(args.out, result.w, state_hash(generator), config.class_id, result.best_loss)
        return respond({
            'latent': args.out,
            'initial_loss': result.initial_loss,
            'best_loss': result.best_loss,
            'best_step': result.best_step,
            'iou': iou(binarize(synthesize(generator, result.w)), target),
        })
    except Exception as e:
        return fail(f'Inversion failed: {e}')


def optimize_latent_command(args):
    try:
        top, nested = sections(command_values(args), ['inversion'])
        config = build_config(OptConfig, top)
        generator, _, _ = load_gan(args.gan)
        comparator = load_comparator(args.comparator).to(next(generator.parameters()).device)
        source = read_voxb(args.grid)
        mask = read_voxb(args.mask) if args.mask else None

        if args.latent:
            w_s, _ = load_latent(args.latent)
        else:
            inversion_values = dict(nested['inversion'])
            inversion_values.setdefault('seed', str(config.seed))
            w_s = invert(generator, source, build_config(InversionConfig, inversion_values)).w

        w, grid, trace = run_latent_optimization(generator, comparator, source, w_s, config, mask)
        write_voxb(binarize(grid), args.out)
        trace_path = write_trace(trace, args.trace or f"{args.out}.trace.jsonl")
        best = min(trace, key=lambda row: row['total'])
        return respond({
            'out': args.out,
            'trace': str(trace_path),
            'comparator_initial': trace[0]['comparator'],
            'comparator_best': best['comparator'],
            'best_step': best['step'],
            'latent_shift': float((w.values - w_s.values.to(w.values)).norm()),
        })
    except Exception as e:
        return fail(f'Latent optimization failed: {e}')


def apply_mapper_command(args):
    try:
        generator, _, _ = load_gan(args.gan)
        mapper = load_mapper(args.mapper)
        w, meta = load_latent(args.latent)
        moved, grid = apply_mapper(generator, mapper, w)
        write_voxb(binarize(grid), args.out)
        if args.latent_out:
            save_latent(args.latent_out, moved, state_hash(generator), meta.get('class_id'))
        return respond({'out': args.out, 'step_norm': float((moved.values - w.values.to(moved.values)).norm())})
    except Exception as e:
        return fail(f'Applying the mapper failed: {e}')
