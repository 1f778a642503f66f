"""
Training commands: train-gan, train-comparator and train-mapper
"""
from commands import fail, respond
from services.comparator import ComparatorTrainConfig, load_comparator, save_comparator, train_comparator
from services.gan3d import GanArchitecture, GanTrainConfig, count_parameters, load_gan, save_gan, train_gan
from services.inversion import load_latent
from services.optimize import MapperTrainConfig, save_mapper, train_mapper
from services.pipeline import read_components, read_pairs
from services.voxel_core import to_signed
from utils.checkpoint import file_sha256
from utils.config import build_config, read_config, split_values
from utils.run_log import write_trace
from utils.voxel_io import read_latent_manifest, read_voxb


def register(subparsers):
    gan = subparsers.add_parser('train-gan', help='train the class-conditional 3D GAN')
    gan.add_argument('--data', required=True, help='component manifest')
    gan.add_argument('--config', required=True, help='GAN training and architecture keys')
    gan.add_argument('--out', required=True, help='checkpoint path')
    gan.add_argument('--trace', help='optional JSON-lines training log')
    gan.set_defaults(handler=train_gan_command)

    comparator = subparsers.add_parser('train-comparator', help='train the two-channel comparator')
    comparator.add_argument('--pairs', required=True, help='pair manifest')
    comparator.add_argument('--config', required=True)
    comparator.add_argument('--out', required=True)
    comparator.add_argument('--trace')
    comparator.set_defaults(handler=train_comparator_command)

    mapper = subparsers.add_parser('train-mapper', help='train the latent mapper on inverted latents')
    mapper.add_argument('--gan', required=True)
    mapper.add_argument('--comparator', required=True)
    mapper.add_argument('--latents', required=True, help='latent manifest: "latent.json source.voxb" per line')
    mapper.add_argument('--config', required=True)
    mapper.add_argument('--out', required=True)
    mapper.add_argument('--trace')
    mapper.set_defaults(handler=train_mapper_command)


def train_gan_command(args):
    try:
        train_values, arch_values = split_values(read_config(args.config), [GanTrainConfig, GanArchitecture])
        config = build_config(GanTrainConfig, train_values)
        arch = build_config(GanArchitecture, arch_values, require_seed=False)
        dataset = read_components(args.data)
        generator, discriminator, log = train_gan(config, dataset, arch)
        path = save_gan(args.out, generator, discriminator, step=config.steps, seed=config.seed)
        if args.trace:
            write_trace(log.records, args.trace)
        return respond({
            'checkpoint': str(path),
            'sha256': file_sha256(path),
            'generator_parameters': count_parameters(generator),
            'discriminator_parameters': count_parameters(discriminator),
            'final': log.last(),
        })
    except Exception as e:
        return fail(f'GAN training failed: {e}')


def train_comparator_command(args):
    try:
        config = build_config(ComparatorTrainConfig, read_config(args.config))
        pairs = read_pairs(args.pairs)
        params, log = train_comparator(config, pairs)
        path = save_comparator(args.out, params, step=config.epochs, seed=config.seed)
        if args.trace:
            write_trace(log.records, args.trace)
        return respond({'checkpoint': str(path), 'sha256': file_sha256(path), 'final': log.last()})
    except Exception as e:
        return fail(f'Comparator training failed: {e}')


def train_mapper_command(args):
    try:
        config = build_config(MapperTrainConfig, read_config(args.config))
        generator, _, _ = load_gan(args.gan)
        comparator = load_comparator(args.comparator).to(next(generator.parameters()).device)
        latents = []
        for latent_path, source_path in read_latent_manifest(args.latents):
            w, _ = load_latent(latent_path)
            latents.append((w, to_signed(read_voxb(source_path))))
        mapper, log = train_mapper(generator, comparator, latents, config)
        path = save_mapper(args.out, mapper, step=config.epochs, seed=config.seed)
        if args.trace:
            write_trace(log.records, args.trace)
        return respond({'checkpoint': str(path), 'sha256': file_sha256(path), 'final': log.last()})
    except Exception as e:
        return fail(f'Mapper training failed: {e}')
