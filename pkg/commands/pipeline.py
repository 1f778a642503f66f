"""
Pipeline command: runs every stage from one config file
"""
import json

from commands import fail, respond
from services.pipeline import PipelineConfig, run_pipeline


def register(subparsers):
    pipeline = subparsers.add_parser('pipeline', help='run data, training, optimization and evaluation end to end')
    pipeline.add_argument('--config', required=True)
    pipeline.add_argument('--out', help='artifact directory (overrides out_dir)')
    pipeline.set_defaults(handler=pipeline_command)


def pipeline_command(args):
    try:
        overrides = {'out_dir': args.out} if args.out else None
        config = PipelineConfig.from_file(args.config, overrides)
    except Exception as e:
        return fail(f'Invalid pipeline config: {e}')

    try:
        status, out_dir = run_pipeline(config)
        summary = json.loads((out_dir / 'summary.json').read_text())
        if status:
            return fail(f"Pipeline failed at stage '{summary.get('failed_stage')}'", artifacts=str(out_dir))
        respond({'artifacts': str(out_dir), 'summary': summary})
        return 0
    except Exception as e:
        return fail(f'Pipeline failed: {e}')
