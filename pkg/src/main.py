#!/usr/bin/env python3
"""
scenetokens - object-centric scene prompts from fitted token fields
Command Line Interface for the scene generation, training, description and answering pipeline
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from dotenv import load_dotenv
from pydantic import ValidationError
from config_loader import get_config
from errors import InvalidArgumentError, NumericalError, TransportError
from utils.logging_setup import setup_logging
from utils.run_manifest import write_run_manifest

load_dotenv()

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NUMERICAL = 3
EXIT_TRANSPORT = 4


def _seeds(config) -> dict:
    return {section: config.get(f'{section}.seed') for section in config.get_config_sections()
            if isinstance(config.get(section), dict) and 'seed' in config.get(section)}


def _default_run(config, name: str) -> Path:
    return Path(config.get_output_folder()) / name


def cmd_gen_scene(args, config):
    from processors.pipeline import generate_scene

    out = Path(args.out or _default_run(config, args.preset))
    result = generate_scene(out, preset=args.preset, scene_file=args.scene_file, n_views=args.views,
                            static=args.static, previews=not args.no_previews, config=config)
    print(f"✓ Scene written to {out} ({result['objects']} objects, {result['views']} views)")
    return out, {'scene_file': args.scene_file} if args.scene_file else {}


def _run_root(args, *artifacts) -> Path:
    """`--run`, else the directory holding the first artifact flag that was given."""
    if args.run:
        return Path(args.run)
    for artifact in artifacts:
        if artifact:
            return Path(artifact).parent
    raise InvalidArgumentError(f"{args.command} needs --run or explicit artifact paths")


def cmd_select_frames(args, config):
    from processors.pipeline import choose_frames

    root = _run_root(args, args.poses)
    paths = {'poses': args.poses, 'scene': args.scene, 'frames': args.out}
    result = choose_frames(root, args.k, config, beta=args.beta, paths=paths)
    if args.poses:
        print(json.dumps(result['feature_views']))
    else:
        print(f"✓ Selected {len(result['feature_views'])} supervision views "
              f"(min dissimilarity {result['min_dissimilarity']:.4f} vs uniform "
              f"{result['uniform_min_dissimilarity']:.4f})")
    return root, {'poses': args.poses} if args.poses else {'teacher': root / 'teacher'}


def cmd_train(args, config):
    from processors.pipeline import train_fields

    summary = train_fields(args.run, with_segfield=args.with_segfield, steps=args.steps, seg_steps=args.seg_steps,
                           progress=not args.quiet, config=config)
    print(f"✓ Token field fitted ({summary['token_steps']} steps, final loss {summary['final_loss']:.5f})")
    if args.with_segfield:
        print(f"✓ Segment field fitted ({summary['seg_steps']} steps, final loss {summary['final_seg_loss']:.5f})")
    return Path(args.run), {'teacher': Path(args.run) / 'teacher'}


def cmd_segment(args, config):
    from processors.pipeline import segment_scene

    root = _run_root(args, args.fieldset, args.out)
    paths = {'fieldset': args.fieldset, 'segfield': args.segfield, 'graph': args.out}
    graph = segment_scene(root, oracle=args.oracle, ground_truth=args.ground_truth, config=config, paths=paths)
    print(f"✓ Segment graph with {len(graph.objects())} objects written to {args.out or root / 'graph.json'}")
    return root, {'fieldset': args.fieldset} if args.fieldset else {}


def cmd_describe(args, config):
    from processors.pipeline import describe_scene

    root = _run_root(args, args.graph, args.fieldset, args.out)
    paths = {'graph': args.graph, 'fieldset': args.fieldset, 'segfield': args.segfield, 'prompt': args.out}
    result = describe_scene(root, question=args.question, budget=args.w, mode=args.mode, oracle=args.oracle,
                            config=config, paths=paths)
    partial = [d.object_id for d in result.descriptions if 'partial' in d.flags]
    print(f"✓ Scene prompt with {len(result.prompt.objects)} virtual images written to "
          f"{args.out or root / 'prompt.json'}")
    if partial:
        print(f"  ! partial descriptions for objects {partial}")
    return root, {'graph': Path(args.graph) if args.graph else root / 'graph.json'}


def _load_query(args):
    from processors.backend import StructuredQuery, parse_query

    if args.query:
        return parse_query(Path(args.query).read_text(encoding='utf-8'))
    if args.kind:
        embedding = json.loads(args.embedding) if args.embedding else None
        return StructuredQuery(kind=args.kind, embedding=embedding, reference_virtual_id=args.reference,
                               threshold=args.threshold)
    return None


def cmd_ask(args, config):
    from processors.describe import ScenePrompt
    from processors.pipeline import ask

    prompt_path = Path(args.prompt)
    prompt = ScenePrompt.from_json(prompt_path.read_bytes())
    reply = ask(prompt, _load_query(args), remote=args.remote, endpoint=args.endpoint, timeout=args.timeout,
                config=config)
    (prompt_path.parent / 'answer.json').write_text(json.dumps(reply, indent=2), encoding='utf-8')
    print(reply['answer'])
    return prompt_path.parent, {'prompt': prompt_path}


def cmd_ground(args, config):
    from processors.pipeline import ground_object

    result = ground_object(args.run, args.virtual_id, args.prompt, oracle=args.oracle, config=config)
    print(f"✓ Virtual image {result.virtual_id} -> object {result.object_id}: "
          f"{int(result.labels.sum())}/{len(result.points)} points")
    return Path(args.run), {'prompt': args.prompt or Path(args.run) / 'prompt.json'}


def cmd_eval(args, config):
    from processors.pipeline import evaluate

    _, summary = evaluate(args.run, n_queries=args.queries, oracle=args.oracle, config=config)
    print("\n=== EVALUATION ===")
    for key, value in summary.items():
        print(f"{key}: {value:.4f}" if isinstance(value, float) else f"{key}: {value}")
    return Path(args.run), {'graph': Path(args.run) / 'graph.json', 'prompt': Path(args.run) / 'prompt.json'}


def cmd_serve(args, config):
    from app import create_app

    app = create_app(config, mode=args.mode)
    app.run(host=args.host or config.get('server.host', '127.0.0.1'),
            port=args.port or config.get('server.port', 8808),
            debug=config.get('server.debug', False))
    return None, {}


def cmd_cache_info(args, config):
    from processors.cache_manager import TeacherCache

    cache_info = TeacherCache(config=config).get_cache_info()
    print("\n=== CACHE INFORMATION ===")
    print(f"Cache Directory: {cache_info['cache_directory']}")
    print(f"Total Cache Entries: {cache_info['cache_entries_count']}")
    print(f"Total Cache Size: {cache_info['total_size_mb']:.2f} MB")
    for entry in cache_info['entries'][:10]:
        print(f"  - {entry['name']} ({entry['size_bytes'] / (1024 * 1024):.2f} MB, {entry['age_days']:.1f} days)")
    if len(cache_info['entries']) > 10:
        print(f"  ... and {len(cache_info['entries']) - 10} more entries")
    return None, {}


def cmd_clear_cache(args, config):
    from processors.cache_manager import TeacherCache

    stats = TeacherCache(config=config).clear_cache()
    print(f"Cache cleared: {stats['entries_removed']} entries, {stats['space_freed_mb']} MB freed")
    return None, {}


COMMANDS = {
    'gen-scene': cmd_gen_scene,
    'select-frames': cmd_select_frames,
    'train': cmd_train,
    'segment': cmd_segment,
    'describe': cmd_describe,
    'ask': cmd_ask,
    'ground': cmd_ground,
    'eval': cmd_eval,
    'serve': cmd_serve,
    'cache-info': cmd_cache_info,
    'clear-cache': cmd_clear_cache,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='scenetokens',
        description="scenetokens - object-centric scene prompts from fitted token fields",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python main.py gen-scene --preset two-objects --out runs/two
  python main.py select-frames --run runs/two --k 24
  python main.py select-frames --poses runs/two/poses.json --k 24 --beta 0.5
  python main.py train --run runs/two --with-segfield
  python main.py segment --fieldset runs/two/fieldset --out runs/two/graph.json
  python main.py describe --run runs/two --w 3000 --question "Which object is red?"
  python main.py describe --graph runs/two/graph.json --fieldset runs/two/fieldset --w 3000 --out prompt.json
  python main.py ask --prompt runs/two/prompt.json --kind nearest_object_to --reference 1
  python main.py ground --run runs/two --virtual-id 2
  python main.py eval --run runs/two
  python main.py serve --mode oracle
        """
    )
    parser.add_argument('--config', help='YAML or JSON file merged over config/config.yaml')
    parser.add_argument('--seed', type=int, help='Override every seed in the configuration')

    subparsers = parser.add_subparsers(dest='command', help='Available commands')

    gen = subparsers.add_parser('gen-scene', help='Generate a synthetic scene and render its teacher views')
    gen.add_argument('--preset', default='two-objects', help='one-sphere, two-objects or five-objects')
    gen.add_argument('--scene-file', help='Scene specification JSON instead of a preset')
    gen.add_argument('--views', type=int, help='Number of trajectory views')
    gen.add_argument('--static', action='store_true', help='View-independent teacher tokens')
    gen.add_argument('--no-previews', action='store_true', help='Skip PNG previews')
    gen.add_argument('--out', help='Run directory')

    frames = subparsers.add_parser('select-frames', help='Select supervision views')
    frames.add_argument('--run', help='Run directory (default for every artifact path)')
    frames.add_argument('--poses', help='Trajectory JSON; skips blur filtering and prints the index list')
    frames.add_argument('--scene', help='Scene JSON for the bounds (default: scene.json of the run)')
    frames.add_argument('--k', type=int, help='Number of views to keep')
    frames.add_argument('--beta', type=float, help='Weight of the rotation term')
    frames.add_argument('--out', help='Selection JSON (default: frames.json of the run)')

    train = subparsers.add_parser('train', help='Fit the token field (and segment field)')
    train.add_argument('--run', required=True)
    train.add_argument('--with-segfield', action='store_true')
    train.add_argument('--steps', type=int)
    train.add_argument('--seg-steps', type=int)
    train.add_argument('--quiet', action='store_true', help='Hide progress bars')

    segment = subparsers.add_parser('segment', help='Cluster segments into the object/part/sub-part graph')
    segment.add_argument('--run', help='Run directory (default for every artifact path)')
    segment.add_argument('--fieldset', help='Token field checkpoint directory')
    segment.add_argument('--segfield', help='Segment field checkpoint directory')
    segment.add_argument('--out', help='Graph JSON (default: graph.json of the run)')
    segment.add_argument('--oracle', action='store_true', help='Cluster analytic segment embeddings')
    segment.add_argument('--ground-truth', action='store_true', help='Write the scene hierarchy without clustering')

    describe = subparsers.add_parser('describe', help='Build the radar-ordered scene prompt')
    describe.add_argument('--run', help='Run directory (default for every artifact path)')
    describe.add_argument('--graph', help='Segment graph JSON')
    describe.add_argument('--fieldset', help='Token field checkpoint directory')
    describe.add_argument('--segfield', help='Segment field checkpoint directory')
    describe.add_argument('--out', help='Prompt JSON (default: prompt.json of the run)')
    describe.add_argument('--w', type=int, help='Total token budget')
    describe.add_argument('--mode', choices=['all_vi', 'all_vd', 'even_split', 'adaptive'])
    describe.add_argument('--question', default='')
    describe.add_argument('--oracle', action='store_true', help='Use analytic token fields')

    ask = subparsers.add_parser('ask', help='Answer a scene prompt')
    ask.add_argument('--prompt', required=True)
    ask.add_argument('--query', help='Structured query JSON file')
    ask.add_argument('--kind', choices=['find_object_by_feature', 'count_objects_by_feature', 'nearest_object_to',
                                        'exists'])
    ask.add_argument('--embedding', help='Query embedding as a JSON list')
    ask.add_argument('--reference', type=int, help='Reference virtual id')
    ask.add_argument('--threshold', type=float, default=0.5,
                     help='Minimum similarity (1 + cos) / 2 for count and exists')
    ask.add_argument('--remote', action='store_true', help='Send to the remote endpoint instead of the oracle')
    ask.add_argument('--endpoint')
    ask.add_argument('--timeout', type=float)

    ground = subparsers.add_parser('ground', help='Binary 3D segmentation of one virtual image')
    ground.add_argument('--run', required=True)
    ground.add_argument('--virtual-id', type=int, required=True)
    ground.add_argument('--prompt', help='Prompt file (defaults to the run prompt)')
    ground.add_argument('--oracle', action='store_true')

    evaluate = subparsers.add_parser('eval', help='Grounding accuracy, ARI and semantic scores')
    evaluate.add_argument('--run', required=True)
    evaluate.add_argument('--queries', type=int, default=50)
    evaluate.add_argument('--oracle', action='store_true')

    serve = subparsers.add_parser('serve', help='Run the answer server')
    serve.add_argument('--mode', choices=['oracle', 'echo'])
    serve.add_argument('--host')
    serve.add_argument('--port', type=int)

    subparsers.add_parser('cache-info', help='Show teacher cache information')
    subparsers.add_parser('clear-cache', help='Clear the teacher cache')
    return parser


def main(argv=None):
    """Main CLI entry point; returns the process exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help()
        return EXIT_INVALID

    try:
        config = get_config()
        if args.config:
            config.merge_file(args.config)
        if args.seed is not None:
            config.override_seed(args.seed)
        setup_logging(config)

        out_dir, inputs = COMMANDS[args.command](args, config)
        if out_dir is not None:
            write_run_manifest(out_dir, args.command, vars(args), _seeds(config), inputs)
        return EXIT_OK

    except (InvalidArgumentError, ValidationError, FileNotFoundError, json.JSONDecodeError) as e:
        logger.error(f"{args.command}: invalid input: {e}")
        print(f"✗ Invalid input: {e}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as e:
        logger.error(f"{args.command}: numerical failure: {e} {e.diagnostics}")
        print(f"✗ Numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except TransportError as e:
        logger.error(f"{args.command}: transport failure: {e}")
        print(f"✗ Transport failure: {e}", file=sys.stderr)
        return EXIT_TRANSPORT


if __name__ == "__main__":
    sys.exit(main())
