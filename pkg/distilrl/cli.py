"""
Command-Line Interface
======================

`python -m distilrl <command> [options]`, with commands:

* `train-teacher`: train a teacher on MNIST or synthetic data and save its
  context (architecture, weights, cached logits, metadata).
* `compress`: run stage 1, stage 2, or both, then distil the winner.
* `transfer`: like `compress`, starting from a pretrained policy checkpoint.
* `evaluate`: score one architecture file against the teacher.
* `export-plots`: gather a run's per-rollout logs into one plotting CSV.
"""

import os
import sys
import argparse

import numpy as np
import yaml

from distilrl import architectures
from distilrl.architectures import ArchitectureFormatError
from distilrl.config import (
    ConfigError,
    load_config,
    preset,
    with_overrides,
)
from distilrl.containers import ContainerFormatError
from distilrl.datasets import (
    IdxFormatError,
    SyntheticSpec,
    gen_synthetic,
    load_mnist,
    split_validation,
)
from distilrl.evaluation import (
    TeacherContext,
    TeacherContextError,
    read_teacher_meta,
    train_teacher,
)
from distilrl.policies import PolicyShapeError
from distilrl.rewards import ConstraintParseError
from distilrl.search import StageAborted, export_plot_data, make_evaluator, \
    run_search
from distilrl.teachers import TEACHERS, get_teacher


EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_CONSTRAINT = 4
EXIT_DATA = 5
EXIT_ABORTED = 6

EXIT_CODES_HELP = f"""\
exit codes:
  {EXIT_OK}  success
  {EXIT_USAGE}  usage error (unknown command or flag)
  {EXIT_CONFIG}  unreadable or invalid configuration
  {EXIT_CONSTRAINT}  constraint could not be parsed
  {EXIT_DATA}  dataset, architecture, container or checkpoint could not be read
  {EXIT_ABORTED}  search aborted (only degenerate architectures)
"""


def _add_common(parser):
    parser.add_argument('--config', help="YAML run configuration")
    parser.add_argument('--preset', default='default',
                        choices=['default', 'desk'],
                        help="starting configuration when --config is absent")
    parser.add_argument('--seed', type=int, help="master seed")
    parser.add_argument('--surrogate', action='store_true',
                        help="score candidates with the surrogate model")
    parser.add_argument('--constraint', action='append',
                        help="linear budget such as 'params<=20000' "
                             "(repeatable)")
    parser.add_argument('--constraint-mode', choices=['Hard', 'Annealed'],
                        help="how violations are scored (default Hard)")
    parser.add_argument('--workers', type=int,
                        help="concurrent candidate evaluations")
    parser.add_argument('--out', default=os.path.join('runs', 'run'),
                        help="run directory")
    parser.add_argument('--teacher-dir',
                        help="teacher context directory (default OUT/teacher)")
    parser.add_argument('--data-dir', help="directory with the MNIST files")
    parser.add_argument('--synthetic', action='store_true',
                        help="use synthetic blob data instead of MNIST")
    parser.add_argument('--train-limit', type=int,
                        help="use only the first N training samples")
    parser.add_argument('--iterations', type=int,
                        help="policy iterations for each stage")
    parser.add_argument('--actor-critic', action='store_true',
                        help="train the policies with a learned value head")
    parser.add_argument('--verbose', action='store_true',
                        help="progress bars and diagnostics on stderr")


def build_parser():
    parser = argparse.ArgumentParser(
        prog='distilrl',
        description="Compress a teacher network with reinforcement-learned "
                    "layer removal and shrinkage.",
        epilog=EXIT_CODES_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    commands = parser.add_subparsers(dest='command', required=True)

    teacher = commands.add_parser('train-teacher', help="train a teacher",
                                  epilog=EXIT_CODES_HELP)
    _add_common(teacher)
    teacher.add_argument('--teacher', default='mnist_conv',
                         choices=sorted(TEACHERS),
                         help="shipped teacher architecture")
    teacher.add_argument('--arch', help="teacher architecture file")

    compress = commands.add_parser('compress', help="run the search",
                                   epilog=EXIT_CODES_HELP)
    _add_common(compress)
    compress.add_argument('--stage', choices=['1', '2', 'both'],
                          help="which stages to run")
    compress.add_argument('--arch',
                          help="stage-2 starting architecture file")

    transfer = commands.add_parser('transfer',
                                   help="run the search from a pretrained "
                                        "policy", epilog=EXIT_CODES_HELP)
    _add_common(transfer)
    transfer.add_argument('--checkpoint', required=True,
                          help="policy checkpoint (JSON)")
    transfer.add_argument('--stage', choices=['1', '2', 'both'])
    transfer.add_argument('--arch',
                          help="stage-2 starting architecture file")

    evaluate = commands.add_parser('evaluate', help="score an architecture",
                                   epilog=EXIT_CODES_HELP)
    _add_common(evaluate)
    evaluate.add_argument('--arch', required=True, help="architecture file")

    plots = commands.add_parser('export-plots',
                                help="write per-rollout plotting CSV",
                                epilog=EXIT_CODES_HELP)
    plots.add_argument('--out', default=os.path.join('runs', 'run'),
                       help="run directory to read")
    plots.add_argument('--output', help="CSV path (default OUT/plots.csv)")
    return parser


def build_config(args):
    """The run configuration: file or preset, overlaid with the flags."""
    cfg = load_config(args.config) if args.config else preset(args.preset)
    mode = args.constraint_mode
    if args.constraint and mode is None and cfg.reward.mode == "None":
        mode = "Hard"
    cfg = with_overrides(cfg, {
        'run.seed': args.seed,
        'run.workers': args.workers,
        'run.n1': args.iterations,
        'run.n2': args.iterations,
        'run.stages': getattr(args, 'stage', None),
        'run.verbose': True if args.verbose else None,
        'surrogate.enabled': True if args.surrogate else None,
        'reward.constraints': args.constraint,
        'reward.mode': mode,
        'eval.train_limit': args.train_limit,
        'policy.actor_critic': True if args.actor_critic else None,
        'policy.transfer_checkpoint': getattr(args, 'checkpoint', None),
    })
    cfg.constraint_rows()
    return cfg


def load_data(args, cfg, input_shape, seed=None):
    """
    Training and validation splits, MNIST or synthetic. The split is drawn
    from `seed` (default: the run seed).
    """
    seed = cfg.run.seed if seed is None else seed
    if args.synthetic:
        data = gen_synthetic(SyntheticSpec(
            samples_per_class=100,
            image_size=input_shape[1],
            seed=seed,
        ))
        if cfg.eval.train_limit is not None:
            data = data.subset(np.arange(min(cfg.eval.train_limit, len(data))))
    elif args.data_dir:
        data, _ = load_mnist(args.data_dir, cfg.eval.train_limit)
    else:
        raise FileNotFoundError("no --data-dir given (use --synthetic for "
                                "generated data)")
    return split_validation(data, cfg.eval.val_fraction, seed)


def _teacher_dir(args):
    return args.teacher_dir or os.path.join(args.out, 'teacher')


def _load_teacher(args, cfg):
    if cfg.surrogate.enabled:
        return None
    directory = _teacher_dir(args)
    arch = architectures.load(os.path.join(directory, 'teacher.arch'))
    seed = read_teacher_meta(directory)['seed']
    train, validation = load_data(args, cfg, arch.input_shape, seed)
    return TeacherContext.load(directory, train, validation)


def cmd_train_teacher(args, cfg):
    arch = (architectures.load(args.arch) if args.arch
            else get_teacher(args.teacher))
    train, validation = load_data(args, cfg, arch.input_shape)
    ctx = train_teacher(arch, train, validation, cfg.eval.teacher_epochs,
                        seed=cfg.run.seed, lr=cfg.eval.lr,
                        batch_size=cfg.eval.batch_size,
                        verbose=cfg.run.verbose)
    ctx.save(_teacher_dir(args))
    print(yaml.safe_dump({
        'teacher_dir': _teacher_dir(args),
        'params_teacher': ctx.params_teacher,
        'a_teacher': ctx.a_teacher,
    }, sort_keys=False), end='')


def cmd_compress(args, cfg):
    candidate = architectures.load(args.arch) if args.arch else None
    results = run_search(cfg, args.out, _load_teacher(args, cfg), candidate,
                         verbose=cfg.run.verbose)
    summary = {}
    for stage in ('stage1', 'stage2'):
        if stage in results:
            summary[stage] = {
                'best_reward': results[stage].best_report.reward,
                'best_params': results[stage].best_report.params,
            }
    if 'report' in results:
        summary['report'] = results['report'].to_dict()
    print(yaml.safe_dump(summary, sort_keys=False), end='')


def cmd_evaluate(args, cfg):
    arch = architectures.load(args.arch)
    _, evaluator = make_evaluator(cfg, _load_teacher(args, cfg),
                                  verbose=cfg.run.verbose)
    report = evaluator.evaluate(arch, iteration=0)
    print(yaml.safe_dump({
        'reward': report.reward,
        'accuracy': report.accuracy,
        'params': report.params,
        'compression': report.compression,
        'degenerate': report.degenerate.value,
        'diverged': report.diverged,
        'constraint_satisfied': report.constraint_satisfied,
        'wall_seconds': report.wall_seconds,
    }, sort_keys=False), end='')


def cmd_export_plots(args):
    output = args.output or os.path.join(args.out, 'plots.csv')
    rows = export_plot_data(args.out, output)
    print(f"wrote {rows} rows to {output}")


COMMANDS = {
    'train-teacher': cmd_train_teacher,
    'compress': cmd_compress,
    'transfer': cmd_compress,
    'evaluate': cmd_evaluate,
}


def _fail(code, message, parser=None):
    if parser is not None:
        parser.print_usage(sys.stderr)
    print(f"[distilrl.cli] error: {message}", file=sys.stderr)
    return code


def main(argv=None):
    """Run one command; returns the process exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit:
        return exit.code
    if args.command == 'export-plots':
        try:
            cmd_export_plots(args)
        except OSError as err:
            return _fail(EXIT_DATA, err)
        return EXIT_OK
    try:
        cfg = build_config(args)
    except ConstraintParseError as err:
        return _fail(EXIT_CONSTRAINT, err, parser)
    except ConfigError as err:
        return _fail(EXIT_CONFIG, err, parser)
    try:
        COMMANDS[args.command](args, cfg)
    except ConstraintParseError as err:
        return _fail(EXIT_CONSTRAINT, err)
    except ConfigError as err:
        return _fail(EXIT_CONFIG, err)
    except StageAborted as err:
        return _fail(EXIT_ABORTED, err)
    except (IdxFormatError, ArchitectureFormatError, ContainerFormatError,
            PolicyShapeError, TeacherContextError, OSError) as err:
        return _fail(EXIT_DATA, err)
    return EXIT_OK
