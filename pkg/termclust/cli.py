"""
Command line entry point: synth -> train -> embed -> index -> sweep -> cluster,
plus eval, link, probe, ablation and plot.
Every command writes a run manifest next to its main output.
Exit codes: 0 success, 2 validation error, 3 data error, 4 numeric error.
"""
import io
import os
import sys
import json
import time
import hashlib
import logging
import argparse
from dataclasses import dataclass, field, asdict

from . import __version__
from .errors import TermclustError, ConfigError, DataError, SizeMismatchError, ArtifactIOError
from .vocab import SynthSpec, VARIANT_KINDS, load_vocabulary, write_vocabulary, synth_vocabulary, \
    concept_clusters, normalize_surface
from .encoder import load_checkpoint, save_embeddings, load_embeddings
from .simindex import build_neighbor_table, save_table, load_table
from .trainer import TrainConfig, train, ablation_config
from .msloss import LossHyper
from .clustereval import evaluate, sweep, predict_pairs, connected_components, linking_accuracy, \
    probe_pairs, write_reports_json, write_sweep_csv, read_sweep_csv, DEFAULT_GRID
from .shard_pool import resolve_threads


logger = logging.getLogger(__name__)


DEFAULT_SEED = 42


@dataclass
class RunManifest:
    """
    What a command ran with: resolved configuration, input checksums,
    tool version, seed and timings.
    """
    command: str
    config: dict
    inputs: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    tool_version: str = __version__
    rng_seed: int = DEFAULT_SEED
    timings: dict = field(default_factory=dict)


    def write(self, artifact):
        path = '%s.manifest.json' % artifact
        tmp = '%s.tmp' % path
        with io.open(tmp, 'w', encoding='utf-8') as f:
            f.write(json.dumps(asdict(self), indent=2, sort_keys=True) + '\n')
        os.replace(tmp, path)
        return path


def file_checksum(path):
    h = hashlib.sha256()
    with io.open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            h.update(chunk)
    return h.hexdigest()


class _Run:
    """
    Collects the manifest of one command while it runs.
    A command without output files gets its manifest next to its first
    input, as `<input>.<command>.manifest.json`.
    """
    def __init__(self, args, config):
        self.args = args
        seed = config.get('rng_seed', args.seed)
        self.manifest = RunManifest(command=args.command,
                                    config=config,
                                    rng_seed=DEFAULT_SEED if seed is None else seed)
        self._started = time.time()


    def input(self, path):
        self.manifest.inputs[path] = file_checksum(path)
        return path


    def finish(self, *artifacts):
        self.manifest.outputs = list(artifacts)
        self.manifest.timings = {'started': self._started,
                                 'wall_seconds': round(time.time() - self._started, 3)}
        if artifacts:
            return self.manifest.write(artifacts[0])
        if self.manifest.inputs:
            return self.manifest.write('%s.%s' % (next(iter(self.manifest.inputs)), self.args.command))
        return None


def _threads(args):
    return 1 if args.deterministic else resolve_threads(args.threads)


def _read_config_file(args):
    if not args.config:
        return {}
    try:
        with io.open(args.config, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except ValueError as e:
        raise ConfigError('%s is not valid JSON: %s' % (args.config, e))
    if not isinstance(data, dict):
        raise ConfigError('%s must hold a JSON object.' % args.config)
    return data


def _merge(defaults, file_values, flag_values):
    """
    Return defaults overridden by the config file, then by explicit flags.
    """
    merged = dict(defaults)
    merged.update(file_values)
    merged.update({k: v for k, v in flag_values.items() if v is not None})
    return merged


def _parse_refresh(value):
    if value == 'never':
        return 'never'
    try:
        steps = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError('expected a number of steps or "never"')
    if steps < 1:
        raise argparse.ArgumentTypeError('refresh steps must be >= 1')
    return steps


def _parse_floats(value):
    """
    Parse "a,b,c" or "start:stop:step" (stop inclusive).
    """
    if ':' in value:
        start, stop, step = (float(x) for x in value.split(':'))
        count = int(round((stop - start) / step)) + 1
        return [round(start + i * step, 10) for i in range(count)]
    return [float(x) for x in value.split(',') if x]


def _parse_ints(value):
    return [int(x) for x in value.split(',') if x]


_TRAIN_FLAGS = {
    'b': 'b', 'k': 'k', 'm': 'm', 'steps': 'total_steps', 'accumulation': 'accumulation_steps',
    'refresh_steps': 'refresh_interval_steps', 'positive_mode': 'positive_mode', 'lr': 'peak_lr',
    'warmup': 'warmup_steps', 'weight_decay': 'weight_decay', 'adam_beta1': 'adam_beta1',
    'adam_beta2': 'adam_beta2', 'adam_eps': 'adam_eps', 'buckets': 'bucket_count', 'dim': 'dim',
    'ngram_min': 'ngram_min', 'ngram_max': 'ngram_max', 'max_chars': 'max_chars',
    'log_interval': 'log_interval_steps', 'init_checkpoint': 'init_checkpoint',
}

_LOSS_FLAGS = {'alpha': 'alpha', 'beta': 'beta', 'lambda_': 'lambda_', 'epsilon': 'epsilon'}


def _build(cls, values):
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError('Bad %s options: %s' % (cls.__name__, e))


def _train_config(args):
    file_values = _read_config_file(args)
    loss_file = file_values.pop('loss_hyper', {})
    loss = _build(LossHyper, _merge(asdict(LossHyper()), loss_file,
                                   {field_: getattr(args, flag) for flag, field_ in _LOSS_FLAGS.items()}))
    defaults = TrainConfig().to_dict()
    defaults.pop('loss_hyper')
    flags = {field_: getattr(args, flag) for flag, field_ in _TRAIN_FLAGS.items()}
    flags['rng_seed'] = args.seed
    values = _merge(defaults, file_values, flags)
    values['loss_hyper'] = loss
    values['threads'] = _threads(args)
    try:
        cfg = TrainConfig.from_dict(values)
    except TypeError as e:
        raise ConfigError('Bad TrainConfig options: %s' % e)
    return cfg.validate()


def _load_vocab(run, path, args):
    return load_vocabulary(run.input(path), normalize=not args.raw)


def cmd_synth(args):
    file_values = _read_config_file(args)
    flags = {'concept_count': args.concepts,
             'synonyms_min': args.synonyms_min,
             'synonyms_max': args.synonyms_max,
             'hard_family_fraction': args.hard_fraction,
             'variant_kinds': tuple(args.kinds.split(',')) if args.kinds else None,
             'rng_seed': args.seed}
    values = _merge(asdict(SynthSpec()), file_values, flags)
    values['variant_kinds'] = tuple(values['variant_kinds'])
    spec = _build(SynthSpec, values).validate()
    run = _Run(args, asdict(spec))
    vocab, clusters = synth_vocabulary(spec)
    write_vocabulary(args.out, vocab)
    logger.info('Wrote %d terms in %d concepts (%d singletons) to %s',
                vocab.n, len(clusters), clusters.singleton_count, args.out)
    run.finish(args.out)
    return 0


def cmd_train(args):
    cfg = _train_config(args)
    run = _Run(args, cfg.to_dict())
    vocab = _load_vocab(run, args.vocab, args)
    if cfg.init_checkpoint:
        run.input(cfg.init_checkpoint)
    metrics_path = args.metrics or '%s.metrics.jsonl' % args.out
    _, metrics = train(vocab, concept_clusters(vocab), cfg,
                       metrics_path=metrics_path, checkpoint_path=args.out)
    if metrics:
        logger.info('Final loss %.6f after %d steps', metrics[-1]['loss'], metrics[-1]['step'])
    run.finish(args.out, metrics_path)
    return 0


def cmd_embed(args):
    run = _Run(args, {'raw': args.raw, 'threads': _threads(args)})
    params, _ = load_checkpoint(run.input(args.checkpoint))
    vocab = _load_vocab(run, args.vocab, args)
    save_embeddings(args.out, params.encode_batch(vocab.surfaces, _threads(args)))
    run.finish(args.out)
    return 0


def cmd_index(args):
    run = _Run(args, {'m': args.m, 'threads': _threads(args)})
    embeddings = load_embeddings(run.input(args.embeddings))
    save_table(args.out, build_neighbor_table(embeddings, args.m, threads=_threads(args)))
    run.finish(args.out)
    return 0


def _table_and_clusters(run, args):
    table = load_table(run.input(args.table))
    vocab = _load_vocab(run, args.vocab, args)
    if table.n != vocab.n:
        raise SizeMismatchError('%s has %d rows but %s has %d terms.'
                                % (args.table, table.n, args.vocab, vocab.n))
    return table, vocab, concept_clusters(vocab)


def _print_report(report, prefix=''):
    print('%stheta=%.4f P=%.4f R=%.4f F1=%.4f (TP=%d FP=%d FN=%d TN=%d)'
          % (prefix, report.theta, report.precision, report.recall, report.f1,
             report.tp, report.fp, report.fn, report.tn))


def cmd_eval(args):
    run = _Run(args, {'theta': args.theta})
    table, _, clusters = _table_and_clusters(run, args)
    report = evaluate(table, clusters, args.theta, threads=_threads(args))
    _print_report(report)
    if args.out:
        write_reports_json(args.out, report)
        run.finish(args.out)
    else:
        run.finish()
    return 0


def cmd_sweep(args):
    grid = args.grid or list(DEFAULT_GRID)
    run = _Run(args, {'grid': grid})
    table, _, clusters = _table_and_clusters(run, args)
    reports, best_theta = sweep(table, clusters, grid, threads=_threads(args))
    best = [r for r in reports if r.theta == best_theta][0]
    _print_report(best, 'best ')
    outputs = []
    if args.out:
        write_reports_json(args.out, reports)
        outputs.append(args.out)
    if args.csv:
        write_sweep_csv(args.csv, reports)
        outputs.append(args.csv)
    if args.plot:
        from .plotting import plot_threshold_curves
        plot_threshold_curves({os.path.basename(args.table): reports}, args.plot)
        outputs.append(args.plot)
    run.finish(*outputs)
    return 0


def cmd_cluster(args):
    run = _Run(args, {'theta': args.theta})
    table, vocab, _ = _table_and_clusters(run, args)
    assignment = connected_components(predict_pairs(table, args.theta), table.n)
    tmp = '%s.tmp' % args.out
    with io.open(tmp, 'w', encoding='utf-8', newline='\n') as f:
        for term_id, cluster_id in enumerate(assignment.tolist()):
            f.write('%d\t%d\t%s\n' % (term_id, cluster_id, vocab.surface_of(term_id)))
    os.replace(tmp, args.out)
    logger.info('%d terms in %d predicted clusters', table.n, len(set(assignment.tolist())))
    run.finish(args.out)
    return 0


def cmd_link(args):
    run = _Run(args, {'ks': args.ks})
    params, _ = load_checkpoint(run.input(args.checkpoint))
    dictionary = _load_vocab(run, args.dictionary, args)
    queries = _load_vocab(run, args.queries, args)
    threads = _threads(args)
    query_embeddings = params.encode_batch(queries.surfaces, threads)
    accuracy = linking_accuracy(params.encode_batch(dictionary.surfaces, threads),
                                list(dictionary.concept_ids),
                                list(zip(query_embeddings, queries.concept_ids)),
                                args.ks, threads)
    payload = {'acc@%d' % k: v for k, v in accuracy.items()}
    print(json.dumps(payload, sort_keys=True))
    if args.out:
        with io.open(args.out, 'w', encoding='utf-8') as f:
            f.write(json.dumps(payload, indent=2, sort_keys=True) + '\n')
        run.finish(args.out)
    else:
        run.finish()
    return 0


def _read_pairs(path, normalize=True):
    pairs = []
    with io.open(path, 'r', encoding='utf-8') as f:
        for line_number, line in enumerate(f, 1):
            line = line.rstrip('\n')
            if not line.strip():
                continue
            parts = line.split('\t')
            if len(parts) < 2:
                raise DataError('%s:%d: expected term1<TAB>term2[<TAB>T|F].' % (path, line_number))
            same = None
            if len(parts) > 2 and parts[2]:
                same = parts[2].strip().upper() in ('T', 'TRUE', '1')
            first, second = parts[0], parts[1]
            if normalize:
                first, second = normalize_surface(first), normalize_surface(second)
            pairs.append((first, second, same))
    return pairs


def cmd_probe(args):
    run = _Run(args, {})
    params, _ = load_checkpoint(run.input(args.checkpoint))
    report = probe_pairs(params, _read_pairs(run.input(args.pairs), not args.raw))
    for row in report:
        print('%.3f\t%s\t%s\t%s' % (row['similarity'], row['term1'], row['term2'],
                                    '' if row['same_concept'] is None else 'TF'[not row['same_concept']]))
    if args.out:
        with io.open(args.out, 'w', encoding='utf-8') as f:
            f.write(json.dumps(report, indent=2, ensure_ascii=False) + '\n')
        run.finish(args.out)
    else:
        run.finish()
    return 0


def cmd_ablation(args):
    cfg = _train_config(args)
    run = _Run(args, cfg.to_dict())
    vocab = _load_vocab(run, args.vocab, args)
    clusters = concept_clusters(vocab)
    grid = args.grid or list(DEFAULT_GRID)
    os.makedirs(args.out_dir, exist_ok=True)
    summary = {}
    sweeps = {}
    outputs = []
    for setting in args.settings.split(','):
        setting_cfg = ablation_config(cfg, setting)
        checkpoint = os.path.join(args.out_dir, 'setting_%s.ckpt' % setting)
        params, _ = train(vocab, clusters, setting_cfg,
                          metrics_path='%s.metrics.jsonl' % checkpoint, checkpoint_path=checkpoint)
        table = build_neighbor_table(params.encode_batch(vocab.surfaces, cfg.threads),
                                     min(args.eval_m, vocab.n - 1), threads=cfg.threads)
        reports, best_theta = sweep(table, clusters, grid, threads=cfg.threads)
        best = [r for r in reports if r.theta == best_theta][0]
        _print_report(best, '(%s) ' % setting)
        csv_path = os.path.join(args.out_dir, 'setting_%s.sweep.csv' % setting)
        write_sweep_csv(csv_path, reports)
        summary[setting] = best.to_dict()
        sweeps['(%s)' % setting] = reports
        outputs.extend([checkpoint, csv_path])
    summary_path = os.path.join(args.out_dir, 'ablation.json')
    with io.open(summary_path, 'w', encoding='utf-8') as f:
        f.write(json.dumps(summary, indent=2, sort_keys=True) + '\n')
    if args.plot:
        from .plotting import plot_threshold_curves
        plot_threshold_curves(sweeps, args.plot)
        outputs.append(args.plot)
    run.finish(summary_path, *outputs)
    return 0


def cmd_plot(args):
    from .plotting import plot_threshold_curves
    run = _Run(args, {})
    sweeps = {}
    for path in args.csv:
        sweeps[os.path.splitext(os.path.basename(path))[0]] = read_sweep_csv(run.input(path))
    plot_threshold_curves(sweeps, args.out)
    run.finish(args.out)
    return 0


def _common_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int,
                        help='seed of all randomness (default: the config file, then %d)' % DEFAULT_SEED)
    common.add_argument('--threads', type=int, default=0, help='worker threads, 0 = one per CPU')
    common.add_argument('--deterministic', action='store_true',
                        help='run single-threaded with a fixed reduction order')
    common.add_argument('--config', help='JSON file overriding defaults; flags override the file')
    common.add_argument('--log-level', default='INFO',
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    common.add_argument('--raw', action='store_true',
                        help='keep surfaces as they are (no NFKC normalization, no lowercasing)')
    return common


def _add_train_flags(p):
    p.add_argument('--b', type=int, help='anchors per mini-batch (default 16)')
    p.add_argument('--k', type=int, help='positives per anchor (default 30)')
    p.add_argument('--m', type=int, help='possibly hard negatives per anchor (default 30)')
    p.add_argument('--steps', type=int, help='parameter updates (default 20000)')
    p.add_argument('--accumulation', type=int, help='mini-batches per update (default 1)')
    p.add_argument('--refresh-steps', type=_parse_refresh,
                   help='rebuild the neighbor table every N updates, or "never" (default 2000)')
    p.add_argument('--positive-mode', choices=['k-positives', 'single-positive'])
    p.add_argument('--lr', type=float, help='peak learning rate (default 1e-2)')
    p.add_argument('--warmup', type=int, help='linear warmup updates (default 1000)')
    p.add_argument('--weight-decay', type=float)
    p.add_argument('--adam-beta1', type=float)
    p.add_argument('--adam-beta2', type=float)
    p.add_argument('--adam-eps', type=float)
    p.add_argument('--alpha', type=float, help='positive strength (default 2)')
    p.add_argument('--beta', type=float, help='negative strength (default 50)')
    p.add_argument('--lambda', dest='lambda_', type=float, help='similarity margin (default 1)')
    p.add_argument('--epsilon', type=float, help='mining slack (default 0.1)')
    p.add_argument('--buckets', type=int, help='n-gram hash buckets (default 2^18)')
    p.add_argument('--dim', type=int, help='embedding dimension (default 128)')
    p.add_argument('--ngram-min', type=int)
    p.add_argument('--ngram-max', type=int)
    p.add_argument('--max-chars', type=int)
    p.add_argument('--log-interval', type=int, help='updates between metrics records (default 500)')
    p.add_argument('--init-checkpoint', help='start from the parameters of a checkpoint')


def build_parser():
    common = _common_parser()
    parser = argparse.ArgumentParser(prog='termclust', description=__doc__.strip().splitlines()[0])
    parser.add_argument('--version', action='version', version='%(prog)s ' + __version__)
    sub = parser.add_subparsers(dest='command')
    sub.required = True

    p = sub.add_parser('synth', parents=[common], help='generate a synthetic vocabulary TSV')
    p.add_argument('--concepts', type=int, help='number of concepts (default 5000)')
    p.add_argument('--synonyms-min', type=int)
    p.add_argument('--synonyms-max', type=int)
    p.add_argument('--hard-fraction', type=float, help='share of concepts in hard families')
    p.add_argument('--kinds', help='comma separated variant kinds: %s' % ','.join(VARIANT_KINDS))
    p.add_argument('-o', '--out', required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser('train', parents=[common], help='train encoder parameters')
    p.add_argument('vocab')
    _add_train_flags(p)
    p.add_argument('-o', '--out', required=True, help='checkpoint path')
    p.add_argument('--metrics', help='metrics log path (default <out>.metrics.jsonl)')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('embed', parents=[common], help='encode every vocabulary term')
    p.add_argument('checkpoint')
    p.add_argument('vocab')
    p.add_argument('-o', '--out', required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser('index', parents=[common], help='build the top-m neighbor table')
    p.add_argument('embeddings')
    p.add_argument('--m', type=int, default=30, help='neighbors per term (default 30)')
    p.add_argument('-o', '--out', required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser('eval', parents=[common], help='evaluate at one threshold')
    p.add_argument('table')
    p.add_argument('vocab')
    p.add_argument('--theta', type=float, required=True)
    p.add_argument('-o', '--out')
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('sweep', parents=[common], help='evaluate over a threshold grid')
    p.add_argument('table')
    p.add_argument('vocab')
    p.add_argument('--grid', type=_parse_floats, help='"0.5:0.99:0.01" or "0.6,0.7,0.8"')
    p.add_argument('-o', '--out', help='JSON array of reports')
    p.add_argument('--csv', help='theta,precision,recall,f1 CSV')
    p.add_argument('--plot', help='threshold curve image (needs matplotlib)')
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser('cluster', parents=[common], help='write predicted clusters')
    p.add_argument('table')
    p.add_argument('vocab')
    p.add_argument('--theta', type=float, required=True)
    p.add_argument('-o', '--out', required=True)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser('link', parents=[common], help='zero-shot normalization accuracy')
    p.add_argument('checkpoint')
    p.add_argument('dictionary', help='concept_id<TAB>surface TSV')
    p.add_argument('queries', help='gold_concept_id<TAB>surface TSV')
    p.add_argument('--ks', type=_parse_ints, default=[1, 5])
    p.add_argument('-o', '--out')
    p.set_defaults(func=cmd_link)

    p = sub.add_parser('probe', parents=[common], help='similarities of term pairs')
    p.add_argument('checkpoint')
    p.add_argument('pairs', help='term1<TAB>term2[<TAB>T|F] TSV')
    p.add_argument('-o', '--out')
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser('ablation', parents=[common], help='train and sweep sampling settings a, b, c')
    p.add_argument('vocab')
    _add_train_flags(p)
    p.add_argument('--settings', default='a,b,c')
    p.add_argument('--eval-m', type=int, default=30, help='neighbors per term for evaluation')
    p.add_argument('--grid', type=_parse_floats)
    p.add_argument('--plot')
    p.add_argument('--out-dir', required=True)
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser('plot', parents=[common], help='threshold curves of sweep CSVs')
    p.add_argument('csv', nargs='+')
    p.add_argument('-o', '--out', required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format='%(asctime)s - %(levelname)s - %(name)s - %(message)s')
    try:
        return args.func(args)
    except TermclustError as e:
        error = e
    except OSError as e:
        error = ArtifactIOError(e.filename or '<unknown>', e.strerror or str(e))
    logger.error('%s: %s', error.__class__.__name__, error)
    return error.exit_code


if __name__ == '__main__':
    sys.exit(main())
