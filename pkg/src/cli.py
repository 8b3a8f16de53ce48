#!/usr/bin/env python3
import argparse
import csv
import io
import logging
import os
import sys

from services import (
    DatasetService,
    EvaluationService,
    FusionWeights,
    LseError,
    PredictionService,
    SyntheticService,
    TrainingService,
    ValidationError,
)
from services.reports import (
    report_to_text,
    reports_to_csv,
    table_to_csv,
    table_to_text,
    write_confusion_csv,
    write_report,
)

logger = logging.getLogger('lse')

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
COMMANDS = ("train", "predict", "eval-tzsl", "eval-gzsl", "eval-zsr", "gridsearch", "fuse-search", "synth",
            "inspect", "sweep", "run", "describe", "convert")


class CliParser(argparse.ArgumentParser):
    """Argument parser that reports bad flags as validation errors"""

    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}", contract="cli-flags")


def _id_list(raw):
    return [token.strip() for token in raw.split(',') if token.strip()]


def _float_list(raw):
    try:
        return [float(v) for v in _id_list(raw)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got {raw!r}")


def _int_list(raw):
    try:
        return [int(v) for v in _id_list(raw)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {raw!r}")


def _positive_int(raw):
    try:
        value = int(raw)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {raw!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {value}")
    return value


def _weights(raw):
    """name:alpha pairs, e.g. attributes:0.7,wordvec:0.3"""
    pairs = []
    for token in _id_list(raw):
        name, sep, alpha = token.partition(':')
        if not sep:
            raise argparse.ArgumentTypeError(f"expected name:weight, got {token!r}")
        try:
            pairs.append((name.strip(), float(alpha)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"weight for {name} is not a number: {alpha!r}")
    return pairs


def _global_flags():
    parent = CliParser(add_help=False)
    parent.add_argument('--seed', type=int, default=0, help='Seed for splits, folds and generators')
    parent.add_argument('--threads', type=_positive_int, default=None,
                        help='Parallelism ceiling (falls back to LSE_THREADS)')
    parent.add_argument('--strict', action='store_true', help='Turn recoverable warnings into errors')
    parent.add_argument('--format', choices=('text', 'csv'), default='text', help='Output format')
    parent.add_argument('--log-level', default=os.environ.get('LSE_LOG_LEVEL', 'WARNING'),
                        choices=('DEBUG', 'INFO', 'WARNING', 'ERROR'), type=str.upper)
    return parent


def _model_flags(parser, require_hyper=True):
    parser.add_argument('--manifest', required=True, help='Dataset manifest, or its directory')
    if require_hyper:
        parser.add_argument('--lambda', dest='lam', type=float, required=True, help='Balance parameter in [0, 1)')
        parser.add_argument('--dim', type=_positive_int, required=True, help='Latent dimensionality d')
    parser.add_argument('--standardize', action='store_true', help='Standardize features per dimension')
    parser.add_argument('--fast', action='store_true', help='Train on per-class mean visual features')
    parser.add_argument('--solver', choices=('dense', 'iterative'), default='dense')
    parser.add_argument('--modalities', type=_id_list, default=None,
                        help='Semantic modalities to train with (default: all)')


def _eval_flags(parser):
    _model_flags(parser)
    parser.add_argument('--semantic', type=_id_list, default=None,
                        help='Semantic modalities whose prototypes score candidates (default: first trained)')
    parser.add_argument('--weights', type=_weights, default=None, help='Fusion weights, name:alpha,...')
    parser.add_argument('--out', default=None, help='Also write the report document here')
    parser.add_argument('--confusion', default=None, help='Write the confusion matrix CSV here')
    parser.add_argument('--timings', action='store_true', help='Include wall-clock timings in the report')


def build_parser():
    parent = _global_flags()
    parser = CliParser(prog='lse', description='Latent space encoding for zero-shot learning')
    commands = parser.add_subparsers(dest='command', metavar='command')
    commands.required = True

    p = commands.add_parser('train', parents=[parent], help='Train a model on the seen classes')
    _model_flags(p)
    p.add_argument('--out', required=True, help='Model directory to write')

    p = commands.add_parser('predict', parents=[parent], help='Predict labels with a saved model')
    p.add_argument('--model', required=True)
    p.add_argument('--manifest', required=True)
    p.add_argument('--test-source', choices=('seen', 'unseen'), default='unseen')
    p.add_argument('--candidates', choices=('seen', 'unseen', 'total'), default='unseen')
    p.add_argument('--top-k', type=_positive_int, default=5)
    p.add_argument('--semantic', type=_id_list, default=None)
    p.add_argument('--weights', type=_weights, default=None)
    p.add_argument('--out', default=None, help='Write predictions here instead of the output stream')

    p = commands.add_parser('eval-tzsl', parents=[parent], help='Traditional zero-shot classification')
    _eval_flags(p)
    p = commands.add_parser('eval-gzsl', parents=[parent], help='Generalized zero-shot scenario')
    _eval_flags(p)
    p.add_argument('--scenario', choices=('U-U', 'S-S', 'U-T', 'S-T'), required=True)
    p = commands.add_parser('eval-zsr', parents=[parent], help='Zero-shot retrieval')
    _eval_flags(p)

    p = commands.add_parser('gridsearch', parents=[parent], help='Class-wise cross-validation of lambda and d')
    _model_flags(p, require_hyper=False)
    p.add_argument('--folds', type=_positive_int, default=5)
    p.add_argument('--lambdas', type=_float_list, default=None)
    p.add_argument('--dims', type=_int_list, default=None)

    p = commands.add_parser('fuse-search', parents=[parent], help='Grid search of fusion weights')
    _model_flags(p)
    p.add_argument('--step', type=float, default=0.1)
    p.add_argument('--protocol', choices=('validation', 'unseen'), default='validation')

    p = commands.add_parser('synth', parents=[parent], help='Generate a planted synthetic dataset')
    p.add_argument('--classes', type=_positive_int, required=True)
    p.add_argument('--per-class', type=_positive_int, required=True)
    p.add_argument('--f1', type=_positive_int, required=True)
    p.add_argument('--f2', type=_positive_int, required=True)
    p.add_argument('--d-true', type=_positive_int, required=True)
    p.add_argument('--noise', type=float, default=0.0)
    p.add_argument('--unseen', type=_positive_int, default=4)
    p.add_argument('--f3', type=_positive_int, default=None)
    p.add_argument('--noise-dim', type=_positive_int, default=None)
    p.add_argument('--out', required=True)

    p = commands.add_parser('inspect', parents=[parent], help='Print model metadata')
    p.add_argument('--model', required=True)

    p = commands.add_parser('sweep', parents=[parent], help='Vary lambda or d with the other fixed')
    _model_flags(p)
    p.add_argument('--parameter', choices=('lambda', 'dim'), required=True)
    p.add_argument('--values', type=_float_list, required=True)

    p = commands.add_parser('run', parents=[parent], help='Run a config-driven experiment')
    p.add_argument('--config', required=True)

    p = commands.add_parser('describe', parents=[parent], help='Validate a manifest and summarize its dataset')
    p.add_argument('--manifest', required=True)

    p = commands.add_parser('convert', parents=[parent], help='Convert a CSV or binary matrix to the binary format')
    p.add_argument('--input', required=True)
    p.add_argument('--out', required=True)
    return parser


class CommandHandler:
    """Routes parsed commands to the services and renders their results"""

    def __init__(self, args):
        self.args = args
        settings = {"threads": args.threads, "strict": args.strict, "seed": args.seed}
        self.dataset_service = DatasetService(**settings)
        self.training_service = TrainingService(**settings)
        self.prediction_service = PredictionService(**settings)
        self.evaluation_service = EvaluationService(**settings)
        self.synthetic_service = SyntheticService(**settings)

    def _eval_options(self):
        args = self.args
        options = {"fast": args.fast, "standardize": args.standardize, "solver": args.solver,
                   "modalities": tuple(args.modalities) if args.modalities else None}
        if getattr(args, 'semantic', None):
            options["semantic"] = tuple(args.semantic)
        if getattr(args, 'weights', None):
            options["weights"] = FusionWeights(tuple(args.weights))
            options.setdefault("semantic", tuple(name for name, _ in args.weights))
        return options

    def _mapping(self, mapping):
        """Flat key/value rendering for text or csv"""
        if self.args.format == 'csv':
            out = io.StringIO()
            writer = csv.writer(out, lineterminator='\n')
            writer.writerow(["field", "value"])
            writer.writerows(mapping.items())
            return out.getvalue()
        return "".join(f"{key}: {value}\n" for key, value in mapping.items())

    def _report(self, result):
        report = result["report"]
        args = self.args
        if args.out:
            write_report(report, args.out, args.timings)
        if args.confusion:
            write_confusion_csv(report, args.confusion)
        if args.format == 'csv':
            return reports_to_csv([report])
        return report_to_text(report, args.timings)

    def _table(self, rows, fields):
        return table_to_csv(rows, fields) if self.args.format == 'csv' else table_to_text(rows, fields)

    def dispatch(self):
        """Run the command; returns (result dict, rendered output)"""
        args = self.args
        command = args.command
        if command == 'train':
            result = self.training_service.train(args.manifest, args.lam, args.dim, args.out, args.standardize,
                                                 args.fast, args.solver, args.modalities)
            render = lambda r: self._mapping(_model_summary(r["summary"], model=r["model"]))
        elif command == 'inspect':
            result = self.training_service.inspect(args.model)
            render = lambda r: self._mapping(_model_summary(r["summary"]))
        elif command == 'predict':
            weights = dict(args.weights) if args.weights else None
            result = self.prediction_service.predict(args.model, args.manifest, args.test_source, args.candidates,
                                                     args.top_k, args.semantic, weights)
            render = self._predictions
        elif command == 'eval-tzsl':
            result = self.evaluation_service.tzsl(args.manifest, args.lam, args.dim, **self._eval_options())
            render = self._report
        elif command == 'eval-gzsl':
            result = self.evaluation_service.gzsl(args.manifest, args.scenario, args.lam, args.dim,
                                                  **self._eval_options())
            render = self._report
        elif command == 'eval-zsr':
            result = self.evaluation_service.zsr(args.manifest, args.lam, args.dim, **self._eval_options())
            render = self._report
        elif command == 'gridsearch':
            result = self.evaluation_service.gridsearch(args.manifest, args.folds, args.lambdas, args.dims,
                                                        **self._eval_options())
            render = lambda r: (self._table(r["table"], ("lambda", "dim", "score", "folds", "note"))
                                + f"selected lambda={r['lambda']!r} dim={r['dim']}\n")
        elif command == 'fuse-search':
            if not args.modalities or len(args.modalities) < 2:
                raise ValidationError("fuse-search needs --modalities with >= 2 semantic modalities",
                                      contract="fusion-modalities")
            options = self._eval_options()
            options.pop("modalities")
            result = self.evaluation_service.fuse_search(args.manifest, args.lam, args.dim, args.modalities,
                                                         args.step, args.protocol, **options)
            render = self._fusion
        elif command == 'sweep':
            values = args.values if args.parameter == 'lambda' else [int(v) for v in args.values]
            result = self.evaluation_service.sweep(args.manifest, args.lam, args.dim, args.parameter, values,
                                                   **self._eval_options())
            render = lambda r: self._table(r["table"], ("lambda", "dim", "score"))
        elif command == 'synth':
            result = self.synthetic_service.generate(args.out, args.classes, args.per_class, args.f1, args.f2,
                                                     args.d_true, args.noise, args.unseen, args.f3, args.noise_dim)
            render = lambda r: self._mapping({"manifest": r["manifest"], "instances": r["dataset"]["instances"]})
        elif command == 'run':
            result = self.evaluation_service.run_config(args.config)
            render = self._run_summary
        elif command == 'describe':
            result = self.dataset_service.describe(args.manifest)
            render = lambda r: self._mapping(_dataset_summary(r["dataset"]))
        elif command == 'convert':
            result = self.dataset_service.convert_matrix(args.input, args.out)
            render = lambda r: self._mapping({key: r[key] for key in ("path", "rows", "cols")})
        else:
            raise ValidationError(f"Unsupported command: {command}. Use one of {', '.join(COMMANDS)}",
                                  contract="cli-flags")
        if result["status"] != "success":
            return result, None
        return result, render(result)

    def _predictions(self, result):
        if self.args.out:
            with open(self.args.out, 'w', encoding='utf-8') as fh:
                fh.write(result["text"])
            return self._mapping({"predictions": self.args.out, "instances": result["count"]})
        return result["text"]

    def _fusion(self, result):
        names = result["weights"].names()
        text = self._table(result["table"], names + ["score", "margin"])
        selected = ", ".join(f"{n}:{a!r}" for n, a in result["weights"].weights)
        return text + f"selected {selected}\n"

    def _run_summary(self, result):
        reports = [r for by_scenario in result["results"].values() for r in by_scenario.values()]
        if self.args.format == 'csv':
            return reports_to_csv(reports)
        lines = [f"results written to {result['output']}"]
        for method, by_scenario in result["results"].items():
            for scenario, report in by_scenario.items():
                score = report.map_score if scenario == "ZSR" else report.per_class_accuracy
                lines.append(f"{method} {scenario}: {score:.4f}")
        return "\n".join(lines) + "\n"


def _model_summary(summary, model=None):
    mapping = {}
    if model is not None:
        mapping["model"] = model
    mapping.update({
        "lambda": repr(summary["lambda"]),
        "latent_dim": summary["latent_dim"],
        "standardize": str(summary["standardize"]).lower(),
        "solver": summary["solver"],
        "train_instances": summary["train_instances"],
    })
    for modality in summary["modalities"]:
        mapping[f"modality.{modality['name']}"] = f"{modality['kind']} {modality['dim']}"
    mapping["eigenvalues"] = " ".join(repr(v) for v in summary["eigenvalues"])
    for i, warning in enumerate(summary["warnings"]):
        mapping[f"warning.{i}"] = warning
    return mapping


def _dataset_summary(summary):
    mapping = {"instances": summary["instances"]}
    for modality in summary["modalities"]:
        mapping[f"modality.{modality['name']}"] = f"{modality['kind']} {modality['rows']}"
    mapping["seen"] = " ".join(str(c) for c in summary["seen"])
    mapping["unseen"] = " ".join(str(c) for c in summary["unseen"])
    for class_id, count in summary["instances_per_class"].items():
        mapping[f"class.{class_id}"] = count
    return mapping


def _exit_code(result):
    return EXIT_VALIDATION if result.get("kind") == "validation" else EXIT_RUNTIME


def _configure_logging(level, stream):
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format=LOG_FORMAT, stream=stream,
                        force=True)


def main(argv=None, stdout=None, stderr=None):
    """Entry point; returns the process exit code"""
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    try:
        args = build_parser().parse_args(argv)
    except ValidationError as e:
        stderr.write(f"lse: error [{e.contract}]: {e}\n")
        return EXIT_VALIDATION
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_OK
    _configure_logging(args.log_level, stderr)
    logger.info(f"Processing command: {args.command}")
    try:
        result, output = CommandHandler(args).dispatch()
    except LseError as e:
        stderr.write(f"lse: error [{e.contract or e.kind}]: {e}\n")
        return EXIT_VALIDATION if e.kind == "validation" else EXIT_RUNTIME
    except OSError as e:
        stderr.write(f"lse: error [io]: {e}\n")
        return EXIT_RUNTIME
    if result["status"] != "success":
        stderr.write(f"lse: error [{result.get('contract') or result.get('kind')}]: {result['message']}\n")
        for key, value in result.get("diagnostics", {}).items():
            stderr.write(f"lse:   {key} = {value}\n")
        return _exit_code(result)
    stdout.write(output)
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
