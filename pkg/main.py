import argparse
import logging
import sys

from flow import FLOWS
from utils.config import RunConfig, load_config_file
from utils.errors import LabelFusionError, exit_code_for

logger = logging.getLogger("labelfusion")

LOG_FORMAT = "%(levelname)s %(name)s: %(message)s"


def parse_spacing(text):
    """'0.46875,0.468975,1.5' -> (0.46875, 0.468975, 1.5)"""
    try:
        values = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid spacing {text!r}")
    if len(values) != 3:
        raise argparse.ArgumentTypeError(f"spacing needs 3 comma-separated values, got {text!r}")
    return values


def build_parser():
    # Options default to SUPPRESS so that only flags given on the command line
    # override RunConfig defaults and --config values.
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="YAML file with defaults for any setting")
    common.add_argument("--num-classes", type=int, help="number of classes k (default 3)")
    common.add_argument("--vs-label", type=int, help="VS class label (default 1)")
    common.add_argument("--cochlea-label", type=int, help="cochlea class label (default 2)")
    common.add_argument("--threads", type=int, help="worker threads; results do not depend on it")
    common.add_argument("--seed", type=int, help="random seed (default 0)")
    common.add_argument("--verbose", action="store_true", help="debug logging on stderr")

    parser = argparse.ArgumentParser(
        prog="labelfusion",
        description="Confident-learning label fusion and evaluation tools for VS / cochlea segmentation volumes",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_command(name, **kwargs):
        return sub.add_parser(name, parents=[common], argument_default=argparse.SUPPRESS, **kwargs)

    p = add_command("fuse", help="fuse softmax outputs of several models")
    p.add_argument("inputs", nargs="+", metavar="PROBS", help="probability volumes, in fusion order")
    p.add_argument("-o", "--output", required=True, help="fused label volume")
    p.add_argument("--postprocess", action="store_true", help="run the post-processing pipeline on the result")
    p.add_argument("--z-max", type=float, help="VS/cochlea z distance limit in slices (default 15)")
    p.add_argument("--joint-json", help="write each pairwise confident joint to this JSON file")
    p.add_argument("--chunk-voxels", type=int, help="voxels per streaming chunk")

    p = add_command("eval", help="Dice and ASSD of predictions against ground truth")
    p.add_argument("inputs", nargs=2, metavar=("PRED", "GT"), help="two label files or two directories")
    p.add_argument("-o", "--output", help="CSV output (default stdout)")
    p.add_argument("--summary-json", help="write the per-class mean/std summary to this JSON file")

    p = add_command("postprocess", help="remove far-away and non-largest components")
    p.add_argument("inputs", nargs=1, metavar="LABELS")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--z-max", type=float)
    p.add_argument("--stats", action="store_true", help="print the removed components as JSON")

    p = add_command("cc", help="print connected-component statistics as JSON")
    p.add_argument("inputs", nargs=1, metavar="LABELS")
    p.add_argument("--class-label", type=int, help="class to analyse (default: the VS label)")

    p = add_command("losses", help="segmentation and consistency losses as JSON")
    p.add_argument("inputs", nargs="*", default=[], metavar="PROBS", help="PROB with --label, or TEACHER STUDENT")
    p.add_argument("--label", help="label volume for the Dice/CE losses")
    p.add_argument("--eps", type=float, help="Dice smoothing term (default 1e-5)")
    p.add_argument("--mae", action="store_true", help="also report the MAE consistency loss")
    p.add_argument("--grad-check", action="store_true", help="finite-difference check of the gradients")
    p.add_argument("--grad-trials", type=int)

    p = add_command("ema", help="EMA update of a teacher parameter file")
    p.add_argument("inputs", nargs="+", metavar="PARAMS", help="teacher file followed by student files")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--decay", type=float, help="EMA decay (default 0.99)")

    p = add_command("preprocess", help="flip, resample and normalize a volume")
    p.add_argument("inputs", nargs=1, metavar="VOLUME")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--kind", choices=("scalar", "label"), help="image or label volume (default scalar)")
    p.add_argument("--spacing", type=parse_spacing, help="target spacing dx,dy,dz in mm")
    p.add_argument("--flip", action="store_true", help="mirror left-to-right first")
    return parser


def build_config(args):
    values = dict(vars(args))
    command = values.pop("command")
    config_path = values.pop("config", None)
    values.pop("verbose", None)

    file_values = load_config_file(config_path) if config_path else {}
    file_values.pop("subcommand", None)
    config = RunConfig(**{**file_values, **values, "subcommand": command})
    config.spacing = tuple(config.spacing)
    return config.validate()


def build_shared(config):
    return {
        # Inputs and outputs
        "inputs": list(config.inputs),
        "output": config.output,
        "label_path": config.label,
        "joint_json": config.joint_json,
        "summary_json": config.summary_json,

        # Class conventions
        "num_classes": config.num_classes,
        "vs_label": config.vs_label,
        "cochlea_label": config.cochlea_label,
        "class_label": config.class_label,

        # Settings
        "z_max": config.z_max,
        "eps": config.eps,
        "decay": config.decay,
        "seed": config.seed,
        "threads": config.threads,
        "chunk_voxels": config.chunk_voxels,
        "postprocess": config.postprocess,
        "stats": config.stats,
        "mae": config.mae,
        "grad_check": config.grad_check,
        "grad_trials": config.grad_trials,
        "kind": config.kind,
        "target_spacing": config.spacing,
        "flip": config.flip,

        # Filled in while the flow runs
        "models": [],
        "labels": None,
        "joints": [],
        "next_model": 1,
        "removed_components": [],
        "cases": [],
        "results": [],
        "report": None,  # JSON printed on stdout at the end, if set
        "stdout": None,  # None means sys.stdout
    }


def configure_logging(verbose=False):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format=LOG_FORMAT,
        stream=sys.stderr,
        force=True,
    )


def main(argv=None):
    args = build_parser().parse_args(argv)
    configure_logging(getattr(args, "verbose", False))

    try:
        config = build_config(args)
        shared = build_shared(config)
        logger.debug("Running %s with %s", config.subcommand, config)
        FLOWS[config.subcommand]().run(shared)
    except (LabelFusionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
