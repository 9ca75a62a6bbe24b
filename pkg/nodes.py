import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

from pocketflow import BatchNode, Node

from utils.atomic_write import write_text
from utils.confident_fusion import correct_labels
from utils.ema import ema_run, load_params, save_params
from utils.errors import ShapeMismatchError, ValidationError, VolumeIOError
from utils.losses import ce_loss, consistency_loss, dice_loss, gradient_check, mae_loss, seg_loss
from utils.metrics import evaluate, summarize, to_csv
from utils.nifti_io import case_name, load_volume, nifti_suffix, save_volume
from utils.postprocess import connected_components, postprocess_with_report
from utils.volume_core import (
    ProbVolume,
    ScalarVolume,
    Spacing,
    argmax_labels,
    flip_lr,
    normalize_intensity,
    resample,
)

logger = logging.getLogger(__name__)


class LoadVolume(Node):
    """Load the first input path into ``shared[key]``"""

    def __init__(self, kind=None, key="labels"):
        super().__init__()
        self.kind = kind
        self.key = key

    def prep(self, shared):
        # kind=None means the run decides (preprocess handles scalar and label images)
        return shared["inputs"][0], self.kind or shared.get("kind", "label"), shared["num_classes"]

    def exec(self, prep_res):
        path, kind, k = prep_res
        return load_volume(path, kind, k)

    def post(self, shared, prep_res, exec_res):
        shared[self.key] = exec_res
        logger.info("Loaded %s volume %s with dims %s", prep_res[1], prep_res[0], tuple(exec_res.dims))


class SaveVolume(Node):
    """Write ``shared[key]`` to the output path"""

    def __init__(self, key="labels"):
        super().__init__()
        self.key = key

    def prep(self, shared):
        return shared[self.key], shared["output"]

    def exec(self, prep_res):
        volume, path = prep_res
        save_volume(volume, path)
        return path

    def post(self, shared, prep_res, exec_res):
        logger.info("Wrote %s", exec_res)


class EmitReport(Node):
    """Print the collected JSON report on stdout"""

    def prep(self, shared):
        return shared.get("report")

    def exec(self, report):
        return None if report is None else json.dumps(report, indent=2, sort_keys=True)

    def post(self, shared, prep_res, exec_res):
        if exec_res is not None:
            print(exec_res, file=shared.get("stdout") or sys.stdout)


# --- fuse -------------------------------------------------------------------


class LoadModelOutputs(BatchNode):
    """Load every model's softmax output, in the fusion order given on the command line"""

    def prep(self, shared):
        if len(shared["inputs"]) < 2:
            raise ValidationError(f"fuse needs at least 2 probability volumes, got {len(shared['inputs'])}")
        return shared["inputs"]

    def exec(self, path):
        return load_volume(path, "prob")

    def post(self, shared, prep_res, exec_res_list):
        first = exec_res_list[0]
        for path, probs in zip(prep_res[1:], exec_res_list[1:]):
            if tuple(probs.dims) != tuple(first.dims) or probs.k != first.k:
                raise ShapeMismatchError(
                    f"{path}: shape {tuple(probs.data.shape)} does not match {prep_res[0]}: {tuple(first.data.shape)}"
                )
            if probs.spacing != first.spacing:
                raise ShapeMismatchError(
                    f"{path}: spacing {probs.spacing.as_tuple()} does not match {prep_res[0]}: {first.spacing.as_tuple()}"
                )
        shared["models"] = exec_res_list
        logger.info("Loaded %d model outputs with dims %s and k=%d", len(exec_res_list), tuple(first.dims), first.k)


class SeedNoisyLabels(Node):
    """One-hot the first model's output; it is the first 'noisy label' to correct"""

    def prep(self, shared):
        return shared["models"][0]

    def exec(self, probs):
        return argmax_labels(probs)

    def post(self, shared, prep_res, exec_res):
        shared["labels"] = exec_res
        shared["next_model"] = 1
        shared["joints"] = []


class FuseNextModel(Node):
    """Correct the current labels with the next model's softmax output"""

    def prep(self, shared):
        idx = shared["next_model"]
        return shared["labels"], shared["models"][idx], shared["chunk_voxels"], shared["threads"]

    def exec(self, prep_res):
        labels, probs, chunk_voxels, threads = prep_res
        return correct_labels(labels, probs, chunk_voxels=chunk_voxels, threads=threads)

    def post(self, shared, prep_res, exec_res):
        shared["labels"] = exec_res.labels
        shared["joints"].append(exec_res.joint)
        shared["next_model"] += 1
        logger.info(
            "Fused model %d/%d: %d voxels flagged, %d relabelled",
            shared["next_model"],
            len(shared["models"]),
            exec_res.flags.count,
            exec_res.changed,
        )

        if shared["next_model"] < len(shared["models"]):
            return "next"
        return "postprocess" if shared.get("postprocess") else "save"


class WriteJointJson(Node):
    """Export each pairwise confident joint when --joint-json was given"""

    def prep(self, shared):
        return shared.get("joints", []), shared.get("joint_json")

    def exec(self, prep_res):
        joints, path = prep_res
        if not path:
            return None
        payload = [dict(pair=i + 1, **joint.to_dict()) for i, joint in enumerate(joints)]
        write_text(path, json.dumps(payload, indent=2) + "\n")
        return path

    def post(self, shared, prep_res, exec_res):
        if exec_res:
            logger.info("Wrote %d confident joints to %s", len(prep_res[0]), exec_res)


# --- postprocess / cc -------------------------------------------------------


class PostprocessMask(Node):
    """Drop far-away VS components, then keep the largest VS and cochlea components"""

    def prep(self, shared):
        return shared["labels"], shared["vs_label"], shared["cochlea_label"], shared["z_max"]

    def exec(self, prep_res):
        return postprocess_with_report(*prep_res)

    def post(self, shared, prep_res, exec_res):
        mask, removed = exec_res
        shared["labels"] = mask
        shared["removed_components"] = [r.to_dict() for r in removed]
        if shared.get("stats"):
            shared["report"] = shared["removed_components"]
        logger.info("Post-processing removed %d components", len(removed))


class ReportComponents(Node):
    """Connected-component statistics for one class"""

    def prep(self, shared):
        label = shared.get("class_label")
        return shared["labels"], shared["vs_label"] if label is None else label

    def exec(self, prep_res):
        mask, label = prep_res
        stats, _ = connected_components(mask, label)
        return label, stats

    def post(self, shared, prep_res, exec_res):
        label, stats = exec_res
        shared["report"] = [s.to_dict() for s in stats]
        logger.info("Class %d has %d components", label, len(stats))


# --- eval -------------------------------------------------------------------


def _nifti_files(directory):
    names = []
    for name in sorted(os.listdir(directory)):
        try:
            nifti_suffix(name)
        except VolumeIOError:
            continue
        names.append(name)
    return names


class PairCases(Node):
    """Match predictions with ground truths: one pair, or two directories paired by file name"""

    def prep(self, shared):
        return shared["inputs"]

    def exec(self, inputs):
        if len(inputs) != 2:
            raise ValidationError(f"eval needs a prediction and a ground truth, got {len(inputs)} paths")
        pred, gt = inputs
        if os.path.isdir(pred) != os.path.isdir(gt):
            raise ValidationError("eval needs two files or two directories, not one of each")
        if not os.path.isdir(pred):
            return [(case_name(pred), pred, gt)]
        cases = []
        for name in _nifti_files(pred):
            gt_path = os.path.join(gt, name)
            if not os.path.isfile(gt_path):
                raise VolumeIOError(f"{gt_path}: missing ground truth for prediction {name}")
            cases.append((case_name(name), os.path.join(pred, name), gt_path))
        if not cases:
            raise VolumeIOError(f"{pred}: no NIfTI predictions found")
        return cases

    def post(self, shared, prep_res, exec_res):
        shared["cases"] = exec_res


class EvaluateCases(Node):
    """Dice and ASSD per case and class; cases run on up to --threads workers"""

    def prep(self, shared):
        classes = [shared["vs_label"], shared["cochlea_label"]]
        return shared["cases"], classes, shared["num_classes"], shared["threads"]

    def exec(self, prep_res):
        cases, classes, k, threads = prep_res

        def run(case):
            name, pred_path, gt_path = case
            pred = load_volume(pred_path, "label", k)
            gt = load_volume(gt_path, "label", k)
            return name, evaluate(pred, gt, classes)

        if threads <= 1:
            return [run(case) for case in cases]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(run, cases))

    def post(self, shared, prep_res, exec_res):
        shared["results"] = exec_res


class WriteMetrics(Node):
    """CSV to the output file (or stdout) plus the mean/std summary"""

    def prep(self, shared):
        return shared["results"], shared.get("output"), shared.get("summary_json")

    def exec(self, prep_res):
        results, output, summary_path = prep_res
        text = to_csv(results)
        summary = summarize(results)
        if output:
            write_text(output, text)
        if summary_path:
            write_text(summary_path, json.dumps({str(k): v for k, v in summary.items()}, indent=2) + "\n")
        return text, summary

    def post(self, shared, prep_res, exec_res):
        text, summary = exec_res
        if not prep_res[1]:
            (shared.get("stdout") or sys.stdout).write(text)
        for label, row in summary.items():
            logger.info(
                "class %s over %d cases: dice %.4f±%.4f, assd %s±%s mm",
                label, row["n"], row["dice_mean"], row["dice_std"], row["assd_mean"], row["assd_std"],
            )


# --- losses -----------------------------------------------------------------


class LoadLossInputs(Node):
    """Probabilities plus either a label volume or a second probability volume"""

    def prep(self, shared):
        return shared["inputs"], shared.get("label_path"), shared["num_classes"]

    def exec(self, prep_res):
        inputs, label_path, k = prep_res
        if label_path:
            if len(inputs) != 1:
                raise ValidationError("losses with --label takes exactly one probability volume")
            return load_volume(inputs[0], "prob"), load_volume(label_path, "label", k)
        if len(inputs) == 2:
            return load_volume(inputs[0], "prob"), load_volume(inputs[1], "prob")
        if not inputs:
            return None
        raise ValidationError("losses needs PROB --label LABEL, or TEACHER STUDENT probability volumes")

    def post(self, shared, prep_res, exec_res):
        shared["loss_inputs"] = exec_res


class ComputeLosses(Node):
    def prep(self, shared):
        return shared.get("loss_inputs"), shared["eps"], shared.get("mae", False)

    def exec(self, prep_res):
        pair, eps, with_mae = prep_res
        if pair is None:
            return {}
        first, second = pair
        if isinstance(second, ProbVolume):
            values = {"consistency_loss": consistency_loss(first, second).value}
            if with_mae:
                values["mae_loss"] = mae_loss(first, second).value
            return values
        return {
            "dice_loss": dice_loss(first, second, eps=eps).value,
            "ce_loss": ce_loss(first, second).value,
            "seg_loss": seg_loss(first, second, eps=eps).value,
        }

    def post(self, shared, prep_res, exec_res):
        shared["report"] = dict(shared.get("report") or {}, **exec_res)
        return "grad_check" if shared.get("grad_check") else "default"


class RunGradientCheck(Node):
    """Finite-difference check of every analytic gradient on seeded random subvolumes"""

    def prep(self, shared):
        return shared.get("loss_inputs"), shared["grad_trials"], shared["seed"], shared["num_classes"], shared["eps"]

    def exec(self, prep_res):
        pair, trials, seed, k, eps = prep_res
        if pair is None:
            per_loss = gradient_check(trials=trials, seed=seed, k=k, eps=eps)
        else:
            per_loss = gradient_check(trials=trials, seed=seed, eps=eps, volume=pair)
            per_loss = {name: err for name, err in per_loss.items() if _checked(name, pair)}
        return per_loss

    def post(self, shared, prep_res, exec_res):
        shared["report"] = dict(shared.get("report") or {})
        shared["report"]["grad_check"] = {
            "trials": prep_res[1],
            "seed": prep_res[2],
            "per_loss": exec_res,
            "max_rel_error": max(exec_res.values()),
        }
        logger.info("Gradient check max relative error %.3g", max(exec_res.values()))


def _checked(name, pair):
    pair_of_probs = isinstance(pair[1], ProbVolume)
    return (name in ("consistency", "mae")) == pair_of_probs


# --- ema --------------------------------------------------------------------


class LoadParameterFiles(BatchNode):
    """Teacher first, then the student snapshots in update order"""

    def prep(self, shared):
        if len(shared["inputs"]) < 2:
            raise ValidationError("ema needs a teacher file and at least one student file")
        return shared["inputs"]

    def exec(self, path):
        return load_params(path)

    def post(self, shared, prep_res, exec_res_list):
        shared["teacher"], shared["students"] = exec_res_list[0], exec_res_list[1:]


class UpdateTeacher(Node):
    def prep(self, shared):
        return shared["teacher"], shared["students"], shared["decay"]

    def exec(self, prep_res):
        return ema_run(*prep_res)

    def post(self, shared, prep_res, exec_res):
        shared["params"] = exec_res
        logger.info("Applied %d EMA steps with decay %s to %d parameters", len(prep_res[1]), prep_res[2], exec_res.n)


class SaveParameters(Node):
    def prep(self, shared):
        return shared["params"], shared["output"]

    def exec(self, prep_res):
        save_params(*prep_res)
        return prep_res[1]

    def post(self, shared, prep_res, exec_res):
        logger.info("Wrote %s", exec_res)


# --- preprocess -------------------------------------------------------------


class PreprocessVolume(Node):
    """Optional left-right flip, resampling to the target spacing, intensity normalization"""

    def prep(self, shared):
        return shared["volume"], shared.get("flip", False), Spacing.of(shared["target_spacing"])

    def exec(self, prep_res):
        volume, flip, target = prep_res
        dtype = volume.data.dtype
        if flip:
            volume = flip_lr(volume)
        volume = resample(volume, target)
        if isinstance(volume, ScalarVolume):
            volume = volume.with_data(normalize_intensity(volume).data.astype(dtype))
        return volume

    def post(self, shared, prep_res, exec_res):
        logger.info("Preprocessed %s -> %s at spacing %s", tuple(prep_res[0].dims), tuple(exec_res.dims), exec_res.spacing.as_tuple())
        shared["volume"] = exec_res
