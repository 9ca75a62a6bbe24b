from pocketflow import Flow
from nodes import (
    ComputeLosses,
    EmitReport,
    EvaluateCases,
    FuseNextModel,
    LoadLossInputs,
    LoadModelOutputs,
    LoadParameterFiles,
    LoadVolume,
    PairCases,
    PostprocessMask,
    PreprocessVolume,
    ReportComponents,
    RunGradientCheck,
    SaveParameters,
    SaveVolume,
    SeedNoisyLabels,
    UpdateTeacher,
    WriteJointJson,
    WriteMetrics,
)


def create_fuse_flow():
    """Create and return the multi-model label fusion flow."""
    # Create nodes
    load_node = LoadModelOutputs()
    seed_node = SeedNoisyLabels()
    fuse_node = FuseNextModel()
    postprocess_node = PostprocessMask()
    save_node = SaveVolume(key="labels")
    joints_node = WriteJointJson()

    # Connect nodes with transitions
    load_node >> seed_node >> fuse_node
    fuse_node - "next" >> fuse_node  # One correction step per remaining model
    fuse_node - "postprocess" >> postprocess_node
    fuse_node - "save" >> save_node
    postprocess_node >> save_node
    save_node >> joints_node

    return Flow(start=load_node)


def create_postprocess_flow():
    load_node = LoadVolume(kind="label", key="labels")
    postprocess_node = PostprocessMask()
    save_node = SaveVolume(key="labels")
    report_node = EmitReport()  # Only prints when --stats asked for the removed components

    load_node >> postprocess_node >> save_node >> report_node
    return Flow(start=load_node)


def create_cc_flow():
    load_node = LoadVolume(kind="label", key="labels")
    load_node >> ReportComponents() >> EmitReport()
    return Flow(start=load_node)


def create_eval_flow():
    """Pair predictions with ground truths, score every case, write the CSV."""
    pair_node = PairCases()
    pair_node >> EvaluateCases() >> WriteMetrics()
    return Flow(start=pair_node)


def create_losses_flow():
    load_node = LoadLossInputs()
    compute_node = ComputeLosses()
    grad_node = RunGradientCheck()
    report_node = EmitReport()

    load_node >> compute_node
    compute_node - "grad_check" >> grad_node
    compute_node - "default" >> report_node
    grad_node >> report_node
    return Flow(start=load_node)


def create_ema_flow():
    load_node = LoadParameterFiles()
    load_node >> UpdateTeacher() >> SaveParameters()
    return Flow(start=load_node)


def create_preprocess_flow():
    load_node = LoadVolume(kind=None, key="volume")
    load_node >> PreprocessVolume() >> SaveVolume(key="volume")
    return Flow(start=load_node)


FLOWS = {
    "fuse": create_fuse_flow,
    "eval": create_eval_flow,
    "postprocess": create_postprocess_flow,
    "cc": create_cc_flow,
    "losses": create_losses_flow,
    "ema": create_ema_flow,
    "preprocess": create_preprocess_flow,
}
