"""Pretraining, fine-tuning, correction and loss-peak diagnostics."""

from .finetune import (
    DESK_SCALE,
    MAX_STABLE_RATIO,
    BatchRecord,
    CorrectionResult,
    FinetuneDataset,
    FinetuneResult,
    FinetuneSpec,
    LabeledSample,
    build_finetune_dataset,
    correct_stage,
    evaluate_split,
    finetune,
)
from .peaks import FOCAL_EPS, TAG_IDENTICAL, TAG_MARKERS, TAG_RARE, PeakSample, escape_density, focal_loss, loss_peak_report, tag_sample
from .pretrain import (
    Corruption,
    PretrainResult,
    PretrainSpec,
    TrainingDiverged,
    choose_masks,
    mask_and_corrupt,
    pretrain,
    rtd_auc,
    sample_rows,
    shares_embeddings,
)

__all__ = [
    "DESK_SCALE", "MAX_STABLE_RATIO", "BatchRecord", "CorrectionResult", "FinetuneDataset", "FinetuneResult",
    "FinetuneSpec", "LabeledSample", "build_finetune_dataset", "correct_stage", "evaluate_split", "finetune",
    "FOCAL_EPS", "TAG_IDENTICAL", "TAG_MARKERS", "TAG_RARE", "PeakSample", "escape_density", "focal_loss",
    "loss_peak_report", "tag_sample", "Corruption", "PretrainResult", "PretrainSpec", "TrainingDiverged",
    "choose_masks", "mask_and_corrupt", "pretrain", "rtd_auc", "sample_rows", "shares_embeddings",
]
