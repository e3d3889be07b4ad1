"""Python access to the tasl core: synthetic data, clip selection,
earliest-enhanced detection, metrics and checkpoint inference."""

from ._core import (
    TaslError,
    auc,
    detect,
    find_tts_ttp,
    focal_loss,
    gamma_variate_tic,
    kfold_split,
    lr_at,
    metrics,
    mmd_loss,
    predict,
    read_case,
    select_clip,
    sg_smooth,
    ssim,
    synth_case,
    validate_case,
    write_synth_case,
)

__all__ = [
    "TaslError",
    "auc",
    "detect",
    "find_tts_ttp",
    "focal_loss",
    "gamma_variate_tic",
    "kfold_split",
    "lr_at",
    "metrics",
    "mmd_loss",
    "predict",
    "read_case",
    "select_clip",
    "sg_smooth",
    "ssim",
    "synth_case",
    "validate_case",
    "write_synth_case",
]
