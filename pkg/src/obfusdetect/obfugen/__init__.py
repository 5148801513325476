"""Seedable obfuscation transforms, their oracles and dataset generation."""

from .catalog import (
    TECHNIQUES,
    Inapplicable,
    ObfuscatedSample,
    OracleError,
    Shell,
    Technique,
    TechniqueInfo,
    apply,
    deobfuscate_oracle,
    derive_seed,
    obfuscate_log,
    shell_of,
    split_binary_and_args,
)
from .catalog import _info
from .dataset import DatasetResult, allocate, generate_dataset

# populate the registry eagerly so TECHNIQUES is complete after import
_info(Technique.CASE_MIXING)

__all__ = [
    "TECHNIQUES", "Inapplicable", "ObfuscatedSample", "OracleError", "Shell", "Technique",
    "TechniqueInfo", "apply", "deobfuscate_oracle", "derive_seed", "obfuscate_log", "shell_of",
    "split_binary_and_args", "DatasetResult", "allocate", "generate_dataset",
]
