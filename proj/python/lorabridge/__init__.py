"""LoRA checkpoint merge, sharding and cost toolkit."""

from ._core import (
    Error,
    __version__,
    bf16_to_f32,
    bucket_pad,
    f16_to_f32,
    f32_to_bf16,
    f32_to_f16,
    inspect,
    lora_target,
    lr_at,
    map_name,
    merge_files,
    read_tensor,
    run_cli,
    serving_cost,
    strip_reasoning,
    tco,
    training_cost,
    validate_mesh,
    write_safetensors,
)

__all__ = [
    "Error",
    "__version__",
    "bf16_to_f32",
    "bucket_pad",
    "f16_to_f32",
    "f32_to_bf16",
    "f32_to_f16",
    "inspect",
    "lora_target",
    "lr_at",
    "map_name",
    "merge_files",
    "read_tensor",
    "run_cli",
    "serving_cost",
    "strip_reasoning",
    "tco",
    "training_cost",
    "validate_mesh",
    "write_safetensors",
]
