"""Prototype completion and Gaussian-based prototype fusion for few-shot learning."""

from ._core import (
    Architecture,
    AttributeStats,
    ClassPrototypeTable,
    DiagonalGaussian,
    Error,
    EvalConfig,
    EvalReport,
    FewShotDataset,
    LoadedWorld,
    NumericError,
    PrimitiveKnowledge,
    ProtoComNet,
    ValidationError,
    World,
    WorldSpec,
    classify,
    compute_attribute_stats,
    compute_base_prototypes,
    cosine,
    evaluate,
    fuse_prototypes,
    gaussian_product,
    generate_world,
    load_world,
    meta_train,
    save_world,
    sha256_hex,
    soft_assign,
    train_completion,
)

__all__ = [name for name in dir() if not name.startswith("_")]
