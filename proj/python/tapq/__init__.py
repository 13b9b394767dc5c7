"""Python bindings for the tapq OCR query-compression library."""

from ._tapq import (
    BoundingBox,
    CapacityError,
    Checkpoint,
    ConfigError,
    Error,
    LayoutSpec,
    MaskedExample,
    OcrDocument,
    ParseError,
    Span,
    TargetEntry,
    TrainConfig,
    TrainingError,
    ValidationError,
    assembled_length,
    build_attention_mask,
    compress,
    compress_multipage,
    evaluate,
    expand_target,
    flops_report,
    generate_corpus,
    generate_multipage_document,
    generate_synthetic_document,
    load_corpus,
    mask_spans,
    min_covering_bbox,
    save_corpus,
    train,
    validate,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
