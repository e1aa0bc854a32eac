"""Zero-shot next check-in prediction: python surface over the native core."""

from zhmf._core import (
    BackendError,
    ConfigError,
    DataError,
    IoError,
    StateError,
    acc_at_k,
    build_memory,
    cosine,
    evaluate,
    hash_embed,
    haversine_km,
    mean_reciprocal_rank,
    parse_categories,
    parse_pois,
    preprocess,
    reciprocal_rank,
    run,
)

__version__ = "0.1.0"

__all__ = [
    "BackendError",
    "ConfigError",
    "DataError",
    "IoError",
    "StateError",
    "acc_at_k",
    "build_memory",
    "cosine",
    "evaluate",
    "hash_embed",
    "haversine_km",
    "mean_reciprocal_rank",
    "parse_categories",
    "parse_pois",
    "preprocess",
    "reciprocal_rank",
    "run",
]
