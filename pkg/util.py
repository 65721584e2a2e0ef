"""Shared utilities: error types, seeded substreams, hashing."""

from __future__ import annotations

from typing import Any

import hashlib

import numpy as np
import torch


# ===========================================================================
# Errors
# ===========================================================================


class EndoFastError(Exception):
    """Base class for every error raised by this package."""


class RejectedInputError(EndoFastError, ValueError):
    """Input shapes or sizes violate an operation's preconditions."""


class ConfigError(EndoFastError):
    """Invalid configuration key, value or model wiring."""


class NoValidPixelsError(EndoFastError):
    """A masked reduction had no valid pixel to reduce over."""


class InvalidRotationError(EndoFastError, ValueError):
    """A matrix expected to be a rotation is not orthonormal with det +1."""


class DegenerateError(EndoFastError):
    """Input is well-formed but geometrically degenerate."""


class DegenerateDirectionError(DegenerateError):
    """A column of W0 + BA is the zero vector."""


class DegenerateOrthogonalizationError(DegenerateError):
    """A 9D rotation output is rank deficient."""


class DegeneratePredictionError(DegenerateError):
    """A depth prediction has zero median over valid pixels."""


class AlignmentError(DegenerateError):
    """Trajectory alignment is impossible or ill-posed."""


class NumericalError(EndoFastError):
    """Computation produced non-finite values."""


class NonFiniteLossError(NumericalError):
    """A loss term is NaN or infinite."""

    def __init__(self, parts: dict[str, float], batch_index: int | None = None) -> None:
        self.parts = parts
        self.batch_index = batch_index
        where = f" at batch {batch_index}" if batch_index is not None else ""
        detail = ", ".join(f"{k}={v!r}" for k, v in parts.items())
        super().__init__(f"Non-finite loss{where}: {detail}")


class ParseError(EndoFastError):
    """A file does not conform to its format."""

    def __init__(self, path: Any, offset: int, message: str) -> None:
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{self.path}: byte {offset}: {message}")


# ===========================================================================
# Seeding
# ===========================================================================


def substream_seed(seed: int, purpose: str) -> int:
    """Derive a 63-bit seed for one purpose from the run seed."""
    digest = hashlib.sha256(f"{seed}:{purpose}".encode()).hexdigest()
    return int(digest[:16], 16) & ((1 << 63) - 1)


def substream(seed: int, purpose: str) -> torch.Generator:
    """Torch generator for one purpose; independent of every other purpose."""
    return torch.Generator().manual_seed(substream_seed(seed, purpose))


def np_substream(seed: int, purpose: str) -> np.random.Generator:
    """Numpy generator for one purpose."""
    return np.random.default_rng(substream_seed(seed, purpose))


# ===========================================================================
# Misc
# ===========================================================================


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def torch_dtype(name: str) -> torch.dtype:
    """Map a config dtype name to a torch dtype."""
    dtypes = {"float32": torch.float32, "float64": torch.float64}
    if name not in dtypes:
        raise ConfigError(f"Unsupported dtype: {name!r} (expected one of {sorted(dtypes)})")
    return dtypes[name]
