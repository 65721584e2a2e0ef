"""Test utilities."""

from __future__ import annotations

from typing import Any

import sys

import torch


def run_tests(test_file: str) -> None:
    """Run pytest on a test file with standard flags.

    Usage:
        if __name__ == "__main__":
            from testing import run_tests
            run_tests(__file__)
    """
    import pytest

    sys.exit(
        pytest.main(
            [
                test_file,
                "-v",
                "-s",
                "-W",
                "ignore::pytest.PytestAssertRewriteWarning",
                *sys.argv[1:],
            ]
        )
    )


def max_abs(a: Any, b: Any) -> float:
    """Largest absolute entrywise difference, as a python float."""
    return float((torch.as_tensor(a) - torch.as_tensor(b)).abs().max())


def random_rotations(n: int, seed: int = 0, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """(n, 3, 3) rotations from normalized random quaternions."""
    gen = torch.Generator().manual_seed(seed)
    q = torch.randn(n, 4, generator=gen, dtype=dtype)
    q = q / q.norm(dim=1, keepdim=True)
    w, x, y, z = q.unbind(1)
    return torch.stack(
        (
            torch.stack((1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)), 1),
            torch.stack((2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)), 1),
            torch.stack((2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)), 1),
        ),
        1,
    )


def tiny_settings(**changes: Any) -> dict[str, Any]:
    """Settings for a fast 16x16 model: one block per stack, small widths."""
    from config import load_settings

    base = {
        "image_size": 16,
        "patch_size": 4,
        "embed_dim": 16,
        "num_heads": 2,
        "mlp_ratio": 2.0,
        "depth_layers": 1,
        "pose_encoder_layers": 1,
        "pose_decoder_layers": 1,
        "neck_channels": 8,
        "head_hidden": 16,
        "base_rank": 2,
        "frames": 6,
        "batch_size": 2,
        "epochs": 1,
        "ssim_window": "box",
        "ssim_window_size": 3,
        "msssim_scales": 2,
        "dtype": "float64",
        "eval_workers": 2,
    }
    base.update(changes)
    return load_settings(overrides=base)
