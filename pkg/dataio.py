"""On-disk formats: PPM images, DPTH depth rasters, TUM trajectories, checkpoints.

Sequence folder layout::

    scene.json          kind, seed, intrinsics, frame count
    frames/000000.ppm   8-bit RGB (P6)
    depth/000000.dpth   "DPTH <W> <H>\\n" + little-endian float32 raster
    poses.txt           TUM lines "timestamp tx ty tz qx qy qz qw", camera-to-world
"""

from __future__ import annotations

from collections.abc import Iterable, Sequence
from pathlib import Path
from typing import Any

import csv
import json
import logging

import numpy as np
import torch
from safetensors import SafetensorError, safe_open
from safetensors.torch import load_file, save_file
from scipy.spatial.transform import Rotation

from geometry import PoseSE3
from scene import SceneSequence, relative_motion
from util import ConfigError, ParseError
from warp import Intrinsics


log = logging.getLogger(__name__)

DEPTH_MAGIC = b"DPTH"
MANIFEST_KEY = "manifest"


# ===========================================================================
# Images
# ===========================================================================


def _ppm_tokens(data: bytes, path: Path, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping # comments."""
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise ParseError(path, pos, "truncated PPM header")
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_ppm(path: str | Path) -> torch.Tensor:
    """Binary P6 with maxval 255 -> (3, H, W) float64 in [0, 1]."""
    path = Path(path)
    data = path.read_bytes()
    tokens, offset = _ppm_tokens(data, path, 4)
    if tokens[0] != b"P6":
        raise ParseError(path, 0, f"expected magic P6, got {tokens[0][:8]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ParseError(path, 2, f"bad PPM header values {tokens[1:]!r}") from None
    if maxval != 255 or width < 1 or height < 1:
        raise ParseError(path, 2, f"unsupported PPM header {width}x{height} maxval {maxval}")
    expected = width * height * 3
    actual = len(data) - offset
    if actual != expected:
        raise ParseError(path, offset, f"expected {expected} bytes of pixel data, got {actual}")
    raster = np.frombuffer(data, dtype=np.uint8, count=expected, offset=offset)
    image = raster.reshape(height, width, 3).transpose(2, 0, 1).astype(np.float64) / 255.0
    return torch.from_numpy(image)


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """(3, H, W) in [0, 1] -> (H, W, 3) uint8, rounding to nearest."""
    arr = image.detach().cpu().double().clamp(0.0, 1.0).numpy()
    return np.rint(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)


def write_ppm(path: str | Path, image: torch.Tensor) -> None:
    raster = to_uint8(image)
    height, width = raster.shape[:2]
    Path(path).write_bytes(f"P6\n{width} {height}\n255\n".encode() + raster.tobytes())


# ===========================================================================
# Depth
# ===========================================================================


def read_depth(path: str | Path) -> torch.Tensor:
    """DPTH raster -> (H, W) float32 tensor."""
    path = Path(path)
    data = path.read_bytes()
    newline = data.find(b"\n")
    if newline < 0 or not data.startswith(DEPTH_MAGIC + b" "):
        raise ParseError(path, 0, "missing 'DPTH <W> <H>' header line")
    try:
        _, w, h = data[:newline].split(b" ")
        width, height = int(w), int(h)
    except ValueError:
        raise ParseError(path, 0, f"bad depth header {data[:newline][:32]!r}") from None
    if width < 1 or height < 1:
        raise ParseError(path, 0, f"bad depth size {width}x{height}")
    offset = newline + 1
    expected = width * height * 4
    actual = len(data) - offset
    if actual != expected:
        raise ParseError(path, offset, f"expected {expected} bytes of depth data, got {actual}")
    raster = np.frombuffer(data, dtype="<f4", count=width * height, offset=offset)
    return torch.from_numpy(raster.reshape(height, width).copy())


def write_depth(path: str | Path, depth: torch.Tensor) -> None:
    arr = depth.detach().cpu().numpy().astype("<f4")
    height, width = arr.shape
    Path(path).write_bytes(f"DPTH {width} {height}\n".encode() + arr.tobytes())


def save_depths(folder: str | Path, depths: Iterable[torch.Tensor]) -> list[Path]:
    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, depth in enumerate(depths):
        path = folder / f"{i:06d}.dpth"
        write_depth(path, depth)
        paths.append(path)
    return paths


def load_depths(folder: str | Path) -> list[torch.Tensor]:
    paths = sorted(Path(folder).glob("*.dpth"))
    if not paths:
        raise ConfigError(f"no .dpth files in {folder}")
    return [read_depth(p) for p in paths]


# ===========================================================================
# Trajectories
# ===========================================================================


def read_tum(path: str | Path) -> tuple[np.ndarray, PoseSE3]:
    """TUM text file -> (timestamps, float64 PoseSE3 batch)."""
    path = Path(path)
    data = path.read_bytes()
    stamps, rows = [], []
    offset = 0
    for raw in data.splitlines(keepends=True):
        line = raw.strip()
        if line and not line.startswith(b"#"):
            fields = line.split()
            if len(fields) != 8:
                raise ParseError(path, offset, f"expected 8 fields, got {len(fields)}")
            try:
                values = [float(f) for f in fields]
            except ValueError:
                raise ParseError(path, offset, f"non-numeric field in {line[:40]!r}") from None
            stamps.append(values[0])
            rows.append(values[1:])
        offset += len(raw)
    if not rows:
        raise ParseError(path, 0, "no poses")
    arr = np.asarray(rows, dtype=np.float64)
    quat = arr[:, 3:]
    if not np.isfinite(arr).all() or not np.isfinite(stamps).all():
        raise ParseError(path, 0, "non-finite value in trajectory")
    if np.any(np.abs(np.linalg.norm(quat, axis=1) - 1.0) > 1e-3):
        raise ParseError(path, 0, "quaternion is not unit length")
    R = Rotation.from_quat(quat).as_matrix()
    return np.asarray(stamps), PoseSE3(torch.from_numpy(R), torch.from_numpy(arr[:, :3].copy()))


def write_tum(
    path: str | Path,
    poses: PoseSE3,
    timestamps: Sequence[float] | None = None,
    provenance: dict[str, Any] | None = None,
) -> None:
    R = poses.R.detach().cpu().double().numpy()
    t = poses.t.detach().cpu().double().numpy()
    quat = Rotation.from_matrix(R).as_quat()
    if timestamps is None:
        timestamps = range(len(t))
    lines = [
        " ".join(f"{v:.10g}" for v in (float(ts), *t[i], *quat[i]))
        for i, ts in enumerate(timestamps)
    ]
    Path(path).write_text(provenance_line(provenance) + "\n".join(lines) + "\n")


save_trajectory = write_tum
load_trajectory = read_tum


# ===========================================================================
# Sequences
# ===========================================================================


def save_sequence(scene: SceneSequence, folder: str | Path) -> Path:
    folder = Path(folder)
    (folder / "frames").mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(scene.frames):
        write_ppm(folder / "frames" / f"{i:06d}.ppm", frame)
    save_depths(folder / "depth", scene.depths)
    write_tum(folder / "poses.txt", scene.poses, provenance={"seed": scene.seed})
    K = scene.intrinsics
    meta = {
        "kind": scene.kind,
        "seed": scene.seed,
        "frames": len(scene),
        "height": scene.height,
        "width": scene.width,
        "intrinsics": {"fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy},
    }
    (folder / "scene.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    log.info("Saved %d-frame %s sequence to %s", len(scene), scene.kind, folder)
    return folder


def load_sequence(folder: str | Path) -> SceneSequence:
    folder = Path(folder)
    meta_path = folder / "scene.json"
    try:
        meta = json.loads(meta_path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"{folder} is not a sequence folder (no scene.json)") from None
    except json.JSONDecodeError as e:
        raise ParseError(meta_path, e.pos, e.msg) from None
    frame_paths = sorted((folder / "frames").glob("*.ppm"))
    if not frame_paths:
        raise ConfigError(f"{folder} holds no frames (frames/*.ppm)")
    frames = torch.stack([read_ppm(p) for p in frame_paths])
    depths = torch.stack([d.double() for d in load_depths(folder / "depth")])
    _, poses = read_tum(folder / "poses.txt")
    return SceneSequence(
        kind=meta["kind"],
        seed=int(meta["seed"]),
        frames=frames,
        depths=depths,
        poses=poses,
        relatives=relative_motion(poses),
        intrinsics=Intrinsics(**meta["intrinsics"]),
    )


# ===========================================================================
# Checkpoints
# ===========================================================================


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".manifest.json")


def _dump(manifest: dict[str, Any]) -> str:
    return json.dumps(manifest, sort_keys=True, separators=(",", ":"))


def save_checkpoint(
    model: torch.nn.Module,
    path: str | Path,
    trainable: Iterable[str],
    extra: dict[str, Any] | None = None,
) -> dict[str, Any]:
    """Write every parameter as float32 plus a manifest; no timestamps."""
    path = Path(path)
    trainable = set(trainable)
    tensors = {
        name: p.detach().to(torch.float32).contiguous().cpu()
        for name, p in model.named_parameters()
    }
    manifest = {
        "arrays": [
            {"name": name, "shape": list(t.shape), "trainable": name in trainable}
            for name, t in sorted(tensors.items())
        ],
        **(extra or {}),
    }
    text = _dump(manifest)
    save_file(tensors, str(path), metadata={MANIFEST_KEY: text})
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    log.info("Saved checkpoint %s (%d arrays)", path, len(tensors))
    return manifest


def read_manifest(path: str | Path) -> dict[str, Any]:
    """Manifest from the safetensors header, falling back to the sidecar."""
    path = Path(path)
    try:
        with safe_open(str(path), framework="pt") as f:
            metadata = f.metadata() or {}
    except (SafetensorError, OSError) as e:
        raise ParseError(path, 0, f"unreadable checkpoint: {e}") from None
    if MANIFEST_KEY in metadata:
        return json.loads(metadata[MANIFEST_KEY])
    sidecar = manifest_path(path)
    if sidecar.exists():
        return json.loads(sidecar.read_text())
    return {}


def load_checkpoint(
    model: torch.nn.Module, path: str | Path, strict: bool = False
) -> dict[str, Any]:
    """Copy named arrays into matching parameters; returns the manifest.

    With strict=False, names absent on either side are skipped, so a backbone
    file can be loaded into a model that also carries adapters.
    """
    path = Path(path)
    try:
        tensors = load_file(str(path))
    except (SafetensorError, OSError) as e:
        raise ParseError(path, 0, f"unreadable checkpoint: {e}") from None
    params = dict(model.named_parameters())
    if strict:
        missing = sorted(set(params) - set(tensors))
        unexpected = sorted(set(tensors) - set(params))
        if missing or unexpected:
            raise ConfigError(
                f"checkpoint mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}"
            )
    loaded = 0
    with torch.no_grad():
        for name, p in params.items():
            if name not in tensors:
                continue
            t = tensors[name]
            if tuple(t.shape) != tuple(p.shape):
                raise ConfigError(f"{name}: checkpoint shape {tuple(t.shape)} != {tuple(p.shape)}")
            p.copy_(t.to(p.dtype))
            loaded += 1
    log.info("Loaded %d/%d arrays from %s", loaded, len(params), path)
    return read_manifest(path)


# ===========================================================================
# CSV
# ===========================================================================


def write_csv(
    path: str | Path,
    header: Sequence[str],
    rows: Iterable[Sequence[Any]],
    provenance: dict[str, Any] | None = None,
) -> None:
    with Path(path).open("w", newline="") as f:
        f.write(provenance_line(provenance))
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_jsonl(path: str | Path, records: Iterable[dict[str, Any]]) -> None:
    with Path(path).open("w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def _fmt(value: Any) -> Any:
    if isinstance(value, float):
        return repr(value)
    return value


# ===========================================================================
# Provenance
# ===========================================================================


def provenance_line(provenance: dict[str, Any] | None) -> str:
    """Leading ``# key=value ...`` comment for text artifacts; empty when None."""
    if not provenance:
        return ""
    return "# " + " ".join(f"{k}={provenance[k]}" for k in sorted(provenance)) + "\n"


def read_provenance(path: str | Path) -> dict[str, str]:
    """Pairs from a file's leading comment line; {} if it has none."""
    path = Path(path)
    with path.open() as f:
        first = f.readline().strip()
    if not first.startswith("#"):
        return {}
    pairs: dict[str, str] = {}
    for token in first[1:].split():
        key, sep, value = token.partition("=")
        if not sep or not key:
            raise ParseError(path, 0, f"expected key=value in provenance, got {token!r}")
        pairs[key] = value
    return pairs
