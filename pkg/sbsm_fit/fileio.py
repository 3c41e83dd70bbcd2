"""On-disk formats: FTS tensors, PNG images, banks, target sets and fit results.

FTS is a minimal little-endian tensor container:

    b"FTEN" | u32 version (= 1) | u32 ndim | ndim x u32 dims | f32 data (C order)

A bank directory holds bank.fts (the K x (key_dim + value_dim + 3N) matrix),
bank.json (its manifest) and template.obj. A target directory holds, per
view, <name>_image.png, <name>_mask.png, <name>_features.fts and
<name>_phi.fts, indexed by targets.json, which also carries ground truth
(pose, azimuth, keypoints) when the views are synthetic.

Usage:
    write_fts("bank.fts", bank.to_matrix())
    targets = load_targets("data/targets")
    save_result(result, config, "out/fit")
"""

import csv
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, List, Sequence, Union

import numpy as np
from PIL import Image

from sbsm_fit.bank import TEMPLATE_FILE, SemanticBank
from sbsm_fit.config import FitConfig
from sbsm_fit.errors import FtsFormatError
from sbsm_fit.fit import FitResult, ViewTarget
from sbsm_fit.geometry import load_obj, save_obj
from sbsm_fit.objective import LossBreakdown
from sbsm_fit.skeleton import Skeleton, skeleton_from_dict, skeleton_to_dict

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

FTS_MAGIC = b"FTEN"
FTS_VERSION = 1


# ── FTS ──────────────────────────────────────────────────────────────────


def write_fts(path: PathLike, array: np.ndarray) -> None:
    array = np.ascontiguousarray(np.asarray(array), dtype="<f4")
    header = FTS_MAGIC + struct.pack("<II", FTS_VERSION, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def read_fts(path: PathLike) -> np.ndarray:
    """Read an FTS file into a float32 array.

    Raises:
        FtsFormatError: on a bad magic, unknown version or size mismatch.
    """
    raw = Path(path).read_bytes()
    if raw[:4] != FTS_MAGIC:
        raise FtsFormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise FtsFormatError(f"{path}: truncated header")
    version, ndim = struct.unpack_from("<II", raw, 4)
    if version != FTS_VERSION:
        raise FtsFormatError(f"{path}: unsupported version {version}")
    offset = 12 + 4 * ndim
    if len(raw) < offset:
        raise FtsFormatError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{ndim}I", raw, 12)
    expected = 4 * int(np.prod(shape, dtype=np.int64))
    if len(raw) - offset != expected:
        raise FtsFormatError(f"{path}: expected {expected} data bytes for shape {shape}, got {len(raw) - offset}")
    return np.frombuffer(raw, dtype="<f4", offset=offset).reshape(shape).astype(np.float32)


# ── PNG ──────────────────────────────────────────────────────────────────


def save_mask_png(path: PathLike, mask: np.ndarray) -> None:
    Image.fromarray(((np.asarray(mask) > 0.5) * 255).astype(np.uint8)).save(path)


def load_mask_png(path: PathLike) -> np.ndarray:
    return (np.asarray(Image.open(path).convert("L")) > 127).astype(np.float64)


def save_image_png(path: PathLike, image: np.ndarray) -> None:
    rgb = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(rgb).save(path)


def load_image_png(path: PathLike) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


# ── JSON ─────────────────────────────────────────────────────────────────


def write_json(path: PathLike, data: Any) -> None:
    Path(path).write_text(json.dumps(data, indent=2), encoding="utf-8")


def read_json(path: PathLike) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def save_skeleton(skel: Skeleton, path: PathLike) -> None:
    write_json(path, skeleton_to_dict(skel))


def load_skeleton(path: PathLike) -> Skeleton:
    return skeleton_from_dict(read_json(path))


# ── Banks ────────────────────────────────────────────────────────────────


def save_bank(bank: SemanticBank, directory: PathLike) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    manifest = bank.manifest()
    write_fts(out / "bank.fts", bank.to_matrix())
    write_json(out / "bank.json", manifest)
    save_obj(bank.template, out / manifest["template"])
    logger.info("wrote bank (%d tokens) to %s", bank.size, out)
    return out


def load_bank(directory: PathLike) -> SemanticBank:
    """Read bank.json, then the tensor and the template it names."""
    src = Path(directory)
    manifest = read_json(src / "bank.json")
    template = load_obj(src / manifest.get("template", TEMPLATE_FILE))
    matrix = read_fts(src / "bank.fts").astype(np.float64)
    return SemanticBank.from_matrix(matrix, manifest, template)


# ── Target sets ──────────────────────────────────────────────────────────


def save_targets(views: Sequence[Any], directory: PathLike) -> Path:
    """Write views (ViewTarget or synthetic views) plus an index.

    Ground truth is stored when a view has pose, azimuth or keypoints.
    """
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    index: List[Dict[str, Any]] = []
    for i, view in enumerate(views):
        name = getattr(view, "name", "") or f"view{i:03d}"
        save_image_png(out / f"{name}_image.png", view.image)
        save_mask_png(out / f"{name}_mask.png", view.mask)
        write_fts(out / f"{name}_features.fts", view.features)
        write_fts(out / f"{name}_phi.fts", view.phi)
        entry: Dict[str, Any] = {"name": name}
        if getattr(view, "pose", None) is not None:
            entry["pose"] = view.pose.as_dict()
        if getattr(view, "azimuth", None) is not None:
            entry["azimuth_deg"] = view.azimuth
        if getattr(view, "keypoints", None) is not None:
            entry["keypoints"] = view.keypoints.as_dict()
        index.append(entry)
    write_json(out / "targets.json", {"views": index})
    logger.info("wrote %d target views to %s", len(index), out)
    return out


def load_targets(directory: PathLike) -> List[ViewTarget]:
    src = Path(directory)
    index = read_json(src / "targets.json")
    targets = []
    for entry in index["views"]:
        name = entry["name"]
        targets.append(
            ViewTarget(
                image=load_image_png(src / f"{name}_image.png"),
                mask=load_mask_png(src / f"{name}_mask.png"),
                features=read_fts(src / f"{name}_features.fts").astype(np.float64),
                phi=read_fts(src / f"{name}_phi.fts").astype(np.float64),
                name=name,
            )
        )
    return targets


def load_ground_truth(directory: PathLike) -> Dict[str, Dict[str, Any]]:
    """Per-view ground-truth entries of a target index, keyed by view name."""
    index = read_json(Path(directory) / "targets.json")
    return {entry["name"]: entry for entry in index["views"]}


# ── Fit results ──────────────────────────────────────────────────────────


def write_losses_csv(history: Sequence[LossBreakdown], path: PathLike) -> None:
    names = list(LossBreakdown().as_dict())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration"] + names)
        for i, row in enumerate(history):
            writer.writerow([i] + [repr(v) for v in row.as_array()])


def read_losses_csv(path: PathLike) -> List[LossBreakdown]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [
        LossBreakdown(**{k: float(v) for k, v in row.items() if k != "iteration"})
        for row in rows
    ]


def result_report(result: FitResult, config: FitConfig) -> Dict[str, Any]:
    return {
        "config": config.as_dict(),
        "stage_starts": {str(k): v for k, v in result.stage_starts.items()},
        "bank_weights": result.query.weights.tolist(),
        "bank_fallback": result.query.fallback,
        "skipped_views": list(result.skipped),
        "final_losses": result.history[-1].as_dict() if result.history else {},
        "views": [
            {
                "name": v.name,
                "hypothesis": v.hypothesis,
                "probabilities": v.probabilities.tolist(),
                "scores": v.scores.tolist(),
                "azimuths_deg": np.degrees(v.azimuths).tolist(),
                "elevation_deg": float(np.degrees(v.elevation)),
                "roll_deg": float(np.degrees(v.roll)),
                "light": {"ambient": v.light.ambient, "diffuse": v.light.diffuse, "direction": list(v.light.direction)},
            }
            for v in result.views
        ],
    }


def save_result(result: FitResult, config: FitConfig, directory: PathLike) -> Path:
    """poses.json, base.obj, deformed_<view>.obj, losses.csv, report.json (+ skeleton.json)."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "poses.json", {v.name: v.pose.as_dict() for v in result.views})
    save_obj(result.base, out / "base.obj")
    for i, view in enumerate(result.views):
        save_obj(result.posed_mesh(i), out / f"deformed_{view.name}.obj")
    write_losses_csv(result.history, out / "losses.csv")
    write_json(out / "report.json", result_report(result, config))
    if result.skeleton is not None:
        save_skeleton(result.skeleton, out / "skeleton.json")
    logger.info("wrote fit result to %s", out)
    return out
