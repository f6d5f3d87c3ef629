"""Reconstruction metrics against a synthetic dataset's ground truth."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .dataset import Dataset
from .mesh import TriangleMesh, chamfer_fscore, extract_canonical, reconstruct_frame
from .render import ModelScene, SamplingConfig, render_image

CSV_FIELDS = ["video", "frame", "chamfer_cm", "chamfer_pct", "f@1%", "f@2%", "f@5%", "scale"]


def evaluate_video(model, dataset: Dataset, video: int, frames=None, grid_res: int = 64,
                   bound: float = 1.2, num_samples: int = 10000, align_scale: bool = True) -> list[dict]:
    """One row per frame: posed reconstruction vs the ground-truth mesh."""
    vd = dataset.videos[video]
    frames = range(vd.entry.num_frames) if frames is None else frames
    canonical = extract_canonical(model, model.codes.beta[video].detach(), grid_res, bound)
    rows = []
    for t in frames:
        gt = TriangleMesh.load_obj(dataset.gt_mesh_path(video, t))
        pred = reconstruct_frame(model, video, t, canonical=canonical)
        cam = vd.cameras[t] if align_scale else None
        rep = chamfer_fscore(pred, gt, (1.0, 2.0, 5.0), num_samples, seed=t, camera=cam)
        row = {"video": video, "frame": t}
        row.update(rep.row())
        rows.append(row)
    return rows


def summarize(rows: list[dict]) -> dict:
    keys = [k for k in CSV_FIELDS if k not in ("video", "frame")]
    return {k: float(np.mean([r[k] for r in rows])) for k in keys}


def write_metrics_csv(path_or_file, rows: list[dict]) -> None:
    own = isinstance(path_or_file, (str, Path))
    f = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in rows:
            w.writerow([r["video"], r["frame"]] + [repr(float(r[k])) for k in CSV_FIELDS[2:]])
    finally:
        if own:
            f.close()


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = np.logical_or(a, b).sum()
    return 1.0 if union == 0 else float(np.logical_and(a, b).sum() / union)


def silhouette_counts(model, dataset: Dataset, video: int, frames, sampling: SamplingConfig | None = None,
                      object_radius: float = 1.2) -> np.ndarray:
    """Summed (intersection, union) against the clean silhouettes for the rendered
    masks, then for the input masks: ``[i_rendered, u_rendered, i_input, u_input]``."""
    sampling = sampling or SamplingConfig(object_radius=object_radius, object_samples=64,
                                          background_samples=16)
    scene = ModelScene(model, object_radius=object_radius)
    counts = np.zeros(4, dtype=np.int64)
    vd = dataset.videos[video]
    for t in frames:
        gt = dataset.gt_mask(video, t)
        rendered = render_image(scene, vd.cameras[t], video, t, sampling)["silhouette"] > 0.5
        given = vd.mask[t].numpy() > 0.5
        counts += [np.logical_and(rendered, gt).sum(), np.logical_or(rendered, gt).sum(),
                   np.logical_and(given, gt).sum(), np.logical_or(given, gt).sum()]
    return counts


def pooled_iou(counts: np.ndarray) -> tuple[float, float]:
    """(rendered IoU, input IoU) from :func:`silhouette_counts` totals."""
    return float(counts[0] / max(counts[1], 1)), float(counts[2] / max(counts[3], 1))


def silhouette_iou(model, dataset: Dataset, video: int, frames, sampling: SamplingConfig | None = None,
                   object_radius: float = 1.2) -> tuple[float, float]:
    """Pooled IoU against the clean silhouettes of (rendered masks, input masks)."""
    return pooled_iou(silhouette_counts(model, dataset, video, frames, sampling, object_radius))


def corrupted_frames(dataset: Dataset, video: int) -> list[int]:
    vd = dataset.videos[video]
    return [t for t in range(vd.entry.num_frames)
            if not np.array_equal(vd.mask[t].numpy() > 0.5, dataset.gt_mask(video, t))]
