"""Retrieval metrics, gallery/probe protocols and skeleton error measures."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import InvalidInputError, ProtocolError

logger = logging.getLogger(__name__)

RANKS = (1, 5, 10, 20)


@dataclass(frozen=True)
class FeatureIndex:
    """Flattened recognition features with parallel label/view/condition arrays."""

    features: np.ndarray
    labels: np.ndarray
    views: np.ndarray | None = None
    conditions: np.ndarray | None = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise InvalidInputError(f"features must be [n, d], got shape {feats.shape}")
        if not np.all(np.isfinite(feats)):
            raise InvalidInputError("features contain non-finite values")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        for name in ("views", "conditions"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, np.asarray(value))
        for name in ("labels", "views", "conditions"):
            value = getattr(self, name)
            if value is not None and len(value) != len(feats):
                raise InvalidInputError(f"{name} has {len(value)} entries for {len(feats)} features")

    def __len__(self):
        return len(self.features)

    def subset(self, mask) -> "FeatureIndex":
        mask = np.asarray(mask)
        pick = lambda a: None if a is None else a[mask]  # noqa: E731
        return FeatureIndex(self.features[mask], self.labels[mask], pick(self.views), pick(self.conditions))


def l2_retrieve(probe: FeatureIndex, gallery: FeatureIndex) -> np.ndarray:
    """Gallery indices per probe, nearest first; equal distances keep gallery order."""
    if len(gallery) == 0:
        raise ProtocolError("gallery is empty")
    if probe.features.shape[1] != gallery.features.shape[1]:
        raise InvalidInputError(
            f"feature widths differ: probe {probe.features.shape[1]}, gallery {gallery.features.shape[1]}"
        )
    diff = probe.features[:, None, :] - gallery.features[None, :, :]
    dist = np.sqrt(np.einsum("pgd,pgd->pg", diff, diff))
    return np.argsort(dist, axis=1, kind="stable")


def _match_matrix(rankings, probe_labels, gallery_labels):
    return np.asarray(gallery_labels)[np.asarray(rankings)] == np.asarray(probe_labels)[:, None]


def rank_k(rankings, probe_labels, gallery_labels, k: int) -> float:
    if k < 1:
        raise InvalidInputError(f"k must be >= 1, got {k}")
    matches = _match_matrix(rankings, probe_labels, gallery_labels)
    if len(matches) == 0:
        return 0.0
    return float(matches[:, :k].any(axis=1).mean())


@dataclass(frozen=True)
class MapDetail:
    mAP: float
    mINP: float
    ap: np.ndarray
    inp: np.ndarray
    excluded: int


def map_minp_detail(rankings, probe_labels, gallery_labels) -> MapDetail:
    matches = _match_matrix(rankings, probe_labels, gallery_labels)
    ap, inp = [], []
    excluded = 0
    for row in matches:
        pos = np.flatnonzero(row) + 1
        if len(pos) == 0:
            excluded += 1
            continue
        hits = np.arange(1, len(pos) + 1)
        ap.append(float(np.mean(hits / pos)))
        inp.append(len(pos) / float(pos[-1]))
    if excluded:
        logger.warning("%d probe(s) without a gallery match excluded from mAP/mINP", excluded)
    ap_arr, inp_arr = np.array(ap), np.array(inp)
    mean = lambda a: float(a.mean()) if len(a) else float("nan")  # noqa: E731
    return MapDetail(mean(ap_arr), mean(inp_arr), ap_arr, inp_arr, excluded)


def map_minp(rankings, probe_labels, gallery_labels) -> tuple[float, float]:
    d = map_minp_detail(rankings, probe_labels, gallery_labels)
    return d.mAP, d.mINP


@dataclass(frozen=True)
class ViewMatrix:
    views: tuple
    matrix: np.ndarray  # probe view x gallery view, NaN on the diagonal
    row_means: np.ndarray
    grand_mean: float


def view_matrix_eval(probe: FeatureIndex, gallery: FeatureIndex, views=None) -> ViewMatrix:
    """Rank-1 for every (probe view, gallery view) pair with the two views different."""
    if probe.views is None or gallery.views is None:
        raise ProtocolError("view tags are required for the per-view protocol")
    if views is None:
        views = sorted(set(probe.views.tolist()) | set(gallery.views.tolist()))
    views = tuple(views)
    if len(views) < 2:
        raise ProtocolError("the per-view protocol needs at least two views")
    mat = np.full((len(views), len(views)), np.nan)
    for i, pv in enumerate(views):
        p = probe.subset(probe.views == pv)
        if len(p) == 0:
            raise ProtocolError(f"no probes for view {pv!r}")
        for j, gv in enumerate(views):
            if i == j:
                continue
            g = gallery.subset(gallery.views == gv)
            if len(g) == 0:
                raise ProtocolError(f"empty gallery for probe view {pv!r} vs gallery view {gv!r}")
            mat[i, j] = rank_k(l2_retrieve(p, g), p.labels, g.labels, 1)
    row_means = np.nanmean(mat, axis=1)
    return ViewMatrix(views, mat, row_means, float(mat[~np.isnan(mat)].mean()))


def mpjpe(pred, ref) -> float:
    """Mean Euclidean distance between corresponding joints over all frames."""
    a = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    b = np.asarray(getattr(ref, "data", ref), dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b, axis=-1).mean())


@dataclass
class RetrievalReport:
    rankings: np.ndarray
    rank: dict[int, float]
    mAP: float
    mINP: float
    excluded: int = 0
    num_probes: int = 0
    num_gallery: int = 0
    views: ViewMatrix | None = None
    extra: dict = field(default_factory=dict)

    def rows(self) -> list[tuple[str, str]]:
        out = [("num_probes", str(self.num_probes)), ("num_gallery", str(self.num_gallery))]
        out += [(f"rank{k}", f"{v:.6f}") for k, v in self.rank.items()]
        out += [("mAP", f"{self.mAP:.6f}"), ("mINP", f"{self.mINP:.6f}"),
                ("excluded_probes", str(self.excluded))]
        if self.views is not None:
            out.append(("view_mean_rank1", f"{self.views.grand_mean:.6f}"))
        out += [(k, f"{v:.6f}" if isinstance(v, float) else str(v)) for k, v in self.extra.items()]
        return out


def evaluate(probe: FeatureIndex, gallery: FeatureIndex, ranks=RANKS, with_views=False) -> RetrievalReport:
    rankings = l2_retrieve(probe, gallery)
    detail = map_minp_detail(rankings, probe.labels, gallery.labels)
    report = RetrievalReport(
        rankings=rankings,
        rank={k: rank_k(rankings, probe.labels, gallery.labels, k) for k in ranks},
        mAP=detail.mAP, mINP=detail.mINP, excluded=detail.excluded,
        num_probes=len(probe), num_gallery=len(gallery),
    )
    if with_views:
        report.views = view_matrix_eval(probe, gallery)
    return report


def write_metrics_csv(report: RetrievalReport, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["metric", "value"])
        writer.writerows(report.rows())
    return path


def write_view_matrix_csv(vm: ViewMatrix, path) -> Path:
    """Rows are probe views, columns gallery views, then the per-row mean."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["probe_view", *[str(v) for v in vm.views], "mean"])
        for v, row, m in zip(vm.views, vm.matrix, vm.row_means):
            writer.writerow([str(v), *["" if np.isnan(x) else f"{x:.6f}" for x in row], f"{m:.6f}"])
        writer.writerow(["mean", *[""] * len(vm.views), f"{vm.grand_mean:.6f}"])
    return path


@torch.no_grad()
def extract_features(model, samples, frames=None, batch_size=16) -> FeatureIndex:
    """Run the model in inference mode and collect flattened recognition features."""
    from .dataset import fit_frames
    from .training import collate

    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    feats = []
    samples = [fit_frames(s, frames) if frames else s for s in samples]
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        if len({s.num_frames for s in chunk}) > 1:
            for s in chunk:
                sils, joints = collate([s], dtype)
                feats.append(model(sils, joints).feature.flatten(1).double().numpy())
            continue
        sils, joints = collate(chunk, dtype)
        feats.append(model(sils, joints).feature.flatten(1).double().numpy())
    model.train(was_training)
    width = model.config.feature_rows * model.config.embed_dim
    return FeatureIndex(
        np.concatenate(feats) if feats else np.zeros((0, width)),
        [s.label for s in samples],
        [s.view for s in samples],
        [s.condition for s in samples],
    )
