"""Desk-scale recipes: gallery/probe protocol, variant runs and the refinement error table."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .dataset import GaitDataset, fit_frames
from .errors import ProtocolError
from .evaluation import RetrievalReport, evaluate, extract_features, mpjpe, write_metrics_csv
from .skeleton import smooth_average, smooth_gaussian
from .training import EVAL_SALT, REFINE_SALT, TrainConfig, TrainState, collate, jitter_samples, train

# Small enough for a single CPU core; the TrainConfig defaults keep the full widths.
DESK_MODEL = dict(
    embed_dim=32,
    sil_channels=(8, 16, 32),
    stgcn_hidden=(16, 16, 32, 32),
    decoder_channels=(32, 16, 16),
    cma_hidden=16,
)
DESK_RECIPE = dict(
    optimizer="adam",
    lr=1e-3,
    weight_decay=5e-4,
    iterations=300,
    batch_ids=4,
    batch_seqs=4,
    frames=30,
    train_jitter_rate=0.1,
    train_jitter_magnitude=0.1,
    log_interval=50,
)


def desk_config(variant="gaitstr", seed=0, **changes) -> TrainConfig:
    return TrainConfig(**{**DESK_MODEL, **DESK_RECIPE, "variant": variant, "seed": seed, **changes})


def protocol_split(samples, protocol="condition"):
    """Return ``(gallery, probes)``.

    ``condition``: clean sequences form the gallery and every other condition
    probes it. ``parity``: even sequence numbers form the gallery.
    """
    samples = list(samples)
    if protocol == "condition":
        gallery = [s for s in samples if s.condition == "clean"]
        probes = [s for s in samples if s.condition != "clean"]
    elif protocol == "parity":
        gallery = [s for s in samples if s.seq % 2 == 0]
        probes = [s for s in samples if s.seq % 2 == 1]
    else:
        raise ProtocolError(f"unknown protocol {protocol!r}")
    if not gallery or not probes:
        raise ProtocolError(
            f"protocol {protocol!r} leaves {len(gallery)} gallery and {len(probes)} probe sequences"
        )
    return gallery, probes


def evaluate_model(model, samples, protocol="condition", frames=30, jitter_rate=0.0,
                   jitter_magnitude=0.0, jitter_seed=0, with_views=False) -> RetrievalReport:
    samples = [fit_frames(s, frames) for s in samples]
    samples = jitter_samples(samples, jitter_rate, jitter_magnitude, jitter_seed, salt=EVAL_SALT)
    gallery, probes = protocol_split(samples, protocol)
    return evaluate(extract_features(model, probes), extract_features(model, gallery),
                    with_views=with_views)


@torch.no_grad()
def refine_joints(model, samples) -> np.ndarray:
    """Refined joints ``[N, T, K, 2]`` for equally long samples."""
    if model.corrector is None:
        raise ProtocolError(f"variant {model.config.variant!r} has no refinement stage")
    was_training = model.training
    model.eval()
    sils, joints = collate(samples, next(model.parameters()).dtype)
    out = model(sils, joints).refined_joints.double().numpy()
    model.train(was_training)
    return out


REFINEMENT_ROWS = ("raw", "average", "gaussian", "refined")


def refinement_errors(model, samples, jitter_rate=0.1, jitter_magnitude=0.1, seeds=(0, 1, 2),
                      frames=30) -> dict[str, float]:
    """Mean joint error against the clean joints, per method, averaged over jitter seeds."""
    clean = [fit_frames(s, frames) for s in samples]
    table = {k: [] for k in REFINEMENT_ROWS}
    for seed in seeds:
        noisy = jitter_samples(clean, jitter_rate, jitter_magnitude, seed, salt=REFINE_SALT)
        refined = refine_joints(model, noisy)
        for i, (c, n) in enumerate(zip(clean, noisy)):
            table["raw"].append(mpjpe(n.joints, c.joints))
            table["average"].append(mpjpe(smooth_average(n.joints), c.joints))
            table["gaussian"].append(mpjpe(smooth_gaussian(n.joints), c.joints))
            table["refined"].append(mpjpe(refined[i], c.joints.data))
    return {k: float(np.mean(v)) for k, v in table.items()}


def write_refinement_csv(table, path) -> Path:
    path = Path(path)
    lines = ["method,mpjpe"] + [f"{k},{table[k]:.8f}" for k in REFINEMENT_ROWS if k in table]
    path.write_text("\n".join(lines) + "\n")
    return path


@dataclass
class VariantRun:
    state: TrainState
    clean: RetrievalReport
    jittered: RetrievalReport


def run_variant(dataset: GaitDataset, config: TrainConfig, out_dir=None, jitter_rate=0.1,
                jitter_magnitude=0.1, jitter_seed=0) -> VariantRun:
    """Train on the train split and score the test split with and without skeleton jitter."""
    state = train(config, dataset.split("train"), out_dir)
    test = dataset.split("test").samples
    clean = evaluate_model(state.model, test, frames=config.frames)
    jittered = evaluate_model(state.model, test, frames=config.frames, jitter_rate=jitter_rate,
                              jitter_magnitude=jitter_magnitude, jitter_seed=jitter_seed)
    if out_dir is not None:
        write_metrics_csv(clean, Path(out_dir) / "eval_clean.csv")
        write_metrics_csv(jittered, Path(out_dir) / "eval_jitter.csv")
    return VariantRun(state, clean, jittered)
