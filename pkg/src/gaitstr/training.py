"""Objectives, identity-balanced batches, configuration and the optimisation loop."""

from __future__ import annotations

import csv
import logging
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import GaitDataset, fit_frames
from .errors import ConfigError, InvalidBatchError, InvalidInputError, TrainingDivergedError
from .refinement import GaitSTR, ModelConfig
from .skeleton import inject_jitter
from .synthetic import GaitSample

logger = logging.getLogger(__name__)

_MODEL_KEYS = tuple(f.name for f in fields(ModelConfig))


@dataclass
class TrainConfig:
    """Every knob of a training run. Keys double as config-file keys."""

    lambda_triplet: float = 1.0
    lambda_cls: float = 1.0
    margin: float = 0.2
    batch_ids: int = 4
    batch_seqs: int = 4
    frames: int = 30
    train_jitter_rate: float = 0.0
    train_jitter_magnitude: float = 0.0
    optimizer: str = "sgd"
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_decay_steps: tuple[int, ...] = ()
    lr_decay_factor: float = 0.1
    iterations: int = 0
    seed: int = 0
    log_interval: int = 10
    checkpoint_interval: int = 0
    # model
    embed_dim: int = 64
    sil_channels: tuple[int, ...] = (32, 64, 128)
    hpp_scale: int = 5
    stgcn_hidden: tuple[int, ...] = (64, 64, 128, 128)
    decoder_channels: tuple[int, ...] = (128, 64, 64)
    cma_layers: int = 3
    cma_hidden: int = 64
    temporal_kernel: int = 9
    topology: str = "synth13"
    variant: str = "gaitstr"
    include_pre_refinement_bone: bool = True

    def __post_init__(self):
        for name in ("sil_channels", "stgcn_hidden", "decoder_channels", "lr_decay_steps"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    def validate(self):
        if self.lambda_triplet < 0 or self.lambda_cls < 0:
            raise ConfigError("lambda_triplet and lambda_cls must be >= 0")
        if self.batch_ids < 2 or self.batch_seqs < 2:
            raise ConfigError("triplets need batch_ids >= 2 and batch_seqs >= 2")
        if self.frames < 1 or self.iterations < 0:
            raise ConfigError("frames must be >= 1 and iterations >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if any(s >= self.iterations or s < 0 for s in self.lr_decay_steps):
            raise ConfigError(
                f"lr_decay_steps {self.lr_decay_steps} must lie in [0, iterations={self.iterations})"
            )
        if len(self.sil_channels) != 3:
            raise ConfigError("sil_channels needs exactly three stages")
        try:
            self.model_config()
        except InvalidInputError as exc:
            raise ConfigError(str(exc)) from exc

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{k: getattr(self, k) for k in _MODEL_KEYS})

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**self.to_dict(), **changes})


def _coerce(name, default, text):
    text = text.strip()
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(default, tuple):
        return tuple(int(v) for v in text.replace(" ", "").split(",") if v)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def parse_config_text(text: str, base: TrainConfig | None = None, source: str = "<config>") -> TrainConfig:
    """Parse ``key = value`` lines (``#`` starts a comment) on top of ``base``."""
    values = (base or TrainConfig()).to_dict()
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in values:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        try:
            values[key] = _coerce(key, values[key], value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{n}: bad value for {key!r}: {exc}") from None
    try:
        return TrainConfig(**values)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def apply_overrides(config: TrainConfig, overrides) -> TrainConfig:
    """Apply ``key=value`` strings (as given on the command line)."""
    lines = []
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        lines.append(item)
    return parse_config_text("\n".join(lines), config, source="--set") if lines else config


def load_config(path, overrides=None) -> TrainConfig:
    config = parse_config_text(Path(path).read_text(), source=str(path))
    return apply_overrides(config, overrides)


def dump_config(config: TrainConfig) -> str:
    out = []
    for key, value in config.to_dict().items():
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        out.append(f"{key} = {value}")
    return "\n".join(out) + "\n"


# --- objectives -------------------------------------------------------------------


def _check_triplet_batch(labels):
    uniq, counts = torch.unique(labels, return_counts=True)
    if len(uniq) < 2 or not bool((counts >= 2).any()):
        raise InvalidBatchError(
            f"triplet loss needs >= 2 identities and an identity with >= 2 samples; "
            f"got counts {counts.tolist()}"
        )


def pairwise_distances(x):
    """Euclidean distances ``[R, B, B]`` for features ``[B, R, C]``, per part."""
    diff = x.transpose(0, 1)[:, :, None, :] - x.transpose(0, 1)[:, None, :, :]
    return diff.square().sum(-1).clamp_min(1e-12).sqrt()


def triplet_loss(features, labels, margin=0.2):
    """Batch-all triplet loss computed separately for each feature part.

    ``features`` is ``[B, R, C]`` (or ``[B, C]``, a single part). For each part
    the hinge ``max(0, d_ap - d_an + margin)`` is averaged over the triplets
    where it is non-zero; parts are then averaged.
    """
    if features.dim() == 2:
        features = features[:, None]
    labels = torch.as_tensor(labels, device=features.device)
    _check_triplet_batch(labels)
    d = pairwise_distances(features)
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(len(labels), dtype=torch.bool, device=features.device)
    valid = (same & ~eye)[:, :, None] & ~same[:, None, :]
    hinge = F.relu(d[:, :, :, None] - d[:, :, None, :] + margin) * valid
    active = (hinge > 0).sum(dim=(1, 2, 3))
    per_part = hinge.sum(dim=(1, 2, 3)) / active.clamp_min(1)
    return per_part.mean()


def classification_loss(logits, labels):
    labels = torch.as_tensor(labels, device=logits.device)
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= logits.shape[1]):
        raise InvalidInputError(f"labels must lie in [0, {logits.shape[1]}), got {labels.tolist()}")
    return F.cross_entropy(logits, labels)


def loss_terms(features, logits, labels, lambda_triplet=1.0, lambda_cls=1.0, margin=0.2):
    """``(total, triplet, classification)`` with ``total = l1 * triplet + l2 * cls``."""
    trip = triplet_loss(features, labels, margin)
    cls = classification_loss(logits, labels)
    return lambda_triplet * trip + lambda_cls * cls, trip, cls


def combined_loss(features, logits, labels, lambda_triplet=1.0, lambda_cls=1.0, margin=0.2):
    return loss_terms(features, logits, labels, lambda_triplet, lambda_cls, margin)[0]


# --- batches ------------------------------------------------------------------------


def sample_batch(dataset: GaitDataset, num_ids: int, seqs_per_id: int, seed: int, iteration: int,
                 frames: int | None = None) -> list[GaitSample]:
    """``num_ids`` identities x ``seqs_per_id`` sequences, a pure function of (seed, iteration)."""
    groups = {k: v for k, v in dataset.by_identity().items() if len(v) >= seqs_per_id}
    if len(groups) < num_ids:
        raise ConfigError(
            f"need {num_ids} identities with >= {seqs_per_id} sequences, dataset has {len(groups)}"
        )
    rng = np.random.default_rng([seed, iteration])
    ids = sorted(groups)
    batch = []
    for label in rng.choice(ids, size=num_ids, replace=False):
        for i in rng.choice(groups[int(label)], size=seqs_per_id, replace=False):
            s = dataset[int(i)]
            batch.append(fit_frames(s, frames) if frames else s)
    return batch


# training jitter salts by iteration, so evaluation streams sit above any iteration count
EVAL_SALT = 2**32
REFINE_SALT = 2**32 + 1


def jitter_samples(samples, rate, magnitude, seed, salt=0) -> list[GaitSample]:
    """Corrupt each sample's joints independently; silhouettes are left untouched."""
    if rate <= 0:
        return list(samples)
    out = []
    for slot, s in enumerate(samples):
        jseed = np.random.default_rng([seed, salt, slot]).integers(2**63)
        joints, _ = inject_jitter(s.joints, rate, magnitude, jseed)
        out.append(GaitSample(label=s.label, condition=s.condition, view=s.view,
                              silhouettes=s.silhouettes, joints=joints, seq=s.seq, meta=s.meta))
    return out


def collate(samples, dtype=torch.float32):
    sils = torch.as_tensor(np.stack([s.silhouettes for s in samples]), dtype=dtype)
    joints = torch.as_tensor(np.stack([s.joints.data for s in samples]), dtype=dtype)
    return sils, joints


# --- loop -------------------------------------------------------------------------------


@dataclass
class TrainState:
    config: TrainConfig
    model: GaitSTR
    optimizer: torch.optim.Optimizer
    label_map: dict[int, int]
    iteration: int = 0
    log: list[dict] = field(default_factory=list)
    history: list[float] = field(default_factory=list)
    # per-iteration stats since the last log row, kept so resuming mid-interval is exact
    window: list[tuple[float, float, float, float]] = field(default_factory=list)


LOG_FIELDS = ("iteration", "L_triplet", "L_cls", "L", "train_rank1")


def build_state(config: TrainConfig, train_labels) -> TrainState:
    torch.manual_seed(config.seed)
    label_map = {int(l): i for i, l in enumerate(sorted(set(int(x) for x in train_labels)))}
    model = GaitSTR(config.model_config(), len(label_map))
    if config.optimizer == "adam":
        opt = torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    else:
        opt = torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum,
                              weight_decay=config.weight_decay)
    return TrainState(config, model, opt, label_map)


def learning_rate(config: TrainConfig, iteration: int) -> float:
    drops = sum(1 for s in config.lr_decay_steps if iteration >= s)
    return config.lr * config.lr_decay_factor ** drops


def batch_rank1(features, labels) -> float:
    """Leave-one-out nearest-neighbour accuracy inside one batch."""
    flat = features.detach().flatten(1)
    d = torch.cdist(flat, flat)
    d.fill_diagonal_(float("inf"))
    return float((labels[d.argmin(dim=1)] == labels).float().mean())


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    params = state.model.state_dict()
    torch.save({
        "format": "gaitstr-checkpoint",
        "version": 1,
        "config": state.config.to_dict(),
        "num_classes": state.model.num_classes,
        "label_map": state.label_map,
        "iteration": state.iteration,
        "shapes": {k: list(v.shape) for k, v in params.items()},
        "model": params,
        "optimizer": state.optimizer.state_dict(),
        "log": state.log,
        "history": state.history,
        "window": state.window,
    }, path)
    return path


def load_checkpoint(path) -> TrainState:
    """Rebuild a :class:`TrainState`, checking every stored shape against the config."""
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if blob.get("format") != "gaitstr-checkpoint":
        raise InvalidInputError(f"{path} is not a checkpoint")
    config = TrainConfig(**blob["config"])
    label_map = {int(k): int(v) for k, v in blob["label_map"].items()}
    state = build_state(config, list(label_map))
    expected = {k: list(v.shape) for k, v in state.model.state_dict().items()}
    if expected != blob["shapes"]:
        bad = [k for k in set(expected) | set(blob["shapes"]) if expected.get(k) != blob["shapes"].get(k)]
        raise InvalidInputError(f"checkpoint shapes disagree with its config for: {sorted(bad)}")
    for k, v in blob["model"].items():
        if list(v.shape) != blob["shapes"].get(k):
            raise InvalidInputError(f"tensor {k!r} has shape {list(v.shape)}, manifest says {blob['shapes'].get(k)}")
    state.model.load_state_dict(blob["model"])
    state.optimizer.load_state_dict(blob["optimizer"])
    state.iteration = int(blob["iteration"])
    state.log = list(blob["log"])
    state.history = list(blob["history"])
    state.window = [tuple(w) for w in blob["window"]]
    return state


def write_log_csv(rows, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{row[k]:.8g}" if isinstance(row[k], float) else row[k]) for k in LOG_FIELDS})
    return path


def train(config: TrainConfig, dataset: GaitDataset, out_dir=None, resume: TrainState | None = None,
          stop_at: int | None = None) -> TrainState:
    """Run the optimiser until ``config.iterations`` (or ``stop_at``) iterations are done.

    With ``out_dir`` set, checkpoints go to ``ckpt_XXXXXX.pt`` every
    ``checkpoint_interval`` iterations and to ``last.pt`` at the end, and the
    metrics log to ``metrics.csv``.
    """
    state = resume if resume is not None else build_state(config, dataset.labels)
    config = state.config
    model, opt = state.model, state.optimizer
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    end = config.iterations if stop_at is None else min(stop_at, config.iterations)
    model.train()
    while state.iteration < end:
        it = state.iteration
        for group in opt.param_groups:
            group["lr"] = learning_rate(config, it)
        samples = sample_batch(dataset, config.batch_ids, config.batch_seqs, config.seed, it, config.frames)
        samples = jitter_samples(samples, config.train_jitter_rate, config.train_jitter_magnitude,
                                 config.seed, salt=it)
        sils, joints = collate(samples)
        labels = torch.tensor([state.label_map[s.label] for s in samples])
        bundle = model(sils, joints)
        total, trip, cls = loss_terms(bundle.feature, bundle.logits, labels,
                                      config.lambda_triplet, config.lambda_cls, config.margin)
        if not torch.isfinite(total):
            dump = (out or Path(tempfile.mkdtemp(prefix="gaitstr-diverged-"))) / "diverged.pt"
            save_checkpoint(state, dump)
            raise TrainingDivergedError(
                f"non-finite loss at iteration {it} (triplet={float(trip.detach())}, cls={float(cls.detach())}); "
                f"state dumped to {dump}", dump)
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        state.iteration += 1
        state.history.append(float(total.detach()))
        state.window.append((float(trip.detach()), float(cls.detach()), float(total.detach()),
                             batch_rank1(bundle.feature, labels)))
        if state.iteration % config.log_interval == 0:
            means = np.mean(state.window, axis=0)
            state.log.append(dict(zip(LOG_FIELDS, (state.iteration, *map(float, means)))))
            logger.info("iter %d  L=%.4f  triplet=%.4f  cls=%.4f  rank1=%.3f",
                        state.iteration, means[2], means[0], means[1], means[3])
            state.window = []
        if out is not None and config.checkpoint_interval and state.iteration % config.checkpoint_interval == 0:
            save_checkpoint(state, out / f"ckpt_{state.iteration:06d}.pt")
    if out is not None:
        save_checkpoint(state, out / "last.pt")
        # a trailing partial window is written but kept out of state.log so a
        # later resume with a larger budget logs exactly like an uninterrupted run
        rows = list(state.log)
        if state.window:
            rows.append(dict(zip(LOG_FIELDS, (state.iteration, *map(float, np.mean(state.window, axis=0))))))
        write_log_csv(rows, out / "metrics.csv")
    model.eval()
    return state
