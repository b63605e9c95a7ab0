"""Silhouette-guided two-stream skeleton refinement and the full recognition model.

Joint and bone streams are each corrected by a decoder that sees the raw
stream, its per-node encoder features and the flattened silhouette feature.
Cross-modal adapters exchange hidden features between the two decoders, and
the refined streams are re-encoded with the same encoders used for the raw
streams.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import SilhouetteEncoder, SpatialGraphConv, STGCNBlock, STGCNEncoder, build_adjacency
from .errors import InvalidInputError
from .skeleton import get_topology

VARIANTS = ("silhouette", "concat", "gaitref", "cma_b2j", "gaitstr")
CMA_MODES = ("both", "b2j", "j2b", "none")


@dataclass
class ModelConfig:
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
        if self.variant not in VARIANTS:
            raise InvalidInputError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.cma_layers > len(self.decoder_channels):
            raise InvalidInputError(
                f"cma_layers={self.cma_layers} exceeds the {len(self.decoder_channels)} decoder layers"
            )

    @property
    def uses_skeleton(self) -> bool:
        return self.variant != "silhouette"

    @property
    def uses_refinement(self) -> bool:
        return self.variant in ("gaitref", "cma_b2j", "gaitstr")

    @property
    def cma_mode(self) -> str:
        return {"gaitstr": "both", "cma_b2j": "b2j"}.get(self.variant, "none")

    @property
    def silhouette_rows(self) -> int:
        return 2 ** (self.hpp_scale - 1)

    @property
    def feature_rows(self) -> int:
        if not self.uses_skeleton:
            return self.silhouette_rows
        if not self.uses_refinement:
            return self.silhouette_rows + 2
        return self.silhouette_rows + 3 + int(self.include_pre_refinement_bone)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EmbeddingBundle:
    f_s: torch.Tensor
    feature: torch.Tensor
    logits: torch.Tensor | None = None
    f_j: torch.Tensor | None = None
    f_b: torch.Tensor | None = None
    f_j_refined: torch.Tensor | None = None
    f_b_refined: torch.Tensor | None = None
    refined_joints: torch.Tensor | None = None
    refined_bones: torch.Tensor | None = None
    extras: dict = field(default_factory=dict)


def build_correction_input(x, f_s, per_node):
    """Tile the flattened silhouette feature over every node and concatenate.

    ``x``: ``[B, T, K, 2]``; ``f_s``: ``[B, S, C]``; ``per_node``: ``[B, T, K, C]``.
    Returns ``[B, T, K, S*C + C + 2]``.
    """
    b, t, k, _ = x.shape
    flat = f_s.reshape(b, 1, 1, -1).expand(b, t, k, f_s.shape[1] * f_s.shape[2])
    return torch.cat([flat, per_node, x], dim=-1)


class SkeletonDecoder(nn.Module):
    """Reversed graph-convolution stack predicting a per-node 2-D correction."""

    def __init__(self, adjacency, embed_dim, sil_rows=16, channels=(128, 64, 64),
                 temporal_kernel=9, coord_dim=2):
        super().__init__()
        self.sil_width = sil_rows * embed_dim
        self.embed_dim = embed_dim
        self.coord_dim = coord_dim
        self.in_width = self.sil_width + embed_dim + coord_dim
        widths = [self.in_width, *channels]
        self.blocks = nn.ModuleList(
            STGCNBlock(a, b, adjacency, temporal_kernel) for a, b in zip(widths[:-1], widths[1:])
        )
        self.head = SpatialGraphConv(channels[-1], coord_dim, adjacency)
        nn.init.zeros_(self.head.linear.weight)
        nn.init.zeros_(self.head.bias)

    def first_layer(self, x, f_s, per_node):
        """First block on the concatenated input, with its weight applied block-wise.

        Equal to running the block on :func:`build_correction_input`, without
        materialising the tiled silhouette feature.
        """
        b, t, k, _ = x.shape
        if per_node.shape != (b, t, k, self.embed_dim):
            raise InvalidInputError(
                f"per-node features {tuple(per_node.shape)} do not match stream {tuple(x.shape)}"
            )
        if f_s.shape[0] != b or f_s.shape[1] * f_s.shape[2] != self.sil_width:
            raise InvalidInputError(f"silhouette feature {tuple(f_s.shape)} has the wrong size")
        block = self.blocks[0]
        w = block.gcn.linear.weight.flatten(1)
        w_s, w_h, w_x = w.split([self.sil_width, self.embed_dim, self.coord_dim], dim=1)
        pre = (f_s.reshape(b, -1) @ w_s.t()).view(b, -1, 1, 1)
        pre = pre + torch.einsum("btkc,oc->botk", per_node, w_h)
        pre = pre + torch.einsum("btkc,oc->botk", x, w_x)
        pre = block.gcn.mix(pre)
        if block.residual:
            return block(build_correction_input(x, f_s, per_node).permute(0, 3, 1, 2), pre=pre)
        return block(None, pre=pre)

    def delta(self, h):
        """Hidden ``[B, C, T, K]`` -> correction ``[B, T, K, 2]``."""
        return self.head(h).permute(0, 2, 3, 1)


class CrossModalAdapter(nn.Module):
    """Two-layer MLP projecting one stream's decoder features for the other stream.

    The source's node axis is mean-pooled and the projection is broadcast to
    every target node, which bridges the joint and bone node counts. The output
    layer starts at zero so a fresh adapter is the identity update.
    """

    def __init__(self, channels, hidden):
        super().__init__()
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, source, target_nodes):
        z = source.mean(dim=3).transpose(1, 2)
        z = self.fc2(F.relu(self.fc1(z)))
        return z.transpose(1, 2).unsqueeze(-1).expand(-1, -1, -1, target_nodes)


def cross_modal_adapt(f_j, f_b, j_to_b=None, b_to_j=None):
    """Simultaneous residual exchange; both directions read the pre-update features."""
    if f_j.shape[1] != f_b.shape[1]:
        raise InvalidInputError(f"channel mismatch: joints {f_j.shape[1]} vs bones {f_b.shape[1]}")
    new_b = f_b + j_to_b(f_j, f_b.shape[3]) if j_to_b is not None else f_b
    new_j = f_j + b_to_j(f_b, f_j.shape[3]) if b_to_j is not None else f_j
    return new_j, new_b


def correct_stream(x, f_s, per_node, decoder: SkeletonDecoder, peer_taps=None):
    """Single-stream correction ``X' = X + decoder(X, F_S, per-node)``.

    ``peer_taps`` is an optional sequence of tensors added to the outputs of
    the first decoder layers (the contribution another stream would inject).
    Returns ``(delta, refined, hiddens)``.
    """
    hiddens = []
    h = None
    for i, block in enumerate(decoder.blocks):
        h = decoder.first_layer(x, f_s, per_node) if i == 0 else block(h)
        if peer_taps is not None and i < len(peer_taps) and peer_taps[i] is not None:
            h = h + peer_taps[i]
        hiddens.append(h)
    delta = decoder.delta(h)
    return delta, x + delta, hiddens


class TwoStreamCorrector(nn.Module):
    """Joint and bone decoders stepped in lockstep with adapters after the first ``k`` layers."""

    def __init__(self, joint_adjacency, bone_adjacency, embed_dim, sil_rows, channels,
                 cma_layers=3, cma_hidden=64, cma_mode="both", temporal_kernel=9):
        super().__init__()
        if cma_mode not in CMA_MODES:
            raise InvalidInputError(f"unknown CMA mode {cma_mode!r}")
        self.joint_decoder = SkeletonDecoder(joint_adjacency, embed_dim, sil_rows, channels, temporal_kernel)
        self.bone_decoder = SkeletonDecoder(bone_adjacency, embed_dim, sil_rows, channels, temporal_kernel)
        self.cma_mode = cma_mode
        self.cma_layers = cma_layers if cma_mode != "none" else 0
        make = lambda i: CrossModalAdapter(channels[i], cma_hidden)  # noqa: E731
        self.j_to_b = nn.ModuleList(make(i) for i in range(self.cma_layers)) if cma_mode in ("both", "j2b") else None
        self.b_to_j = nn.ModuleList(make(i) for i in range(self.cma_layers)) if cma_mode in ("both", "b2j") else None

    def forward(self, joints, bones, f_s, joint_nodes, bone_nodes):
        dj, db = self.joint_decoder, self.bone_decoder
        hj = hb = None
        for i in range(len(dj.blocks)):
            if i == 0:
                hj = dj.first_layer(joints, f_s, joint_nodes)
                hb = db.first_layer(bones, f_s, bone_nodes)
            else:
                hj, hb = dj.blocks[i](hj), db.blocks[i](hb)
            if i < self.cma_layers:
                hj, hb = cross_modal_adapt(
                    hj, hb,
                    self.j_to_b[i] if self.j_to_b is not None else None,
                    self.b_to_j[i] if self.b_to_j is not None else None,
                )
        delta_j, delta_b = dj.delta(hj), db.delta(hb)
        return joints + delta_j, bones + delta_b, delta_j, delta_b


class GaitSTR(nn.Module):
    """Silhouette encoder + joint/bone encoders (+ refinement) + identity classifier."""

    def __init__(self, config: ModelConfig, num_classes: int):
        super().__init__()
        self.config = config
        self.num_classes = num_classes
        c = config.embed_dim
        self.silhouette_encoder = SilhouetteEncoder(config.sil_channels, c, config.hpp_scale)
        self.joint_encoder = self.bone_encoder = self.corrector = None
        topo = get_topology(config.topology)
        self.register_buffer("bone_parents", torch.from_numpy(topo.parents()), persistent=False)
        self.register_buffer("bone_children", torch.from_numpy(topo.children()), persistent=False)
        if config.uses_skeleton:
            adj_j = build_adjacency(topo, "joint")
            adj_b = build_adjacency(topo, "bone")
            self.joint_encoder = STGCNEncoder(adj_j, 2, config.stgcn_hidden, c, config.temporal_kernel)
            self.bone_encoder = STGCNEncoder(adj_b, 2, config.stgcn_hidden, c, config.temporal_kernel)
            if config.uses_refinement:
                self.corrector = TwoStreamCorrector(
                    adj_j, adj_b, c, config.silhouette_rows, config.decoder_channels,
                    config.cma_layers, config.cma_hidden, config.cma_mode, config.temporal_kernel,
                )
        self.classifier = nn.Linear(config.feature_rows * c, num_classes)

    def bones_from_joints(self, joints):
        return joints[:, :, self.bone_children] - joints[:, :, self.bone_parents]

    def forward(self, sils, joints=None, bones=None) -> EmbeddingBundle:
        f_s = self.silhouette_encoder(sils)
        rows = [f_s]
        out = EmbeddingBundle(f_s=f_s, feature=f_s)
        if self.config.uses_skeleton:
            if joints is None:
                raise InvalidInputError(f"variant {self.config.variant!r} needs joints")
            if joints.shape[:2] != sils.shape[:2]:
                raise InvalidInputError(
                    f"silhouettes {tuple(sils.shape[:2])} and joints {tuple(joints.shape[:2])} disagree"
                )
            if bones is None:
                bones = self.bones_from_joints(joints)
            joint_nodes, f_j = self.joint_encoder(joints)
            bone_nodes, f_b = self.bone_encoder(bones)
            out.f_j, out.f_b = f_j, f_b
            rows += [f_j[:, None], f_b[:, None]]
            if self.corrector is not None:
                j_ref, b_ref, _, _ = self.corrector(joints, bones, f_s, joint_nodes, bone_nodes)
                _, f_j_ref = self.joint_encoder(j_ref)
                _, f_b_ref = self.bone_encoder(b_ref)
                out.refined_joints, out.refined_bones = j_ref, b_ref
                out.f_j_refined, out.f_b_refined = f_j_ref, f_b_ref
                if not self.config.include_pre_refinement_bone:
                    rows.pop()
                rows += [f_j_ref[:, None], f_b_ref[:, None]]
        out.feature = torch.cat(rows, dim=1)
        out.logits = self.classifier(out.feature.flatten(1))
        return out
