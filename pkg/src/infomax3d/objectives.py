"""Mutual-information estimators over encode-and-dot score tensors.

Scores pair every spatial location of the per-sample local feature map with
every sample's global representation: ``scores[i, j, l]`` is the dot product
of local embedding (sample i, location l) with global embedding (sample j).
Matched pairs (i == j) are the positive samples; all off-diagonal pairings
within the batch serve as negatives for both the JSD and NCE estimators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .autodiff import (
    DimensionError,
    Parameter,
    Tensor,
    logsumexp,
    neg,
    relu,
    reshape,
    softplus,
    tabs,
    tmean,
    tsum,
)
from .encoders import ArchitectureSpec, EncoderParams, _kaiming, forward_with_taps, tap_dims

__all__ = [
    "StatisticsNetworks",
    "ScoreTensor",
    "compute_scores",
    "jsd_objective",
    "nce_objective",
    "nce_mi_estimate",
    "dv_estimate",
    "dim_loss_from_taps",
    "local_dim_loss",
    "l1_penalty",
    "mi_estimate_value",
]

EMBED_DIM = 512


class StatisticsNetworks:
    """Embedders for the dot-product critic.

    The local map is two 1x1x1 convolutions (ReLU between) so the spatial
    layout is preserved; the global map is two linear layers (ReLU between).
    Both end in ``embed_dim`` channels/units and contain no normalization.
    """

    def __init__(self, local_channels: int, z_dim: int, embed_dim: int = EMBED_DIM,
                 seed: int = 0, dtype=np.float32):
        self.embed_dim = embed_dim
        rng = np.random.default_rng(seed)
        e = embed_dim
        self.lw1 = Parameter(_kaiming(rng, (e, local_channels, 1, 1, 1), local_channels, dtype), name="nets.lw1")
        self.lb1 = Parameter(np.zeros(e, dtype=dtype), name="nets.lb1")
        self.lw2 = Parameter(_kaiming(rng, (e, e, 1, 1, 1), e, dtype), name="nets.lw2")
        self.lb2 = Parameter(np.zeros(e, dtype=dtype), name="nets.lb2")
        self.gw1 = Parameter(_kaiming(rng, (e, z_dim), z_dim, dtype), name="nets.gw1")
        self.gb1 = Parameter(np.zeros(e, dtype=dtype), name="nets.gb1")
        self.gw2 = Parameter(_kaiming(rng, (e, e), e, dtype), name="nets.gw2")
        self.gb2 = Parameter(np.zeros(e, dtype=dtype), name="nets.gb2")

    @classmethod
    def for_encoder(cls, spec: ArchitectureSpec, embed_dim: int = EMBED_DIM,
                    seed: int = 0, dtype=np.float32) -> "StatisticsNetworks":
        dims = tap_dims(spec)
        return cls(dims["local_channels"], dims["z"], embed_dim=embed_dim, seed=seed, dtype=dtype)

    def parameters(self) -> list[Parameter]:
        return [self.lw1, self.lb1, self.lw2, self.lb2, self.gw1, self.gb1, self.gw2, self.gb2]

    def embed_local(self, local_map: Tensor) -> Tensor:
        """(B, C, d, d, d) -> (B, E, L) with L = d^3."""
        h = nn.conv3d(local_map, self.lw1, self.lb1, 1, 0)
        h = relu(h)
        h = nn.conv3d(h, self.lw2, self.lb2, 1, 0)
        b, e = h.shape[0], h.shape[1]
        return reshape(h, (b, e, -1))

    def embed_global(self, z: Tensor) -> Tensor:
        h = nn.linear(z, self.gw1, self.gb1)
        h = relu(h)
        return nn.linear(h, self.gw2, self.gb2)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_snapshot(self, arrays: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            p.data = np.ascontiguousarray(arrays[p.name])


@dataclass
class ScoreTensor:
    """(B, B, L) pairwise scores; diagonal entries are the matched pairs."""

    scores: Tensor

    @property
    def batch(self) -> int:
        return self.scores.shape[0]

    @property
    def locations(self) -> int:
        return self.scores.shape[2]


def compute_scores(local_map: Tensor, z: Tensor, nets: StatisticsNetworks) -> ScoreTensor:
    """Full B x B x L score tensor, differentiable through both embedders."""
    if local_map.shape[0] < 2:
        raise DimensionError("compute_scores needs batch size >= 2 so negatives exist")
    local_emb = nets.embed_local(local_map)
    global_emb = nets.embed_global(z)
    return ScoreTensor(nn.pair_scores(local_emb, global_emb))


def jsd_objective(st: ScoreTensor) -> Tensor:
    """Softplus-based objective (maximize): mean over positives of -sp(-s)
    minus mean over negatives of sp(s). Constant scores give -2 ln 2."""
    s = st.scores
    b, l = st.batch, st.locations
    pos = nn.diag_pairs(s)
    pos_term = tmean(neg(softplus(neg(pos))))
    sp_all = tsum(softplus(s))
    sp_pos = tsum(softplus(pos))
    neg_term = (sp_all - sp_pos) * (1.0 / (b * (b - 1) * l))
    return pos_term - neg_term


def nce_objective(st: ScoreTensor) -> Tensor:
    """Noise-contrastive objective (maximize): mean over (i, l) of
    s[i,i,l] - logsumexp_j s[i,j,l]. Always <= 0; -ln B for constant scores."""
    s = st.scores
    pos = nn.diag_pairs(s)
    lse = logsumexp(s, axis=1)
    return tmean(pos - lse)


def nce_mi_estimate(st: ScoreTensor) -> Tensor:
    """The objective shifted by ln B, i.e. the usual lower bound on mutual
    information: capped at ln B, near 0 for uninformative scores."""
    return nce_objective(st) + math.log(st.batch)


def dv_estimate(pos_scores: Tensor, neg_scores: Tensor) -> Tensor:
    """Donsker-Varadhan bound: mean(pos) - log(mean(exp(neg))), stabilized."""
    if pos_scores.size == 0 or neg_scores.size == 0:
        raise DimensionError("dv_estimate needs at least one positive and one negative score")
    log_mean_exp = logsumexp(neg_scores) - math.log(neg_scores.size)
    return tmean(pos_scores) - log_mean_exp


def dim_loss_from_taps(local_map: Tensor, z: Tensor, nets: StatisticsNetworks,
                       estimator: str = "jsd") -> Tensor:
    """Negated estimator value over the full score tensor, ready to minimize."""
    st = compute_scores(local_map, z, nets)
    if estimator == "jsd":
        objective = jsd_objective(st)
    elif estimator == "nce":
        objective = nce_objective(st)
    else:
        raise ValueError(f"unknown estimator {estimator!r}; expected 'jsd' or 'nce'")
    return neg(objective)


def local_dim_loss(
    batch: Tensor,
    spec: ArchitectureSpec,
    params: EncoderParams,
    nets: StatisticsNetworks,
    estimator: str = "jsd",
    mode: str = "train",
) -> Tensor:
    """Run the encoder on a batch and return the negated estimator value,
    averaged over all feature-map locations (both estimators already
    average over L)."""
    out = forward_with_taps(spec, params, batch, mode=mode)
    return dim_loss_from_taps(out.local_map, out.logits_or_z, nets, estimator)


def mi_estimate_value(loss_value: float, estimator: str, batch: int) -> float:
    """Recover the logged estimate from a local_dim_loss value: JSD is the
    plain negated loss; NCE additionally shifts by ln(batch)."""
    if estimator == "jsd":
        return -loss_value
    return -loss_value + math.log(batch)


def l1_penalty(params, lam: float) -> Tensor:
    """lam times the summed absolute value of every parameter; the
    subgradient at exactly zero is zero."""
    if lam < 0:
        raise ValueError(f"l1 penalty weight must be >= 0, got {lam}")
    params = list(params)
    if not params:
        raise ValueError("l1_penalty needs at least one parameter")
    total = tsum(tabs(params[0]))
    for p in params[1:]:
        total = total + tsum(tabs(p))
    return total * float(lam)
