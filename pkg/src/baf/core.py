"""Anchoring scores, principal-subspace selection, and spectral gating.

A LoRA update decomposes into rank-1 spectral channels; each channel is
scored by how well its singular vector pair aligns with the top-K left and
right singular subspaces of the pretrained base weight.  Channels scoring
below the random-direction baseline K^2/(m*n) look no more structured than
chance and are removed (hard mode) or down-weighted (soft mode).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionMismatch, UnsortedSpectrum, ZeroSpectrum
from .linalg import ThinSvd, as_matrix, subspace_alignment, thin_svd

HARD = "hard"
SOFT = "soft"

# Relative cutoff below which singular values are treated as exact zeros.
# Channels that small have numerically arbitrary singular vectors and would
# produce meaningless anchoring scores.
ZERO_SIGMA_TOL = 1e-12


@dataclass
class SpectralChannel:
    """One rank-1 term sigma * left @ right.T of a spectral decomposition.

    ``anchoring`` and ``gate`` start unset and are filled in by scoring and
    gating; a channel with an unset gate reconstructs at full weight.
    """

    sigma: float
    left: np.ndarray
    right: np.ndarray
    anchoring: float | None = None
    gate: float | None = None


@dataclass(frozen=True)
class PrincipalSubspace:
    """Top-K left/right singular bases of a base weight matrix.

    ``a_null`` is the expected anchoring score of an unstructured channel,
    exactly k^2 / (m * n).  ``energy_ratio`` is the squared-singular-value
    mass captured by the first k directions.
    """

    left_basis: np.ndarray
    right_basis: np.ndarray
    k: int
    energy_ratio: float
    a_null: float

    @property
    def m(self) -> int:
        return self.left_basis.shape[0]

    @property
    def n(self) -> int:
        return self.right_basis.shape[0]


@dataclass(frozen=True)
class GateConfig:
    """Filtering mode and its knobs.

    alpha only applies in soft mode; tau_energy controls how much base
    spectral energy the principal subspace must capture.
    """

    mode: str = SOFT
    alpha: float = 1.0
    tau_energy: float = 0.85
    zero_sigma_tol: float = ZERO_SIGMA_TOL

    def __post_init__(self) -> None:
        if self.mode not in (HARD, SOFT):
            raise ConfigError(f"gate mode must be 'hard' or 'soft', got {self.mode!r}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if not (0.0 < self.tau_energy <= 1.0):
            raise ConfigError(f"tau_energy must be in (0, 1], got {self.tau_energy}")
        if self.zero_sigma_tol < 0:
            raise ConfigError("zero_sigma_tol must be >= 0")


@dataclass
class LayerReport:
    """Per-layer filtering diagnostics.

    channel_records holds one (sigma, anchoring, gate) triple for every
    scored channel, including channels a hard gate subsequently dropped.
    """

    layer_name: str
    m: int
    n: int
    r: int
    k: int
    a_null: float
    energy_ratio: float
    kept_count: int
    fro_norm_before: float
    fro_norm_after: float
    channel_records: list[tuple[float, float, float]] = field(default_factory=list)


def select_k(s, tau_energy: float) -> int:
    """Smallest k whose leading singular values capture tau_energy of s^2 mass.

    ``s`` must be non-increasing and non-negative with at least one nonzero
    entry.  tau_energy = 1.0 selects every nonzero entry.
    """
    spectrum = np.asarray(s, dtype=np.float64).reshape(-1)
    if spectrum.size == 0:
        raise ZeroSpectrum("empty spectrum")
    if not (0.0 < tau_energy <= 1.0):
        raise ConfigError(f"tau_energy must be in (0, 1], got {tau_energy}")
    if np.any(np.diff(spectrum) > 0):
        raise UnsortedSpectrum("singular values must be non-increasing")
    if spectrum[-1] < 0:
        raise UnsortedSpectrum("singular values must be non-negative")
    cumulative = np.cumsum(spectrum * spectrum)
    total = cumulative[-1]
    if total == 0.0:
        raise ZeroSpectrum("all singular values are zero")
    # ratios end at exactly 1.0, so a qualifying index always exists
    return int(np.argmax(cumulative / total >= tau_energy)) + 1


def null_baseline(k: int, m: int, n: int) -> float:
    """Expected anchoring score of independent uniform unit vectors: k^2/(m*n)."""
    if not (1 <= k <= min(m, n)):
        raise DimensionMismatch(f"k={k} outside [1, min({m}, {n})]")
    return (k * k) / (m * n)


def build_subspace(base, tau_energy: float) -> PrincipalSubspace:
    """Energy-adaptive principal subspace of a base weight matrix."""
    matrix = as_matrix(base)
    svd = thin_svd(matrix)
    k = select_k(svd.s, tau_energy)
    energy = svd.s * svd.s
    cumulative = np.cumsum(energy)
    m, n = matrix.shape
    return PrincipalSubspace(
        left_basis=svd.U[:, :k].copy(),
        right_basis=svd.V[:, :k].copy(),
        k=k,
        energy_ratio=float(cumulative[k - 1] / cumulative[-1]),
        a_null=null_baseline(k, m, n),
    )


def spectral_channels(matrix_or_svd, zero_sigma_tol: float = ZERO_SIGMA_TOL) -> list[SpectralChannel]:
    """Decompose a matrix (or precomputed thin SVD) into spectral channels.

    Singular values below zero_sigma_tol relative to the largest are treated
    as exact zeros and dropped; their vectors are numerically arbitrary.
    """
    svd = matrix_or_svd if isinstance(matrix_or_svd, ThinSvd) else thin_svd(matrix_or_svd)
    if svd.s.size == 0:
        return []
    s_max = float(svd.s[0])
    if s_max <= 0.0:
        return []
    cutoff = zero_sigma_tol * s_max
    return [
        SpectralChannel(sigma=float(svd.s[i]), left=svd.U[:, i].copy(), right=svd.V[:, i].copy())
        for i in range(svd.s.shape[0])
        if svd.s[i] >= cutoff and svd.s[i] > 0.0
    ]


def anchoring_score(channel: SpectralChannel, subspace: PrincipalSubspace) -> float:
    """Bilateral alignment of a channel with the principal subspace, in [0, 1].

    Product of the squared projection norms of the left and right singular
    vectors onto their respective bases.  The result is stored on the
    channel as a side effect.
    """
    left = subspace_alignment(channel.left, subspace.left_basis)
    right = subspace_alignment(channel.right, subspace.right_basis)
    score = left * right
    channel.anchoring = score
    return score


def gate_hard(a: float, a_null: float) -> float:
    """Binary gate: 1.0 iff the score reaches the null baseline (inclusive)."""
    return 1.0 if a >= a_null else 0.0


def gate_soft(a: float, alpha: float) -> float:
    """Continuous gate a**alpha with 0**0 = 1, so alpha = 0 passes everything."""
    if alpha == 0.0:
        return 1.0
    return float(a) ** float(alpha)


def filter_layer(
    channels,
    subspace: PrincipalSubspace,
    cfg: GateConfig,
    layer_name: str = "",
) -> tuple[list[SpectralChannel], LayerReport]:
    """Score and gate one layer's channels against its base subspace.

    Hard mode drops gated-out channels from the returned list; soft mode
    retains every nonzero-sigma channel with its gate set to anchoring**alpha.
    The report records all scored channels either way.
    """
    channels = list(channels)
    fro_before_sq = sum(ch.sigma * ch.sigma for ch in channels)
    s_max = max((ch.sigma for ch in channels), default=0.0)
    if s_max > 0.0:
        scored = [ch for ch in channels if ch.sigma >= cfg.zero_sigma_tol * s_max and ch.sigma > 0.0]
    else:
        scored = []

    for ch in scored:
        if ch.left.shape[0] != subspace.m or ch.right.shape[0] != subspace.n:
            raise DimensionMismatch(
                f"channel is {ch.left.shape[0]}x{ch.right.shape[0]}, "
                f"subspace is {subspace.m}x{subspace.n}"
            )
        score = anchoring_score(ch, subspace)
        if cfg.mode == HARD:
            ch.gate = gate_hard(score, subspace.a_null)
        else:
            ch.gate = gate_soft(score, cfg.alpha)

    if cfg.mode == HARD:
        kept = [ch for ch in scored if ch.gate > 0.0]
    else:
        kept = list(scored)

    fro_after_sq = sum((ch.sigma * ch.gate) ** 2 for ch in scored)
    report = LayerReport(
        layer_name=layer_name,
        m=subspace.m,
        n=subspace.n,
        r=len(channels),
        k=subspace.k,
        a_null=subspace.a_null,
        energy_ratio=subspace.energy_ratio,
        kept_count=len(kept),
        fro_norm_before=float(np.sqrt(fro_before_sq)),
        fro_norm_after=float(np.sqrt(fro_after_sq)),
        channel_records=[(ch.sigma, ch.anchoring, ch.gate) for ch in scored],
    )
    return kept, report
