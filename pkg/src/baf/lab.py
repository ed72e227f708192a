"""Desk-scale synthetic testbed: controlled spectra, planted channels, null checks.

Base matrices are generated with a known spectral profile; LoRA-like updates
are planted with channels either inside the base's principal subspace or in
its orthogonal complement, so hard-gate recovery can be checked against
ground-truth labels.  A Monte-Carlo estimator validates the analytic null
baseline for random unit-vector channels.

All randomness flows through explicit seeds; nothing touches global RNG state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    GateConfig,
    PrincipalSubspace,
    SpectralChannel,
    anchoring_score,
    build_subspace,
    gate_hard,
    spectral_channels,
)
from .errors import ConfigError, DimensionMismatch, PlantCapacity
from .linalg import reconstruct

FLAT = "flat"
GEOMETRIC = "geometric"
TWO_BLOCK = "two_block"


@dataclass(frozen=True)
class PlantSpec:
    """Recipe for one synthetic base + planted-update instance.

    decay_param is the ratio for geometric decay (in (0, 1]) and the gap for
    two-block spectra (>= 1); flat spectra ignore it.  sigma_profile, when
    given, should be strictly decreasing so the planted channels survive a
    round trip through the update's own SVD in a stable order.
    """

    m: int
    n: int
    k_true: int
    n_aligned: int
    n_orthogonal: int
    decay: str = TWO_BLOCK
    decay_param: float = 100.0
    sigma_profile: tuple[float, ...] | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.m < 1 or self.n < 1:
            raise ConfigError("matrix dimensions must be positive")
        limit = min(self.m, self.n)
        if not (1 <= self.k_true <= limit):
            raise ConfigError(f"k_true={self.k_true} outside [1, {limit}]")
        if self.n_aligned < 0 or self.n_orthogonal < 0:
            raise ConfigError("channel counts must be non-negative")
        if self.n_aligned + self.n_orthogonal > limit:
            raise PlantCapacity(
                f"{self.n_aligned}+{self.n_orthogonal} planted channels exceed min(m,n)={limit}"
            )
        if self.decay not in (FLAT, GEOMETRIC, TWO_BLOCK):
            raise ConfigError(f"unknown decay kind {self.decay!r}")
        if self.decay == GEOMETRIC and not (0.0 < self.decay_param <= 1.0):
            raise ConfigError(f"geometric ratio must be in (0, 1], got {self.decay_param}")
        if self.decay == TWO_BLOCK and self.decay_param < 1.0:
            raise ConfigError(f"two-block gap must be >= 1, got {self.decay_param}")
        if self.sigma_profile is not None:
            profile = tuple(float(s) for s in self.sigma_profile)
            if any(s <= 0 for s in profile):
                raise ConfigError("sigma_profile entries must be positive")
            object.__setattr__(self, "sigma_profile", profile)

    @classmethod
    def from_file(cls, path) -> "PlantSpec":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load plant spec {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"plant spec {path}: top level must be an object")
        known = {
            "m", "n", "k_true", "n_aligned", "n_orthogonal",
            "decay", "decay_param", "sigma_profile", "seed",
        }
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"plant spec {path}: unknown fields {sorted(unknown)}")
        if "sigma_profile" in doc and doc["sigma_profile"] is not None:
            doc["sigma_profile"] = tuple(doc["sigma_profile"])
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(f"plant spec {path}: {exc}") from exc


@dataclass
class SeparationResult:
    """Hard-gate recovery of planted labels, with the energy bookkeeping."""

    scores_aligned: list[float]
    scores_orthogonal: list[float]
    a_null: float
    precision: float
    recall: float
    removed_energy: float
    planted_orthogonal_energy: float

    def to_dict(self) -> dict:
        return {
            "scores_aligned": self.scores_aligned,
            "scores_orthogonal": self.scores_orthogonal,
            "a_null": self.a_null,
            "precision": self.precision,
            "recall": self.recall,
            "removed_energy": self.removed_energy,
            "planted_orthogonal_energy": self.planted_orthogonal_energy,
        }


def _orthonormal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Haar-ish random matrix with orthonormal columns (QR with sign fix)."""
    gaussian = rng.standard_normal((rows, cols))
    q, r = np.linalg.qr(gaussian)
    signs = np.where(np.diagonal(r) >= 0.0, 1.0, -1.0)
    return q * signs


def spectrum_for(spec: PlantSpec) -> np.ndarray:
    d = min(spec.m, spec.n)
    if spec.decay == FLAT:
        return np.ones(d)
    if spec.decay == GEOMETRIC:
        return spec.decay_param ** np.arange(d, dtype=np.float64)
    s = np.full(d, 1.0 / spec.decay_param)
    s[: spec.k_true] = 1.0
    return s


def gen_base(spec: PlantSpec) -> np.ndarray:
    """Synthetic base weight U diag(s) V^T with the spec's spectral profile."""
    rng = np.random.default_rng([spec.seed, 0])
    d = min(spec.m, spec.n)
    left = _orthonormal(rng, spec.m, d)
    right = _orthonormal(rng, spec.n, d)
    return (left * spectrum_for(spec)) @ right.T


def gen_planted_lora(
    base_sub: PrincipalSubspace, spec: PlantSpec
) -> tuple[list[SpectralChannel], list[bool]]:
    """Plant channels inside the subspace span and in its orthogonal complement.

    Aligned channels have singular vectors inside both the left and right
    bases (anchoring ~ 1); orthogonal channels live in both complements
    (anchoring ~ 0).  Channels are mutually orthogonal within each side, so
    the assembled update's own SVD recovers them.  Returned in descending
    sigma order with matching ground-truth labels (True = aligned).
    """
    k = base_sub.k
    m, n = base_sub.m, base_sub.n
    if spec.n_aligned > k:
        raise PlantCapacity(f"{spec.n_aligned} aligned plants exceed subspace dim {k}")
    if spec.n_orthogonal > min(m, n) - k:
        raise PlantCapacity(
            f"{spec.n_orthogonal} orthogonal plants exceed complement dim {min(m, n) - k}"
        )

    rng = np.random.default_rng([spec.seed, 1])
    lefts: list[np.ndarray] = []
    rights: list[np.ndarray] = []
    labels: list[bool] = []

    if spec.n_aligned:
        coeff_left = _orthonormal(rng, k, spec.n_aligned)
        coeff_right = _orthonormal(rng, k, spec.n_aligned)
        aligned_left = base_sub.left_basis @ coeff_left
        aligned_right = base_sub.right_basis @ coeff_right
    if spec.n_orthogonal:
        ortho_left = _complement_vectors(rng, base_sub.left_basis, spec.n_orthogonal)
        ortho_right = _complement_vectors(rng, base_sub.right_basis, spec.n_orthogonal)

    # Interleave the two groups so sigma magnitude carries no label signal.
    ia = io = 0
    for idx in range(spec.n_aligned + spec.n_orthogonal):
        take_aligned = (idx % 2 == 0 and ia < spec.n_aligned) or io >= spec.n_orthogonal
        if take_aligned:
            lefts.append(aligned_left[:, ia])
            rights.append(aligned_right[:, ia])
            labels.append(True)
            ia += 1
        else:
            lefts.append(ortho_left[:, io])
            rights.append(ortho_right[:, io])
            labels.append(False)
            io += 1

    count = len(labels)
    if spec.sigma_profile is not None:
        if len(spec.sigma_profile) < count:
            raise ConfigError(
                f"sigma_profile has {len(spec.sigma_profile)} entries, need {count}"
            )
        sigmas = list(spec.sigma_profile[:count])
    else:
        sigmas = [2.0 * 0.9 ** i for i in range(count)]

    channels = [
        SpectralChannel(sigma=float(s), left=u, right=v)
        for s, u, v in zip(sigmas, lefts, rights)
    ]
    order = sorted(range(count), key=lambda i: -channels[i].sigma)
    return [channels[i] for i in order], [labels[i] for i in order]


def _complement_vectors(rng, basis: np.ndarray, count: int) -> np.ndarray:
    """Orthonormal vectors in the orthogonal complement of span(basis)."""
    dim = basis.shape[0]
    gaussian = rng.standard_normal((dim, count))
    residual = gaussian - basis @ (basis.T @ gaussian)
    q, r = np.linalg.qr(residual)
    signs = np.where(np.diagonal(r) >= 0.0, 1.0, -1.0)
    q = q * signs
    # One more projection pass keeps the complement exact to rounding.
    q = q - basis @ (basis.T @ q)
    q /= np.linalg.norm(q, axis=0)
    return q


def monte_carlo_null(
    m: int, n: int, k: int, trials: int, seed: int, chunk: int = 65536
) -> float:
    """Empirical mean anchoring of uniform random unit-vector pairs.

    Vectors are drawn by normalizing standard Gaussians (rotation invariant,
    hence sphere uniform) and scored against a seeded random K-dimensional
    subspace pair.  The analytic expectation is k^2 / (m * n).
    """
    if not (1 <= k <= min(m, n)):
        raise DimensionMismatch(f"k={k} outside [1, min({m}, {n})]")
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}")
    basis_rng = np.random.default_rng([seed, 2])
    left = _orthonormal(basis_rng, m, k)
    right = _orthonormal(basis_rng, n, k)
    # Separate streams per side make the sample set independent of chunking.
    left_rng = np.random.default_rng([seed, 3])
    right_rng = np.random.default_rng([seed, 4])

    total = 0.0
    done = 0
    while done < trials:
        batch = min(chunk, trials - done)
        align_left = _alignment_samples(left_rng, left, batch, m, k)
        align_right = _alignment_samples(right_rng, right, batch, n, k)
        total += float(np.sum(align_left * align_right))
        done += batch
    return total / trials


def _alignment_samples(rng, basis: np.ndarray, batch: int, dim: int, k: int) -> np.ndarray:
    vecs = rng.standard_normal((batch, dim))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    if k == dim:
        # Full-space projector is the identity; every unit vector scores 1.
        return np.ones(batch)
    proj = vecs @ basis
    return np.clip(np.sum(proj * proj, axis=1), 0.0, 1.0)


def run_ablation(spec: PlantSpec, cfg: GateConfig | None = None) -> SeparationResult:
    """Build a planted instance, hard-gate it, and compare against the labels.

    The gate config contributes tau_energy and the zero-sigma cutoff; the
    split itself is always the hard threshold at the layer's null baseline,
    which is what a directional ablation means.
    """
    cfg = cfg or GateConfig(mode="hard")
    base = gen_base(spec)
    subspace = build_subspace(base, cfg.tau_energy)
    planted, labels = gen_planted_lora(subspace, spec)
    delta = reconstruct(planted, shape=(spec.m, spec.n))

    channels = spectral_channels(delta, cfg.zero_sigma_tol)
    if len(channels) != len(labels):
        raise DimensionMismatch(
            f"update SVD recovered {len(channels)} channels for {len(labels)} plants"
        )

    kept_flags = []
    scores = []
    for ch in channels:
        score = anchoring_score(ch, subspace)
        ch.gate = gate_hard(score, subspace.a_null)
        scores.append(score)
        kept_flags.append(ch.gate == 1.0)

    tp = sum(1 for kept, lab in zip(kept_flags, labels) if kept and lab)
    fp = sum(1 for kept, lab in zip(kept_flags, labels) if kept and not lab)
    fn = sum(1 for kept, lab in zip(kept_flags, labels) if not kept and lab)
    removed = sum(ch.sigma ** 2 for ch, kept in zip(channels, kept_flags) if not kept)
    ortho_energy = sum(ch.sigma ** 2 for ch, lab in zip(channels, labels) if not lab)

    return SeparationResult(
        scores_aligned=[s for s, lab in zip(scores, labels) if lab],
        scores_orthogonal=[s for s, lab in zip(scores, labels) if not lab],
        a_null=subspace.a_null,
        precision=tp / (tp + fp) if tp + fp else 1.0,
        recall=tp / (tp + fn) if tp + fn else 1.0,
        removed_energy=removed,
        planted_orthogonal_energy=ortho_energy,
    )
