"""Laplacian eigenbasis, graph Fourier transform and equal-energy banding."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, DataError
from .graph import SparseSymmetricMatrix

log = logging.getLogger(__name__)

DENSE_LIMIT = 4096


@dataclass(frozen=True)
class Spectrum:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    truncated: bool = False
    residual_projector_present: bool = False

    @property
    def n_nodes(self):
        return self.eigenvectors.shape[0]

    @property
    def n_modes(self):
        return len(self.eigenvalues)


@dataclass(frozen=True)
class BandPartition:
    M: int
    boundaries: np.ndarray
    band_energies: np.ndarray
    residual: bool = False
    equal_count_fallback: bool = False

    def modes(self, m: int) -> np.ndarray:
        """Mode indices of band ``m`` (1-based)."""
        if not 1 <= m <= self.M:
            raise IndexError(f"band {m} outside 1..{self.M}")
        return np.arange(self.boundaries[m - 1], self.boundaries[m])

    def to_json(self):
        return {"M": self.M, "boundaries": [int(b) for b in self.boundaries],
                "band_energies": [float(e) for e in self.band_energies],
                "residual": self.residual, "equal_count_fallback": self.equal_count_fallback}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["M"], np.asarray(obj["boundaries"], dtype=np.int64),
                   np.asarray(obj["band_energies"], dtype=np.float64),
                   obj.get("residual", False), obj.get("equal_count_fallback", False))


@dataclass
class BandStack:
    data: np.ndarray
    band_axis_map: list = field(default_factory=list)

    @property
    def B(self):
        return self.data.shape[1]

    def index(self, modality, band):
        return self.band_axis_map.index((modality, band))

    def modality_bands(self, modality):
        return [b for b, (c, _) in enumerate(self.band_axis_map) if c == modality]

    @property
    def modalities(self):
        seen = []
        for c, _ in self.band_axis_map:
            if c not in seen:
                seen.append(c)
        return seen


def fix_signs(U: np.ndarray) -> np.ndarray:
    """Flip columns so the largest-magnitude entry of each is positive."""
    if U.size == 0:
        return U
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs


def lanczos_smallest(matvec, n, k, tol=1e-8, max_iter=None, seed=0, check_every=None):
    """Smallest ``k`` eigenpairs of a symmetric operator.

    Krylov expansion with full (two-pass) reorthogonalization. The projected
    matrix is formed explicitly, so a random restart after breakdown or after
    apparent convergence stays a valid Rayleigh-Ritz subspace; the extra
    restart after convergence catches eigenvalues of multiplicity > 1 that a
    single Krylov sequence cannot see.
    """
    if not 1 <= k <= n:
        raise DataError(f"cannot extract {k} eigenpairs from a {n}x{n} operator")
    max_iter = min(n, max_iter if max_iter is not None else 10 * k)
    max_iter = max(max_iter, k)
    check_every = check_every or max(4, k // 2)
    rng = np.random.default_rng(seed)

    Q = np.zeros((n, max_iter))
    AQ = np.zeros((n, max_iter))
    H = np.zeros((max_iter, max_iter))
    m = 0
    v = rng.standard_normal(n)
    verified_at = None
    prev_vals = None
    theta = resid = None

    def orthogonalize(x):
        for _ in range(2):
            x = x - Q[:, :m] @ (Q[:, :m].T @ x)
        return x

    while m < max_iter:
        scale = np.linalg.norm(v)
        v = orthogonalize(v)
        if np.linalg.norm(v) <= 1e-10 * max(scale, 1.0):
            # invariant subspace reached: continue from a fresh direction
            v = orthogonalize(rng.standard_normal(n))
        q = v / np.linalg.norm(v)
        Q[:, m] = q
        w = matvec(q)
        AQ[:, m] = w
        col = Q[:, : m + 1].T @ w
        H[: m + 1, m] = col
        H[m, : m + 1] = col
        m += 1
        v = w

        if m >= k and (m % check_every == 0 or m == max_iter):
            Hm = 0.5 * (H[:m, :m] + H[:m, :m].T)
            vals, S = np.linalg.eigh(Hm)
            Y = Q[:, :m] @ S[:, :k]
            R = AQ[:, :m] @ S[:, :k] - Y * vals[:k]
            resid = np.linalg.norm(R, axis=0)
            theta = vals[:k]
            if m == n:
                break
            if np.all(resid <= tol):
                if verified_at is not None and np.allclose(theta, prev_vals, atol=tol, rtol=0):
                    break
                # converged once; probe the orthogonal complement for missed copies
                verified_at = m
                prev_vals = theta.copy()
                v = rng.standard_normal(n)
            else:
                verified_at = None
    else:
        if resid is None or np.any(resid > tol):
            raise ConvergenceError(
                f"Lanczos did not converge in {max_iter} iterations "
                f"(max residual {np.max(resid) if resid is not None else float('nan'):.3e})",
                residuals=resid)

    Hm = 0.5 * (H[:m, :m] + H[:m, :m].T)
    vals, S = np.linalg.eigh(Hm)
    U = Q[:, :m] @ S[:, :k]
    return vals[:k], U


def eigendecompose(L: SparseSymmetricMatrix, mode="full", k=None, dense_limit=DENSE_LIMIT,
                   tol=1e-8, max_iter=None, seed=0) -> Spectrum:
    """Eigenpairs of the Laplacian in ascending eigenvalue order.

    ``mode="full"`` uses a dense symmetric solver (``N <= dense_limit``);
    ``mode="truncated"`` returns the ``k`` smallest pairs and marks the
    spectrum so the highest band absorbs the unresolved remainder.
    """
    n = L.n
    if mode == "full":
        if n > dense_limit:
            raise DataError(f"{n} nodes exceed dense_limit={dense_limit}; "
                            f"use mode='truncated' with k < {n}")
        vals, U = np.linalg.eigh(L.to_dense())
        return Spectrum(vals, fix_signs(U), truncated=False)
    if mode != "truncated":
        raise ValueError(f"unknown eigendecomposition mode {mode!r}")
    k = int(k if k is not None else 256)
    vals, U = lanczos_smallest(L.matmat, n, k, tol=tol, max_iter=max_iter, seed=seed)
    truncated = k < n
    return Spectrum(vals, fix_signs(U), truncated=truncated, residual_projector_present=truncated)


def _check_rows(spectrum, X, what):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != spectrum.n_nodes:
        raise DataError(f"{what}: signal has shape {X.shape}, expected ({spectrum.n_nodes}, d)")
    return X


def gft_forward(spectrum: Spectrum, X) -> np.ndarray:
    X = _check_rows(spectrum, X, "gft_forward")
    return spectrum.eigenvectors.T @ X


def gft_inverse(spectrum: Spectrum, Xhat) -> np.ndarray:
    Xhat = np.asarray(Xhat, dtype=np.float64)
    if Xhat.shape[0] != spectrum.n_modes:
        raise DataError(f"gft_inverse: {Xhat.shape[0]} coefficient rows for {spectrum.n_modes} modes")
    return spectrum.eigenvectors @ Xhat


def band_energies(Xhat) -> np.ndarray:
    Xhat = np.asarray(Xhat, dtype=np.float64)
    return np.einsum("kd,kd->k", Xhat, Xhat)


def partition_bands(energies, M: int, residual=False, residual_energy=0.0) -> BandPartition:
    """Split modes (ascending eigenvalue) into ``M`` contiguous, near equal-energy bands.

    Band ``m`` closes at the first mode where the cumulative energy reaches
    ``m/M`` of the total, while leaving at least one mode for every band
    still to come. ``residual_energy`` is mass outside the retained modes; it
    belongs to the top band.
    """
    E = np.asarray(energies, dtype=np.float64)
    K = len(E)
    if M < 2:
        raise DataError(f"need at least 2 bands, got M={M}")
    if K < M:
        raise DataError(f"{K} modes cannot fill {M} bands")
    total = float(E.sum()) + (float(residual_energy) if residual else 0.0)
    bounds = np.zeros(M + 1, dtype=np.int64)
    bounds[M] = K
    fallback = total <= 0.0
    if fallback:
        log.warning("all-zero spectral energy; using equal-count bands")
        bounds[1:M] = [(m * K) // M for m in range(1, M)]
    else:
        cum = np.cumsum(E)
        slack = 1e-12 * total
        for m in range(1, M):
            target = m * total / M
            hit = int(np.searchsorted(cum, target - slack, side="left")) + 1
            bounds[m] = min(max(hit, bounds[m - 1] + 1), K - (M - m))
    band_e = np.array([E[bounds[m]:bounds[m + 1]].sum() for m in range(M)])
    if residual:
        band_e[-1] += residual_energy
    return BandPartition(M, bounds, band_e, residual=bool(residual), equal_count_fallback=fallback)


def reconstruct_band(spectrum: Spectrum, Xhat, partition: BandPartition, m: int, X=None) -> np.ndarray:
    """Band-limited signal ``sum_{k in F_m} u_k xhat_k^T`` (1-based ``m``).

    In truncated mode the top band also carries ``(I - U U^T) X``, which needs
    the original signal ``X``.
    """
    idx = partition.modes(m)
    U = spectrum.eigenvectors
    out = U[:, idx] @ np.asarray(Xhat)[idx]
    if spectrum.truncated and partition.residual and m == partition.M:
        if X is None:
            raise DataError("truncated spectrum: the top band needs the original signal X")
        out = out + (X - U @ np.asarray(Xhat))
    return out


def band_components(spectrum: Spectrum, X, partition: BandPartition) -> np.ndarray:
    """All bands of ``X`` as an ``M x N x d`` array."""
    X = _check_rows(spectrum, X, "band_components")
    Xhat = gft_forward(spectrum, X)
    return np.stack([reconstruct_band(spectrum, Xhat, partition, m, X=X)
                     for m in range(1, partition.M + 1)])


def signal_partition(spectrum: Spectrum, X, M: int) -> BandPartition:
    X = _check_rows(spectrum, X, "signal_partition")
    Xhat = gft_forward(spectrum, X)
    E = band_energies(Xhat)
    resid = 0.0
    if spectrum.truncated:
        resid = max(float(np.sum(X * X)) - float(E.sum()), 0.0)
    return partition_bands(E, M, residual=spectrum.truncated, residual_energy=resid)


def fit_partitions(signals: dict, spectrum: Spectrum, M: int, shared=False) -> dict:
    """Equal-energy partitions per modality, or one partition of the pooled energies."""
    if not shared:
        return {c: signal_partition(spectrum, X, M) for c, X in signals.items()}
    total = None
    resid = 0.0
    for X in signals.values():
        E = band_energies(gft_forward(spectrum, X))
        total = E if total is None else total + E
        if spectrum.truncated:
            resid += max(float(np.sum(np.square(X))) - float(E.sum()), 0.0)
    part = partition_bands(total, M, residual=spectrum.truncated, residual_energy=resid)
    return {c: part for c in signals}


def build_band_stack(signals: dict, spectrum: Spectrum, M: int, shared=False, partitions=None):
    """Decompose each modality into ``M`` bands and stack them along one axis.

    Returns ``(BandStack, {modality: BandPartition})``. The stacked axis has
    length ``M * len(signals)`` ordered modality-major. Pass ``partitions`` to
    reuse previously computed boundaries.
    """
    if not signals:
        raise DataError("no signals to decompose")
    shapes = {c: np.shape(X) for c, X in signals.items()}
    if len({s for s in shapes.values()}) != 1:
        raise DataError(f"signals have inconsistent shapes: {shapes}")
    if partitions is None:
        partitions = fit_partitions(signals, spectrum, M, shared)
    blocks, axis_map = [], []
    for c, X in signals.items():
        comps = band_components(spectrum, X, partitions[c])
        blocks.append(comps)
        axis_map.extend((c, m) for m in range(1, M + 1))
    data = np.concatenate(blocks, axis=0).transpose(1, 0, 2).copy()
    return BandStack(data, axis_map), partitions


def band_report(spectrum: Spectrum, signals: dict, partitions: dict):
    """Rows of (modality, band, n_modes, eigenvalue_lo, eigenvalue_hi, energy, energy_fraction)."""
    rows = []
    lam = spectrum.eigenvalues
    for c, part in partitions.items():
        X = np.asarray(signals[c], dtype=np.float64)
        total = float(np.sum(X * X)) if spectrum.truncated else float(part.band_energies.sum())
        for m in range(1, part.M + 1):
            idx = part.modes(m)
            hi = float(lam[idx[-1]])
            if spectrum.truncated and part.residual and m == part.M:
                hi = 2.0  # residual band reaches the top of the spectrum
            e = float(part.band_energies[m - 1])
            rows.append((c, m, len(idx), float(lam[idx[0]]), hi, e, e / total if total > 0 else 0.0))
    return rows
