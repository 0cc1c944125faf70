"""Evaluation metrics: DTW, ARE, latent Frechet distance and per-chunk drift curves."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import worldsim as ws
from .errors import ContractViolation, DegenerateGeometryError


def dtw_matrix(a, b) -> np.ndarray:
    """Accumulated-cost table D where D[i, j] aligns a[:i+1] with b[:j+1]."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0 or len(a) == 0 or len(b) == 0:
        raise ContractViolation("dtw needs two nonempty sequences")
    cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        row, prev = acc[i], acc[i - 1]
        c = cost[i - 1]
        for j in range(1, m + 1):
            row[j] = c[j - 1] + min(prev[j - 1], prev[j], row[j - 1])
    return acc[1:, 1:]


def dtw(a, b) -> float:
    """Optimal cumulative Euclidean cost over monotone alignments."""
    return float(dtw_matrix(a, b)[-1, -1])


def are(yaw_pred, yaw_gt) -> float:
    """Mean absolute wrapped yaw difference in degrees."""
    yaw_pred = np.asarray(yaw_pred, dtype=np.float64)
    yaw_gt = np.asarray(yaw_gt, dtype=np.float64)
    if yaw_pred.shape != yaw_gt.shape:
        raise ContractViolation(f"are: length mismatch {yaw_pred.shape} vs {yaw_gt.shape}")
    if yaw_pred.size == 0:
        return 0.0
    return float(np.degrees(np.mean(np.abs(ws.wrap_angle(yaw_pred - yaw_gt)))))


@dataclass(frozen=True)
class GaussianSummary:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def fit(cls, samples) -> "GaussianSummary":
        x = np.asarray(samples, dtype=np.float64)
        x = x.reshape(-1, x.shape[-1])
        if len(x) == 0:
            raise ContractViolation("cannot fit a Gaussian to zero samples")
        mu = x.mean(axis=0)
        if len(x) < 2:
            return cls(mu, np.zeros((x.shape[1], x.shape[1])))
        cov = np.cov(x, rowvar=False, ddof=1).reshape(x.shape[1], x.shape[1])
        return cls(mu, 0.5 * (cov + cov.T))


def _psd_sqrt(mat: np.ndarray, what: str) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (mat + mat.T))
    tol = 1e-8 * max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -tol:
        raise ContractViolation(f"{what} is not positive semi-definite (min eigenvalue {vals.min():.3g})")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def latent_frechet(g1: GaussianSummary, g2: GaussianSummary) -> float:
    """||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)."""
    s1 = np.asarray(g1.cov, dtype=np.float64)
    s2 = np.asarray(g2.cov, dtype=np.float64)
    r1 = _psd_sqrt(s1, "first covariance")
    _psd_sqrt(s2, "second covariance")
    cross = _psd_sqrt(r1 @ s2 @ r1, "cross term")
    diff = np.asarray(g1.mean, dtype=np.float64) - np.asarray(g2.mean, dtype=np.float64)
    value = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(cross))
    return max(value, 0.0)


@dataclass
class DriftReport:
    chunk: np.ndarray
    lfd: np.ndarray
    are_deg: np.ndarray
    dtw: np.ndarray
    pose_failures: int = 0
    cumulative: bool = True
    notes: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.chunk)

    def rows(self):
        for row in zip(self.chunk, self.lfd, self.are_deg, self.dtw):
            yield int(row[0]), float(row[1]), float(row[2]), float(row[3])

    @property
    def final_lfd(self) -> float:
        return float(self.lfd[-1])

    def slope(self) -> float:
        """Least-squares slope of the Frechet curve per chunk."""
        if len(self.chunk) < 2:
            return 0.0
        return float(np.polyfit(self.chunk.astype(float), self.lfd, 1)[0])


def _poses(latents, scene, anchor_ids):
    """Recovered (x, y, yaw) per frame; NaN rows where recovery fails."""
    out = np.full((len(latents), 3), np.nan)
    failures = 0
    for i, z in enumerate(latents):
        try:
            p = ws.recover_pose(z, scene, anchor_ids)
        except DegenerateGeometryError:
            failures += 1
            continue
        out[i] = (p.x, p.y, p.yaw)
    return out, failures


def drift_report(generated, gt, scenes, anchor_ids, K: int, cumulative: bool = True) -> DriftReport:
    """Per-chunk latent Frechet (pooled over clips), ARE and DTW against ground truth.

    ``generated`` and ``gt`` are (clips, N*K, d_z) or a single (N*K, d_z) sequence
    aligned frame for frame. ARE and DTW are averaged over clips; frames whose
    pose cannot be recovered are skipped and counted.
    """
    generated = np.asarray(generated)
    gt = np.asarray(gt)
    if generated.ndim == 2:
        generated, gt = generated[None], gt[None]
        scenes, anchor_ids = [scenes], [anchor_ids]
    if generated.shape != gt.shape:
        raise ContractViolation(f"generated {generated.shape} vs ground truth {gt.shape}")
    if K < 1 or generated.shape[1] % K:
        raise ContractViolation(f"{generated.shape[1]} frames do not split into chunks of {K}")
    n_chunks = generated.shape[1] // K
    failures = 0
    recovered = []
    for g, r, scene, ids in zip(generated, gt, scenes, anchor_ids):
        pg, fg = _poses(g, scene, ids)
        pr, fr = _poses(r, scene, ids)
        failures += fg + fr
        recovered.append((pg, pr))

    lfd = np.zeros(n_chunks)
    are_deg = np.zeros(n_chunks)
    dtw_val = np.zeros(n_chunks)
    for n in range(1, n_chunks + 1):
        lo = 0 if cumulative else (n - 1) * K
        hi = n * K
        lfd[n - 1] = latent_frechet(GaussianSummary.fit(generated[:, lo:hi]),
                                    GaussianSummary.fit(gt[:, lo:hi]))
        a_vals, d_vals = [], []
        for pg, pr in recovered:
            ok = ~(np.isnan(pg[lo:hi, 0]) | np.isnan(pr[lo:hi, 0]))
            if not ok.any():
                continue
            sg, sr = pg[lo:hi][ok], pr[lo:hi][ok]
            a_vals.append(are(sg[:, 2], sr[:, 2]))
            d_vals.append(dtw(sg[:, :2], sr[:, :2]))
        are_deg[n - 1] = np.mean(a_vals) if a_vals else np.nan
        dtw_val[n - 1] = np.mean(d_vals) if d_vals else np.nan
    return DriftReport(np.arange(1, n_chunks + 1), lfd, are_deg, dtw_val, failures, cumulative)
