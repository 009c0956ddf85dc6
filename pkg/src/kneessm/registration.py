"""Dense correspondence between point sets.

Coarse moment-based alignment, rigid and non-rigid Coherent Point Drift (EM
over an isotropic Gaussian mixture with a uniform outlier component) and
generalized Procrustes analysis of corresponded cohorts.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_configs, check_points
from .pointset import PointSet

MAX_NONRIGID_POINTS = 20_000


class RegistrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimilarityTransform:
    """``x -> scale * R @ x + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must be a proper orthonormal matrix")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "scale", float(self.scale))

    def apply(self, points) -> np.ndarray:
        return self.scale * check_points(points) @ self.rotation.T + self.translation

    __call__ = apply

    def inverse(self) -> "SimilarityTransform":
        Rt = self.rotation.T
        return SimilarityTransform(Rt, -(Rt @ self.translation) / self.scale, 1.0 / self.scale)

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """``self`` after ``other``."""
        return SimilarityTransform(
            self.rotation @ other.rotation,
            self.scale * self.rotation @ other.translation + self.translation,
            self.scale * other.scale,
        )

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation.tolist(),
            "translation_mm": self.translation.tolist(),
            "scale": self.scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimilarityTransform":
        return cls(np.array(d["rotation"]), np.array(d["translation_mm"]), d["scale"])


def save_transform(t: SimilarityTransform, path) -> None:
    Path(path).write_text(json.dumps(t.to_dict(), indent=1))


def load_transform(path) -> SimilarityTransform:
    return SimilarityTransform.from_dict(json.loads(Path(path).read_text()))


def rotation_angle(R) -> float:
    """Geodesic angle of a rotation matrix in radians."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def _proper(R):
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def kabsch(A, B, weights=None) -> np.ndarray:
    """Rotation R minimizing ``sum_k w_k |R a_k - b_k|^2`` for centered A, B."""
    H = A.T @ (B if weights is None else B * weights[:, None])
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    return Vt.T @ np.diag([1.0, 1.0, d]) @ U.T


# -- coarse alignment ---------------------------------------------------------

def _moments(X):
    c = X.mean(axis=0)
    Xc = X - c
    rms = np.sqrt((Xc ** 2).sum() / len(X))
    evals, evecs = np.linalg.eigh(Xc.T @ Xc / len(X))
    if evals[0] <= 1e-12 * max(evals[-1], 1e-300):
        raise RegistrationError("degenerate point set: covariance rank < 3")
    order = np.argsort(evals)[::-1]
    return c, rms, evecs[:, order]


class CoarseAligner(BaseEstimator):
    """Similarity from centroids, RMS centroid size and principal axes.

    ``fit(sample, template)`` estimates the map of the sample onto the
    template. The sign of each principal axis is ambiguous; among the four
    sign patterns giving a proper rotation, the one with the smallest mean
    nearest-neighbour distance to the template is kept.
    """

    def fit(self, X, y):
        X = check_points(X, "sample", 4)
        Y = check_points(y, "template", 4)
        cs, ss, Vs = _moments(X)
        ct, st, Vt = _moments(Y)
        scale = st / ss
        tree = cKDTree(Y)
        best = None
        for signs in itertools.product((1.0, -1.0), repeat=3):
            D = np.diag(signs)
            R = Vt @ D @ Vs.T
            if np.linalg.det(R) < 0:
                continue
            R = _proper(R)
            moved = scale * (X - cs) @ R.T + ct
            err = tree.query(moved)[0].mean()
            if best is None or err < best[0] - 1e-12 * (1.0 + best[0]):
                best = (err, R)
        R = best[1]
        self.transform_ = SimilarityTransform(R, ct - scale * R @ cs, scale)
        self.agreement_ = float(best[0])
        return self

    def transform(self, X):
        check_is_fitted(self)
        return self.transform_.apply(X)


def coarse_align(sample, template):
    """Return (SimilarityTransform, aligned sample PointSet)."""
    est = CoarseAligner().fit(sample, template)
    return est.transform_, PointSet(est.transform(sample))


# -- coherent point drift -----------------------------------------------------

@dataclass(frozen=True)
class CpdParams:
    w: float = 0.1
    max_iterations: int = 150
    tolerance: float = 1e-5
    beta: float = 2.0
    lamb: float = 3.0
    with_scale: bool = False

    def __post_init__(self):
        if not 0.0 <= self.w < 1.0:
            raise ValueError("w must lie in [0, 1)")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not self.lamb > 0:
            raise ValueError("lambda must be positive")


def _sqdist(X, T, exact: bool = True, chunk: int = 256):
    """Squared distances, shape (len(T), len(X)).

    ``exact`` uses explicit differences; the expanded |t|^2 - 2 t.x + |x|^2
    is faster but loses the digits that matter once sigma^2 approaches the
    residual of a near-exact fit.
    """
    if not exact:
        return np.maximum((T ** 2).sum(1)[:, None] - 2.0 * T @ X.T + (X ** 2).sum(1)[None, :], 0.0)
    out = np.empty((len(T), len(X)))
    for s in range(0, len(T), chunk):
        diff = T[s:s + chunk, None, :] - X[None, :, :]
        out[s:s + chunk] = np.einsum("mnd,mnd->mn", diff, diff)
    return out


# fits whose RMS residual drops below this fraction of the data radius are exact
EXACT_FIT = 1e-10
# below this sigma^2 (relative to the squared data radius) distances are computed exactly
_FAST_SQDIST = 1e-6


class _CpdBase(BaseEstimator):
    def _distances(self, X, T, sigma2, radius2):
        return _sqdist(X, T, exact=sigma2 < _FAST_SQDIST * radius2)

    def _e_step(self, d2, sigma2):
        """Posterior P (M x N) and the mixture log-likelihood of the fixed set."""
        M, N = d2.shape
        D = 3
        if not np.isfinite(sigma2) or sigma2 <= 0:
            raise RegistrationError(f"sigma^2 underflow ({sigma2!r}) before convergence")
        logk = -d2 / (2.0 * sigma2)
        if self.w > 0:
            logc = 0.5 * D * np.log(2.0 * np.pi * sigma2) + np.log(self.w / (1.0 - self.w)) + np.log(M / N)
            logden = np.logaddexp(logsumexp(logk, axis=0), logc)
        else:
            logden = logsumexp(logk, axis=0)
        P = np.exp(logk - logden[None, :])
        ll = float(np.sum(np.log((1.0 - self.w) / M) - 0.5 * D * np.log(2.0 * np.pi * sigma2) + logden))
        return P, ll

    def _converged(self, history):
        if len(history) < 2:
            return False
        return abs(history[-1] - history[-2]) <= self.tol * abs(history[-1])


class RigidCPD(_CpdBase, TransformerMixin):
    """Rigid Coherent Point Drift of a moving set onto a fixed set.

    Parameters
    ----------
    w : float, default=0.1
        Weight of the uniform outlier component, in [0, 1).
    max_iter : int, default=150
    tol : float, default=1e-5
        Relative change of the log-likelihood that ends the iteration.
    with_scale : bool, default=False
        Estimate an isotropic scale in addition to rotation and translation.

    Attributes
    ----------
    transform_ : SimilarityTransform
    sigma2_ : float
    log_likelihood_ : list of float
        Mixture log-likelihood at every E-step; non-decreasing.
    n_iter_ : int
    stop_reason_ : {"tol", "exact", "max_iter"}
    """

    def __init__(self, w=0.1, max_iter=150, tol=1e-5, with_scale=False):
        self.w = w
        self.max_iter = max_iter
        self.tol = tol
        self.with_scale = with_scale

    def fit(self, X, y):
        """Register moving ``X`` onto fixed ``y``."""
        CpdParams(w=self.w, max_iterations=self.max_iter, tolerance=self.tol)
        Y = check_points(X, "moving")
        Xf = check_points(y, "fixed")
        N, D = Xf.shape
        M = len(Y)
        R, t, s = np.eye(D), np.zeros(D), 1.0
        radius2 = float(((Xf - Xf.mean(0)) ** 2).sum(1).mean())
        d2 = _sqdist(Xf, Y)
        sigma2 = d2.sum() / (D * M * N)
        if sigma2 == 0:
            self._finish(R, t, s, 0.0, [], 0, "exact")
            return self
        floor = EXACT_FIT ** 2 * radius2 / D
        history = []
        status = "max_iter"
        for it in range(1, self.max_iter + 1):
            P, ll = self._e_step(d2, sigma2)
            history.append(ll)
            if self._converged(history):
                status = "tol"
                break
            P1, Pt1 = P.sum(1), P.sum(0)
            Np = P1.sum()
            if Np <= 1e-300:
                raise RegistrationError("all points assigned to the outlier component")
            mu_x = Xf.T @ Pt1 / Np
            mu_y = Y.T @ P1 / Np
            Xh, Yh = Xf - mu_x, Y - mu_y
            A = Xh.T @ P.T @ Yh
            U, _, Vt = np.linalg.svd(A)
            C = np.diag([1.0] * (D - 1) + [np.linalg.det(U @ Vt)])
            R = U @ C @ Vt
            if self.with_scale:
                s = np.trace(A.T @ R) / np.sum(P1 * (Yh ** 2).sum(1))
            t = mu_x - s * R @ mu_y
            T = s * Y @ R.T + t
            d2 = self._distances(Xf, T, sigma2, radius2)
            sigma2 = float(np.sum(P * d2) / (Np * D))
            if not np.isfinite(sigma2):
                raise RegistrationError("sigma^2 is not finite")
            if sigma2 <= floor:
                status = "exact"
                break
            if sigma2 < _FAST_SQDIST * radius2:
                d2 = _sqdist(Xf, T)
        self._finish(R, t, s, sigma2, history, it, status)
        return self

    def _finish(self, R, t, s, sigma2, history, n_iter, status):
        self.transform_ = SimilarityTransform(_proper(R), t, s)
        self.sigma2_ = sigma2
        self.log_likelihood_ = history
        self.n_iter_ = n_iter
        self.stop_reason_ = status

    def transform(self, X):
        check_is_fitted(self)
        return self.transform_.apply(X)


class AffineCPD(_CpdBase, TransformerMixin):
    """Affine Coherent Point Drift: ``T(y) = B y + t`` with a general 3x3 ``B``.

    Used between the rigid and non-rigid stages so that anisotropic scaling
    is absorbed before the smoothness prior acts, which would otherwise shrink
    it and let points slide along the surface.

    Attributes
    ----------
    B_, t_ : ndarray
    sigma2_, log_likelihood_, n_iter_, stop_reason_
        As for :class:`RigidCPD`.
    """

    def __init__(self, w=0.1, max_iter=150, tol=1e-5):
        self.w = w
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y):
        CpdParams(w=self.w, max_iterations=self.max_iter, tolerance=self.tol)
        Y = check_points(X, "moving", 4)
        Xf = check_points(y, "fixed")
        N, D = Xf.shape
        M = len(Y)
        B, t = np.eye(D), np.zeros(D)
        radius2 = float(((Xf - Xf.mean(0)) ** 2).sum(1).mean())
        d2 = _sqdist(Xf, Y)
        sigma2 = d2.sum() / (D * M * N)
        history = []
        status = "max_iter" if sigma2 > 0 else "exact"
        floor = EXACT_FIT ** 2 * radius2 / D
        it = 0
        for it in range(1, self.max_iter + 1 if sigma2 > 0 else 1):
            P, ll = self._e_step(d2, sigma2)
            history.append(ll)
            if self._converged(history):
                status = "tol"
                break
            P1, Pt1 = P.sum(1), P.sum(0)
            Np = P1.sum()
            if Np <= 1e-300:
                raise RegistrationError("all points assigned to the outlier component")
            mu_x = Xf.T @ Pt1 / Np
            mu_y = Y.T @ P1 / Np
            Xh, Yh = Xf - mu_x, Y - mu_y
            A = Xh.T @ P.T @ Yh
            YPY = (Yh * P1[:, None]).T @ Yh
            try:
                B = np.linalg.solve(YPY.T, A.T).T
            except np.linalg.LinAlgError as exc:
                raise RegistrationError(
                    f"singular affine M-step (condition number {np.linalg.cond(YPY):.3g})"
                ) from exc
            t = mu_x - B @ mu_y
            T = Y @ B.T + t
            d2 = self._distances(Xf, T, sigma2, radius2)
            sigma2 = float(np.sum(P * d2) / (Np * D))
            if not np.isfinite(sigma2):
                raise RegistrationError("sigma^2 is not finite")
            if sigma2 <= floor:
                status = "exact"
                break
            if sigma2 < _FAST_SQDIST * radius2:
                d2 = _sqdist(Xf, T)
        if np.linalg.det(B) <= 0:
            raise RegistrationError("affine registration inverted the moving set")
        self.B_, self.t_ = B, t
        self.sigma2_ = sigma2
        self.log_likelihood_ = history
        self.n_iter_ = it
        self.stop_reason_ = status
        return self

    def transform(self, X):
        check_is_fitted(self)
        return check_points(X) @ self.B_.T + self.t_


class NonRigidCPD(_CpdBase, TransformerMixin):
    """Non-rigid Coherent Point Drift with a Gaussian motion-coherence prior.

    The displacement of moving point ``y_m`` is ``(G W)_m`` with
    ``G_ij = exp(-|y_i - y_j|^2 / (2 beta^2))``. Both sets are centered and
    divided by the RMS radius of the fixed set before fitting, so ``beta`` is
    expressed in units of that radius.

    Once the penalized likelihood stops improving (the dense system becomes
    too ill-conditioned to honour the EM ascent, typically at sub-micron
    residuals) the best state seen so far is kept and iteration ends with
    ``stop_reason_ == "stalled"``.

    Parameters
    ----------
    w : float, default=0.1
    beta : float, default=2.0
    lamb : float, default=3.0
        Regularization weight of the coherence prior.
    max_iter : int, default=150
    tol : float, default=1e-5
    """

    def __init__(self, w=0.1, beta=2.0, lamb=3.0, max_iter=150, tol=1e-5):
        self.w = w
        self.beta = beta
        self.lamb = lamb
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y):
        """Deform moving ``X`` toward fixed ``y``."""
        CpdParams(w=self.w, beta=self.beta, lamb=self.lamb, max_iterations=self.max_iter, tolerance=self.tol)
        Y0 = check_points(X, "moving")
        X0 = check_points(y, "fixed")
        if len(Y0) > MAX_NONRIGID_POINTS:
            raise RegistrationError(
                f"{len(Y0)} moving points exceed the dense-kernel limit of {MAX_NONRIGID_POINTS}"
            )
        self.fixed_center_ = X0.mean(0)
        self.moving_center_ = Y0.mean(0)
        self.scale_ = float(np.sqrt(((X0 - self.fixed_center_) ** 2).sum(1).mean())) or 1.0
        Xf = (X0 - self.fixed_center_) / self.scale_
        Y = (Y0 - self.moving_center_) / self.scale_
        N, D = Xf.shape
        M = len(Y)
        G = np.exp(-_sqdist(Y, Y, exact=False) / (2.0 * self.beta ** 2))
        W = np.zeros((M, D))
        T = Y.copy()
        d2 = _sqdist(Xf, T)
        sigma2 = d2.sum() / (D * M * N)
        history = []
        status = "max_iter"
        it = 0
        best = (W, T, sigma2)
        if sigma2 > 0:
            floor = EXACT_FIT ** 2 / D
            for it in range(1, self.max_iter + 1):
                P, ll = self._e_step(d2, sigma2)
                history.append(ll - 0.5 * self.lamb * np.sum(W * (G @ W)))
                if len(history) > 1 and history[-1] < max(history[:-1]):
                    W, T, sigma2 = best
                    history.pop()
                    status = "stalled"
                    break
                best = (W, T, sigma2)
                if self._converged(history):
                    status = "tol"
                    break
                P1 = P.sum(1)
                Np = P1.sum()
                if Np <= 1e-300:
                    raise RegistrationError("all points assigned to the outlier component")
                A = P1[:, None] * G + self.lamb * sigma2 * np.eye(M)
                B = P @ Xf - P1[:, None] * Y
                try:
                    W = np.linalg.solve(A, B)
                except np.linalg.LinAlgError as exc:
                    raise RegistrationError(
                        f"singular M-step system (condition number {np.linalg.cond(A):.3g})"
                    ) from exc
                if not np.all(np.isfinite(W)):
                    raise RegistrationError(
                        f"non-finite M-step solution (condition number {np.linalg.cond(A):.3g})"
                    )
                T = Y + G @ W
                d2 = self._distances(Xf, T, sigma2, 1.0)
                sigma2 = float(np.sum(P * d2) / (Np * D))
                if sigma2 <= floor:
                    status = "exact"
                    break
                if sigma2 < _FAST_SQDIST:
                    d2 = _sqdist(Xf, T)
        self.W_ = W
        self._Y = Y
        self.sigma2_ = sigma2
        self.log_likelihood_ = history
        self.n_iter_ = it
        self.stop_reason_ = status
        self.registered_ = T * self.scale_ + self.fixed_center_
        return self

    def displacement(self, X):
        """Fitted displacement field evaluated at arbitrary points (mm)."""
        check_is_fitted(self)
        Z = (check_points(X) - self.moving_center_) / self.scale_
        K = np.exp(-_sqdist(self._Y, Z, exact=False) / (2.0 * self.beta ** 2))
        # centering offset between the two sets is part of the motion
        return (K @ self.W_) * self.scale_ + (self.fixed_center_ - self.moving_center_)

    def transform(self, X):
        return check_points(X) + self.displacement(X)


def cpd_rigid(moving, fixed, params: CpdParams | None = None):
    """Return (SimilarityTransform, registered moving PointSet)."""
    p = params or CpdParams()
    est = RigidCPD(w=p.w, max_iter=p.max_iterations, tol=p.tolerance, with_scale=p.with_scale).fit(moving, fixed)
    return est.transform_, PointSet(est.transform(moving))


def cpd_affine(moving, fixed, params: CpdParams | None = None) -> PointSet:
    p = params or CpdParams()
    est = AffineCPD(w=p.w, max_iter=p.max_iterations, tol=p.tolerance).fit(moving, fixed)
    return PointSet(est.transform(moving))


def cpd_nonrigid(moving, fixed, params: CpdParams | None = None) -> PointSet:
    p = params or CpdParams()
    est = NonRigidCPD(w=p.w, beta=p.beta, lamb=p.lamb, max_iter=p.max_iterations, tol=p.tolerance).fit(moving, fixed)
    return PointSet(est.registered_)


# -- generalized Procrustes ---------------------------------------------------

class GeneralizedProcrustes(TransformerMixin, BaseEstimator):
    """Iterative alignment of corresponded configurations to their mean.

    Parameters
    ----------
    scaling : bool, default=False
        Also estimate a per-configuration scale; the mean is then rescaled to
        the average centroid size after each pass.
    tol : float, default=1e-10
        Stop when the RMS change of the mean falls below this value (mm).
    max_iter : int, default=100

    Attributes
    ----------
    mean_ : ndarray of shape (n_points, 3), centroid at the origin
    transforms_ : list of SimilarityTransform, one per training configuration
    objective_ : list of float
        ``sum_i |X_i - mean|^2`` after every pass.
    """

    def __init__(self, scaling=False, tol=1e-10, max_iter=100):
        self.scaling = scaling
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y=None):
        self._fit(X)
        return self

    def fit_transform(self, X, y=None):
        return self._fit(X)

    def _fit(self, X):
        C = check_configs(X, "configs", 2)
        centroids = C.mean(axis=1)
        Cc = C - centroids[:, None, :]
        sizes = np.sqrt((Cc ** 2).sum(axis=(1, 2)))
        target_size = sizes.mean()
        mean = Cc[0].copy()
        objective = []
        rotations = [np.eye(3)] * len(C)
        scales = np.ones(len(C))
        aligned = Cc.copy()
        for it in range(1, self.max_iter + 1):
            for i in range(len(C)):
                R = kabsch(Cc[i], mean)
                rotations[i] = R
                rotated = Cc[i] @ R.T
                if self.scaling:
                    scales[i] = np.sum(rotated * mean) / np.sum(Cc[i] ** 2)
                aligned[i] = scales[i] * rotated
            new_mean = aligned.mean(axis=0)
            if self.scaling:
                new_mean *= target_size / np.sqrt((new_mean ** 2).sum())
            objective.append(float(((aligned - new_mean) ** 2).sum()))
            change = np.sqrt(((new_mean - mean) ** 2).sum(1).mean())
            mean = new_mean
            if change < self.tol:
                break
        self.mean_ = mean - mean.mean(axis=0)
        self.transforms_ = [
            SimilarityTransform(rotations[i], -scales[i] * rotations[i] @ centroids[i], scales[i])
            for i in range(len(C))
        ]
        self.objective_ = objective
        self.n_iter_ = it
        return aligned

    def transform(self, X):
        """Align new corresponded configurations to the fitted mean."""
        check_is_fitted(self)
        C = check_configs(X, "configs")
        if C.shape[1] != len(self.mean_):
            raise ValueError("cardinality mismatch with the fitted mean")
        out = np.empty_like(C)
        for i, c in enumerate(C):
            cc = c - c.mean(0)
            R = kabsch(cc, self.mean_)
            s = np.sum((cc @ R.T) * self.mean_) / np.sum(cc ** 2) if self.scaling else 1.0
            out[i] = s * cc @ R.T
        return out


def gpa(configs, scaling: bool = False, tol: float = 1e-10, max_iter: int = 100):
    """Return (aligned configurations, mean PointSet)."""
    est = GeneralizedProcrustes(scaling=scaling, tol=tol, max_iter=max_iter)
    aligned = est.fit_transform(configs)
    return [PointSet(a) for a in aligned], PointSet(est.mean_)
