"""Linear statistical shape model and thin-plate spline mesh transfer.

A shape is ``mean + components.T @ b``; the model is fitted by PCA (SVD of
the centered data matrix) over corresponded configurations. Instances are
turned into meshes by warping the template mesh with a 3-D thin-plate spline
fitted from the mean point set to the instance point set.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_configs, check_points
from .mesh import TriMesh, read_obj, write_obj
from .pointset import PointSet

FORMAT_TAG = "kneessm-ssm/1"


class ShapeModel(TransformerMixin, BaseEstimator):
    """PCA point distribution model.

    Parameters
    ----------
    variance_to_retain : float, default=0.95
        Keep the smallest number of modes whose cumulative explained variance
        reaches this fraction. ``1.0`` keeps every mode with support in the
        training set (``n_samples - 1`` at most).

    Attributes
    ----------
    mean_ : ndarray of shape (n_points, 3)
    components_ : ndarray of shape (n_components, 3 * n_points)
        Orthonormal rows, points flattened as ``x0, y0, z0, x1, ...``.
    explained_variance_ : ndarray of shape (n_components,)
        Per-mode sample variance (divisor ``n_samples - 1``), mm^2.
    explained_variance_ratio_ : ndarray of shape (n_components,)
    total_variance_ : float
    n_components_ : int
    n_training_ : int
    template_mesh_ : TriMesh or None
        Mesh whose vertices are to be warped with the model, in the frame of
        ``mean_``.
    """

    def __init__(self, variance_to_retain=0.95):
        self.variance_to_retain = variance_to_retain

    def fit(self, X, y=None, template_mesh: TriMesh | None = None):
        if not 0.0 < self.variance_to_retain <= 1.0:
            raise ValueError("variance_to_retain must lie in (0, 1]")
        C = check_configs(X, "configs", 2)
        n, p, _ = C.shape
        flat = C.reshape(n, -1)
        mean = flat.mean(axis=0)
        U, S, Vt = np.linalg.svd(flat - mean, full_matrices=False)
        # deterministic signs: largest-magnitude loading positive
        signs = np.sign(Vt[np.arange(len(Vt)), np.argmax(np.abs(Vt), axis=1)])
        signs[signs == 0] = 1.0
        Vt = Vt * signs[:, None]
        available = min(n - 1, 3 * p)
        var = S[:available] ** 2 / (n - 1)
        total = float(((flat - mean) ** 2).sum() / (n - 1))
        if total > 0:
            ratio = var / total
            cum = np.cumsum(ratio)
            k = int(np.searchsorted(cum, self.variance_to_retain - 1e-12) + 1)
            k = min(k, available)
        else:
            ratio = np.zeros_like(var)
            k = available
        self.mean_ = mean.reshape(p, 3)
        self.components_ = Vt[:k]
        self.explained_variance_ = var[:k]
        self.explained_variance_ratio_ = ratio[:k]
        self.all_explained_variance_ = var
        self.total_variance_ = total
        self.n_components_ = k
        self.n_training_ = n
        self.template_mesh_ = template_mesh
        return self

    def _check_shape(self, X):
        C = check_configs(X, "shape")
        if C.shape[1] != len(self.mean_):
            raise ValueError(f"cardinality mismatch: {C.shape[1]} points, model has {len(self.mean_)}")
        return C

    def transform(self, X):
        """Shape coefficients ``b`` for each configuration, shape (n, n_components)."""
        check_is_fitted(self)
        C = self._check_shape(X)
        return (C.reshape(len(C), -1) - self.mean_.ravel()) @ self.components_.T

    def inverse_transform(self, b):
        """Configurations ``mean + b @ components``; ``b`` may be shorter than the mode count."""
        check_is_fitted(self)
        b = np.atleast_2d(np.asarray(b, dtype=float))
        if b.shape[1] > self.n_components_:
            raise ValueError(f"{b.shape[1]} coefficients given, model retains {self.n_components_} modes")
        flat = self.mean_.ravel() + b @ self.components_[: b.shape[1]]
        return flat.reshape(len(b), -1, 3)

    def reconstruct(self, X):
        return self.inverse_transform(self.transform(X))


def build_ssm(aligned, template_mesh: TriMesh | None = None, variance_to_retain: float = 0.95) -> ShapeModel:
    return ShapeModel(variance_to_retain=variance_to_retain).fit(aligned, template_mesh=template_mesh)


def synthesize(model: ShapeModel, b) -> PointSet:
    return PointSet(model.inverse_transform(np.asarray(b, dtype=float).reshape(1, -1))[0])


def project(model: ShapeModel, shape) -> np.ndarray:
    return model.transform([check_points(shape, "shape")])[0]


# -- thin-plate spline --------------------------------------------------------

def _tps_kernel(A, B):
    diff = A[:, None, :] - B[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


class ThinPlateSpline(BaseEstimator):
    """3-D thin-plate spline with kernel ``U(r) = r``.

    ``f(p) = A @ p + a + sum_i w_i U(|p - x_i|)`` with the side conditions
    ``sum_i w_i = 0`` and ``sum_i w_i x_i^T = 0``.

    Parameters
    ----------
    regularization : float, default=0.0
        Added to the kernel diagonal; 0 interpolates the targets exactly.

    Attributes
    ----------
    affine_ : ndarray of shape (3, 4)
        ``[A | a]``.
    weights_ : ndarray of shape (n_landmarks, 3)
    source_ : ndarray of shape (n_landmarks, 3)
    bending_energy_ : float
    """

    def __init__(self, regularization=0.0):
        self.regularization = regularization

    def fit(self, X, y):
        if self.regularization < 0:
            raise ValueError("regularization must be non-negative")
        src = check_points(X, "source", 4)
        dst = check_points(y, "target")
        if len(src) != len(dst):
            raise ValueError("source and target must have equal cardinality")
        n = len(src)
        P = np.hstack([np.ones((n, 1)), src])
        centered = src - src.mean(0)
        if np.linalg.matrix_rank(centered, tol=1e-9 * max(1.0, np.abs(centered).max())) < 3:
            raise np.linalg.LinAlgError("source landmarks are coplanar")
        if len(np.unique(src, axis=0)) < n:
            raise np.linalg.LinAlgError("duplicate source landmarks")
        K = _tps_kernel(src, src)
        L = np.zeros((n + 4, n + 4))
        L[:n, :n] = K + self.regularization * np.eye(n)
        L[:n, n:] = P
        L[n:, :n] = P.T
        rhs = np.zeros((n + 4, 3))
        rhs[:n] = dst
        sol = np.linalg.solve(L, rhs)
        W, a = sol[:n], sol[n:]
        self.weights_ = W
        self.affine_ = np.hstack([a[1:].T, a[:1].T])
        self.source_ = src
        self.bending_energy_ = float(-np.sum(W * (K @ W)))
        return self

    def transform(self, X):
        check_is_fitted(self)
        pts = check_points(X)
        out = pts @ self.affine_[:, :3].T + self.affine_[:, 3]
        for s in range(0, len(pts), 2048):
            out[s:s + 2048] += _tps_kernel(pts[s:s + 2048], self.source_) @ self.weights_
        return out

    def affine_part(self, X):
        check_is_fitted(self)
        return check_points(X) @ self.affine_[:, :3].T + self.affine_[:, 3]


def tps_fit(source, target, regularization: float = 0.0) -> ThinPlateSpline:
    return ThinPlateSpline(regularization=regularization).fit(source, target)


def tps_apply(tps: ThinPlateSpline, points) -> PointSet:
    return PointSet(tps.transform(points))


def instance_mesh(model: ShapeModel, instance_points, regularization: float = 0.0) -> TriMesh:
    """Warp the model's template mesh onto a corresponded instance."""
    check_is_fitted(model)
    if model.template_mesh_ is None:
        raise ValueError("model has no template mesh")
    inst = check_points(instance_points, "instance")
    if len(inst) != len(model.mean_):
        raise ValueError("instance cardinality does not match the model mean")
    tps = tps_fit(model.mean_, inst, regularization)
    return model.template_mesh_.with_vertices(tps.transform(model.template_mesh_.vertices))


# -- persistence --------------------------------------------------------------

def _stem(path) -> Path:
    path = Path(path)
    name = path.name
    for suffix in (".ssm.json", ".ssm.bin"):
        if name.endswith(suffix):
            return path.with_name(name[: -len(suffix)])
    return path


def save_model(model: ShapeModel, path) -> Path:
    """Write ``<stem>.ssm.json``, ``<stem>.ssm.bin`` and the template OBJ; returns the manifest path."""
    check_is_fitted(model)
    stem = _stem(path)
    arrays = {
        "mean": model.mean_,
        "components": model.components_,
        "explained_variance": model.explained_variance_,
        "all_explained_variance": model.all_explained_variance_,
    }
    blob = bytearray()
    index = {}
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        index[name] = {"offset": len(blob), "shape": list(a.shape)}
        blob += a.tobytes()
    bin_path = stem.with_name(stem.name + ".ssm.bin")
    bin_path.write_bytes(bytes(blob))
    template = None
    if model.template_mesh_ is not None:
        template = stem.name + ".template.obj"
        write_obj(model.template_mesh_, stem.with_name(template))
    manifest = {
        "format": FORMAT_TAG,
        "dtype": "<f8",
        "blob": bin_path.name,
        "arrays": index,
        "n_points": int(len(model.mean_)),
        "n_modes": int(model.n_components_),
        "n_training": int(model.n_training_),
        "variance_to_retain": float(model.variance_to_retain),
        "total_variance": float(model.total_variance_),
        "template_mesh": template,
    }
    json_path = stem.with_name(stem.name + ".ssm.json")
    json_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return json_path


def load_model(path) -> ShapeModel:
    stem = _stem(path)
    json_path = stem.with_name(stem.name + ".ssm.json")
    manifest = json.loads(json_path.read_text())
    if manifest.get("format") != FORMAT_TAG:
        raise ValueError(f"{json_path}: unsupported model format {manifest.get('format')!r}")
    data = (json_path.parent / manifest["blob"]).read_bytes()
    arrays = {}
    for name, info in manifest["arrays"].items():
        count = int(np.prod(info["shape"])) if info["shape"] else 1
        arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=info["offset"]).reshape(info["shape"]).copy()
    model = ShapeModel(variance_to_retain=manifest["variance_to_retain"])
    model.mean_ = arrays["mean"]
    model.components_ = arrays["components"]
    model.explained_variance_ = arrays["explained_variance"]
    model.all_explained_variance_ = arrays["all_explained_variance"]
    model.total_variance_ = manifest["total_variance"]
    model.explained_variance_ratio_ = (
        model.explained_variance_ / model.total_variance_ if model.total_variance_ > 0 else np.zeros_like(model.explained_variance_)
    )
    model.n_components_ = manifest["n_modes"]
    model.n_training_ = manifest["n_training"]
    model.template_mesh_ = read_obj(json_path.parent / manifest["template_mesh"]) if manifest["template_mesh"] else None
    return model
