"""Material-point constitutive laws for knee joint tissues.

Cartilage is a fibril-reinforced biphasic solid::

    sigma = -p I + phi0 sigma_matrix + phi1 (sigma_fibril_iso + sigma_fibril_aniso)

Both isotropic constituents follow the Holmes-Mow potential. The anisotropic
fibril network integrates a quadratic tension-only fibre energy over a
continuous orientation density on the unit sphere. All stresses are Cauchy
stresses in MPa. Menisci are transversely isotropic linear solids; ligaments
are springs that may be tension-only.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.integrate import lebedev_rule
from scipy.special import dawsn, erf

ERFI_MAX = 26.0
DEFAULT_QUADRATURE_ORDER = 35
NORMALIZATION_TOLERANCE = 1e-6
TABLE_VERSION = "cartilage-constants/1"


# -- kinematics ---------------------------------------------------------------

@dataclass(frozen=True)
class DeformationState:
    """Deformation gradient ``F`` and interstitial fluid pressure ``p`` (MPa)."""

    F: np.ndarray
    p: float = 0.0

    def __post_init__(self):
        F = np.array(self.F, dtype=float)
        if F.shape != (3, 3) or not np.all(np.isfinite(F)):
            raise ValueError("F must be a finite 3x3 matrix")
        if not np.isfinite(self.p):
            raise ValueError("pressure must be finite")
        J = np.linalg.det(F)
        if not J > 0:
            raise ValueError(f"det(F) must be positive, got {J:.6g}")
        F.setflags(write=False)
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "p", float(self.p))

    @property
    def J(self) -> float:
        return float(np.linalg.det(self.F))

    @property
    def C(self) -> np.ndarray:
        return self.F.T @ self.F


def _as_state(state) -> DeformationState:
    return state if isinstance(state, DeformationState) else DeformationState(state)


def _check_spd(C) -> np.ndarray:
    C = np.asarray(C, dtype=float)
    if C.shape != (3, 3):
        raise ValueError("C must be 3x3")
    if not np.allclose(C, C.T, rtol=1e-12, atol=1e-12 * max(1.0, np.abs(C).max())):
        raise ValueError("C must be symmetric")
    C = 0.5 * (C + C.T)
    if np.linalg.eigvalsh(C)[0] <= 0:
        raise ValueError("C must be positive-definite")
    return C


def push_forward(F: np.ndarray, S: np.ndarray) -> np.ndarray:
    """Cauchy stress ``J^-1 F S F^T`` from a second Piola-Kirchhoff stress."""
    sigma = F @ S @ F.T / np.linalg.det(F)
    return 0.5 * (sigma + sigma.T)


# -- Holmes-Mow ---------------------------------------------------------------

@dataclass(frozen=True)
class HolmesMowConstants:
    alpha0: float
    alpha1: float
    alpha2: float
    beta: float

    def __post_init__(self):
        if not self.alpha0 > 0:
            raise ValueError("alpha0 must be positive")
        if not self.beta >= 0:
            raise ValueError("beta must be non-negative")


def invariants(C):
    C = np.asarray(C, dtype=float)
    I1 = np.trace(C)
    I2 = 0.5 * (I1 ** 2 - np.trace(C @ C))
    return I1, I2, np.linalg.det(C)


def holmes_mow_energy(C, c: HolmesMowConstants) -> float:
    """``alpha0 exp(alpha1 (I1 - 3) + alpha2 (I2 - 3)) / I3^beta`` in MPa."""
    I1, I2, I3 = invariants(_check_spd(C))
    return float(c.alpha0 * np.exp(c.alpha1 * (I1 - 3) + c.alpha2 * (I2 - 3)) / I3 ** c.beta)


def holmes_mow_pk2(C, c: HolmesMowConstants) -> np.ndarray:
    """Second Piola-Kirchhoff stress ``2 dW/dC``."""
    C = _check_spd(C)
    I1, _, _ = invariants(C)
    W = holmes_mow_energy(C, c)
    eye = np.eye(3)
    return 2.0 * W * (c.alpha1 * eye + c.alpha2 * (I1 * eye - C) - c.beta * np.linalg.inv(C))


def matrix_stress(state, c: HolmesMowConstants) -> np.ndarray:
    """Unweighted Cauchy stress of one Holmes-Mow constituent.

    At ``F = I`` it reduces to ``2 alpha0 (alpha1 + 2 alpha2 - beta) I``.
    """
    st = _as_state(state)
    return push_forward(st.F, holmes_mow_pk2(st.C, c))


# -- fibril orientation density ----------------------------------------------

def erfi(x):
    """Imaginary error function ``-i erf(ix)`` via the Dawson integral.

    Defined for ``|x| <= ERFI_MAX``; beyond that the result overflows a double.
    """
    x = np.asarray(x, dtype=float)
    if np.any(np.abs(x) > ERFI_MAX):
        raise OverflowError(f"erfi argument outside |x| <= {ERFI_MAX}")
    out = 2.0 / np.sqrt(np.pi) * np.exp(x * x) * dawsn(x)
    return float(out) if out.ndim == 0 else out


@lru_cache(maxsize=None)
def _lebedev(order: int):
    x, w = lebedev_rule(order)
    directions = np.ascontiguousarray(x.T)
    directions.setflags(write=False)
    w = np.ascontiguousarray(w)
    w.setflags(write=False)
    return directions, w


@dataclass(frozen=True)
class FibrilDistribution:
    """Orientation density ``psi ~ exp(b cos 2 theta)`` about the local z axis.

    ``b < 0`` concentrates fibrils parallel to the surface (equator), ``b > 0``
    perpendicular to it (poles) and ``b = 0`` is the uniform density.
    ``order`` is the degree of the Lebedev rule used for stress integration;
    construction fails if it cannot normalize the density to
    ``NORMALIZATION_TOLERANCE``.
    """

    b: float = 0.0
    order: int = DEFAULT_QUADRATURE_ORDER

    def __post_init__(self):
        if not np.isfinite(self.b):
            raise ValueError("b must be finite")
        try:
            directions, w = _lebedev(int(self.order))
        except ValueError as exc:
            raise ValueError(f"no Lebedev rule of order {self.order}") from exc
        err = abs(float(w @ fibril_density(np.arccos(np.clip(directions[:, 2], -1, 1)), self)) - 1.0)
        if err > NORMALIZATION_TOLERANCE:
            raise ValueError(
                f"quadrature order {self.order} normalizes b={self.b} only to {err:.2e}; raise the order"
            )

    def quadrature(self):
        """Unit directions (n, 3) and weights ``w * psi`` summing to one."""
        directions, w = _lebedev(int(self.order))
        psi = fibril_density(np.arccos(np.clip(directions[:, 2], -1, 1)), self)
        return directions, w * psi


def fibril_density(theta, dist: FibrilDistribution | float):
    """Normalized density (1/sr) at colatitude ``theta``; integrates to 1 over the sphere.

    Normalization uses the closed form of ``int exp(b cos 2 theta) dS``, written
    so that no intermediate overflows for large ``|b|``.
    """
    b = float(dist.b if isinstance(dist, FibrilDistribution) else dist)
    theta = np.asarray(theta, dtype=float)
    if np.any((theta < -1e-12) | (theta > np.pi + 1e-12)):
        raise ValueError("theta must lie in [0, pi]")
    c2 = np.cos(2.0 * theta)
    if b == 0:
        out = np.full_like(c2, 1.0 / (4.0 * np.pi))
    elif b > 0:
        s = np.sqrt(2.0 * b)
        out = np.exp(b * (c2 - 1.0)) / (4.0 * np.pi * dawsn(s) / s)
    else:
        s = np.sqrt(-2.0 * b)
        out = np.exp(b * (c2 + 1.0)) / (2.0 * np.pi ** 1.5 * erf(s) / s)
    return float(out) if out.ndim == 0 else out


def _isochoric(C):
    J = np.sqrt(np.linalg.det(C))
    return J, J ** (-2.0 / 3.0) * C


def _stretch_terms(Cbar, directions):
    return np.einsum("ni,ij,nj->n", directions, Cbar, directions) - 1.0


def fibril_aniso_energy(C, c1b: float, dist: FibrilDistribution, tension_only: bool = True) -> float:
    """``sum_q w_q psi_q c1b/2 (I4bar - 1)^2`` over the quadrature directions."""
    C = _check_spd(C)
    _, Cbar = _isochoric(C)
    directions, weights = dist.quadrature()
    e = _stretch_terms(Cbar, directions)
    if tension_only:
        e = np.maximum(e, 0.0)
    return float(0.5 * c1b * weights @ (e * e))


def fibril_aniso_pk2(C, c1b: float, dist: FibrilDistribution, tension_only: bool = True) -> np.ndarray:
    C = _check_spd(C)
    J, Cbar = _isochoric(C)
    directions, weights = dist.quadrature()
    e = _stretch_terms(Cbar, directions)
    if tension_only:
        e = np.maximum(e, 0.0)
    Sbar = 2.0 * c1b * np.einsum("n,ni,nj->ij", weights * e, directions, directions)
    # deviatoric projection of the fictitious stress
    S = J ** (-2.0 / 3.0) * (Sbar - np.sum(Sbar * C) / 3.0 * np.linalg.inv(C))
    return 0.5 * (S + S.T)


def fibril_aniso_stress(state, c1b: float, dist: FibrilDistribution, tension_only: bool = True) -> np.ndarray:
    """Unweighted Cauchy stress of the distributed fibril network.

    Only the distortional part ``Cbar = J^(-2/3) C`` loads the fibrils, so pure
    dilation gives zero stress. With ``tension_only`` a direction contributes
    only while its distortional squared stretch exceeds 1.
    """
    st = _as_state(state)
    return push_forward(st.F, fibril_aniso_pk2(st.C, c1b, dist, tension_only))


# -- cartilage assembly -------------------------------------------------------

@dataclass(frozen=True)
class CartilageConstants:
    """Constants of one cartilage zone.

    ``phi0`` and ``phi1`` have no defaults on purpose. ``E``, ``nu``, ``k``,
    ``void_ratio`` and ``thickness_fraction`` are carried for reporting only.
    """

    phi0: float
    phi1: float
    matrix: HolmesMowConstants
    fibril_iso: HolmesMowConstants
    c1b: float
    distribution: FibrilDistribution = field(default_factory=FibrilDistribution)
    zone: str = "superficial"
    tension_only: bool = True
    stored: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.phi0 < 0 or self.phi1 < 0:
            raise ValueError("volume fractions must be non-negative")
        if self.c1b < 0:
            raise ValueError("c1b must be non-negative")
        if self.zone not in ZONES:
            raise ValueError(f"zone must be one of {ZONES}")


def total_stress(state, c: CartilageConstants) -> np.ndarray:
    """Total Cauchy stress of the solid-fluid mixture (MPa)."""
    st = _as_state(state)
    sigma = -st.p * np.eye(3)
    if c.phi0:
        sigma = sigma + c.phi0 * matrix_stress(st, c.matrix)
    if c.phi1:
        fib = matrix_stress(st, c.fibril_iso)
        if c.c1b:
            fib = fib + fibril_aniso_stress(st, c.c1b, c.distribution, c.tension_only)
        sigma = sigma + c.phi1 * fib
    return 0.5 * (sigma + sigma.T)


# -- built-in constants table --------------------------------------------------

ZONES = ("superficial", "deep")
CONSTITUENTS = ("matrix", "fibril")

_BUILTIN_TABLE = {
    "version": TABLE_VERSION,
    "rows": {
        "superficial": {
            "fibril": {"E": 10.0, "nu": 0.3, "alpha0": 3.4, "alpha1": 0.1, "alpha2": 0.4, "c1b": 7.6,
                       "beta": 1.0, "b": 0.0, "thickness_fraction": 0.12},
            "matrix": {"E": 2.5, "nu": 0.1, "alpha0": 0.6, "alpha1": 0.8, "alpha2": 0.1, "beta": 1.0,
                       "k": 2.8, "void_ratio": 4.0, "b": 0.0, "thickness_fraction": 0.12},
        },
        "deep": {
            "fibril": {"E": 15.0, "nu": 0.3, "alpha0": 5.1, "alpha1": 0.1, "alpha2": 0.4, "c1b": 11.4,
                       "beta": 1.0, "b": 0.0, "thickness_fraction": 0.62},
            "matrix": {"E": 3.8, "nu": 0.1, "alpha0": 1.0, "alpha1": 0.8, "alpha2": 0.1, "beta": 1.0,
                       "k": 2.8, "void_ratio": 4.0, "b": 0.0, "thickness_fraction": 0.62},
        },
    },
}


@dataclass(frozen=True)
class MaterialRow:
    zone: str
    constituent: str
    E: float
    nu: float
    alpha0: float
    alpha1: float
    alpha2: float
    beta: float
    b: float = 0.0
    thickness_fraction: float | None = None
    c1b: float | None = None
    k: float | None = None
    void_ratio: float | None = None

    @property
    def holmes_mow(self) -> HolmesMowConstants:
        return HolmesMowConstants(self.alpha0, self.alpha1, self.alpha2, self.beta)

    def to_dict(self) -> dict:
        return asdict(self)


def builtin_table() -> dict:
    return json.loads(json.dumps(_BUILTIN_TABLE))


def load_material_table(path) -> dict:
    """Read a table override file; rows not present fall back to the built-in values."""
    data = json.loads(Path(path).read_text())
    if data.get("version") != TABLE_VERSION:
        raise ValueError(f"{path}: expected version {TABLE_VERSION!r}")
    table = builtin_table()
    for zone, rows in data.get("rows", {}).items():
        if zone not in ZONES:
            raise ValueError(f"{path}: unknown zone {zone!r}")
        for constituent, values in rows.items():
            if constituent not in CONSTITUENTS:
                raise ValueError(f"{path}: unknown constituent {constituent!r}")
            unknown = set(values) - set(MaterialRow.__dataclass_fields__)
            if unknown:
                raise ValueError(f"{path}: unknown fields {sorted(unknown)}")
            table["rows"][zone][constituent].update(values)
    return table


def material_table(zone: str, constituent: str, table: dict | None = None) -> MaterialRow:
    """One row of the cartilage constants table (built-in unless ``table`` is given)."""
    if zone not in ZONES:
        raise ValueError(f"zone must be one of {ZONES}")
    if constituent not in CONSTITUENTS:
        raise ValueError(f"constituent must be one of {CONSTITUENTS}")
    rows = (table or _BUILTIN_TABLE)["rows"]
    return MaterialRow(zone=zone, constituent=constituent, **rows[zone][constituent])


def cartilage_constants(zone: str, phi0: float, phi1: float, table: dict | None = None,
                        order: int = DEFAULT_QUADRATURE_ORDER, tension_only: bool = True) -> CartilageConstants:
    """Assemble zone constants from the table; volume fractions are required."""
    m = material_table(zone, "matrix", table)
    f = material_table(zone, "fibril", table)
    return CartilageConstants(
        phi0=float(phi0),
        phi1=float(phi1),
        matrix=m.holmes_mow,
        fibril_iso=f.holmes_mow,
        c1b=float(f.c1b),
        distribution=FibrilDistribution(b=f.b, order=order),
        zone=zone,
        tension_only=tension_only,
        stored={"matrix": m.to_dict(), "fibril": f.to_dict()},
    )


# -- meniscus and ligaments ----------------------------------------------------

def isotropic_stiffness(E: float, nu: float) -> np.ndarray:
    """Isotropic 6x6 stiffness, Voigt order 11, 22, 33, 23, 13, 12 (engineering shear)."""
    lam = E * nu / ((1 + nu) * (1 - 2 * nu))
    mu = E / (2 * (1 + nu))
    K = np.zeros((6, 6))
    K[:3, :3] = lam
    K[np.arange(3), np.arange(3)] = lam + 2 * mu
    K[np.arange(3, 6), np.arange(3, 6)] = mu
    return K


def transverse_isotropic_stiffness(E1, E2, E3, nu12, nu13, nu23, G) -> np.ndarray:
    """Stiffness of a transversely isotropic solid with symmetry axis 3.

    The 1-2 plane is isotropic, so ``E1 == E2`` and ``nu13 == nu23`` are
    required. ``G`` is the out-of-plane shear modulus ``G13 = G23``; the
    in-plane modulus is ``G12 = E1 / (2 (1 + nu12))``. ``nu_ij`` is the
    contraction along ``j`` under stress along ``i``. Voigt order
    11, 22, 33, 23, 13, 12 with engineering shear strains.

    Raises
    ------
    ValueError
        If the constraints fail or the stiffness is not positive-definite.
    """
    if not np.isclose(E1, E2, rtol=1e-12):
        raise ValueError("transverse isotropy requires E1 == E2")
    if not np.isclose(nu13, nu23, rtol=1e-12, atol=1e-15):
        raise ValueError("transverse isotropy requires nu13 == nu23")
    if min(E1, E3, G) <= 0:
        raise ValueError("moduli must be positive")
    G12 = E1 / (2 * (1 + nu12))
    S = np.zeros((6, 6))
    S[0, 0] = S[1, 1] = 1 / E1
    S[2, 2] = 1 / E3
    S[0, 1] = S[1, 0] = -nu12 / E1
    S[0, 2] = S[2, 0] = -nu13 / E1
    S[1, 2] = S[2, 1] = -nu23 / E2
    S[3, 3] = S[4, 4] = 1 / G
    S[5, 5] = 1 / G12
    eig = np.linalg.eigvalsh(S)
    if eig[0] <= 0:
        raise ValueError(f"stiffness not positive-definite: compliance eigenvalue {eig[0]:.6g}")
    K = np.linalg.inv(S)
    K = 0.5 * (K + K.T)
    kmin = np.linalg.eigvalsh(K)[0]
    if kmin <= 0:
        raise ValueError(f"stiffness not positive-definite: eigenvalue {kmin:.6g}")
    return K


@dataclass(frozen=True)
class LigamentSpring:
    """Spring of stiffness ``k`` (N/mm); tension-only unless ``tension_only=False``."""

    k: float
    rest_length: float = 0.0
    tension_only: bool = True

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError("spring stiffness must be positive")
        if self.rest_length < 0:
            raise ValueError("rest length must be non-negative")


# N/mm
LIGAMENT_STIFFNESS = {"ACL": 380.0, "PCL": 200.0, "MCL": 100.0, "LCL": 100.0}
MENISCAL_LIGAMENT_STIFFNESS = 375.0
MENISCUS_MODULI = {"E1": 20.0, "E2": 20.0, "E3": 159.6}


def ligament(name: str, rest_length: float) -> LigamentSpring:
    if name == "meniscal":
        return LigamentSpring(MENISCAL_LIGAMENT_STIFFNESS, rest_length, tension_only=False)
    return LigamentSpring(LIGAMENT_STIFFNESS[name], rest_length)


def ligament_force(spring: LigamentSpring, length: float) -> float:
    """Axial force in N; a tension-only spring carries nothing below its rest length."""
    if length < 0:
        raise ValueError("length must be non-negative")
    stretch = length - spring.rest_length
    if spring.tension_only:
        stretch = max(0.0, stretch)
    return float(spring.k * stretch)


def with_quadrature(c: CartilageConstants, order: int) -> CartilageConstants:
    return replace(c, distribution=FibrilDistribution(c.distribution.b, order))
