"""Exact arithmetic on free and homogeneous step 2 Carnot groups."""

import dataclasses
import functools
import logging
import math
from typing import Any, NamedTuple

import numpy as np
import scipy.linalg

logger = logging.getLogger(__name__)

EIGENVALUE_CUTOFF = 1e-12
"""Relative cutoff below which skew eigenvalues are treated as zero."""


class DimensionMismatchError(ValueError):
    """Operands do not live in the same group (or are malformed arrays)."""


class EigenSolverError(RuntimeError):
    """The eigenvalue or Schur solver failed on the passed matrix."""


class InvalidGroupSpecError(ValueError):
    """Homogeneous group description does not define a step 2 Carnot group."""


def skew_dim(n: int) -> int:
    """Number of strict upper triangle entries of an `n` x `n` matrix."""
    return n * (n - 1) // 2


def rank_from_pairs(pairs: int) -> int:
    """Invert `skew_dim`.

    Arguments:
        pairs: Number of strict upper triangle entries.

    Returns:
        Matrix dimension `n` with `skew_dim(n) == pairs`.

    Raises:
        DimensionMismatchError: If `pairs` is not a triangular number of some `n >= 2`.
    """
    n = (1 + math.isqrt(1 + 8 * pairs)) // 2
    if pairs < 1 or skew_dim(n) != pairs:
        raise DimensionMismatchError(f"{pairs} entries is not a strict upper triangle.")
    return n


@functools.lru_cache(maxsize=32)
def pair_indices(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-major pair order `(1,2), (1,3), ..., (n-1,n)` as 0-based index arrays."""
    rows, cols = np.triu_indices(n, k=1)
    rows.setflags(write=False)
    cols.setflags(write=False)
    return rows, cols


def symplectic_entries(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Upper triangle entries of `x yᵗ - y xᵗ`, broadcasting over leading axes.

    Arguments:
        x: Array of shape `(..., n)`.
        y: Array of shape `(..., n)`.

    Returns:
        Array of shape `(..., n(n-1)/2)` in pair order.
    """
    rows, cols = pair_indices(x.shape[-1])
    return x[..., rows] * y[..., cols] - x[..., cols] * y[..., rows]


@dataclasses.dataclass(frozen=True, eq=False)
class SkewMatrix:
    """Real skew-symmetric matrix stored as its strict upper triangle.

    Attributes:
        entries: Entries `z_{i,j}`, `i < j`, in row-major pair order.
    """

    entries: np.ndarray

    def __post_init__(self) -> None:
        entries = np.array(self.entries, dtype=float).reshape(-1)
        rank_from_pairs(entries.size)
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)

    @classmethod
    def zeros(cls, n: int) -> "SkewMatrix":
        """Return the zero matrix of size `n`."""
        if n < 2:
            raise DimensionMismatchError("Skew matrices need n >= 2.")
        return cls(np.zeros(skew_dim(n)))

    @classmethod
    def from_dense(cls, matrix: np.ndarray) -> "SkewMatrix":
        """Build from a dense matrix, keeping only its strict upper triangle.

        Arguments:
            matrix: Square `n` x `n` array.

        Returns:
            Skew matrix with the same upper triangle.
        """
        matrix = np.asarray(matrix, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise DimensionMismatchError(f"Expected a square matrix, got {matrix.shape}.")
        return cls(matrix[pair_indices(matrix.shape[0])])

    @property
    def n(self) -> int:
        """Matrix dimension."""
        return rank_from_pairs(self.entries.size)

    def dense(self) -> np.ndarray:
        """Full antisymmetric `n` x `n` matrix."""
        n = self.n
        matrix = np.zeros((n, n))
        rows, cols = pair_indices(n)
        matrix[rows, cols] = self.entries
        matrix[cols, rows] = -self.entries
        return matrix

    def norm(self, p: float = 2) -> float:
        """Vector `p`-norm of the upper triangle entries."""
        return float(np.linalg.norm(self.entries, ord=p))

    def rotate(self, basis: np.ndarray) -> "SkewMatrix":
        """Return `P z Pᵗ` for an `n` x `n` matrix `P`."""
        return SkewMatrix.from_dense(basis @ self.dense() @ basis.T)

    def allclose(self, other: "SkewMatrix", atol: float = 1e-12) -> bool:
        """Entrywise comparison with absolute tolerance `atol`."""
        return self.n == other.n and bool(
            np.allclose(self.entries, other.entries, rtol=0.0, atol=atol)
        )

    def __add__(self, other: "SkewMatrix") -> "SkewMatrix":
        _check_pairs(self.entries, other.entries)
        return SkewMatrix(self.entries + other.entries)

    def __sub__(self, other: "SkewMatrix") -> "SkewMatrix":
        _check_pairs(self.entries, other.entries)
        return SkewMatrix(self.entries - other.entries)

    def __neg__(self) -> "SkewMatrix":
        return SkewMatrix(-self.entries)

    def __mul__(self, scalar: float) -> "SkewMatrix":
        return SkewMatrix(self.entries * float(scalar))

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"SkewMatrix({self.entries.tolist()!r})"


@dataclasses.dataclass(frozen=True, eq=False)
class GroupElement:
    """Point `(x, z)` of the free step 2 Carnot group `G_n`.

    Attributes:
        x: Horizontal coordinate, a real `n`-vector.
        z: Vertical coordinate, a skew matrix of the same `n`.
    """

    x: np.ndarray
    z: SkewMatrix

    def __post_init__(self) -> None:
        x = np.array(self.x, dtype=float).reshape(-1)
        z = self.z if isinstance(self.z, SkewMatrix) else SkewMatrix(self.z)
        if x.size != z.n:
            raise DimensionMismatchError(
                f"Horizontal part has {x.size} coordinates, vertical part has n={z.n}."
            )
        x.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)

    @classmethod
    def identity(cls, n: int) -> "GroupElement":
        """Return the identity element `(0, 0)` of `G_n`."""
        return cls(np.zeros(n), SkewMatrix.zeros(n))

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "GroupElement":
        """Deserialize from `{"x": [...], "z": [...]}`."""
        return cls(np.asarray(data["x"], dtype=float), SkewMatrix(data["z"]))

    @property
    def n(self) -> int:
        """Group rank."""
        return self.x.size

    def to_dict(self) -> dict[str, list[float]]:
        """Serialize as `{"x": [...], "z": [...]}` in pair order."""
        return {"x": self.x.tolist(), "z": self.z.entries.tolist()}

    def rotate(self, basis: np.ndarray) -> "GroupElement":
        """Return `(P x, P z Pᵗ)`."""
        return GroupElement(basis @ self.x, self.z.rotate(basis))

    def allclose(self, other: "GroupElement", atol: float = 1e-12) -> bool:
        """Coordinatewise comparison with absolute tolerance `atol`."""
        return (
            self.n == other.n
            and bool(np.allclose(self.x, other.x, rtol=0.0, atol=atol))
            and self.z.allclose(other.z, atol=atol)
        )

    def __repr__(self) -> str:
        return f"GroupElement(x={self.x.tolist()!r}, z={self.z.entries.tolist()!r})"


def _check_pairs(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionMismatchError(f"Shape mismatch: {a.shape} vs {b.shape}.")


def _check_same_rank(g: GroupElement, h: GroupElement) -> None:
    if g.n != h.n:
        raise DimensionMismatchError(f"Elements of G_{g.n} and G_{h.n} can't be mixed.")


def symplectic(x: np.ndarray, y: np.ndarray) -> SkewMatrix:
    """Symplectic product `x ⊙ y = x yᵗ - y xᵗ`.

    Arguments:
        x: Real `n`-vector.
        y: Real `n`-vector.

    Returns:
        The skew matrix `x ⊙ y`.

    Raises:
        DimensionMismatchError: If the vectors differ in length or `n < 2`.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 1 or x.shape != y.shape or x.size < 2:
        raise DimensionMismatchError(f"Can't pair vectors of shape {x.shape}, {y.shape}.")
    return SkewMatrix(symplectic_entries(x, y))


def group_mul(g: GroupElement, h: GroupElement) -> GroupElement:
    """Group law `(x + x̃, z + z̃ + ½ x ⊙ x̃)`."""
    _check_same_rank(g, h)
    return GroupElement(
        g.x + h.x,
        SkewMatrix(g.z.entries + h.z.entries + 0.5 * symplectic_entries(g.x, h.x)),
    )


def group_inv(g: GroupElement) -> GroupElement:
    """Group inverse `(-x, -z)`."""
    return GroupElement(-g.x, -g.z)


def fiber_defect(g: GroupElement, h: GroupElement) -> tuple[np.ndarray, SkewMatrix]:
    """Coordinates of `g⁻¹ ⋆ h`.

    Arguments:
        g: First element.
        h: Second element.

    Returns:
        Tuple of the horizontal difference `x̃ - x` and the fiber defect
        `ζ = z̃ - z - ½ x ⊙ x̃`.
    """
    _check_same_rank(g, h)
    zeta = h.z.entries - g.z.entries - 0.5 * symplectic_entries(g.x, h.x)
    return h.x - g.x, SkewMatrix(zeta)


def pseudo_norm(g: GroupElement) -> float:
    """Homogeneous pseudo-norm `sqrt(||x||² + ||z||)`."""
    return math.sqrt(float(g.x @ g.x) + g.z.norm())


def pseudo_distance(g: GroupElement, h: GroupElement) -> float:
    """Left invariant pseudo-distance `pseudo_norm(g⁻¹ ⋆ h)`."""
    dx, zeta = fiber_defect(g, h)
    return math.sqrt(float(dx @ dx) + zeta.norm())


def _skew_spectrum(z: SkewMatrix) -> np.ndarray:
    """Positive imaginary parts of the eigenvalues, descending, with multiplicity."""
    if not np.all(np.isfinite(z.entries)):
        raise EigenSolverError("Skew matrix has non finite entries.")

    scale = z.norm()
    if scale == 0.0:
        return np.zeros(0)

    try:
        # `i z` is Hermitian with real spectrum `±λ`
        eigenvalues = scipy.linalg.eigvalsh(1j * z.dense())
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as e:
        raise EigenSolverError(f"Eigenvalue solver failed: {e}") from e

    positive = eigenvalues[eigenvalues > EIGENVALUE_CUTOFF * scale]
    return np.sort(positive)[::-1]


def vertical_dcc(z: SkewMatrix) -> float:
    """Carnot-Carathéodory distance from the identity to `(0, z)`.

    Uses `d² = 4π Σ_i i·λ_i` with the absolute eigenvalues `λ_1 ≥ λ_2 ≥ ...` of `z`
    (multiplicity expanded).

    Arguments:
        z: Vertical coordinate.

    Returns:
        Distance `d_cc(0, (0, z))`.

    Raises:
        EigenSolverError: If the eigenvalue computation fails.
    """
    spectrum = _skew_spectrum(z)
    ranks = np.arange(1, spectrum.size + 1)
    return math.sqrt(4 * math.pi * float(ranks @ spectrum))


class DccBounds(NamedTuple):
    """Two-sided bound on a Carnot-Carathéodory distance."""

    lower: float
    upper: float


def m2_upper(n: int) -> float:
    """Upper bound `2√π (2n)^{3/4}` on the constant `m₂(n)` with `d_cc ≤ m₂ δ`."""
    return 2 * math.sqrt(math.pi) * (2 * n) ** 0.75


def m1_lower_ratio(n: int) -> float:
    """Lower bound `2 / (n(n-1))` on the ratio `m₁(n) / m₁(1)`."""
    return 2 / (n * (n - 1))


def dcc_bounds(g: GroupElement, h: GroupElement) -> DccBounds:
    """Bound `d_cc(g, h)` without computing geodesics.

    The lower bound is the horizontal distance (exact vertical distance when the
    horizontal parts agree). The upper bound is the smaller of `m₂(n) δ(g, h)` and
    the two-leg path `||x̃ - x|| + vertical_dcc(ζ)`.

    Arguments:
        g: First element.
        h: Second element.

    Returns:
        Lower and upper bounds.
    """
    dx, zeta = fiber_defect(g, h)
    horizontal = float(np.linalg.norm(dx))
    vertical = vertical_dcc(zeta)
    lower = horizontal if horizontal > 0 else vertical
    upper = min(m2_upper(g.n) * pseudo_distance(g, h), horizontal + vertical)
    return DccBounds(lower=lower, upper=max(lower, upper))


def block_diagonalize(z: SkewMatrix) -> tuple[np.ndarray, SkewMatrix]:
    """Orthogonal reduction of `z` to its canonical 2 x 2 block form.

    Arguments:
        z: Skew matrix to reduce.

    Returns:
        Tuple `(P, c)` with `P` orthogonal and `c = Pᵗ z P` nonzero only at
        positions `(2k-1, 2k)`.

    Raises:
        EigenSolverError: If the real Schur decomposition fails.
    """
    n = z.n
    scale = z.norm()
    if scale == 0.0:
        return np.eye(n), SkewMatrix.zeros(n)
    if not np.all(np.isfinite(z.entries)):
        raise EigenSolverError("Skew matrix has non finite entries.")

    cutoff = EIGENVALUE_CUTOFF * scale
    try:
        # Rotation blocks (nonzero imaginary part) first, zero eigenvalues last
        _, basis, _ = scipy.linalg.schur(
            z.dense(),
            output="real",
            sort=lambda re, im: abs(im) > cutoff,
        )
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError) as e:
        raise EigenSolverError(f"Schur decomposition failed: {e}") from e

    reduced = basis.T @ z.dense() @ basis
    canonical = np.zeros(skew_dim(n))
    rows, cols = pair_indices(n)
    for k in range(0, n - 1, 2):
        canonical[(rows == k) & (cols == k + 1)] = reduced[k, k + 1]

    logger.debug("Block diagonalized %s to %s", z, canonical)
    return basis, SkewMatrix(canonical)


def orthonormal_completion(e: np.ndarray) -> np.ndarray:
    """Orthogonal matrix whose first column is the unit vector `e`."""
    e = np.asarray(e, dtype=float)
    q, _ = scipy.linalg.qr(e.reshape(-1, 1), mode="full")
    if q[:, 0] @ e < 0:
        q[:, 0] = -q[:, 0]
    return q


@dataclasses.dataclass(frozen=True, eq=False)
class HomogeneousGroupSpec:
    """Step 2 homogeneous Carnot group on `R^n x R^m`.

    The law is `(x, z) ∘ (x̃, z̃) = (x + x̃, (z_k + z̃_k + ½ ⟨C^{(k)} x | x̃⟩)_k)`.

    Attributes:
        C: Array of shape `(m, n, n)` holding the matrices `C^{(k)}`.
        D: Skew parts of `C`.
        S: Symmetric parts of `C`.
        lift_scale: Coefficient of the `⟨D^{(k)}, z⟩_F` term of the lift morphism.
        lift_matrix: Array of shape `(m, n(n-1)/2)` mapping free vertical
            coordinates to homogeneous ones.
    """

    C: np.ndarray
    D: np.ndarray = dataclasses.field(init=False)
    S: np.ndarray = dataclasses.field(init=False)
    lift_scale: float = dataclasses.field(init=False)
    lift_matrix: np.ndarray = dataclasses.field(init=False)

    def __post_init__(self) -> None:
        C = np.array(self.C, dtype=float)
        if C.ndim == 2:
            C = C[np.newaxis]
        if C.ndim != 3 or C.shape[1] != C.shape[2] or C.shape[1] < 2:
            raise InvalidGroupSpecError(f"Expected m x n x n matrices, got {C.shape}.")

        m, n, _ = C.shape
        if not 1 <= m <= skew_dim(n):
            raise InvalidGroupSpecError(f"Need 1 <= m <= {skew_dim(n)}, got m={m}.")

        D = (C - C.transpose(0, 2, 1)) / 2
        S = (C + C.transpose(0, 2, 1)) / 2
        rows, cols = pair_indices(n)
        coefficients = D[:, rows, cols]
        if np.linalg.matrix_rank(coefficients) < m:
            raise InvalidGroupSpecError("Skew parts D^(k) are linearly dependent.")

        for name, value in (("C", C), ("D", D), ("S", S)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

        scale = self._solve_lift_scale()
        lift_matrix = 2 * scale * coefficients
        lift_matrix.setflags(write=False)
        object.__setattr__(self, "lift_scale", scale)
        object.__setattr__(self, "lift_matrix", lift_matrix)

    def _solve_lift_scale(self) -> float:
        """Fit the D-term coefficient from the morphism identity on `(e_i, e_j)`."""
        n = self.n
        rows, cols = pair_indices(n)
        # φ(e_i ⋆ e_j) - φ(e_i) ∘ φ(e_j) = ½ c ⟨D, e_i ⊙ e_j⟩_F - ½ ⟨D e_i | e_j⟩
        design = 2 * self.D[:, rows, cols].reshape(-1, 1)
        target = self.D[:, cols, rows].reshape(-1)
        solution, _, _, _ = scipy.linalg.lstsq(design, target)
        residual = float(np.linalg.norm(design @ solution - target))
        if residual > 1e-12 * (1 + float(np.linalg.norm(target))):
            raise InvalidGroupSpecError(
                f"No lift morphism of the expected form (residual {residual:.3g})."
            )
        return float(solution[0])

    @property
    def n(self) -> int:
        """Horizontal rank."""
        return self.C.shape[1]

    @property
    def m(self) -> int:
        """Number of vertical coordinates."""
        return self.C.shape[0]

    def to_dict(self) -> dict[str, Any]:
        """Serialize as `{"C": [...]}`."""
        return {"C": self.C.tolist()}


@dataclasses.dataclass(frozen=True, eq=False)
class HomogeneousElement:
    """Point `(x, z)` of a homogeneous group, `x ∈ R^n`, `z ∈ R^m`."""

    x: np.ndarray
    z: np.ndarray

    def __post_init__(self) -> None:
        for name in ("x", "z"):
            value = np.array(getattr(self, name), dtype=float).reshape(-1)
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "HomogeneousElement":
        """Deserialize from `{"x": [...], "z": [...]}`."""
        return cls(np.asarray(data["x"]), np.asarray(data["z"]))

    def to_dict(self) -> dict[str, list[float]]:
        """Serialize as `{"x": [...], "z": [...]}`."""
        return {"x": self.x.tolist(), "z": self.z.tolist()}

    def allclose(self, other: "HomogeneousElement", atol: float = 1e-12) -> bool:
        """Coordinatewise comparison with absolute tolerance `atol`."""
        return (
            self.x.shape == other.x.shape
            and self.z.shape == other.z.shape
            and bool(np.allclose(self.x, other.x, rtol=0.0, atol=atol))
            and bool(np.allclose(self.z, other.z, rtol=0.0, atol=atol))
        )


def _check_homogeneous(spec: HomogeneousGroupSpec, *elements: HomogeneousElement) -> None:
    for element in elements:
        if element.x.size != spec.n or element.z.size != spec.m:
            raise DimensionMismatchError(
                f"Element of shape ({element.x.size}, {element.z.size}) doesn't belong "
                f"to a group with n={spec.n}, m={spec.m}."
            )


def homog_identity(spec: HomogeneousGroupSpec) -> HomogeneousElement:
    """Identity element of the homogeneous group."""
    return HomogeneousElement(np.zeros(spec.n), np.zeros(spec.m))


def homog_mul(
    spec: HomogeneousGroupSpec, a: HomogeneousElement, b: HomogeneousElement
) -> HomogeneousElement:
    """Homogeneous group law `(x + x̃, z + z̃ + ½ ⟨C x | x̃⟩)`."""
    _check_homogeneous(spec, a, b)
    cross = np.einsum("kij,i,j->k", spec.C, b.x, a.x)
    return HomogeneousElement(a.x + b.x, a.z + b.z + 0.5 * cross)


def homog_inv(spec: HomogeneousGroupSpec, a: HomogeneousElement) -> HomogeneousElement:
    """Homogeneous group inverse `(-x, -z + ½ ⟨S x | x⟩)`."""
    _check_homogeneous(spec, a)
    return HomogeneousElement(-a.x, -a.z + 0.5 * np.einsum("kij,i,j->k", spec.S, a.x, a.x))


def lift_morphism(spec: HomogeneousGroupSpec, g: GroupElement) -> HomogeneousElement:
    """Surjective morphism `φ: G_n → G` preserving the horizontal coordinate.

    `φ(x, z) = (x, (c ⟨D^{(k)}, z⟩_F + ¼ ⟨S^{(k)} x | x⟩)_k)` with `c` fitted at
    spec construction.

    Arguments:
        spec: Target homogeneous group.
        g: Element of the free group with the same rank.

    Returns:
        Image of `g`.
    """
    if g.n != spec.n:
        raise DimensionMismatchError(f"Can't map G_{g.n} onto a rank {spec.n} group.")
    vertical = spec.lift_matrix @ g.z.entries
    vertical += 0.25 * np.einsum("kij,i,j->k", spec.S, g.x, g.x)
    return HomogeneousElement(g.x.copy(), vertical)


def minimal_lift(spec: HomogeneousGroupSpec, a: HomogeneousElement) -> GroupElement:
    """Preimage of `a` under `lift_morphism` with minimal vertical norm."""
    _check_homogeneous(spec, a)
    target = a.z - 0.25 * np.einsum("kij,i,j->k", spec.S, a.x, a.x)
    z, _, _, _ = scipy.linalg.lstsq(spec.lift_matrix, target)
    return GroupElement(a.x.copy(), SkewMatrix(z))


def heisenberg_spec() -> HomogeneousGroupSpec:
    """Heisenberg group as a homogeneous group: `n = 2`, `m = 1`."""
    return HomogeneousGroupSpec(np.array([[[0.0, -1.0], [1.0, 0.0]]]))


def free_group_spec(n: int) -> HomogeneousGroupSpec:
    """`G_n` itself, through the matrices with `-1` at `(i, j)` and `1` at `(j, i)`."""
    rows, cols = pair_indices(n)
    C = np.zeros((skew_dim(n), n, n))
    C[np.arange(rows.size), rows, cols] = -1.0
    C[np.arange(rows.size), cols, rows] = 1.0
    return HomogeneousGroupSpec(C)
