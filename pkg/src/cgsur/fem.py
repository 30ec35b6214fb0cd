"""P1 finite elements on a structured triangulation of the unit square.

Every pixel of the d x d grid is split into two linear triangles along the
lower-left to upper-right diagonal. This keeps fluxes element-wise constant
and makes nested grids (fine size a multiple of coarse size) share shape
functions exactly: each coarse triangle is a union of fine triangles.

Node n sits at (ix/d, iy/d) with n = iy*(d+1) + ix; the first coordinate is
s1, the second s2. Dirichlet nodes are the left/right edges (s1 in {0, 1});
the top/bottom edges carry the natural zero-flux condition. Solution vectors
always store all (d+1)^2 nodes, Dirichlet entries included, so constraint
operators act on a fixed-size vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import GridMismatch, InvalidSize, NonPositiveConductivity, SingularSystem
from .field import BoundaryCoeffs, FieldSample

# Below this node count dense factorizations beat sparse ones.
_DENSE_NODE_LIMIT = 500

# Number of linear solves performed, keyed by grid size d. Used to assert
# that prediction never touches the fine grid.
SOLVE_COUNTS: dict[int, int] = {}


def reset_solve_counts() -> None:
    SOLVE_COUNTS.clear()


def solve_count(d: int) -> int:
    return SOLVE_COUNTS.get(d, 0)


# Reference element stiffness (kappa = 1) and gradient matrices for the two
# triangle orientations; grid-size independent apart from the 1/h in B.
# Lower triangle: vertices (0,0), (h,0), (h,h). Upper: (0,0), (h,h), (0,h).
_K_REF = np.array(
    [
        [[0.5, -0.5, 0.0], [-0.5, 1.0, -0.5], [0.0, -0.5, 0.5]],
        [[0.5, 0.0, -0.5], [0.0, 0.5, -0.5], [-0.5, -0.5, 1.0]],
    ]
)
_B_REF = np.array(
    [
        [[-1.0, 1.0, 0.0], [0.0, -1.0, 1.0]],
        [[0.0, 1.0, -1.0], [-1.0, 0.0, 1.0]],
    ]
)


class Mesh:
    """Structured triangulation with precomputed assembly indexing."""

    def __init__(self, d: int):
        if d < 1:
            raise InvalidSize(f"grid size must be >= 1, got {d}")
        self.d = d
        self.h = 1.0 / d
        self.n_nodes = (d + 1) ** 2
        self.n_pixels = d * d
        self.n_elements = 2 * d * d

        ix, iy = np.meshgrid(np.arange(d + 1), np.arange(d + 1), indexing="xy")
        self.nodes = np.column_stack((ix.ravel() / d, iy.ravel() / d))

        pix = np.arange(self.n_pixels)
        row, col = pix // d, pix % d
        n00 = row * (d + 1) + col
        n10 = n00 + 1
        n01 = n00 + d + 1
        n11 = n01 + 1
        lower = np.column_stack((n00, n10, n11))
        upper = np.column_stack((n00, n11, n01))
        self.elements = np.empty((self.n_elements, 3), dtype=np.int64)
        self.elements[0::2] = lower
        self.elements[1::2] = upper
        self.pixel_of_element = np.arange(self.n_elements) // 2
        # 0 = lower triangle, 1 = upper triangle
        self.element_kind = np.tile(np.array([0, 1]), self.n_pixels)
        self.element_area = self.h * self.h / 2.0

        node_ix = np.arange(self.n_nodes) % (d + 1)
        node_iy = np.arange(self.n_nodes) // (d + 1)
        dirichlet = (node_ix == 0) | (node_ix == d)
        self.dirichlet_mask = dirichlet
        self.dirichlet_nodes = np.where(dirichlet)[0]
        self.free_nodes = np.where(~dirichlet)[0]
        self.neumann_nodes = np.where(
            ~dirichlet & ((node_iy == 0) | (node_iy == d))
        )[0]

        # COO indices for vectorized stiffness assembly.
        self._rows = np.repeat(self.elements, 3, axis=1).ravel()
        self._cols = np.tile(self.elements, (1, 3)).ravel()
        # Scatter of free-node positions for the constrained partition.
        self._free_pos = -np.ones(self.n_nodes, dtype=np.int64)
        self._free_pos[self.free_nodes] = np.arange(len(self.free_nodes))

    def element_stiffness_scaled(self, kappa_elem: np.ndarray) -> np.ndarray:
        """Per-element 3x3 stiffness blocks for given element conductivities."""
        return kappa_elem[:, None, None] * _K_REF[self.element_kind]

    def dirichlet_values(self, bc: BoundaryCoeffs) -> np.ndarray:
        """Full-length vector, zero on free nodes, prescribed data on Gamma_D."""
        vals = np.zeros(self.n_nodes)
        s2 = self.nodes[self.dirichlet_nodes, 1]
        left = self.nodes[self.dirichlet_nodes, 0] == 0.0
        u = np.where(
            left,
            bc.a0 * s2 + bc.a1 * (1.0 - s2),
            bc.a2 * s2 + bc.a3 * (1.0 - s2),
        )
        vals[self.dirichlet_nodes] = u
        return vals


@lru_cache(maxsize=None)
def build_mesh(d: int) -> Mesh:
    """Construct (and memoize) the structured mesh; treat it as read-only."""
    return Mesh(d)


def _as_kappa(mesh: Mesh, kappa) -> np.ndarray:
    if isinstance(kappa, FieldSample):
        kappa = kappa.kappa_vec
    kappa = np.asarray(kappa, dtype=np.float64)
    if kappa.shape != (mesh.n_pixels,):
        raise GridMismatch(
            f"kappa has shape {kappa.shape}, expected ({mesh.n_pixels},)"
        )
    if not np.all(kappa > 0.0):
        raise NonPositiveConductivity("conductivity must be positive everywhere")
    return kappa


@dataclass
class FemSystem:
    """Assembled stiffness, load and Dirichlet data for one (kappa, bc)."""

    mesh: Mesh
    K: object  # dense ndarray or scipy CSR, over all nodes
    f_vec: np.ndarray
    dirichlet_values: np.ndarray
    kappa: np.ndarray
    _factor: object = field(default=None, repr=False)
    _solution: np.ndarray = field(default=None, repr=False)

    @property
    def dense(self) -> bool:
        return isinstance(self.K, np.ndarray)

    def matvec(self, y: np.ndarray) -> np.ndarray:
        return self.K @ y

    def _factorize(self):
        if self._factor is not None:
            return self._factor
        free = self.mesh.free_nodes
        try:
            if self.dense:
                K_ff = self.K[np.ix_(free, free)]
                self._factor = ("chol", scipy.linalg.cho_factor(K_ff))
            else:
                K_ff = self.K[free][:, free].tocsc()
                self._factor = ("splu", spla.splu(K_ff))
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, RuntimeError) as e:
            raise SingularSystem(f"stiffness factorization failed: {e}") from None
        return self._factor

    def solve_free(self, rhs_f: np.ndarray) -> np.ndarray:
        """Solve K_ff u = rhs_f, reusing the cached factor."""
        kind, fac = self._factorize()
        SOLVE_COUNTS[self.mesh.d] = SOLVE_COUNTS.get(self.mesh.d, 0) + 1
        if kind == "chol":
            return scipy.linalg.cho_solve(fac, rhs_f)
        out = fac.solve(rhs_f)
        if not np.all(np.isfinite(out)):
            raise SingularSystem("sparse solve produced non-finite values")
        return out


@dataclass(frozen=True)
class Solution:
    """Nodal solution over all (d+1)^2 nodes, Dirichlet entries included."""

    y_vec: np.ndarray


def assemble(mesh: Mesh, kappa, bc: BoundaryCoeffs, source=0.0) -> FemSystem:
    """Assemble stiffness and load for piecewise-constant kappa.

    K[a, b] = sum_e kappa_e int_e grad(phi_a) . grad(phi_b);
    f_vec[a] = sum_e int_e f phi_a (source constant, or one value per pixel).
    """
    kappa = _as_kappa(mesh, kappa)
    blocks = mesh.element_stiffness_scaled(kappa[mesh.pixel_of_element])
    if mesh.n_nodes <= _DENSE_NODE_LIMIT:
        K = np.zeros((mesh.n_nodes, mesh.n_nodes))
        np.add.at(K, (mesh._rows, mesh._cols), blocks.ravel())
    else:
        K = sp.coo_matrix(
            (blocks.ravel(), (mesh._rows, mesh._cols)),
            shape=(mesh.n_nodes, mesh.n_nodes),
        ).tocsr()

    f_vec = np.zeros(mesh.n_nodes)
    src = np.asarray(source, dtype=np.float64)
    if src.ndim == 0:
        f_elem = np.full(mesh.n_elements, float(src))
    else:
        if src.shape != (mesh.n_pixels,):
            raise GridMismatch(
                f"source has shape {src.shape}, expected scalar or ({mesh.n_pixels},)"
            )
        f_elem = src[mesh.pixel_of_element]
    np.add.at(
        f_vec,
        mesh.elements.ravel(),
        np.repeat(f_elem * mesh.element_area / 3.0, 3),
    )

    return FemSystem(
        mesh=mesh,
        K=K,
        f_vec=f_vec,
        dirichlet_values=mesh.dirichlet_values(bc),
        kappa=kappa,
    )


def solve(sys: FemSystem) -> Solution:
    """Solve the constrained system; Dirichlet entries are set exactly."""
    if sys._solution is not None:
        return Solution(y_vec=sys._solution)
    mesh = sys.mesh
    free, cons = mesh.free_nodes, mesh.dirichlet_nodes
    y = sys.dirichlet_values.copy()
    if len(free) == 0:
        # d = 1: all four nodes carry Dirichlet data.
        SOLVE_COUNTS[mesh.d] = SOLVE_COUNTS.get(mesh.d, 0) + 1
        sys._solution = y
        return Solution(y_vec=y)
    if sys.dense:
        K_fc = sys.K[np.ix_(free, cons)]
    else:
        K_fc = sys.K[free][:, cons]
    rhs = sys.f_vec[free] - K_fc @ y[cons]
    y[free] = sys.solve_free(rhs)
    sys._solution = y
    return Solution(y_vec=y)


def solve_vjp(sys: FemSystem, cotangent: np.ndarray) -> np.ndarray:
    """Gradient of cotangent^T y(kappa) with respect to per-pixel kappa.

    One adjoint solve: K_ff mu = cotangent_f, then per pixel p the gradient
    is -sum_{e in p} mu_e^T (dK_e) y_e. Dirichlet components of the cotangent
    drop out because the prescribed values do not depend on kappa.
    """
    cotangent = np.asarray(cotangent, dtype=np.float64)
    if cotangent.shape != (sys.mesh.n_nodes,):
        raise GridMismatch(
            f"cotangent has shape {cotangent.shape}, expected ({sys.mesh.n_nodes},)"
        )
    mesh = sys.mesh
    if len(mesh.free_nodes) == 0:
        return np.zeros(mesh.n_pixels)
    y = solve(sys).y_vec
    mu = np.zeros(mesh.n_nodes)
    mu[mesh.free_nodes] = sys.solve_free(cotangent[mesh.free_nodes])

    Ye = y[mesh.elements]
    Me = mu[mesh.elements]
    Kref = _K_REF[mesh.element_kind]
    per_elem = -np.einsum("ei,eij,ej->e", Me, Kref, Ye)
    grad = np.zeros(mesh.n_pixels)
    np.add.at(grad, mesh.pixel_of_element, per_elem)
    return grad


def element_flux(mesh: Mesh, kappa, y: np.ndarray) -> np.ndarray:
    """Element-wise constant flux J_e = -kappa_e grad(u)|_e, shape (E, 2)."""
    kappa = _as_kappa(mesh, kappa)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (mesh.n_nodes,):
        raise GridMismatch(f"y has shape {y.shape}, expected ({mesh.n_nodes},)")
    grads = np.einsum("eij,ej->ei", _B_REF[mesh.element_kind] / mesh.h, y[mesh.elements])
    return -kappa[mesh.pixel_of_element][:, None] * grads


def energy(sys: FemSystem, y) -> float:
    """Discrete potential 0.5 y^T K y - f^T y over the full nodal vector."""
    if isinstance(y, Solution):
        y = y.y_vec
    y = np.asarray(y, dtype=np.float64)
    return 0.5 * float(y @ (sys.K @ y)) - float(sys.f_vec @ y)


def energy_grad(sys: FemSystem, y) -> np.ndarray:
    if isinstance(y, Solution):
        y = y.y_vec
    return sys.K @ y - sys.f_vec


def _locate_in_coarse(fine_nodes: np.ndarray, d_c: int):
    """Coarse cell (row, col) and local coords (xi, eta) of each fine node."""
    x, y = fine_nodes[:, 0], fine_nodes[:, 1]
    col = np.minimum((x * d_c).astype(np.int64), d_c - 1)
    row = np.minimum((y * d_c).astype(np.int64), d_c - 1)
    xi = x * d_c - col
    eta = y * d_c - row
    return row, col, xi, eta


def _check_nested(d_c: int, d_f: int):
    if d_f % d_c != 0:
        raise GridMismatch(f"fine size {d_f} is not a multiple of coarse size {d_c}")


def bilinear_prolongation(d_c: int, d_f: int) -> sp.csr_matrix:
    """Coarse-to-fine nodal interpolation with tensor-product hat weights.

    Rows sum to one, and globally linear fields are reproduced exactly.
    """
    _check_nested(d_c, d_f)
    fine = build_mesh(d_f)
    row, col, xi, eta = _locate_in_coarse(fine.nodes, d_c)
    n00 = row * (d_c + 1) + col
    corners = np.column_stack((n00, n00 + 1, n00 + d_c + 1, n00 + d_c + 2))
    weights = np.column_stack(
        ((1 - xi) * (1 - eta), xi * (1 - eta), (1 - xi) * eta, xi * eta)
    )
    rows = np.repeat(np.arange(fine.n_nodes), 4)
    mat = sp.coo_matrix(
        (weights.ravel(), (rows, corners.ravel())),
        shape=(fine.n_nodes, (d_c + 1) ** 2),
    )
    return mat.tocsr()


def p1_prolongation(d_c: int, d_f: int) -> sp.csr_matrix:
    """Coarse P1 shape functions evaluated at fine nodes.

    Column m is the fine-mesh nodal interpolant of the coarse hat function at
    coarse node m. Because the grids are nested and share the diagonal split,
    these interpolants lie exactly in the fine FE space.
    """
    _check_nested(d_c, d_f)
    fine = build_mesh(d_f)
    row, col, xi, eta = _locate_in_coarse(fine.nodes, d_c)
    n00 = row * (d_c + 1) + col
    lower = eta <= xi
    # Lower triangle barycentrics: (1-xi, xi-eta, eta) on (n00, n10, n11);
    # upper: (1-eta, xi, eta-xi) on (n00, n11, n01). They agree on the diagonal.
    cols = np.where(
        lower[:, None],
        np.column_stack((n00, n00 + 1, n00 + d_c + 2)),
        np.column_stack((n00, n00 + d_c + 2, n00 + d_c + 1)),
    )
    weights = np.where(
        lower[:, None],
        np.column_stack((1 - xi, xi - eta, eta)),
        np.column_stack((1 - eta, xi, eta - xi)),
    )
    rows = np.repeat(np.arange(fine.n_nodes), 3)
    mat = sp.coo_matrix(
        (weights.ravel(), (rows, cols.ravel())),
        shape=(fine.n_nodes, (d_c + 1) ** 2),
    )
    return mat.tocsr()
