"""1D P1 finite elements: meshes and mass/stiffness matrices.

The canonical PDE is discretized as M u' = -G(u) with G(u) = Kc u - M f(u),
where K is the scalar Neumann stiffness (M^-1 K approximates -Laplacian)
and Kc applies K per field component, weighted by its diffusion constant.
ODE models skip this module entirely via :func:`ode_operators`.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import InvalidArgumentError


@dataclass(frozen=True)
class Mesh1D:
    """Nodes of a 1D mesh on (-lx, lx) plus element lengths."""

    nodes: np.ndarray
    element_lengths: np.ndarray

    @property
    def n(self):
        return self.nodes.size

    @property
    def length(self):
        return float(self.nodes[-1] - self.nodes[0])


@dataclass(frozen=True)
class FemOperators:
    """Scalar mass and Neumann stiffness matrices for one field component."""

    M: sp.csr_matrix
    K: sp.csr_matrix
    mesh: Mesh1D | None = None

    @property
    def n(self):
        return self.M.shape[0]

    @property
    def omega(self):
        """Measure of the domain (1 for the ODE case)."""
        if self.mesh is None:
            return 1.0
        return self.mesh.length


def build_mesh(lx, nx):
    """Equidistant mesh of nx elements on (-lx, lx)."""
    if not lx > 0:
        raise InvalidArgumentError(f"half-length must be positive, got {lx}")
    if nx < 1:
        raise InvalidArgumentError(f"need at least one element, got nx={nx}")
    nodes = np.linspace(-lx, lx, nx + 1)
    return Mesh1D(nodes=nodes, element_lengths=np.diff(nodes))


def assemble_operators(mesh):
    """Assemble consistent P1 mass and stiffness matrices for the mesh."""
    n = mesh.n
    h = mesh.element_lengths
    if np.any(h <= 0):
        raise InvalidArgumentError("mesh nodes must be strictly increasing")

    # consistent element mass (h/6)[[2,1],[1,2]], stiffness (1/h)[[1,-1],[-1,1]]
    main_m = np.zeros(n)
    main_m[:-1] += 2.0 * h / 6.0
    main_m[1:] += 2.0 * h / 6.0
    off_m = h / 6.0

    main_k = np.zeros(n)
    main_k[:-1] += 1.0 / h
    main_k[1:] += 1.0 / h
    off_k = -1.0 / h

    M = sp.diags([off_m, main_m, off_m], [-1, 0, 1], format="csr")
    K = sp.diags([off_k, main_k, off_k], [-1, 0, 1], format="csr")
    return FemOperators(M=M, K=K, mesh=mesh)


def ode_operators():
    """Degenerate single-node operators (M = 1, K = 0) for ODE models."""
    M = sp.csr_matrix(np.array([[1.0]]))
    K = sp.csr_matrix(np.array([[0.0]]))
    return FemOperators(M=M, K=K, mesh=None)
