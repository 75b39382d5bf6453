"""Sparse undirected graphs and the operators derived from them.

A :class:`Graph` stores a deduplicated, canonically ordered edge list
plus a CSR adjacency view.  Everything downstream (Laplacians,
incidence factorizations, propagation operators, spectral estimates)
is derived on demand; graphs are immutable and safe to share across
threads.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp

from . import _kernels


class LaplacianKind(Enum):
    COMBINATORIAL = "combinatorial"
    SYM_NORMALIZED = "sym_normalized"
    SELF_LOOP_SYM = "self_loop_sym"


@dataclass(frozen=True)
class Graph:
    """Immutable simple undirected graph with unit edge weights.

    ``edges`` is an (m, 2) int array with u < v per row, sorted
    lexicographically and deduplicated.  ``adjacency`` is the symmetric
    CSR matrix implied by it.
    """

    n: int
    edges: np.ndarray
    adjacency: sp.csr_matrix = field(repr=False)

    @property
    def m(self):
        return self.edges.shape[0]

    @property
    def degrees(self):
        return np.asarray(self.adjacency.sum(axis=1)).ravel()


@dataclass(frozen=True)
class IncidenceView:
    """Edge-row factorization B with B.T @ B equal to a chosen Laplacian.

    The first ``n_edge_rows`` rows correspond to graph edges: row k for
    edge (u, v) carries +scale at u and -scale at v.  Under
    SYM_NORMALIZED, isolated nodes get one extra unit row each so the
    factorization reproduces the e_i convention of the Laplacian; the
    energy and propagation code only ever consume the edge rows.
    """

    kind: LaplacianKind
    n: int
    eu: np.ndarray
    ev: np.ndarray
    su: np.ndarray
    sv: np.ndarray
    extra_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_edge_rows(self):
        return self.eu.shape[0]

    @property
    def rows(self):
        return self.n_edge_rows + self.extra_rows.shape[0]

    def matrix(self):
        """Materialize B as a sparse matrix (tests and small solves)."""
        m = self.n_edge_rows
        q = self.extra_rows.shape[0]
        rows = np.concatenate([np.arange(m), np.arange(m)])
        cols = np.concatenate([self.eu, self.ev])
        vals = np.concatenate([self.su, -self.sv])
        if q:
            rows = np.concatenate([rows, m + np.arange(q)])
            cols = np.concatenate([cols, self.extra_rows])
            vals = np.concatenate([vals, np.ones(q)])
        return sp.csr_matrix((vals, (rows, cols)), shape=(m + q, self.n))

    def apply(self, y):
        """B @ y restricted to the edge rows."""
        return _kernels.edge_diff(y, self.eu, self.ev, self.su, self.sv)

    def apply_t(self, e):
        """B.T @ e for edge-row inputs."""
        return _kernels.edge_scatter(e, self.eu, self.ev, self.su, self.sv, self.n)

    def weighted_laplacian_apply(self, y, gamma):
        """B.T @ diag(gamma) @ B @ y over the edge rows."""
        return _kernels.weighted_lap_apply(y, gamma, self.eu, self.ev, self.su, self.sv)

    def edge_sqnorm(self, y):
        return _kernels.edge_sqnorm(y, self.eu, self.ev, self.su, self.sv)

    def raw_edge_sqnorm(self, y):
        """Unscaled ||y_u - y_v||^2 per edge, whatever the kind."""
        ones = np.ones(self.n_edge_rows)
        return _kernels.edge_sqnorm(y, self.eu, self.ev, ones, ones)

    def raw_apply(self, y):
        """Unscaled endpoint differences y_u - y_v per edge."""
        ones = np.ones(self.n_edge_rows)
        return _kernels.edge_diff(y, self.eu, self.ev, ones, ones)

    def raw_apply_t(self, e):
        """Transpose of raw_apply (unit-scaled scatter)."""
        ones = np.ones(self.n_edge_rows)
        return _kernels.edge_scatter(e, self.eu, self.ev, ones, ones, self.n)

    def edge_quadform(self, y, w):
        return _kernels.edge_quadform(y, w, self.eu, self.ev, self.su, self.sv)


class GraphError(ValueError):
    pass


def build_graph(n, edge_pairs, self_loops="strip", duplicates="dedup"):
    """Validate an edge list and build the canonical Graph.

    self_loops: "strip" drops (u, u) pairs, "error" rejects them.
    duplicates: "dedup" collapses repeats, "error" rejects them.
    """
    if n < 0:
        raise GraphError("node count must be nonnegative")
    pairs = np.asarray(edge_pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.size and (pairs.min() < 0 or pairs.max() >= n):
        bad = pairs[(pairs < 0).any(axis=1) | (pairs >= n).any(axis=1)][0]
        raise GraphError(f"edge ({bad[0]}, {bad[1]}) out of range for n={n}")
    loops = pairs[:, 0] == pairs[:, 1]
    if loops.any():
        if self_loops == "error":
            u = pairs[loops][0, 0]
            raise GraphError(f"self-loop at node {u}")
        pairs = pairs[~loops]
    lo = np.minimum(pairs[:, 0], pairs[:, 1])
    hi = np.maximum(pairs[:, 0], pairs[:, 1])
    pairs = np.stack([lo, hi], axis=1)
    if pairs.shape[0]:
        uniq, counts = np.unique(pairs, axis=0, return_counts=True)
        if duplicates == "error" and (counts > 1).any():
            u, v = uniq[counts > 1][0]
            raise GraphError(f"duplicate edge ({u}, {v})")
        pairs = uniq
    adj = sp.csr_matrix((n, n))
    if pairs.shape[0]:
        ones = np.ones(pairs.shape[0])
        adj = sp.csr_matrix(
            (np.concatenate([ones, ones]),
             (np.concatenate([pairs[:, 0], pairs[:, 1]]),
              np.concatenate([pairs[:, 1], pairs[:, 0]]))),
            shape=(n, n),
        )
    return Graph(n=n, edges=pairs, adjacency=adj)


def read_edge_list(path, n=None):
    """Parse a "u<TAB>v" edge-list file ('#' comments, 0-indexed)."""
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t") if "\t" in line else line.split()
            if len(parts) != 2:
                raise GraphError(f"{path}:{lineno}: expected 'u<TAB>v', got {line!r}")
            try:
                pairs.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise GraphError(f"{path}:{lineno}: non-integer endpoint in {line!r}")
    if n is None:
        n = 1 + max((max(u, v) for u, v in pairs), default=-1)
    return build_graph(n, pairs)


def write_edge_list(g, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# u<TAB>v edge list, 0-indexed\n")
        for u, v in g.edges:
            fh.write(f"{u}\t{v}\n")


def _inv_sqrt(deg):
    # zero-degree entries map to 0 (isolated-node convention)
    out = np.zeros_like(deg, dtype=float)
    nz = deg > 0
    out[nz] = 1.0 / np.sqrt(deg[nz])
    return out


def laplacian(g, kind):
    """Selected Laplacian as sparse CSR (symmetric, PSD).

    COMBINATORIAL: D - A.  SYM_NORMALIZED: I - D^{-1/2} A D^{-1/2},
    with the row of an isolated node set to e_i.  SELF_LOOP_SYM uses
    A + I and its degrees.
    """
    d = g.degrees
    eye = sp.identity(g.n, format="csr")
    if kind is LaplacianKind.COMBINATORIAL:
        return (sp.diags(d) - g.adjacency).tocsr()
    if kind is LaplacianKind.SYM_NORMALIZED:
        s = _inv_sqrt(d)
        return (eye - sp.diags(s) @ g.adjacency @ sp.diags(s)).tocsr()
    if kind is LaplacianKind.SELF_LOOP_SYM:
        s = _inv_sqrt(d + 1.0)
        a_tilde = g.adjacency + eye
        return (eye - sp.diags(s) @ a_tilde @ sp.diags(s)).tocsr()
    raise ValueError(f"unknown Laplacian kind {kind}")


def propagation_matrix(g, kind):
    """I minus the selected Laplacian (so P row of an isolated node is 0
    under SYM_NORMALIZED, and D~^{-1/2} A~ D~^{-1/2} under SELF_LOOP_SYM)."""
    return (sp.identity(g.n, format="csr") - laplacian(g, kind)).tocsr()


def incidence(g, kind):
    """Edge-row incidence view whose B.T @ B equals laplacian(g, kind).

    Sign convention: edge (u, v) with u < v carries + at u, - at v.
    """
    eu = g.edges[:, 0].astype(np.int64) if g.m else np.zeros(0, dtype=np.int64)
    ev = g.edges[:, 1].astype(np.int64) if g.m else np.zeros(0, dtype=np.int64)
    d = g.degrees
    if kind is LaplacianKind.COMBINATORIAL:
        su = np.ones(g.m)
        return IncidenceView(kind, g.n, eu, ev, su, su.copy())
    if kind is LaplacianKind.SYM_NORMALIZED:
        s = _inv_sqrt(d)
        extra = np.flatnonzero(d == 0).astype(np.int64)
        return IncidenceView(kind, g.n, eu, ev, s[eu], s[ev], extra_rows=extra)
    if kind is LaplacianKind.SELF_LOOP_SYM:
        s = _inv_sqrt(d + 1.0)
        # self-loop mass keeps D~^{-1/2}(D - A)D~^{-1/2} = I - D~^{-1/2}A~D~^{-1/2}
        return IncidenceView(kind, g.n, eu, ev, s[eu], s[ev])
    raise ValueError(f"unknown Laplacian kind {kind}")


class PowerIterationError(RuntimeError):
    pass


def spectral_norm(mat, tol=1e-8, max_iters=10000, seed=0):
    """Largest singular value via power iteration on M.T @ M.

    Deterministic for a fixed seed.  Accepts dense arrays or any object
    with matvec-compatible ``@``/``.T``.  Raises PowerIterationError if
    the Rayleigh estimate has not stabilized after max_iters.
    """
    n = mat.shape[1]
    if n == 0 or (sp.issparse(mat) and mat.nnz == 0) or (not sp.issparse(mat) and not np.any(mat)):
        return 0.0
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    x /= np.linalg.norm(x)
    mat_t = mat.T
    est = 0.0
    for _ in range(max_iters):
        y = mat_t @ (mat @ x)
        norm_y = np.linalg.norm(y)
        if norm_y == 0.0:
            return 0.0
        new_est = np.sqrt(norm_y)
        x = y / norm_y
        if abs(new_est - est) <= tol * max(new_est, 1e-300):
            return new_est
        est = new_est
    raise PowerIterationError(f"power iteration did not converge in {max_iters} iterations")


def homophily_ratio(g, labels):
    """Fraction of edges whose endpoints share a label."""
    labels = np.asarray(labels)
    if labels.shape[0] != g.n:
        raise GraphError("labels length must equal node count")
    if g.m == 0:
        raise GraphError("homophily ratio undefined for an empty edge set")
    same = labels[g.edges[:, 0]] == labels[g.edges[:, 1]]
    return float(np.mean(same))
