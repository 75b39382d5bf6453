"""The graph-regularized energy and its ingredients.

Three pieces are defined here: the concave edge penalty family
(:class:`Rho`), the node-wise penalty family with closed-form proximal
operators (:class:`Phi`), and the full energy evaluation combining a
fidelity term, an edge-smoothness term, and the node penalty.

Two parameterizations of the energy are supported by
:class:`EnergySpec`:

* simple mode:  ||Y - F||_F^2 + lam * sum_e rho(||y_u - y_v||^2), the
  scalar-weighted form whose descent iterations reduce to the familiar
  propagation rules, and
* general mode: tr[(Y-F).T Wf (Y-F)] + sum_e rho(q_e) with
  q_e the per-edge quadratic form of Wp, plus the phi term in both.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .graph import LaplacianKind

GAMMA_CAP_DEFAULT = 1e6
_NEG_DIAG_TOL = 1e-12


# ---------------------------------------------------------------------------
# rho: concave edge penalties and their gradients (= attention weights)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Rho:
    """Edge penalty rho(z^2) selected by ``kind``.

    kinds: identity, log (eps), truncated_quadratic (tau: threshold on
    z, value saturates at tau^2), truncated_lp (p, tau, T: user-facing
    parameters; the internal thresholds are tau_bar = tau^(2-p) and
    T_bar = T^(2-p)), cosine (z^2 - z^4/8), absolute (|z|, gradient
    capped at gamma_max near zero).
    """

    kind: str
    eps: float = 1.0
    tau: float = 1.0
    p: float = 1.0
    big_t: float = 2.0
    gamma_max: float = GAMMA_CAP_DEFAULT

    def __post_init__(self):
        if self.kind not in ("identity", "log", "truncated_quadratic",
                             "truncated_lp", "cosine", "absolute"):
            raise ValueError(f"unknown rho kind {self.kind!r}")
        if self.kind == "log" and self.eps <= 0:
            raise ValueError("log penalty needs eps > 0")
        if self.kind == "truncated_quadratic" and self.tau < 0:
            raise ValueError("truncation threshold must be nonnegative")
        if self.kind == "truncated_lp":
            if not 0 < self.p <= 2:
                raise ValueError("truncated_lp needs 0 < p <= 2")
            if not 0 <= self.tau <= self.big_t:
                raise ValueError("truncated_lp needs 0 <= tau <= T")

    # internal reparameterized thresholds for truncated_lp
    @property
    def _tau_bar(self):
        return self.tau ** (2.0 - self.p)

    @property
    def _t_bar(self):
        return self.big_t ** (2.0 - self.p)

    def value(self, zsq):
        zsq = np.asarray(zsq, dtype=float)
        if self.kind == "identity":
            # linear: defined on all of R (indefinite quadratic forms)
            return zsq
        if (zsq < -_NEG_DIAG_TOL).any():
            raise ValueError("rho argument must be nonnegative")
        zsq = np.maximum(zsq, 0.0)
        if self.kind == "log":
            return np.log(zsq + self.eps)
        if self.kind == "truncated_quadratic":
            return np.minimum(zsq, self.tau ** 2)
        if self.kind == "truncated_lp":
            return self._lp_value(zsq)
        if self.kind == "cosine":
            return zsq - zsq ** 2 / 8.0
        # absolute
        return np.sqrt(zsq)

    def grad(self, zsq):
        """d rho(z^2) / d z^2, the per-edge attention weight."""
        zsq = np.asarray(zsq, dtype=float)
        if self.kind == "identity":
            return np.ones_like(zsq)
        if (zsq < -_NEG_DIAG_TOL).any():
            raise ValueError("rho argument must be nonnegative")
        zsq = np.maximum(zsq, 0.0)
        if self.kind == "log":
            return 1.0 / (zsq + self.eps)
        if self.kind == "truncated_quadratic":
            return (zsq < self.tau ** 2).astype(float)
        if self.kind == "truncated_lp":
            return self._lp_grad(zsq)
        if self.kind == "cosine":
            return 1.0 - zsq / 4.0
        z = np.sqrt(zsq)
        with np.errstate(divide="ignore"):
            g = np.where(z > 0, 0.5 / np.maximum(z, 1e-300), np.inf)
        return np.minimum(g, self.gamma_max)

    def grad2(self, zsq):
        """Second derivative wrt z^2 (one-sided at breakpoints)."""
        zsq = np.maximum(np.asarray(zsq, dtype=float), 0.0)
        if self.kind == "identity":
            return np.zeros_like(zsq)
        if self.kind == "log":
            return -1.0 / (zsq + self.eps) ** 2
        if self.kind == "cosine":
            return np.full_like(zsq, -0.25)
        if self.kind == "truncated_quadratic":
            return np.zeros_like(zsq)
        if self.kind == "truncated_lp":
            z = np.sqrt(zsq)
            out = np.zeros_like(zsq)
            mid = (z >= self._tau_bar) & (z <= self._t_bar)
            zm = np.maximum(z[mid], 1e-300)
            out[mid] = 0.5 * (self.p - 2.0) * zm ** (self.p - 4.0)
            return out
        out = np.zeros_like(zsq)
        pos = zsq > 0
        out[pos] = -0.25 * np.sqrt(zsq[pos]) ** -3.0
        return out

    def grad_max(self):
        """Upper bound on grad over [0, inf): the step-size bounds use it."""
        if self.kind == "identity":
            return 1.0
        if self.kind == "log":
            return 1.0 / self.eps
        if self.kind == "truncated_quadratic":
            return 1.0
        if self.kind == "truncated_lp":
            return self._tau_bar ** (self.p - 2.0)
        if self.kind == "cosine":
            return 1.0
        return self.gamma_max

    def _lp_value(self, zsq):
        z = np.sqrt(zsq)
        tb, t_big = self._tau_bar, self._t_bar
        rho0 = (2.0 - self.p) / self.p * tb ** self.p
        out = tb ** (self.p - 2.0) * zsq
        mid = (z >= tb) & (z <= t_big)
        out = np.asarray(out, dtype=float)
        out[mid] = 2.0 / self.p * z[mid] ** self.p - rho0
        out[z > t_big] = 2.0 / self.p * t_big ** self.p - rho0
        return out

    def _lp_grad(self, zsq):
        z = np.sqrt(zsq)
        tb, t_big = self._tau_bar, self._t_bar
        out = np.full_like(z, tb ** (self.p - 2.0))
        mid = (z >= tb) & (z <= t_big)
        out[mid] = z[mid] ** (self.p - 2.0)
        out[z > t_big] = 0.0
        return out


def rho_identity():
    return Rho("identity")


def rho_log(eps=1.0):
    return Rho("log", eps=eps)


def rho_truncated_quadratic(tau=1.0):
    return Rho("truncated_quadratic", tau=tau)


def rho_truncated_lp(p=0.1, tau=0.2, big_t=2.0):
    return Rho("truncated_lp", p=p, tau=tau, big_t=big_t)


def rho_cosine():
    return Rho("cosine")


def rho_absolute(gamma_max=GAMMA_CAP_DEFAULT):
    return Rho("absolute", gamma_max=gamma_max)


def rho_eval(rho, zsq):
    return rho.value(zsq)


def rho_grad(rho, zsq):
    return rho.grad(zsq)


def check_concavity(rho, grid):
    """Scan grad >= 0 and non-increasing over a grid of z^2 values.

    Returns a dict with ``ok`` plus the offending grid points, which is
    how the menu documents where e.g. the cosine penalty stops being a
    valid attention generator.
    """
    grid = np.sort(np.asarray(grid, dtype=float))
    g = rho.grad(grid)
    neg = grid[g < -1e-12]
    rising = grid[1:][np.diff(g) > 1e-12]
    return {
        "ok": neg.size == 0 and rising.size == 0,
        "negative_gradient_at": neg,
        "increasing_gradient_at": rising,
    }


# ---------------------------------------------------------------------------
# phi: node penalties through their proximal operators
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Phi:
    """Node-wise penalty; kinds: zero, relu (nonnegativity indicator),
    soft_threshold (kappa)."""

    kind: str
    kappa: float = 1.0

    def __post_init__(self):
        if self.kind not in ("zero", "relu", "soft_threshold"):
            raise ValueError(f"unknown phi kind {self.kind!r}")
        if self.kind == "soft_threshold" and self.kappa < 0:
            raise ValueError("soft_threshold needs kappa >= 0")

    def prox(self, u, alpha=1.0):
        if alpha <= 0:
            raise ValueError("prox step must be positive")
        u = np.asarray(u, dtype=float)
        if self.kind == "zero":
            return u.copy()
        if self.kind == "relu":
            return np.maximum(u, 0.0)
        return np.sign(u) * np.maximum(np.abs(u) - alpha * self.kappa, 0.0)

    def prox_derivative(self, u, alpha=1.0):
        """Elementwise derivative of the prox at u (0 at kinks)."""
        u = np.asarray(u, dtype=float)
        if self.kind == "zero":
            return np.ones_like(u)
        if self.kind == "relu":
            return (u > 0).astype(float)
        return (np.abs(u) > alpha * self.kappa).astype(float)

    def value(self, y):
        """Penalty total over all entries; +inf on indicator violation."""
        y = np.asarray(y, dtype=float)
        if self.kind == "zero":
            return 0.0
        if self.kind == "relu":
            return math.inf if (y < 0).any() else 0.0
        return float(self.kappa * np.abs(y).sum())


def phi_zero():
    return Phi("zero")


def phi_relu():
    return Phi("relu")


def phi_soft_threshold(kappa=1.0):
    return Phi("soft_threshold", kappa=kappa)


def prox_apply(phi, u, alpha=1.0):
    return phi.prox(u, alpha)


# ---------------------------------------------------------------------------
# config-string serialization ("rho=truncated_lp:p=0.1,tau=0.2,T=2")
# ---------------------------------------------------------------------------

def rho_to_config(rho):
    if rho.kind == "log":
        return f"log:eps={rho.eps:g}"
    if rho.kind == "truncated_quadratic":
        return f"truncated_quadratic:tau={rho.tau:g}"
    if rho.kind == "truncated_lp":
        return f"truncated_lp:p={rho.p:g},tau={rho.tau:g},T={rho.big_t:g}"
    if rho.kind == "absolute" and rho.gamma_max != GAMMA_CAP_DEFAULT:
        return f"absolute:gamma_max={rho.gamma_max:g}"
    return rho.kind


def rho_from_config(text):
    head, _, args = text.partition(":")
    kv = _parse_kv(args)
    if head == "identity":
        return rho_identity()
    if head == "log":
        return rho_log(eps=float(kv.get("eps", 1.0)))
    if head == "truncated_quadratic":
        return rho_truncated_quadratic(tau=float(kv.get("tau", 1.0)))
    if head == "truncated_lp":
        return rho_truncated_lp(
            p=float(kv.get("p", 0.1)),
            tau=float(kv.get("tau", 0.2)),
            big_t=float(kv.get("T", 2.0)),
        )
    if head == "cosine":
        return rho_cosine()
    if head == "absolute":
        return rho_absolute(gamma_max=float(kv.get("gamma_max", GAMMA_CAP_DEFAULT)))
    raise ValueError(f"unknown rho config {text!r}")


def phi_to_config(phi):
    if phi.kind == "soft_threshold":
        return f"soft_threshold:kappa={phi.kappa:g}"
    return phi.kind


def phi_from_config(text):
    head, _, args = text.partition(":")
    kv = _parse_kv(args)
    if head in ("zero", "none"):
        return phi_zero()
    if head == "relu":
        return phi_relu()
    if head == "soft_threshold":
        return phi_soft_threshold(kappa=float(kv.get("kappa", 1.0)))
    raise ValueError(f"unknown phi config {text!r}")


def _parse_kv(args):
    out = {}
    if args:
        for item in args.split(","):
            k, _, v = item.partition("=")
            if not _ or not k:
                raise ValueError(f"malformed parameter {item!r}")
            out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------------------
# the energy itself
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnergySpec:
    """Full parameterization of the energy.

    simple=True reads only ``lam`` from the weight block (fidelity
    weight I, propagation weight lam * I, rho applied to raw squared
    edge distances).  simple=False uses the d x d matrices ``w_fid``
    and ``w_prop``; rho is then applied to the per-edge quadratic form
    of ``w_prop``, which must stay >= -1e-12 (PSD w_prop guarantees it).

    gradient_mode selects between the exact fidelity gradient
    ("exact": (Y-F)(Wf+Wf.T)) and the literal printed update
    ("literal": Y(Wf+Wf.T) - F).  The literal form is what makes the
    fixed-point correspondence with implicit models exact; descent
    tests use the exact form.
    """

    rho: Rho = field(default_factory=rho_identity)
    phi: Phi = field(default_factory=phi_zero)
    lam: float = 1.0
    kind: LaplacianKind = LaplacianKind.COMBINATORIAL
    simple: bool = True
    w_fid: np.ndarray | None = None
    w_prop: np.ndarray | None = None
    gradient_mode: str = "exact"

    def __post_init__(self):
        if self.simple:
            if self.lam < 0:
                raise ValueError("lam must be nonnegative")
        else:
            if self.w_fid is None or self.w_prop is None:
                raise ValueError("general mode needs w_fid and w_prop")
            if self.w_fid.shape != self.w_prop.shape or self.w_fid.shape[0] != self.w_fid.shape[1]:
                raise ValueError("w_fid and w_prop must be square and matching")
        if self.gradient_mode not in ("exact", "literal"):
            raise ValueError("gradient_mode must be 'exact' or 'literal'")

    def w_fid_sym(self):
        return self.w_fid + self.w_fid.T

    def w_prop_sym(self):
        return self.w_prop + self.w_prop.T


def from_symmetric_pair(w_prop_sym, w_fid_sym, rho=None, phi=None,
                        kind=LaplacianKind.COMBINATORIAL, gradient_mode="literal"):
    """General-mode spec from the symmetrized weights that appear in the
    fixed-point form (stored halved so W + W.T reproduces them)."""
    return EnergySpec(
        rho=rho or rho_identity(),
        phi=phi or phi_zero(),
        kind=kind,
        simple=False,
        w_fid=np.asarray(w_fid_sym, dtype=float) / 2.0,
        w_prop=np.asarray(w_prop_sym, dtype=float) / 2.0,
        gradient_mode=gradient_mode,
    )


@dataclass(frozen=True)
class EnergyValue:
    fidelity: float
    smoothness: float
    phi_term: float

    @property
    def total(self):
        return self.fidelity + self.smoothness + self.phi_term


def edge_diagonal(spec, bview, y):
    """Per-edge rho arguments: squared distances in simple mode, the
    w_prop quadratic form otherwise.

    With identity rho the quadratic form may legitimately be negative
    (indefinite w_prop) and is passed through untouched.  Nonlinear rho
    needs a nonnegative argument: small rounding negatives are clamped,
    anything below -1e-12 is an error (PSD w_prop rules it out).

    Simple mode always feeds rho the raw squared distances (the
    attention formula), even when the propagation operator itself is
    degree-normalized.
    """
    if spec.simple:
        vals = bview.raw_edge_sqnorm(y)
    else:
        vals = bview.edge_quadform(y, spec.w_prop)
    if spec.rho.kind == "identity":
        return vals
    if (vals < -_NEG_DIAG_TOL).any():
        raise ValueError("edge quadratic form went negative; w_prop must be PSD")
    return np.maximum(vals, 0.0)


def energy_eval(spec, bview, y, fx):
    """Evaluate the three energy terms at Y given base predictions fx."""
    y = np.asarray(y, dtype=float)
    fx = np.asarray(fx, dtype=float)
    if y.shape != fx.shape:
        raise ValueError("Y and f(X) shapes differ")
    r = y - fx
    if spec.simple:
        fid = float(np.sum(r * r))
        smooth = float(spec.lam * np.sum(spec.rho.value(edge_diagonal(spec, bview, y))))
    else:
        fid = float(np.einsum("ij,jk,ik->", r, spec.w_fid, r))
        smooth = float(np.sum(spec.rho.value(edge_diagonal(spec, bview, y))))
    return EnergyValue(fid, smooth, spec.phi.value(y))
