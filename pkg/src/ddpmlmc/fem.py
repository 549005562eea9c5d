"""P1 finite elements for the drift-diffusion-Poisson system in Slotboom variables.

Units: lengths in nm, potentials in V, concentrations in cm^-3, mobilities in
cm^2/(V s), lifetimes in s.  The Poisson equation is scaled by the vacuum
permittivity so that ``-div(A grad V) = POISSON_SCALE * (charge in cm^-3)``
with ``A`` the relative permittivity.

A single sample is solved by Gummel iteration: semilinear Poisson (damped
Newton), then the two linear continuity equations with exponentially fitted
(Scharfetter-Gummel) edge coefficients, the SRH denominator frozen at the
previous iterate.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from . import kernels
from .mesh import GAMMA, LIQ, OX, SI, TriMesh

Q = 1.602176634e-19
EPS0 = 8.8541878128e-12
POISSON_SCALE = Q / EPS0 * 1e-12  # V nm^2 per (cm^-3 nm^2)... i.e. cm^-3 -> V/nm^2
SURFACE_SCALE = Q / EPS0 * 1e-5  # cm^-2 -> V/nm
CM2_TO_NM2 = 1e14
PER_NM3_TO_PER_CM3 = 1e21
_EXP_CLIP = 700.0


class AssemblyError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class SolverError(RuntimeError):
    """Newton failure; ``last_iterate`` holds the final potential."""

    def __init__(self, msg, last_iterate=None, history=None):
        super().__init__(msg)
        self.last_iterate = last_iterate
        self.history = history or []


class IterationError(RuntimeError):
    """Gummel loop did not converge; ``history`` holds the update norms."""

    def __init__(self, msg, history=None):
        super().__init__(msg)
        self.history = history or []


@dataclass(frozen=True)
class PhysicalParams:
    q: float = Q
    U_T: float = 0.025852
    n_i: float = 1.0e10
    tau_n: float = 1.0e-7
    tau_p: float = 1.0e-7
    mu_n: float = 1400.0
    mu_p: float = 450.0
    eta: float = 6.022e18  # 10 mM monovalent salt
    beta: float | None = None  # defaults to 1/U_T
    Phi: float = 0.0
    C_dop: float = 2.0e17
    dopant_sign: int = -1  # boron acceptors
    A_Si: float = 11.7
    A_ox: float = 3.9
    A_liq: float = 78.0
    A_dop: float = 4.2
    interface_dipole: float = 0.0  # potential jump across Gamma (V)
    interface_charge: float = 0.0  # sheet charge on Gamma (cm^-2)

    def __post_init__(self):
        if self.beta is None:
            object.__setattr__(self, "beta", 1.0 / self.U_T)
        for name in ("q", "U_T", "n_i", "tau_n", "tau_p", "mu_n", "mu_p", "beta",
                     "A_Si", "A_ox", "A_liq", "A_dop"):
            val = getattr(self, name)
            if not (val > 0) or not math.isfinite(val):
                raise ConfigurationError(f"{name} must be positive and finite, got {val}")
        if self.eta < 0 or self.C_dop < 0:
            raise ConfigurationError("eta and C_dop must be non-negative")
        if self.dopant_sign not in (-1, 1):
            raise ConfigurationError("dopant_sign must be +1 or -1")

    def permittivity(self, tag):
        return {SI: self.A_Si, OX: self.A_ox, LIQ: self.A_liq}[tag]

    @property
    def signed_doping(self):
        return self.dopant_sign * self.C_dop

    @property
    def permittivity_bounds(self):
        vals = (self.A_Si, self.A_ox, self.A_liq, self.A_dop)
        return min(vals), max(vals)


def ohmic_boundary_values(C_dop_local, U, params: PhysicalParams):
    """Potential and Slotboom values at an Ohmic contact.

    Space-charge neutrality plus thermal equilibrium give ``n_D``, ``p_D``;
    the quasi-Fermi levels are pinned to the applied voltage ``U``.
    Returns ``(V1, u_D, v_D)``.
    """
    n_i, UT = params.n_i, params.U_T
    C = float(C_dop_local)
    root = math.sqrt(C * C + 4.0 * n_i * n_i)
    # cancellation-free roots of n^2 - C n - n_i^2 = 0
    if C >= 0:
        n_D = 0.5 * (C + root)
        p_D = n_i * n_i / n_D
    else:
        p_D = 0.5 * (-C + root)
        n_D = n_i * n_i / p_D
    V1 = U + UT * math.log(n_D / n_i)
    u_D = math.exp(math.log(n_D / n_i) - V1 / UT)
    v_D = math.exp(math.log(p_D / n_i) + V1 / UT)
    return V1, u_D, v_D


def carrier_densities(C_dop_local, params: PhysicalParams):
    """``(n_D, p_D)`` of a neutral region in thermal equilibrium."""
    n_i = params.n_i
    C = float(C_dop_local)
    root = math.sqrt(C * C + 4.0 * n_i * n_i)
    if C >= 0:
        n_D = 0.5 * (C + root)
        return n_D, n_i * n_i / n_D
    p_D = 0.5 * (-C + root)
    return n_i * n_i / p_D, p_D


@dataclass(frozen=True)
class BoundaryData:
    """Dirichlet data per contact.

    ``V_D`` maps node index to the potential; ``log_u_D``/``log_v_D`` map silicon
    contact nodes to the logarithms of the Slotboom values.  ``K`` is the
    L-infinity bound constant for ``u`` and ``v``.
    """

    nodes: np.ndarray
    V_D: np.ndarray
    si_nodes: np.ndarray
    log_u_D: np.ndarray
    log_v_D: np.ndarray
    K: float
    contacts: dict = field(default_factory=dict)


def boundary_data(mesh: TriMesh, params: PhysicalParams, C_dop_local=None) -> BoundaryData:
    """Ohmic contacts on silicon, metal contacts elsewhere (``V = U``)."""
    if C_dop_local is None:
        C_dop_local = params.signed_doping
    si_set = set(mesh.subdomain_nodes(SI).tolist())
    values = {}
    si_vals = {}
    info = {}
    K = 1.0
    for c in mesh.domain.contacts:
        nodes = mesh.contact_nodes(c.name)
        on_si = [n for n in nodes.tolist() if n in si_set]
        V1, uD, vD = ohmic_boundary_values(C_dop_local, c.voltage, params)
        info[c.name] = {"U": c.voltage, "V1": V1, "u_D": uD, "v_D": vD, "silicon": bool(on_si)}
        for n in nodes.tolist():
            if n in si_set:
                values[n] = V1
            else:
                values.setdefault(n, c.voltage)
        for n in on_si:
            si_vals[n] = (math.log(uD), math.log(vD))
        if on_si:
            K = max(K, uD, vD, 1.0 / uD, 1.0 / vD)
    nodes = np.array(sorted(values), dtype=np.int64)
    si_nodes = np.array(sorted(si_vals), dtype=np.int64)
    return BoundaryData(
        nodes=nodes,
        V_D=np.array([values[n] for n in nodes.tolist()]),
        si_nodes=si_nodes,
        log_u_D=np.array([si_vals[n][0] for n in si_nodes.tolist()]),
        log_v_D=np.array([si_vals[n][1] for n in si_nodes.tolist()]),
        K=K,
        contacts=info,
    )


def nominal_permittivity(mesh: TriMesh, params: PhysicalParams):
    table = np.array([params.A_Si, params.A_ox, params.A_liq])
    return table[mesh.subdomain]


def uniform_charge(mesh: TriMesh, C):
    """Nodal load ``int C phi_i`` over silicon for a constant concentration."""
    return C * mesh.lumped_mass(SI)


def _liquid_only_nodes(mesh):
    solid = np.zeros(mesh.n_vertices, dtype=bool)
    solid[mesh.triangles[mesh.subdomain != LIQ].ravel()] = True
    liq = np.zeros(mesh.n_vertices, dtype=bool)
    liq[mesh.triangles[mesh.subdomain == LIQ].ravel()] = True
    return liq & ~solid


def interface_load(mesh: TriMesh, sheet_charge):
    """``int_Gamma sigma phi_i ds`` for a constant sheet charge (cm^-2)."""
    out = np.zeros(mesh.n_vertices)
    e = mesh.interface_edges
    if len(e) == 0 or sheet_charge == 0.0:
        return out
    length = np.linalg.norm(mesh.vertices[e[:, 1]] - mesh.vertices[e[:, 0]], axis=1)
    np.add.at(out, e.ravel(), np.repeat(0.5 * length * SURFACE_SCALE * sheet_charge, 2))
    return out


class PoissonSystem:
    """Residual and Jacobian of the semilinear Poisson problem on the free nodes.

    The unknown is the potential with the constant interface dipole removed
    on the liquid side, which keeps it continuous across Gamma.
    """

    def __init__(self, mesh, permittivity, charge, log_u, log_v, params, bc,
                 include_carriers=True):
        self.mesh = mesh
        self.params = params
        self.bc = bc
        n = mesh.n_vertices
        self.K = _stiffness(mesh, permittivity)
        self.load = POISSON_SCALE * np.asarray(charge, dtype=float)
        self.load = self.load + interface_load(mesh, params.interface_charge)
        self.m_si = mesh.lumped_mass(SI) if include_carriers else np.zeros(n)
        self.m_liq = mesh.lumped_mass(LIQ) if params.eta > 0 else np.zeros(n)
        self.log_u = np.zeros(n) if log_u is None else np.nan_to_num(log_u, nan=0.0)
        self.log_v = np.zeros(n) if log_v is None else np.nan_to_num(log_v, nan=0.0)
        self.alpha = params.interface_dipole
        self.liq_only = _liquid_only_nodes(mesh)
        self.fixed = bc.nodes
        self.fixed_values = bc.V_D - np.where(self.liq_only[bc.nodes], self.alpha, 0.0)
        free = np.ones(n, dtype=bool)
        free[self.fixed] = False
        self.free = np.flatnonzero(free)
        self.K_ff = self.K[self.free][:, self.free].tocsc()
        self.rhs_scale = max(
            float(np.abs(self.load).max(initial=0.0)),
            float(np.abs(self.K @ self.lift(np.zeros(n))).max(initial=0.0)),
            1e-300,
        )

    def lift(self, V):
        V = np.array(V, dtype=float)
        V[self.fixed] = self.fixed_values
        return V

    def _carrier_terms(self, V):
        p = self.params
        s = POISSON_SCALE * p.n_i
        a = np.clip(V / p.U_T + self.log_u, -_EXP_CLIP, _EXP_CLIP)
        b = np.clip(-V / p.U_T + self.log_v, -_EXP_CLIP, _EXP_CLIP)
        en, ep = np.exp(a), np.exp(b)
        f = s * (ep - en)  # source: q n_i (e^{-V}v - e^{V}u)
        df = -s * (ep + en) / p.U_T
        return f, df

    def _ion_terms(self, V):
        p = self.params
        arg = np.clip(p.beta * (V + self.alpha - p.Phi), -_EXP_CLIP, _EXP_CLIP)
        s = POISSON_SCALE * 2.0 * p.eta
        return s * np.sinh(arg), s * p.beta * np.cosh(arg)

    def full_residual(self, V):
        f_si, _ = self._carrier_terms(V)
        g_liq, _ = self._ion_terms(V)
        return self.K @ V - self.load - self.m_si * f_si + self.m_liq * g_liq

    def residual(self, V):
        return self.full_residual(V)[self.free]

    def jacobian(self, V):
        _, df_si = self._carrier_terms(V)
        _, dg_liq = self._ion_terms(V)
        d = (-self.m_si * df_si + self.m_liq * dg_liq)[self.free]
        return (self.K_ff + sp.diags(d, format="csc")).tocsc()


def _stiffness(mesh, coef):
    coef = np.asarray(coef, dtype=float)
    if coef.shape != (mesh.n_triangles,):
        raise AssemblyError("permittivity must be given per element")
    if not np.all(np.isfinite(coef)) or np.any(coef <= 0):
        raise AssemblyError("permittivity field is not uniformly elliptic")
    r, c, v = kernels.stiffness_triplets(mesh.vertices, mesh.triangles, coef)
    n = mesh.n_vertices
    return sp.coo_matrix((v, (r, c)), shape=(n, n)).tocsr()


def assemble_semilinear_poisson(mesh: TriMesh, permittivity, charge, params: PhysicalParams,
                                bc: BoundaryData, log_u=None, log_v=None,
                                include_carriers=True) -> PoissonSystem:
    """Build the Newton callbacks for ``-div(A grad V) = RHS(V)``.

    ``charge`` is the nodal dopant load ``int C_dop phi_i`` (cm^-3 nm^2);
    ``log_u``/``log_v`` are the frozen Slotboom variables (nodal, logarithms).
    With ``include_carriers=False`` and ``eta = 0`` the problem is linear.
    """
    lo, hi = params.permittivity_bounds
    A = np.asarray(permittivity, dtype=float)
    if A.shape == (mesh.n_triangles,) and np.any((A < lo * (1 - 1e-12)) | (A > hi * (1 + 1e-12))):
        raise AssemblyError("permittivity outside the configured ellipticity bounds")
    return PoissonSystem(mesh, A, charge, log_u, log_v, params, bc, include_carriers)


def solve_semilinear_poisson(system: PoissonSystem, initial_guess, tol=1e-10, max_iter=50,
                             max_halvings=10, info=None):
    """Damped Newton: halve the step while the residual grows.

    Returns the full nodal potential (liquid side without the dipole shift).
    """
    V = system.lift(initial_guess)
    if not np.all(np.isfinite(V)):
        raise SolverError("initial guess is not finite", V)
    F = system.residual(V)
    norm = float(np.linalg.norm(F, np.inf))
    history = [norm]
    target = tol * system.rhs_scale
    increases = 0
    t_asm = t_sol = 0.0
    it = 0
    while norm > target:
        if it >= max_iter:
            raise SolverError(f"Newton did not converge in {max_iter} iterations "
                              f"(residual {norm:.3e}, target {target:.3e})", V, history)
        it += 1
        t0 = time.perf_counter()
        J = system.jacobian(V)
        t1 = time.perf_counter()
        dV = spsolve(J, -F)
        t2 = time.perf_counter()
        t_asm += t1 - t0
        t_sol += t2 - t1
        lam = 1.0
        best = None
        for _ in range(max_halvings + 1):
            trial = V.copy()
            trial[system.free] += lam * dV
            F_trial = system.residual(trial)
            n_trial = float(np.linalg.norm(F_trial, np.inf))
            if np.isfinite(n_trial) and n_trial < norm:
                best = (trial, F_trial, n_trial)
                break
            lam *= 0.5
        if best is None:
            # accept the most damped step anyway; persistent growth means divergence
            increases += 1
            if increases >= 5 or not np.isfinite(n_trial):
                raise SolverError("Newton diverged (residual increased for 5 damped steps)",
                                  V, history)
            best = (trial, F_trial, n_trial)
        else:
            increases = 0
        V, F, norm = best
        history.append(norm)
        step = lam * float(np.abs(dV).max(initial=0.0))
        # machine-precision stagnation with a small residual counts as converged
        if step <= 1e-14 * (1.0 + float(np.abs(V).max())) and norm <= 1e-6 * system.rhs_scale:
            break
    if info is not None:
        info.update(iterations=it, residual=norm, history=history,
                    assembly_time=t_asm, solve_time=t_sol)
    return V


def _si_triangles(mesh):
    return mesh.subdomain == SI


def continuity_system(mesh: TriMesh, V, carrier, frozen, params: PhysicalParams):
    """Pieces of the linearized continuity equation for one carrier.

    Returns ``(rows, cols, vals, k, s, log_other)``: off-diagonal
    Scharfetter-Gummel triplets (the diagonal is minus the row sum), the
    lumped reaction coefficient ``k = m w_other / den`` and source
    ``s = m / den`` of the frozen SRH term.
    """
    log_u0, log_v0 = frozen
    UT = params.U_T
    tris = mesh.triangles[_si_triangles(mesh)]
    if carrier == "n":
        psi, mob = V / UT, params.mu_n
    elif carrier == "p":
        psi, mob = -V / UT, params.mu_p
    else:
        raise ValueError(f"carrier must be 'n' or 'p', got {carrier!r}")
    coef = np.full(len(tris), UT * mob * CM2_TO_NM2)
    r, c, v = kernels.sg_triplets(mesh.vertices, tris, psi, coef)
    off = r != c
    lu = np.nan_to_num(log_u0, nan=0.0)
    lv = np.nan_to_num(log_v0, nan=0.0)
    en = np.exp(np.clip(V / UT + lu, -_EXP_CLIP, _EXP_CLIP))
    ep = np.exp(np.clip(-V / UT + lv, -_EXP_CLIP, _EXP_CLIP))
    den = params.tau_p * (en + 1.0) + params.tau_n * (ep + 1.0)
    m = mesh.lumped_mass(SI)
    log_other = lv if carrier == "n" else lu
    return r[off], c[off], v[off], m * np.exp(log_other) / den, m / den, log_other


def continuity_residual(parts, w, log_w):
    """Residual at ``w`` in difference form, free of row-sum cancellation."""
    rows, cols, vals, _, s, log_other = parts
    r = np.zeros(len(w))
    np.add.at(r, rows, vals * (w[cols] - w[rows]))
    # off-diagonal triplets hold -c, so this accumulates c (w_i - w_j)
    return r + s * np.expm1(log_w + log_other)


def solve_continuity(mesh: TriMesh, V, carrier, frozen, params: PhysicalParams,
                     bc: BoundaryData, info=None):
    """Solve the linear self-adjoint continuity equation for ``u`` or ``v``.

    ``frozen`` is ``(log_u0, log_v0)``.  The correction to the frozen iterate
    is solved for, since the matrix spans dozens of orders of magnitude
    through ``exp(psi)``.  Returns the nodal Slotboom variable on silicon
    nodes (NaN elsewhere).
    """
    if len(bc.si_nodes) == 0:
        raise ConfigurationError("no Dirichlet contact on silicon; continuity system is singular")
    t0 = time.perf_counter()
    parts = continuity_system(mesh, V, carrier, frozen, params)
    rows, cols, vals, k, _, _ = parts
    n = mesh.n_vertices
    log_w0 = np.nan_to_num(frozen[0] if carrier == "n" else frozen[1], nan=0.0).copy()
    log_wD = bc.log_u_D if carrier == "n" else bc.log_v_D
    log_w0[bc.si_nodes] = log_wD
    w0 = np.exp(log_w0)
    res = continuity_residual(parts, w0, log_w0)
    A = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    A = A - sp.diags(np.asarray(A.sum(axis=1)).ravel() - k)
    nodes = mesh.subdomain_nodes(SI)
    is_fixed = np.zeros(n, dtype=bool)
    is_fixed[bc.si_nodes] = True
    free = nodes[~is_fixed[nodes]]
    A_ff = A[free][:, free].tocsc()
    t1 = time.perf_counter()
    d = 1.0 / np.sqrt(A_ff.diagonal())
    D = sp.diags(d)
    delta = d * spsolve((D @ A_ff @ D).tocsc(), -d * res[free])
    w = np.full(n, np.nan)
    w[bc.si_nodes] = np.exp(log_wD)
    w[free] = w0[free] + delta
    t2 = time.perf_counter()
    if info is not None:
        info["assembly_time"] = info.get("assembly_time", 0.0) + (t1 - t0)
        info["solve_time"] = info.get("solve_time", 0.0) + (t2 - t1)
    return w



@dataclass
class SolutionFields:
    """Converged nodal fields of one sample.

    ``u``/``v`` are NaN off silicon.  ``V`` holds the physical potential,
    shifted by the dipole on nodes that belong only to the liquid.
    """

    V: np.ndarray
    u: np.ndarray
    v: np.ndarray
    params: PhysicalParams
    K: float
    iterations: int
    history: list
    timings: dict
    bound_violations: int = 0
    V_bounds: tuple | None = None
    V_continuous: np.ndarray | None = None
    qoi: float | None = None

    @property
    def n(self):
        p = self.params
        return p.n_i * np.exp(np.clip(self.V / p.U_T + np.log(self.u), -_EXP_CLIP, _EXP_CLIP))

    @property
    def p(self):
        p = self.params
        return p.n_i * np.exp(np.clip(-self.V / p.U_T + np.log(self.v), -_EXP_CLIP, _EXP_CLIP))


def _neutral_guess(mesh, params, bc):
    """Initial potential: contact-neutral level in silicon, Phi in the liquid."""
    V = np.zeros(mesh.n_vertices)
    si_contacts = [c for c in bc.contacts.values() if c["silicon"]]
    if si_contacts:
        V_si = float(np.mean([c["V1"] for c in si_contacts]))
    else:
        V_si = params.U_T * math.log(carrier_densities(params.signed_doping, params)[0] / params.n_i)
    V[:] = params.Phi - params.interface_dipole
    V[mesh.subdomain_nodes(SI)] = V_si
    return V


def _bound_check(w, K, rtol=1e-8):
    vals = w[np.isfinite(w)]
    lo = (1.0 / K) * (1.0 - rtol)
    hi = K * (1.0 + rtol)
    return int(np.count_nonzero((vals < lo) | (vals > hi)))


def gummel_iterate(mesh: TriMesh, permittivity, charge, params: PhysicalParams,
                   bc: BoundaryData | None = None, tol=1e-8, max_iters=200,
                   check_bounds=False, initial=None) -> SolutionFields:
    """Fixed-point loop Poisson -> n-continuity -> p-continuity until the update stalls.

    The update norm is ``max(|dV|/U_T, |du/u|, |dv/v|)`` in the sup norm.  The
    interface data (dipole jump, sheet charge) are configured constants, so
    their update step is the identity.
    """
    if bc is None:
        bc = boundary_data(mesh, params)
    if not tol > 0:
        raise ValueError("tol must be positive")
    UT = params.U_T
    si_nodes = mesh.subdomain_nodes(SI)
    n = mesh.n_vertices
    log_u = np.full(n, np.nan)
    log_v = np.full(n, np.nan)
    if len(bc.si_nodes):
        log_u[si_nodes] = float(np.mean(bc.log_u_D))
        log_v[si_nodes] = float(np.mean(bc.log_v_D))
    else:
        log_u[si_nodes] = 0.0
        log_v[si_nodes] = 0.0
    V = _neutral_guess(mesh, params, bc) if initial is None else np.array(initial, dtype=float)

    timings = {"poisson_assembly": 0.0, "poisson_solve": 0.0, "dd_assembly": 0.0, "dd_solve": 0.0}
    t0 = time.perf_counter()
    system = assemble_semilinear_poisson(mesh, permittivity, charge, params, bc, log_u, log_v)
    timings["poisson_assembly"] += time.perf_counter() - t0
    history = []
    violations = 0
    has_si_contact = len(bc.si_nodes) > 0
    for it in range(1, max_iters + 1):
        system.log_u = np.nan_to_num(log_u, nan=0.0)
        system.log_v = np.nan_to_num(log_v, nan=0.0)
        info = {}
        V_new = solve_semilinear_poisson(system, V, info=info)
        timings["poisson_assembly"] += info["assembly_time"]
        timings["poisson_solve"] += info["solve_time"]
        if has_si_contact:
            dd = {}
            u_new = solve_continuity(mesh, V_new, "n", (log_u, log_v), params, bc, info=dd)
            v_new = solve_continuity(mesh, V_new, "p", (log_u, log_v), params, bc, info=dd)
            timings["dd_assembly"] += dd["assembly_time"] / 2.0
            timings["dd_solve"] += dd["solve_time"] / 2.0
            violations += _bound_check(u_new, bc.K) + _bound_check(v_new, bc.K)
            with np.errstate(divide="ignore", invalid="ignore"):
                lu_new = np.log(np.where(u_new > 0, u_new, np.nan))
                lv_new = np.log(np.where(v_new > 0, v_new, np.nan))
            lu_new[si_nodes] = np.nan_to_num(lu_new[si_nodes], nan=-_EXP_CLIP)
            lv_new[si_nodes] = np.nan_to_num(lv_new[si_nodes], nan=-_EXP_CLIP)
            du = float(np.abs(np.expm1(lu_new[si_nodes] - log_u[si_nodes])).max(initial=0.0))
            dv = float(np.abs(np.expm1(lv_new[si_nodes] - log_v[si_nodes])).max(initial=0.0))
        else:
            lu_new, lv_new, du, dv = log_u, log_v, 0.0, 0.0
        dV = float(np.abs(V_new - V).max()) / UT
        change = max(dV, du, dv)
        history.append(change)
        V, log_u, log_v = V_new, lu_new, lv_new
        if change < tol:
            break
    else:
        raise IterationError(f"Gummel iteration did not converge in {max_iters} iterations",
                             history)

    V_phys = V + np.where(system.liq_only, params.interface_dipole, 0.0)
    fields = SolutionFields(
        V=V_phys,
        u=np.exp(log_u),
        v=np.exp(log_v),
        params=params,
        K=bc.K,
        iterations=it,
        history=history,
        timings=timings,
        bound_violations=violations,
        V_continuous=V,
    )
    if check_bounds:
        fields.V_bounds = potential_bounds(mesh, permittivity, charge, params, bc)
    return fields


def potential_bounds(mesh, permittivity, charge, params, bc):
    """Maximum-principle bounds ``(V_low, V_high)`` for the continuous potential.

    ``V = V_L + W`` with ``V_L`` the linear (source-free) solution carrying the
    boundary and interface data; the semilinear remainder ``W`` is bounded by
    the zeros of the monotone source terms (doping-neutral levels scaled by
    ``K`` in silicon, ``Phi`` in the liquid).  The dopant concentration range
    is the range of the nodal charge density.
    """
    lin_params = _replace(params, interface_charge=params.interface_charge)
    system = assemble_semilinear_poisson(mesh, permittivity, np.zeros(mesh.n_vertices),
                                         _replace(lin_params, eta=0.0), bc,
                                         include_carriers=False)
    V_L = system.lift(np.zeros(mesh.n_vertices))
    rhs = -system.residual(V_L)
    V_L[system.free] += spsolve(system.K_ff, rhs)
    m_si = mesh.lumped_mass(SI)
    si = m_si > 0
    C = np.asarray(charge)[si] / m_si[si]
    C_lo, C_hi = float(C.min(initial=0.0)), float(C.max(initial=0.0))
    n_i, UT, K = params.n_i, params.U_T, bc.K

    def neutral(Cv, k):
        # log of (C + sqrt(C^2 + 4 n_i^2)) / (2 n_i), cancellation free
        root = math.sqrt(Cv * Cv + 4 * n_i * n_i)
        if Cv >= 0:
            return math.log((Cv + root) / (2 * n_i)) + math.log(k)
        return math.log(2 * n_i / (-Cv + root)) + math.log(k)

    sup_L, inf_L = float(V_L.max()), float(V_L.min())
    Phi = params.Phi - params.interface_dipole
    hi_terms = [0.0]
    lo_terms = [0.0]
    if np.any(si):
        hi_terms.append(UT * neutral(C_hi, K) - inf_L)
        lo_terms.append(UT * neutral(C_lo, 1.0 / K) - sup_L)
    if params.eta > 0 and np.any(mesh.subdomain == LIQ):
        hi_terms.append(Phi - inf_L)
        lo_terms.append(Phi - sup_L)
    return inf_L + min(lo_terms), sup_L + max(hi_terms)


def _replace(params, **kw):
    from dataclasses import replace

    return replace(params, **kw)


def evaluate_qoi(fields: SolutionFields, mesh: TriMesh, kind="mean-potential", contact=None):
    """Scalar functional of a converged solution.

    ``mean-potential``: area average of V over silicon.  ``contact-flux``: net
    particle current ``J_n + J_p`` (A per nm of depth) into the named contact,
    from the residual of the continuity equations.  ``interface-field``: mean
    outward normal field ``-dV/dy`` (V/nm) on the top face of silicon, taken
    from the gradients of the silicon elements resting on that face.
    """
    if kind == "mean-potential":
        si = mesh.subdomain == SI
        tri = mesh.triangles[si]
        a = mesh.areas[si]
        return float(np.sum(a * fields.V[tri].mean(axis=1)) / np.sum(a))
    if kind == "interface-field":
        return _interface_field(fields.V, mesh)
    if contact is None or contact not in mesh.contact_names:
        raise ConfigurationError(f"unknown contact {contact!r} for qoi {kind!r}")
    nodes = mesh.contact_nodes(contact)
    params = fields.params
    if kind == "contact-flux":
        si_nodes = set(mesh.subdomain_nodes(SI).tolist())
        nodes = np.array([k for k in nodes.tolist() if k in si_nodes], dtype=np.int64)
        if len(nodes) == 0:
            return 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            frozen = (np.log(fields.u), np.log(fields.v))
        total = 0.0
        for carrier, log_w, sign in (("n", frozen[0], 1.0), ("p", frozen[1], -1.0)):
            parts = continuity_system(mesh, fields.V_continuous, carrier, frozen, params)
            lw = np.nan_to_num(log_w, nan=0.0)
            r = continuity_residual(parts, np.exp(lw), lw)
            total += sign * math.fsum(r[nodes])
        # residual is in nm^2/s per unit n_i; q n_i (cm^-3 -> nm^-3) gives A per nm depth
        return params.q * params.n_i * 1e-21 * total
    raise ConfigurationError(f"unknown qoi kind {kind!r}")


def _interface_field(V, mesh):
    top = [b for tag, a, b in mesh.domain.layer_bounds() if tag == SI]
    if len(top) != 1:
        raise ConfigurationError("interface-field needs exactly one silicon layer")
    y = top[0]
    tri = mesh.triangles[mesh.subdomain == SI]
    on = np.isclose(mesh.vertices[tri, 1], y, rtol=0, atol=1e-9 * max(1.0, y))
    tri = tri[on.sum(axis=1) == 2]
    if len(tri) == 0:
        raise ConfigurationError("silicon has no element edge on its top face")
    p = mesh.vertices[tri]
    x0, y0 = p[:, 0, 0], p[:, 0, 1]
    x1, y1 = p[:, 1, 0] - x0, p[:, 1, 1] - y0
    x2, y2 = p[:, 2, 0] - x0, p[:, 2, 1] - y0
    det = x1 * y2 - x2 * y1
    v = V[tri]
    dVdy = (x1 * (v[:, 2] - v[:, 0]) - x2 * (v[:, 1] - v[:, 0])) / det
    # length of the face edge = x extent of the element
    length = p[:, :, 0].max(axis=1) - p[:, :, 0].min(axis=1)
    return float(-np.sum(length * dVdy) / np.sum(length))


def export_fields_csv(fields: SolutionFields, mesh: TriMesh, path):
    """Nodal CSV: node id, x, y, V, u, v, n, p."""
    import csv

    n, p = fields.n, fields.p
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "x", "y", "V", "u", "v", "n", "p"])
        for k in range(mesh.n_vertices):
            x, y = mesh.vertices[k]
            w.writerow([k, repr(float(x)), repr(float(y)), repr(float(fields.V[k])),
                        repr(float(fields.u[k])), repr(float(fields.v[k])),
                        repr(float(n[k])), repr(float(p[k]))])
