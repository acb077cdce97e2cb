"""Single-module geometry and potential energy.

A module's shape is fully determined by the chord lengths of its three
diagonal links.  The top plate pose is recovered by Newton iteration on the
six link-length constraints; bend and deviation angles follow from the solved
corner positions, and the stored elastic energy is quadratic in those angles.

Pose convention: the pose (R, t) places the top plate so that its world
vertex i is ``R @ P_i + t`` where P_i are the plate vertices in the plate's
own frame (identical for top and bottom plates).  At rest R = I and
t = (0, 0, L_v).
"""

from dataclasses import dataclass

import numpy as np

from .errors import NoConvergence, OutOfRange, PlateInversion
from .params import ManipulatorParams, diagonal_indices, initial_geometry

_Z = np.array([0.0, 0.0, 1.0])


@dataclass
class ModulePose:
    """Top-plate pose relative to the bottom plate (rotation about the plate
    centroid, translation = world position of the top centroid)."""

    rotation: np.ndarray  # (3, 3) proper orthonormal
    translation: np.ndarray  # (3,)

    def top_corners(self, params: ManipulatorParams) -> np.ndarray:
        p, _ = initial_geometry(params)
        return p @ self.rotation.T + self.translation

    @staticmethod
    def rest(params: ManipulatorParams) -> "ModulePose":
        return ModulePose(np.eye(3), np.array([0.0, 0.0, params.vertical_link_length]))


@dataclass
class AngleSet:
    """Bend angles of the three diagonal links and deviation angles of the
    twelve plate/link joints.

    ``sigma`` ordering: vertical-link bottom ends (3), vertical-link top ends
    (3), diagonal-link bottom ends (3), diagonal-link top ends (3).
    """

    gamma: np.ndarray  # (3,)
    sigma: np.ndarray  # (12,)


# ---------------------------------------------------------------------------
# chord <-> bend angle
# ---------------------------------------------------------------------------

def _half_angle_from_ratio(rho: np.ndarray) -> np.ndarray:
    """Solve sin(x) = rho * x for x in [0, pi/2] (x = half bend angle).

    Safeguarded Newton from the series initialization x0 = sqrt(6(1-rho));
    near rho = 1 the series value itself is used (Newton degenerates there).
    """
    rho = np.asarray(rho, dtype=float)
    one_minus = np.maximum(1.0 - rho, 0.0)
    x = np.sqrt(6.0 * one_minus)
    degenerate = one_minus < 1e-12
    lo = np.zeros_like(x)
    hi = np.full_like(x, np.pi / 2.0 + 1e-9)
    for _ in range(16):
        f = np.sin(x) - rho * x
        # g(x) = sin x - rho x is positive left of the root
        lo = np.where(f > 0, x, lo)
        hi = np.where(f > 0, hi, x)
        df = np.cos(x) - rho
        safe = np.abs(df) > 1e-300
        xn = x - f / np.where(safe, df, 1.0)
        bad = ~np.isfinite(xn) | (xn < lo) | (xn > hi) | ~safe
        x = np.where(degenerate, x, np.where(bad, 0.5 * (lo + hi), xn))
    return x


def chord_to_bend_angle(b, b_ini: float):
    """Bend angle gamma of a circular-arc link of material length ``b_ini``
    whose endpoints sit ``b`` apart: b / b_ini = sin(gamma/2) / (gamma/2).

    Accepts scalars or arrays; monotone decreasing in b, gamma in [0, pi].
    """
    scalar = np.isscalar(b) or np.ndim(b) == 0
    b_arr = np.atleast_1d(np.asarray(b, dtype=float))
    rho = b_arr / b_ini
    if np.any(rho > 1.0 + 1e-12) or np.any(rho < 2.0 / np.pi - 1e-12):
        raise OutOfRange(
            f"chord/rest ratio must lie in [2/pi, 1], got range "
            f"[{rho.min():.6f}, {rho.max():.6f}]")
    gamma = 2.0 * _half_angle_from_ratio(np.clip(rho, 2.0 / np.pi, 1.0))
    return float(gamma[0]) if scalar else gamma.reshape(np.shape(b))


def bend_angle_to_chord(gamma, b_ini: float):
    """Inverse of chord_to_bend_angle: chord of an arc bent by ``gamma``."""
    gamma = np.asarray(gamma, dtype=float)
    x = 0.5 * gamma
    small = np.abs(x) < 1e-6
    ratio = np.where(small, 1.0 - x * x / 6.0, np.sin(np.where(small, 1.0, x)) / np.where(small, 1.0, x))
    return b_ini * ratio


def _bend_energy_slope(rho: np.ndarray, x: np.ndarray, b_ini: float) -> np.ndarray:
    """d(gamma^2/2)/db = gamma * dgamma/db, computed in a form stable at
    gamma -> 0 where dgamma/db alone diverges."""
    denom = np.cos(x) - rho
    xx = x * x
    series = -(xx / 3.0) * (1.0 - 0.1 * xx)  # cos x - sin x / x for small x
    denom = np.where(np.abs(x) < 1e-4, series, denom)
    out = np.empty_like(x)
    tiny = np.abs(x) < 1e-12
    # limit of 4x^2 / (b_ini * (cos x - rho)) as x -> 0
    out[tiny] = -12.0 / b_ini
    nt = ~tiny
    out[nt] = 4.0 * xx[nt] / (b_ini * denom[nt])
    return out


# ---------------------------------------------------------------------------
# batched pose solver
# ---------------------------------------------------------------------------

def _rodrigues(w: np.ndarray) -> np.ndarray:
    """Batched rotation matrices exp([w]_x) for rotation vectors w (M, 3)."""
    theta = np.linalg.norm(w, axis=-1)
    small = theta < 1e-8
    th2 = theta * theta
    with np.errstate(invalid="ignore", divide="ignore"):
        a = np.where(small, 1.0 - th2 / 6.0, np.sin(theta) / np.where(small, 1.0, theta))
        b = np.where(small, 0.5 - th2 / 24.0, (1.0 - np.cos(theta)) / np.where(small, 1.0, th2))
    wx, wy, wz = w[..., 0], w[..., 1], w[..., 2]
    zeros = np.zeros_like(wx)
    k = np.stack([
        np.stack([zeros, -wz, wy], axis=-1),
        np.stack([wz, zeros, -wx], axis=-1),
        np.stack([-wy, wx, zeros], axis=-1),
    ], axis=-2)
    k2 = k @ k
    return np.eye(3) + a[..., None, None] * k + b[..., None, None] * k2


class _ModuleGeometry:
    """Precomputed constraint layout shared by all pose solves for one
    parameter set (anchors, corner indices, rest directions)."""

    def __init__(self, params: ManipulatorParams):
        self.params = params
        self.p, self.q0 = initial_geometry(params)
        self.bot_idx, self.top_idx = diagonal_indices(params)
        self.l_v = params.vertical_link_length
        self.b_ini = params.b_ini
        # constraint k = 0..2: vertical link k, corner k anchored at P_k
        # constraint k = 3..5: diagonal link k-3, corner top_idx anchored at P_bot
        self.corner_of = np.concatenate([np.arange(3), self.top_idx])
        self.anchors = np.concatenate([self.p, self.p[self.bot_idx]], axis=0)  # (6, 3)
        # rest unit directions used by the deviation angles
        self.diag_rest_bottom = (self.q0[self.top_idx] - self.p[self.bot_idx]) / self.b_ini
        self.diag_rest_top = (self.p[self.bot_idx] - self.q0[self.top_idx]) / self.b_ini

    def corners(self, rot: np.ndarray, t: np.ndarray) -> np.ndarray:
        """World top-plate corners for a pose batch: (M, 3 corners, 3)."""
        return np.einsum("mij,cj->mci", rot, self.p) + t[:, None, :]

    def residual_jacobian(self, rot, t, b):
        """Constraint residuals (M, 6) and twist Jacobians (M, 6, 6)."""
        q = self.corners(rot, t)
        qc = q[:, self.corner_of]                      # (M, 6, 3)
        diff = qc - self.anchors[None]
        dist = np.linalg.norm(diff, axis=-1)
        lengths = np.concatenate(
            [np.full_like(b, self.l_v), b], axis=1)    # (M, 6)
        res = dist - lengths
        u = diff / dist[..., None]
        arm = qc - t[:, None, :]
        jac = np.concatenate([np.cross(arm, u), u], axis=-1)
        return res, jac, q, dist, u


def _solve_pose_batch(geom: _ModuleGeometry, b: np.ndarray, rot: np.ndarray,
                      t: np.ndarray, tol: float = 1e-11, max_iter: int = 60):
    """Damped Newton on the six link-length residuals for a batch of modules.

    Args:
        b: chords (M, 3); rot/t: initial poses, modified copies are returned.

    Returns:
        (rot, t, converged (M,) bool, max_residual (M,))
    """
    rot = rot.copy()
    t = t.copy()
    m = b.shape[0]
    res, jac, _, _, _ = geom.residual_jacobian(rot, t, b)
    err = np.max(np.abs(res), axis=1)
    active = err > tol
    for _ in range(max_iter):
        if not active.any():
            break
        ia = np.where(active)[0]
        ja, ra = jac[ia], res[ia]
        try:
            step = np.linalg.solve(ja, -ra[..., None])[..., 0]
        except np.linalg.LinAlgError:
            ridge = 1e-9 * np.eye(6)
            step = np.linalg.solve(ja @ ja.transpose(0, 2, 1) + ridge,
                                   -ra[..., None])
            step = (ja.transpose(0, 2, 1) @ step)[..., 0]
        # cap the rotation increment to stay in Rodrigues' well-behaved range
        wnorm = np.linalg.norm(step[:, :3], axis=1)
        scale = np.minimum(1.0, 1.0 / np.maximum(wnorm, 1e-300))
        step *= scale[:, None]

        alpha = np.ones(len(ia))
        best_err = err[ia]
        new_rot = rot[ia]
        new_t = t[ia]
        improved = np.zeros(len(ia), dtype=bool)
        for _bt in range(9):
            todo = ~improved
            if not todo.any():
                break
            s = step[todo] * alpha[todo, None]
            r_try = _rodrigues(s[:, :3]) @ rot[ia][todo]
            t_try = t[ia][todo] + s[:, 3:]
            res_try, _, _, _, _ = geom.residual_jacobian(r_try, t_try, b[ia][todo])
            err_try = np.max(np.abs(res_try), axis=1)
            ok = err_try < best_err[todo]
            idx = np.where(todo)[0][ok]
            new_rot[idx] = r_try[ok]
            new_t[idx] = t_try[ok]
            best_err[idx] = err_try[ok]
            improved[idx] = True
            alpha[np.where(todo)[0][~ok]] *= 0.5
        rot[ia] = new_rot
        t[ia] = new_t
        # stalled modules (no decrease at the smallest step) are left as-is;
        # they simply fail the tolerance check below
        res, jac, _, _, _ = geom.residual_jacobian(rot, t, b)
        err = np.max(np.abs(res), axis=1)
        stalled = np.zeros(m, dtype=bool)
        stalled[ia] = ~improved
        active = (err > tol) & ~stalled
    converged = err <= tol
    return rot, t, converged, err


_FALLBACK_TILTS = None


def _fallback_inits(params: ManipulatorParams):
    """Deterministic perturbed initial poses for the multi-start fallback."""
    global _FALLBACK_TILTS
    if _FALLBACK_TILTS is None:
        tilts = [np.zeros(3)]
        for ax in range(3):
            for sgn in (1.0, -1.0):
                v = np.zeros(3)
                v[ax] = 0.7 * sgn
                tilts.append(v)
        tilts.append(np.array([0.5, 0.5, 0.0]))
        _FALLBACK_TILTS = np.array(tilts)
    rots = _rodrigues(_FALLBACK_TILTS)
    l_v = params.vertical_link_length
    ts = np.array([[0.0, 0.0, l_v],
                   [0.0, 0.0, 0.7 * l_v]])
    inits = []
    for rot in rots:
        for t in ts:
            inits.append((rot, t))
    return inits


def solve_module_pose(b, params: ManipulatorParams, init: ModulePose | None = None,
                      tol: float = 1e-11, max_iter: int = 60) -> ModulePose:
    """Pose of one module's top plate from its three diagonal chords.

    Among solution branches, the one continuously connected to ``init``
    (default: rest pose) is returned, with a deterministic multi-start
    fallback if the warm-started iteration fails.

    Raises:
        NoConvergence: no branch satisfies the residual tolerance.
        PlateInversion: the only solutions found have the top plate flipped
            below the bottom plate.
    """
    b = np.asarray(b, dtype=float).reshape(1, 3)
    lo, hi = params.chord_floor, params.b_ini
    if np.any(b < lo - 1e-9) or np.any(b > hi + 1e-9):
        raise OutOfRange(f"chords must lie in [{lo:.6f}, {hi:.6f}] mm, got {b.ravel()}")
    geom = _ModuleGeometry(params)
    if init is None:
        init = ModulePose.rest(params)
    rot0 = init.rotation[None].astype(float)
    t0 = np.asarray(init.translation, dtype=float)[None]
    rot, t, ok, err = _solve_pose_batch(geom, b, rot0, t0, tol, max_iter)
    if ok[0] and t[0, 2] > 0.0:
        return ModulePose(rot[0], t[0])

    # multi-start fallback: try a spread of initial poses, keep the converged
    # branch whose corners are nearest to the init pose's corners
    ref = geom.corners(rot0, t0)[0]
    candidates = []
    for rot_i, t_i in _fallback_inits(params):
        r1, t1, ok1, _ = _solve_pose_batch(geom, b, rot_i[None], t_i[None], tol, max_iter)
        if ok1[0]:
            candidates.append((r1[0], t1[0]))
    upright = [(r, tt) for r, tt in candidates if tt[2] > 0.0]
    if upright:
        dists = [np.sum((geom.corners(r[None], tt[None])[0] - ref) ** 2)
                 for r, tt in upright]
        r_best, t_best = upright[int(np.argmin(dists))]
        return ModulePose(r_best, t_best)
    if candidates:
        raise PlateInversion(f"only inverted-plate solutions found for chords {b.ravel()}")
    raise NoConvergence(
        f"pose iteration stalled at residual {err[0]:.3e} mm for chords {b.ravel()}",
        residual=float(err[0]))


# ---------------------------------------------------------------------------
# angles and energy
# ---------------------------------------------------------------------------

def _angles_batch(geom: _ModuleGeometry, rot, t, b):
    """gamma (M, 3) and sigma (M, 12) for a batch of solved poses."""
    rho = np.clip(b / geom.b_ini, 2.0 / np.pi, 1.0)
    gamma = 2.0 * _half_angle_from_ratio(rho)

    q = geom.corners(rot, t)  # (M, 3, 3)
    z_col = rot[:, :, 2]      # R @ z

    # vertical links: world direction bottom->top corner
    dv = q - geom.p[None]
    nv = np.linalg.norm(dv, axis=-1)
    c_vb = dv[..., 2] / nv                                  # vs +z in base frame
    c_vt = np.einsum("mci,mi->mc", dv, z_col) / nv          # vs +z in top frame

    # diagonal links: bottom anchor P[bot] -> top corner q[top]
    dd = q[:, geom.top_idx] - geom.p[geom.bot_idx][None]
    nd = np.linalg.norm(dd, axis=-1)
    c_db = np.einsum("mci,ci->mc", dd, geom.diag_rest_bottom) / nd
    # top-end direction compared in the top-plate frame
    rest_top_world = np.einsum("mij,cj->mci", rot, geom.diag_rest_top)
    c_dt = np.einsum("mci,mci->mc", -dd, rest_top_world) / nd

    cos_all = np.concatenate([c_vb, c_vt, c_db, c_dt], axis=1)
    sigma = np.arccos(np.clip(cos_all, -1.0, 1.0))
    return gamma, sigma


def _energy_batch(geom: _ModuleGeometry, rot, t, b, s):
    gamma, sigma = _angles_batch(geom, rot, t, b)
    k = geom.params.spherical_stiffness
    return 0.5 * np.sum(s * gamma * gamma, axis=1) + 0.5 * k * np.sum(sigma * sigma, axis=1)


def _sigma_weight(sigma):
    """sigma / sin(sigma), the stable factor in d(sigma^2/2)/d(cos sigma)."""
    small = sigma < 1e-6
    s = np.where(small, 1.0, np.sin(np.where(small, 1.0, sigma)))
    return np.where(small, 1.0 + sigma * sigma / 6.0, sigma / s)


def _energy_and_grad_batch(geom: _ModuleGeometry, rot, t, b, s):
    """Per-module energy (M,) and its chord gradient (M, 3) at solved poses.

    The deviation-angle part is differentiated implicitly through the pose
    constraints: dE/db = dE_gamma/db + J^{-T} g picked at the chord rows,
    where J is the constraint Jacobian and g = dE_sigma/d(twist).
    """
    params = geom.params
    k = params.spherical_stiffness
    res, jac, q, dist, u = geom.residual_jacobian(rot, t, b)

    rho = np.clip(b / geom.b_ini, 2.0 / np.pi, 1.0)
    x = _half_angle_from_ratio(rho)
    gamma = 2.0 * x
    e_gamma = 0.5 * np.sum(s * gamma * gamma, axis=1)
    de_gamma = s * _bend_energy_slope(rho, x, geom.b_ini)

    m = b.shape[0]
    arm = q - t[:, None, :]  # (M, 3 corners, 3)
    z_col = rot[:, :, 2]

    # --- deviation angles and their twist-gradients, group by group -------
    grad_tw = np.zeros((m, 6))
    sig_sq = np.zeros(m)

    def accumulate(c, dc_dw, dc_dv):
        nonlocal grad_tw, sig_sq
        c = np.clip(c, -1.0, 1.0)
        sigma = np.arccos(c)
        w = _sigma_weight(sigma)  # (M, 3)
        sig_sq += np.sum(sigma * sigma, axis=1)
        grad_tw[:, :3] += -k * np.einsum("mc,mci->mi", w, dc_dw)
        grad_tw[:, 3:] += -k * np.einsum("mc,mci->mi", w, dc_dv)

    # vertical bottom: c = u . z, v fixed
    dv = q - geom.p[None]
    nv = dist[:, :3]
    uv = dv / nv[..., None]
    c = uv[..., 2]
    p_vec = (_Z[None, None, :] - c[..., None] * uv) / nv[..., None]
    accumulate(c, np.cross(arm, p_vec), p_vec)

    # vertical top: c = (q - P) . (R z) / |q - P|
    s_dir = np.broadcast_to(z_col[:, None, :], uv.shape)
    c = np.einsum("mci,mci->mc", uv, s_dir)
    p_vec = (s_dir - c[..., None] * uv) / nv[..., None]
    # d c = p . dq + u . (w x s) -> dw term: arm x p + s x u
    dc_dw = np.cross(arm, p_vec) + np.cross(s_dir, uv)
    accumulate(c, dc_dw, p_vec)

    # diagonal bottom: c = u_d . rest_dir
    dd = q[:, geom.top_idx] - geom.p[geom.bot_idx][None]
    ndg = dist[:, 3:]
    ud = dd / ndg[..., None]
    vrest = geom.diag_rest_bottom[None]
    c = np.einsum("mci,ci->mc", ud, geom.diag_rest_bottom)
    p_vec = (vrest - c[..., None] * ud) / ndg[..., None]
    arm_d = q[:, geom.top_idx] - t[:, None, :]
    accumulate(c, np.cross(arm_d, p_vec), p_vec)

    # diagonal top: c = (-u_d) . (R rest_top)
    s_dir = np.einsum("mij,cj->mci", rot, geom.diag_rest_top)
    c = np.einsum("mci,mci->mc", -ud, s_dir)
    p_vec = (s_dir - c[..., None] * (-ud)) / ndg[..., None]
    dc_dw = -np.cross(arm_d, p_vec) + np.cross(s_dir, -ud)
    accumulate(c, dc_dw, -p_vec)

    energy = e_gamma + 0.5 * k * sig_sq

    # implicit chord sensitivity: solve J^T y = g, pick the diagonal rows
    y = np.linalg.solve(jac.transpose(0, 2, 1), grad_tw[..., None])[..., 0]
    de_sigma = y[:, 3:]
    return energy, de_gamma + de_sigma


def joint_angles(pose: ModulePose, b, params: ManipulatorParams) -> AngleSet:
    """Bend and deviation angles of one module at a solved pose."""
    geom = _ModuleGeometry(params)
    b = np.asarray(b, dtype=float).reshape(1, 3)
    gamma, sigma = _angles_batch(geom, pose.rotation[None], pose.translation[None], b)
    return AngleSet(gamma[0], sigma[0])


def module_energy(b, s, params: ManipulatorParams, init: ModulePose | None = None):
    """Elastic energy of one module: 0.5 * sum s_i gamma_i^2 plus the uniform
    spherical-joint term 0.5 * k * sum sigma_m^2.

    Returns:
        (energy, AngleSet)
    """
    b = np.asarray(b, dtype=float)
    s = np.asarray(s, dtype=float)
    pose = solve_module_pose(b, params, init=init)
    angles = joint_angles(pose, b, params)
    k = params.spherical_stiffness
    energy = 0.5 * float(np.sum(s * angles.gamma**2)) + 0.5 * k * float(np.sum(angles.sigma**2))
    return energy, angles


# ---------------------------------------------------------------------------
# stacking
# ---------------------------------------------------------------------------

def compose_world_poses(local_rots: np.ndarray, local_ts: np.ndarray):
    """World frames of each module's top plate from local poses (N, 3, 3), (N, 3)."""
    n = local_rots.shape[0]
    w_rot = np.empty_like(local_rots)
    w_t = np.empty_like(local_ts)
    rot = np.eye(3)
    t = np.zeros(3)
    for j in range(n):
        t = rot @ local_ts[j] + t
        rot = rot @ local_rots[j]
        w_rot[j] = rot
        w_t[j] = t
    return w_rot, w_t


def stack_and_tip(shape: np.ndarray, params: ManipulatorParams,
                  warm: list | None = None):
    """Solve every module pose and chain them into world frames.

    Args:
        shape: chord vector (3N,), module-major.
        warm: optional list of N ModulePose used as per-module initial guesses.

    Returns:
        (world_poses, tip): list of N ModulePose in world coordinates and the
        world position of the topmost plate centroid.
    """
    b = params.validate_shape(shape).reshape(params.n_modules, 3)
    local = []
    for j in range(params.n_modules):
        init = warm[j] if warm is not None else None
        local.append(solve_module_pose(b[j], params, init=init))
    rots = np.stack([p.rotation for p in local])
    ts = np.stack([p.translation for p in local])
    w_rot, w_t = compose_world_poses(rots, ts)
    world = [ModulePose(w_rot[j], w_t[j]) for j in range(params.n_modules)]
    return world, w_t[-1].copy()


def plate_corners_world(world_poses, params: ManipulatorParams) -> np.ndarray:
    """Corner positions of every plate: (N+1, 3, 3), base plate first."""
    p, _ = initial_geometry(params)
    out = np.empty((len(world_poses) + 1, 3, 3))
    out[0] = p
    for j, pose in enumerate(world_poses):
        out[j + 1] = p @ pose.rotation.T + pose.translation
    return out
