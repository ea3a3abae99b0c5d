"""Mass-spring sheet with a carved free boundary and a rigid grasp.

The sheet is a regular node grid over a square span with a few layers of
thickness.  One edge is carved into a curved free boundary by a random sine
series (nodes beyond the curve are removed; the series never adds material),
the opposite edge is fixed, and every remaining node pair within the nine
neighbor offset families (axis-aligned, in-plane diagonal, and inter-layer
diagonal) is joined by a Hookean spring whose rest length equals its initial
distance, so the undeformed sheet is exactly at equilibrium.

Motion uses semi-implicit Euler with multiplicative velocity damping:

    v <- (v + F / m dt) zeta,   p <- p + v dt

applied to every node that is neither fixed nor grasped.  Grasped nodes move
only rigidly with the instrument.  `settle` iterates the same update in a
compiled loop until the fastest free node drops below a speed tolerance,
which is how the quasi-static states between control increments are produced.
"""

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from retractor.errors import (
    InvalidParameterError,
    InvalidStateError,
    NumericalDivergenceError,
    ShapeError,
    SingularGeometryError,
)

# Neighbor offset families joined by springs: structural along each axis,
# in-plane diagonals against shear, inter-layer diagonals against sliding.
_SPRING_OFFSETS = (
    (1, 0, 0), (0, 1, 0), (0, 0, 1),
    (1, 1, 0), (1, -1, 0),
    (1, 0, 1), (-1, 0, 1), (0, 1, 1), (0, -1, 1),
)

_MESH_DOC_VERSION = 1


# ---------------------------------------------------------------------------
# Boundary profile.


@dataclass(frozen=True)
class BoundaryProfile:
    """Sine-series shape of the carved edge, f(x) = sum_k a_k sin(k pi x).

    Vanishes at both ends by construction, so the carved edge always meets
    the straight side edges of the sheet.
    """

    amplitudes: np.ndarray

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=float)
        if amps.ndim != 1 or len(amps) < 1:
            raise InvalidParameterError("need at least one harmonic amplitude")
        if np.any(np.abs(amps) > 0.1 + 1e-12):
            raise InvalidParameterError("harmonic amplitudes must lie in [-0.1, 0.1]")
        object.__setattr__(self, "amplitudes", amps)

    @property
    def harmonic_count(self) -> int:
        return len(self.amplitudes)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        k = np.arange(1, len(self.amplitudes) + 1)
        return np.sin(np.pi * np.multiply.outer(x, k)) @ self.amplitudes


def generate_boundary_profile(harmonic_count: int, seed: int) -> BoundaryProfile:
    """Draw harmonic amplitudes uniformly from [-0.1, 0.1], deterministically."""
    if harmonic_count < 1:
        raise InvalidParameterError(
            f"harmonic_count must be >= 1, got {harmonic_count}"
        )
    rng = np.random.default_rng(seed)
    return BoundaryProfile(rng.uniform(-0.1, 0.1, size=harmonic_count))


# ---------------------------------------------------------------------------
# Simulation parameter and pose records.


@dataclass
class SimParams:
    """Integrator settings.

    `settle_tolerance` of None resolves to 1e-4 of the mesh span per second
    at settle time, keeping the default scale-free.
    """

    dt: float = 0.01
    damping: float = 0.98
    settle_tolerance: float | None = None
    settle_max_iters: int = 2000

    def __post_init__(self):
        if self.dt <= 0:
            raise InvalidParameterError(f"dt must be positive, got {self.dt}")
        if not 0.0 < self.damping <= 1.0:
            raise InvalidParameterError(
                f"damping must lie in (0, 1], got {self.damping}"
            )
        if self.settle_tolerance is not None and self.settle_tolerance <= 0:
            raise InvalidParameterError("settle_tolerance must be positive")
        if self.settle_max_iters < 1:
            raise InvalidParameterError("settle_max_iters must be >= 1")


def _wrap_angle(a):
    """Map angles to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    out = -np.mod(-a + np.pi, 2.0 * np.pi) + np.pi
    return out


@dataclass(frozen=True)
class InstrumentPose:
    """Instrument position and xyz-convention orientation.

    The rotation applied to grasped nodes is R = Rz(gamma) Ry(beta) Rx(alpha);
    angles are normalized into (-pi, pi] on construction.
    """

    position: np.ndarray
    orientation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float)
        ang = _wrap_angle(self.orientation)
        if pos.shape != (3,) or ang.shape != (3,):
            raise ShapeError("pose needs a 3-vector position and orientation")
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(ang))):
            raise InvalidParameterError("pose must be finite")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "orientation", ang)

    @classmethod
    def from_vector(cls, q) -> "InstrumentPose":
        q = np.asarray(q, dtype=float)
        if q.shape != (6,):
            raise ShapeError(f"pose vector must have shape (6,), got {q.shape}")
        return cls(position=q[:3], orientation=q[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.position, self.orientation])

    def rotation(self) -> np.ndarray:
        a, b, g = self.orientation
        ca, sa = math.cos(a), math.sin(a)
        cb, sb = math.cos(b), math.sin(b)
        cg, sg = math.cos(g), math.sin(g)
        rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
        ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
        rz = np.array([[cg, -sg, 0], [sg, cg, 0], [0, 0, 1]])
        return rz @ ry @ rx


# ---------------------------------------------------------------------------
# Mesh construction.


@dataclass(eq=False)
class TissueMesh:
    node_positions: np.ndarray      # (n, 3) m
    node_velocities: np.ndarray     # (n, 3) m/s
    fixed_mask: np.ndarray          # (n,) bool
    grasped_indices: np.ndarray     # sorted int indices, disjoint from fixed
    spring_i: np.ndarray            # (s,) int
    spring_j: np.ndarray            # (s,) int
    spring_rest: np.ndarray         # (s,) m
    spring_k: np.ndarray            # (s,) force/m
    eq_mass: float
    boundary_order: np.ndarray      # carved-edge node indices, ordered along x
    grid_dims: tuple
    span: float
    lattice: np.ndarray             # (n, 3) surviving (ix, iy, iz) coordinates

    @property
    def springs(self):
        """Springs as (i, j, rest_length, stiffness) tuples."""
        return list(
            zip(
                self.spring_i.tolist(),
                self.spring_j.tolist(),
                self.spring_rest.tolist(),
                self.spring_k.tolist(),
            )
        )

    @property
    def spacing(self) -> float:
        return self.span / (self.grid_dims[0] - 1)

    def movable_mask(self) -> np.ndarray:
        out = ~self.fixed_mask
        out[self.grasped_indices] = False
        return out

    def copy(self) -> "TissueMesh":
        return TissueMesh(
            node_positions=self.node_positions.copy(),
            node_velocities=self.node_velocities.copy(),
            fixed_mask=self.fixed_mask.copy(),
            grasped_indices=self.grasped_indices.copy(),
            spring_i=self.spring_i,
            spring_j=self.spring_j,
            spring_rest=self.spring_rest,
            spring_k=self.spring_k,
            eq_mass=self.eq_mass,
            boundary_order=self.boundary_order,
            grid_dims=self.grid_dims,
            span=self.span,
            lattice=self.lattice,
        )

    def to_dict(self) -> dict:
        """Snapshot as a plain JSON-serializable document."""
        return {
            "version": _MESH_DOC_VERSION,
            "grid_dims": list(self.grid_dims),
            "span": self.span,
            "eq_mass": self.eq_mass,
            "node_positions": self.node_positions.tolist(),
            "fixed_mask": self.fixed_mask.astype(int).tolist(),
            "grasped_indices": self.grasped_indices.tolist(),
            "springs": [
                [int(i), int(j), float(l0), float(k)]
                for i, j, l0, k in zip(
                    self.spring_i, self.spring_j, self.spring_rest, self.spring_k
                )
            ],
            "boundary_order": self.boundary_order.tolist(),
            "lattice": self.lattice.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TissueMesh":
        """Rebuild a snapshot; velocities start at zero (snapshots are settled)."""
        if doc.get("version") != _MESH_DOC_VERSION:
            raise InvalidParameterError(
                f"unsupported mesh document version {doc.get('version')!r}"
            )
        springs = np.asarray(doc["springs"], dtype=float).reshape(-1, 4)
        pos = np.asarray(doc["node_positions"], dtype=float)
        return cls(
            node_positions=pos,
            node_velocities=np.zeros_like(pos),
            fixed_mask=np.asarray(doc["fixed_mask"], dtype=bool),
            grasped_indices=np.asarray(doc["grasped_indices"], dtype=np.int64),
            spring_i=springs[:, 0].astype(np.int64),
            spring_j=springs[:, 1].astype(np.int64),
            spring_rest=springs[:, 2].copy(),
            spring_k=springs[:, 3].copy(),
            eq_mass=float(doc["eq_mass"]),
            boundary_order=np.asarray(doc["boundary_order"], dtype=np.int64),
            grid_dims=tuple(doc["grid_dims"]),
            span=float(doc["span"]),
            lattice=np.asarray(doc["lattice"], dtype=np.int64),
        )


def build_tissue_mesh(
    profile: BoundaryProfile,
    grid_dims=(40, 40, 3),
    span: float = 0.2,
    material=(1000.0, 1.0),
) -> TissueMesh:
    """Lay out the node grid, carve the free edge, and wire the springs.

    The grid covers span x span in-plane with the carved edge at y = span
    and the fixed edge at y = 0; layers stack downward so the top surface
    sits at z = 0.  A node survives when its y coordinate stays at or below
    span (1 + f(x / span)), which only ever removes material because the
    grid holds nothing above y = span.
    """
    nx, ny, nz = grid_dims
    if nx < 2 or ny < 2 or nz < 2:
        raise InvalidParameterError(f"grid dims must each be >= 2, got {grid_dims}")
    if span <= 0:
        raise InvalidParameterError(f"span must be positive, got {span}")
    stiffness, eq_mass = material
    if stiffness <= 0 or eq_mass <= 0:
        raise InvalidParameterError("stiffness and node mass must be positive")

    sx = span / (nx - 1)
    sy = span / (ny - 1)
    ix, iy, iz = np.meshgrid(
        np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"
    )
    # Keep rule: y/span <= 1 + f(x/span), with a hair of slack so exact
    # equality (the flat profile) never drops the edge row to rounding.
    edge = 1.0 + profile(ix[:, :, 0] / (nx - 1))
    keep2d = iy[:, :, 0] / (ny - 1) <= edge + 1e-9
    keep = np.repeat(keep2d[:, :, None], nz, axis=2)

    flat_keep = keep.ravel()
    new_index = np.cumsum(flat_keep) - 1
    n = int(flat_keep.sum())

    positions = np.stack(
        [ix * sx, iy * sy, -(nz - 1 - iz) * sx], axis=-1
    ).reshape(-1, 3)[flat_keep]
    lattice = np.stack([ix, iy, iz], axis=-1).reshape(-1, 3)[flat_keep]

    grid_index = np.arange(nx * ny * nz).reshape(nx, ny, nz)
    si_parts, sj_parts = [], []
    for dx, dy, dz in _SPRING_OFFSETS:
        a = grid_index[
            max(0, -dx): nx - max(0, dx),
            max(0, -dy): ny - max(0, dy),
            max(0, -dz): nz - max(0, dz),
        ].ravel()
        b = grid_index[
            max(0, dx): nx - max(0, -dx),
            max(0, dy): ny - max(0, -dy),
            max(0, dz): nz - max(0, -dz),
        ].ravel()
        both = flat_keep[a] & flat_keep[b]
        si_parts.append(new_index[a[both]])
        sj_parts.append(new_index[b[both]])
    spring_i = np.concatenate(si_parts).astype(np.int64)
    spring_j = np.concatenate(sj_parts).astype(np.int64)
    rest = np.linalg.norm(
        positions[spring_j] - positions[spring_i], axis=1
    )

    fixed = lattice[:, 1] == 0

    # Carved-edge polyline: the top surviving row of each column, read off
    # the top layer, ordered along x.
    top_iy = np.where(keep2d, iy[:, :, 0], -1).max(axis=1)
    if np.any(top_iy < 0):
        raise InvalidParameterError(
            "profile dips below -1 and removes entire columns"
        )
    boundary = new_index[grid_index[np.arange(nx), top_iy, nz - 1]]

    return TissueMesh(
        node_positions=positions,
        node_velocities=np.zeros((n, 3)),
        fixed_mask=fixed,
        grasped_indices=np.empty(0, dtype=np.int64),
        spring_i=spring_i,
        spring_j=spring_j,
        spring_rest=rest,
        spring_k=np.full(len(rest), float(stiffness)),
        eq_mass=float(eq_mass),
        boundary_order=boundary.astype(np.int64),
        grid_dims=(nx, ny, nz),
        span=float(span),
        lattice=lattice.astype(np.int64),
    )


def boundary_band_indices(mesh: TissueMesh, rows: int = 2) -> np.ndarray:
    """Nodes in the outermost `rows` surviving rows of each column.

    This is the band adjacent to the carved edge (all layers), the part of
    the sheet a camera looking down the z axis can see move first.
    """
    if rows < 1:
        raise InvalidParameterError(f"rows must be >= 1, got {rows}")
    nx = mesh.grid_dims[0]
    top = np.full(nx, -1, dtype=np.int64)
    np.maximum.at(top, mesh.lattice[:, 0], mesh.lattice[:, 1])
    in_band = mesh.lattice[:, 1] > top[mesh.lattice[:, 0]] - rows
    return np.flatnonzero(in_band)


# ---------------------------------------------------------------------------
# Forces and integration.


def spring_force(p_i, p_j, stiffness: float, rest_length: float) -> np.ndarray:
    """Hookean force on the node at p_i from its spring toward p_j."""
    p_i = np.asarray(p_i, dtype=float)
    p_j = np.asarray(p_j, dtype=float)
    d = p_j - p_i
    dist = np.linalg.norm(d)
    if dist == 0.0:
        raise SingularGeometryError("coincident spring endpoints")
    return stiffness * (dist - rest_length) / dist * d


def net_forces(mesh: TissueMesh) -> np.ndarray:
    """Net spring force on every node, (n, 3)."""
    d = mesh.node_positions[mesh.spring_j] - mesh.node_positions[mesh.spring_i]
    dist = np.linalg.norm(d, axis=1)
    if np.any(dist == 0.0):
        raise SingularGeometryError("coincident spring endpoints")
    f = (mesh.spring_k * (dist - mesh.spring_rest) / dist)[:, None] * d
    out = np.zeros_like(mesh.node_positions)
    np.add.at(out, mesh.spring_i, f)
    np.add.at(out, mesh.spring_j, -f)
    return out


def mechanical_energy(mesh: TissueMesh) -> float:
    """Kinetic plus elastic energy of the current state."""
    d = mesh.node_positions[mesh.spring_j] - mesh.node_positions[mesh.spring_i]
    stretch = np.linalg.norm(d, axis=1) - mesh.spring_rest
    elastic = 0.5 * np.sum(mesh.spring_k * stretch**2)
    kinetic = 0.5 * mesh.eq_mass * np.sum(mesh.node_velocities**2)
    return float(elastic + kinetic)


def _check_stability(mesh: TissueMesh, params: SimParams):
    bound = 2.0 * math.sqrt(mesh.eq_mass / mesh.spring_k.max())
    if params.dt >= bound:
        raise InvalidParameterError(
            f"dt={params.dt} violates the stability bound {bound:.4g}"
        )


def step(mesh: TissueMesh, params: SimParams) -> TissueMesh:
    """One semi-implicit Euler step; fixed and grasped nodes do not move."""
    _check_stability(mesh, params)
    forces = net_forces(mesh)
    movable = mesh.movable_mask()
    v = (
        mesh.node_velocities[movable]
        + forces[movable] * (params.dt / mesh.eq_mass)
    ) * params.damping
    mesh.node_velocities[movable] = v
    mesh.node_positions[movable] += v * params.dt
    if not np.all(np.isfinite(mesh.node_positions[movable])):
        raise NumericalDivergenceError("non-finite node state after step")
    return mesh


# fastmath is restricted to flags that keep NaN/inf comparisons IEEE-exact,
# so divergence detection below stays reliable.
@numba.njit(cache=True, nogil=True, fastmath={"contract", "reassoc", "arcp"})
def _settle_kernel(pos, vel, movable, si, sj, l0, ks, inv_m, dt, damping,
                   tol_speed, speed_cap, max_iters):
    """Iterate steps in place until the fastest movable node slows below
    tol_speed.  Returns (iters, status): 0 converged, 1 iteration cap,
    2 non-finite or growing state, 3 coincident nodes.

    Divergence is a hard speed cap, a non-finite peak speed, or a streak of
    100 consecutive peak-speed increases that multiplied the squared speed
    by more than 4.  The growth factor matters: near the tolerance the
    envelope of the slowest mode can breathe upward for hundreds of steps
    by a few percent, which is convergence, not blowup.
    """
    n = pos.shape[0]
    ns = si.shape[0]
    force = np.zeros((n, 3))
    tol2 = tol_speed * tol_speed
    cap2 = speed_cap * speed_cap
    prev_vmax2 = np.inf
    streak_base = np.inf
    grow = 0
    for it in range(max_iters):
        for a in range(n):
            force[a, 0] = 0.0
            force[a, 1] = 0.0
            force[a, 2] = 0.0
        for s in range(ns):
            i = si[s]
            j = sj[s]
            dx = pos[j, 0] - pos[i, 0]
            dy = pos[j, 1] - pos[i, 1]
            dz = pos[j, 2] - pos[i, 2]
            dist = np.sqrt(dx * dx + dy * dy + dz * dz)
            if dist <= 0.0:
                return it + 1, 3
            coef = ks[s] * (dist - l0[s]) / dist
            fx = coef * dx
            fy = coef * dy
            fz = coef * dz
            force[i, 0] += fx
            force[i, 1] += fy
            force[i, 2] += fz
            force[j, 0] -= fx
            force[j, 1] -= fy
            force[j, 2] -= fz
        vmax2 = 0.0
        for a in range(n):
            if not movable[a]:
                continue
            vx = (vel[a, 0] + force[a, 0] * inv_m * dt) * damping
            vy = (vel[a, 1] + force[a, 1] * inv_m * dt) * damping
            vz = (vel[a, 2] + force[a, 2] * inv_m * dt) * damping
            vel[a, 0] = vx
            vel[a, 1] = vy
            vel[a, 2] = vz
            pos[a, 0] += vx * dt
            pos[a, 1] += vy * dt
            pos[a, 2] += vz * dt
            # np.maximum keeps NaN sticky, unlike a > comparison.
            vmax2 = np.maximum(vmax2, vx * vx + vy * vy + vz * vz)
        if vmax2 < tol2:
            return it + 1, 0
        if not np.isfinite(vmax2) or vmax2 > cap2:
            return it + 1, 2
        if vmax2 > prev_vmax2:
            if grow == 0:
                streak_base = prev_vmax2
            grow += 1
            if grow >= 100 and vmax2 > 4.0 * streak_base:
                return it + 1, 2
        else:
            grow = 0
        prev_vmax2 = vmax2
    return max_iters, 1


def settle(mesh: TissueMesh, params: SimParams):
    """Step until quasi-static; returns (mesh, iterations used).

    Hitting the iteration cap is not an error (callers inspect the count),
    but non-finite or growing state is.
    """
    _check_stability(mesh, params)
    tol = params.settle_tolerance
    if tol is None:
        tol = 1e-4 * mesh.span
    iters, status = _settle_kernel(
        mesh.node_positions,
        mesh.node_velocities,
        mesh.movable_mask(),
        mesh.spring_i,
        mesh.spring_j,
        mesh.spring_rest,
        mesh.spring_k,
        1.0 / mesh.eq_mass,
        params.dt,
        params.damping,
        tol,
        mesh.span / params.dt,  # crossing the sheet in one step is blowup
        params.settle_max_iters,
    )
    if status == 2:
        raise NumericalDivergenceError(
            f"integration diverged after {iters} iterations"
        )
    if status == 3:
        raise SingularGeometryError(
            f"coincident spring endpoints after {iters} iterations"
        )
    return mesh, int(iters)


# ---------------------------------------------------------------------------
# Grasping and instrument motion.


def bind_grasp(mesh: TissueMesh, grasp_point, radius: float | None = None) -> TissueMesh:
    """Rigidly capture every free node within `radius` of the grasp point.

    Default radius is twice the node spacing, a finite jaw around the
    contact.  Fixed nodes are never captured.  Velocities of captured nodes
    are zeroed; they move only with the instrument from here on.
    """
    grasp_point = np.asarray(grasp_point, dtype=float)
    if grasp_point.shape != (3,):
        raise ShapeError(f"grasp point must be a 3-vector, got {grasp_point.shape}")
    if radius is None:
        radius = 2.0 * mesh.spacing
    dist = np.linalg.norm(mesh.node_positions - grasp_point, axis=1)
    captured = np.flatnonzero((dist <= radius) & ~mesh.fixed_mask)
    if len(captured) == 0:
        raise InvalidParameterError(
            f"no free nodes within {radius:.4g} of the grasp point"
        )
    mesh.grasped_indices = captured.astype(np.int64)
    mesh.node_velocities[captured] = 0.0
    return mesh


def release_grasp(mesh: TissueMesh) -> TissueMesh:
    mesh.grasped_indices = np.empty(0, dtype=np.int64)
    return mesh


def apply_instrument(
    mesh: TissueMesh, q_prev: InstrumentPose, q_next: InstrumentPose
) -> TissueMesh:
    """Move grasped nodes by the rigid transform taking q_prev to q_next.

    Rotation pivots about the previous instrument position.  Grasped node
    velocities stay zero; only free nodes carry integration state.
    """
    if len(mesh.grasped_indices) == 0:
        raise InvalidStateError("no grasped nodes bound to the instrument")
    rel = mesh.node_positions[mesh.grasped_indices] - q_prev.position
    rot = q_next.rotation() @ q_prev.rotation().T
    mesh.node_positions[mesh.grasped_indices] = rel @ rot.T + q_next.position
    mesh.node_velocities[mesh.grasped_indices] = 0.0
    return mesh


def max_grasp_force(mesh: TissueMesh) -> float:
    """Largest net spring force magnitude over the grasped nodes."""
    if len(mesh.grasped_indices) == 0:
        raise InvalidStateError("no grasped nodes bound to the instrument")
    forces = net_forces(mesh)
    return float(np.linalg.norm(forces[mesh.grasped_indices], axis=1).max())


def extract_boundary_points(mesh: TissueMesh) -> np.ndarray:
    """Current carved-edge node positions in stored order, (nx, 3)."""
    return mesh.node_positions[mesh.boundary_order].copy()
