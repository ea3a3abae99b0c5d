"""Simulated camera view of the sheet and the elliptical target region.

Everything the controller observes lives in a 2D image frame {E}: origin at
the projected boundary start point, x along the chord to the projected end
point, y perpendicular with its sign chosen toward the target region, both
axes normalized by the chord length.  The occluding contour of the sheet
becomes a curve y = phi(x) over [0, 1] in this frame, the target ellipse
becomes a conic (its plane-to-image homography maps the unit circle), and
"exposed" means the contour stays below the ellipse's near edge at every x
the ellipse spans.
"""

from dataclasses import dataclass

import numpy as np

from retractor.errors import (
    DegenerateFrameError,
    InsufficientObservationError,
    InvalidParameterError,
    ProjectionError,
    ShapeError,
    SingularGeometryError,
)
from retractor.mesh import TissueMesh, boundary_band_indices
from retractor.rbf import (
    BoundaryParams3D,
    KernelLayout,
    eval_curve_2d,
    eval_curve_3d,
    fit_curve_2d,
    fit_curve_2d_constrained,
)


# ---------------------------------------------------------------------------
# Camera.


@dataclass
class CameraModel:
    """Pinhole camera: world -> camera is x_cam = R (x_world - position)."""

    rotation: np.ndarray        # (3, 3), rows are camera axes in world coords
    position: np.ndarray        # (3,) world
    fx: float
    fy: float
    cx: float
    cy: float
    width: int = 1024
    height: int = 768

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float)
        self.position = np.asarray(self.position, dtype=float)
        if self.rotation.shape != (3, 3) or self.position.shape != (3,):
            raise ShapeError("camera pose needs a 3x3 rotation and 3-vector position")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidParameterError("focal lengths must be positive")

    @classmethod
    def default_oblique(cls, span: float = 0.2) -> "CameraModel":
        """Camera 45 degrees above the fixed edge looking at the sheet center,
        at 1.5 spans distance, framed so the sheet fills ~80% of the width."""
        look_at = np.array([span / 2.0, span / 2.0, 0.0])
        back = np.array([0.0, -np.cos(np.pi / 4), np.sin(np.pi / 4)])
        position = look_at + 1.5 * span * back
        z_cam = (look_at - position) / np.linalg.norm(look_at - position)
        x_cam = np.array([1.0, 0.0, 0.0])
        y_cam = np.cross(z_cam, x_cam)
        width, height = 1024, 768
        focal = 0.8 * width * 1.5  # span at 1.5 spans distance -> 0.8 width
        return cls(
            rotation=np.stack([x_cam, y_cam, z_cam]),
            position=position,
            fx=focal,
            fy=focal,
            cx=width / 2.0,
            cy=height / 2.0,
            width=width,
            height=height,
        )

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation.tolist(),
            "position": self.position.tolist(),
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CameraModel":
        return cls(
            rotation=np.asarray(doc["rotation"], dtype=float),
            position=np.asarray(doc["position"], dtype=float),
            fx=float(doc["fx"]),
            fy=float(doc["fy"]),
            cx=float(doc["cx"]),
            cy=float(doc["cy"]),
            width=int(doc["width"]),
            height=int(doc["height"]),
        )


def project_points(camera: CameraModel, points) -> np.ndarray:
    """Perspective projection of (n, 3) world points to (n, 2) pixels."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    cam = (points - camera.position) @ camera.rotation.T
    if np.any(cam[:, 2] <= 1e-12):
        raise ProjectionError("point at or behind the camera plane")
    return np.column_stack(
        [
            camera.fx * cam[:, 0] / cam[:, 2] + camera.cx,
            camera.fy * cam[:, 1] / cam[:, 2] + camera.cy,
        ]
    )


# ---------------------------------------------------------------------------
# Image frame {E}.


@dataclass(frozen=True)
class FrameE:
    """Chord-anchored image frame, normalized by the chord length."""

    origin: np.ndarray      # (2,) px
    x_axis: np.ndarray      # (2,) unit
    chord_px: float
    y_sign: float           # +-1, +y toward the target region

    def to_frame(self, pixels) -> np.ndarray:
        """Pixels -> normalized {E} coordinates (n, 2)."""
        rel = np.atleast_2d(np.asarray(pixels, dtype=float)) - self.origin
        x = rel @ self.x_axis
        y = self.y_sign * (rel[:, 1] * self.x_axis[0] - rel[:, 0] * self.x_axis[1])
        return np.column_stack([x, y]) / self.chord_px


def build_frame_E(boundary_start, boundary_end, roi_centroid) -> FrameE:
    """Anchor {E} at the projected boundary start, x toward the end point,
    +y toward the target centroid."""
    start = np.asarray(boundary_start, dtype=float)
    end = np.asarray(boundary_end, dtype=float)
    centroid = np.asarray(roi_centroid, dtype=float)
    chord = end - start
    length = np.linalg.norm(chord)
    if length < 1e-9:
        raise DegenerateFrameError("boundary endpoints coincide in the image")
    x_axis = chord / length
    rel = centroid - start
    side = rel[1] * x_axis[0] - rel[0] * x_axis[1]
    if abs(side) < 1e-9 * length:
        raise DegenerateFrameError("target centroid lies on the boundary chord")
    return FrameE(
        origin=start, x_axis=x_axis, chord_px=float(length),
        y_sign=float(np.sign(side)),
    )


# ---------------------------------------------------------------------------
# Visual boundary sampling.


def extract_visual_samples(
    mesh: TissueMesh,
    camera: CameraModel,
    frame: FrameE,
    bins: int = 200,
    min_bins: int | None = None,
):
    """Occluding-contour samples of the sheet in normalized {E}.

    Projects the two node rows adjacent to the carved edge, buckets them by
    x into uniform bins over [0, 1], and keeps the sample farthest toward
    the target (max y) per bin: the upper envelope is what occludes.
    Returns (x, y) arrays sorted by x.
    """
    if bins < 1:
        raise InvalidParameterError(f"bins must be >= 1, got {bins}")
    band = boundary_band_indices(mesh, rows=2)
    pts = frame.to_frame(project_points(camera, mesh.node_positions[band]))
    inside = (pts[:, 0] >= 0.0) & (pts[:, 0] <= 1.0)
    pts = pts[inside]
    which = np.minimum((pts[:, 0] * bins).astype(int), bins - 1)
    best = np.full(bins, -np.inf)
    np.maximum.at(best, which, pts[:, 1])
    filled = np.flatnonzero(np.isfinite(best))
    if min_bins is not None and len(filled) < min_bins:
        raise InsufficientObservationError(
            f"only {len(filled)} of {bins} bins have samples, need {min_bins}"
        )
    xs = np.empty(len(filled))
    ys = np.empty(len(filled))
    for k, b in enumerate(filled):
        members = np.flatnonzero(which == b)
        top = members[np.argmax(pts[members, 1])]
        xs[k] = pts[top, 0]
        ys[k] = pts[top, 1]
    order = np.argsort(xs)
    return xs[order], ys[order]


# ---------------------------------------------------------------------------
# Target ellipse and its projection.


@dataclass(frozen=True)
class RoiEllipse:
    """Elliptical target region on a horizontal plane."""

    center: np.ndarray      # (3,) world, on the plane it lies in
    semi_axes: tuple        # (a, b) meters
    angle: float = 0.0      # in-plane rotation, rad

    def __post_init__(self):
        center = np.asarray(self.center, dtype=float)
        if center.shape != (3,):
            raise ShapeError("ellipse center must be a 3-vector")
        a, b = self.semi_axes
        if a <= 0 or b <= 0:
            raise InvalidParameterError("semi-axes must be positive")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "semi_axes", (float(a), float(b)))

    def plane_axes(self):
        """World directions of the two semi-axes."""
        c, s = np.cos(self.angle), np.sin(self.angle)
        return np.array([c, s, 0.0]), np.array([-s, c, 0.0])

    def sample(self, count: int) -> np.ndarray:
        """(count, 3) world points around the rim."""
        psi = np.linspace(0.0, 2.0 * np.pi, count, endpoint=False)
        u, v = self.plane_axes()
        a, b = self.semi_axes
        return (
            self.center
            + np.outer(np.cos(psi) * a, u)
            + np.outer(np.sin(psi) * b, v)
        )

    def to_dict(self) -> dict:
        return {
            "center": self.center.tolist(),
            "semi_axes": list(self.semi_axes),
            "angle": self.angle,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RoiEllipse":
        return cls(
            center=np.asarray(doc["center"], dtype=float),
            semi_axes=tuple(doc["semi_axes"]),
            angle=float(doc["angle"]),
        )


@dataclass(frozen=True)
class ProjectedRoi:
    """The ellipse as a conic x^T C x = 0 in homogeneous normalized {E}."""

    conic: np.ndarray       # (3, 3) symmetric

    def near_edge(self, x):
        """Smallest y of the conic's cross-section at x, NaN off-footprint.

        Vectorized: accepts scalars or arrays.
        """
        x = np.asarray(x, dtype=float)
        c = self.conic
        qa = c[1, 1]
        qb = c[0, 1] * x + c[1, 2]
        qc = c[0, 0] * x * x + 2.0 * c[0, 2] * x + c[2, 2]
        disc = qb * qb - qa * qc
        with np.errstate(invalid="ignore"):
            root = np.where(disc >= 0.0, (-qb - np.sqrt(np.abs(disc))) / qa, np.nan)
        return root if root.ndim else float(root)

    def footprint(self):
        """x-range [lo, hi] the projected ellipse spans."""
        c = self.conic
        # Eliminate y: the section-in-y discriminant is quadratic in x.
        pa = c[0, 1] ** 2 - c[1, 1] * c[0, 0]
        pb = c[0, 1] * c[1, 2] - c[1, 1] * c[0, 2]
        pc = c[1, 2] ** 2 - c[1, 1] * c[2, 2]
        disc = pb * pb - pa * pc
        if pa >= 0.0 or disc <= 0.0:
            raise SingularGeometryError("projected target is not an ellipse")
        r = np.sqrt(disc)
        lo, hi = sorted(((-pb - r) / pa, (-pb + r) / pa))
        return float(lo), float(hi)


def project_roi(roi: RoiEllipse, camera: CameraModel, frame: FrameE) -> ProjectedRoi:
    """Map the ellipse through the plane-to-image homography into {E}.

    The homography sends the unit circle's (cos psi, sin psi, 1) to
    homogeneous {E} points, so the conic is H^-T diag(1,1,-1) H^-1.
    """
    u, v = roi.plane_axes()
    a, b = roi.semi_axes
    r = camera.rotation
    h_cam = np.column_stack([a * r @ u, b * r @ v, r @ (roi.center - camera.position)])
    k = np.array(
        [[camera.fx, 0.0, camera.cx], [0.0, camera.fy, camera.cy], [0.0, 0.0, 1.0]]
    )
    x_hat = frame.x_axis
    y_hat = frame.y_sign * np.array([-x_hat[1], x_hat[0]])
    to_e = (
        np.array(
            [
                [x_hat[0], x_hat[1], -x_hat @ frame.origin],
                [y_hat[0], y_hat[1], -y_hat @ frame.origin],
                [0.0, 0.0, frame.chord_px],
            ]
        )
        / frame.chord_px
    )
    h = to_e @ k @ h_cam
    if abs(np.linalg.det(h)) < 1e-18:
        raise SingularGeometryError("degenerate target projection")
    h_inv = np.linalg.inv(h)
    conic = h_inv.T @ np.diag([1.0, 1.0, -1.0]) @ h_inv
    conic = 0.5 * (conic + conic.T)
    # Normalize the sign so the y-quadratic coefficient is positive and
    # scale for conditioning.
    if conic[1, 1] < 0:
        conic = -conic
    conic = conic / np.abs(conic).max()
    projected = ProjectedRoi(conic=conic)
    projected.footprint()  # validates ellipse-ness
    return projected


def roi_near_edge(roi: RoiEllipse, camera: CameraModel, frame: FrameE, x):
    """Near-edge height of the projected target at x, or None off-footprint."""
    y = project_roi(roi, camera, frame).near_edge(x)
    if np.ndim(y) == 0:
        return None if np.isnan(y) else float(y)
    return y


# ---------------------------------------------------------------------------
# Overlap domain.


@dataclass(frozen=True)
class OverlapDomain:
    """Normalized x-intervals where the sheet still occludes the target."""

    intervals: tuple
    fully_covered: bool = False

    @property
    def is_empty(self) -> bool:
        return len(self.intervals) == 0

    @property
    def measure(self) -> float:
        return float(sum(hi - lo for lo, hi in self.intervals))


def compute_overlap_domain(
    weights,
    layout: KernelLayout,
    near_edge,
    resolution: int = 256,
) -> OverlapDomain:
    """Occluded intervals of the visual curve against the target's near edge.

    `near_edge` maps an x array to near-edge heights (NaN off-footprint).
    A sample is occluded when it lies in the footprint with the curve at or
    above the edge.  Interval endpoints between samples of differing status
    are refined by bisection to 1e-6.  If every footprint sample is occluded
    the target is fully covered and the whole domain is returned, which
    keeps the exposure objective pushing the entire curve.
    """
    if resolution < 64:
        raise InvalidParameterError(f"resolution must be >= 64, got {resolution}")
    weights = np.asarray(weights, dtype=float)

    def occluded(x):
        x = np.asarray(x, dtype=float)
        edge = near_edge(x)
        phi = eval_curve_2d(weights, layout, x)
        with np.errstate(invalid="ignore"):
            return np.isfinite(edge) & (phi >= edge)

    xs = np.linspace(0.0, 1.0, resolution)
    occ = occluded(xs)
    in_foot = np.isfinite(near_edge(xs))
    if in_foot.any() and bool(np.all(occ[in_foot])):
        return OverlapDomain(intervals=((0.0, 1.0),), fully_covered=True)

    def refine(lo, hi):
        # invariant: status differs at lo and hi
        lo_occ = bool(occluded(lo))
        while hi - lo > 1e-6:
            mid = 0.5 * (lo + hi)
            if bool(occluded(mid)) == lo_occ:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    intervals = []
    start = None
    for k in range(resolution):
        if occ[k] and start is None:
            start = xs[k] if k == 0 else refine(xs[k - 1], xs[k])
        elif not occ[k] and start is not None:
            intervals.append((start, refine(xs[k - 1], xs[k])))
            start = None
    if start is not None:
        intervals.append((start, xs[-1]))
    return OverlapDomain(intervals=tuple(intervals))


# ---------------------------------------------------------------------------
# Parameter transform and the observation bundle.


def transform_params_to_E(
    params: BoundaryParams3D,
    camera: CameraModel,
    frame: FrameE,
    layout: KernelLayout,
) -> np.ndarray:
    """Refit a 3D boundary estimate as a 2D curve in normalized {E}.

    Samples the curve densely, projects, and uses the unconstrained fit:
    the input is a smooth predicted curve, not a noisy point cloud.
    """
    xi = np.linspace(0.0, 1.0, 200)
    pts = frame.to_frame(project_points(camera, eval_curve_3d(params, xi)))
    return fit_curve_2d(pts[:, 0], pts[:, 1], layout)


@dataclass
class SceneObservation:
    """One settled-state reading of the visual boundary and the overlap."""

    samples_x: np.ndarray
    samples_y: np.ndarray
    weights: np.ndarray         # constrained upper-envelope fit in {E}
    overlap: OverlapDomain


@dataclass
class RetractionScene:
    """Static viewing setup for one episode: camera, target, frozen frame.

    The frame is built once from the initial boundary endpoints so curve
    weights stay comparable across control iterations.
    """

    camera: CameraModel
    roi: RoiEllipse
    layout: KernelLayout
    frame: FrameE
    projected_roi: ProjectedRoi
    bins: int = 200
    baseline: tuple = None      # initial boundary endpoints, world

    @classmethod
    def create(
        cls,
        mesh: TissueMesh,
        camera: CameraModel,
        roi: RoiEllipse,
        layout: KernelLayout,
        bins: int = 200,
    ) -> "RetractionScene":
        boundary = mesh.node_positions[mesh.boundary_order]
        ends = project_points(camera, boundary[[0, -1]])
        centroid = project_points(camera, roi.center)[0]
        frame = build_frame_E(ends[0], ends[1], centroid)
        return cls(
            camera=camera,
            roi=roi,
            layout=layout,
            frame=frame,
            projected_roi=project_roi(roi, camera, frame),
            bins=bins,
            baseline=(boundary[0].copy(), boundary[-1].copy()),
        )

    def observe(self, mesh: TissueMesh) -> SceneObservation:
        xs, ys = extract_visual_samples(
            mesh, self.camera, self.frame, bins=self.bins, min_bins=self.layout.m
        )
        weights = fit_curve_2d_constrained(xs, ys, self.layout)
        overlap = compute_overlap_domain(
            weights, self.layout, self.projected_roi.near_edge
        )
        return SceneObservation(
            samples_x=xs, samples_y=ys, weights=weights, overlap=overlap
        )
