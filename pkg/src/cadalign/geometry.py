"""9DoF pose algebra: hat map, SE(3) exponential/logarithm, the pose map
psi(a, s), symmetry-aware rotation distance, and oriented bounding boxes
with exact IoU.

Conventions
-----------
A pose is parameterized by ``PoseParams(a, s)`` where ``a`` holds the six
Lie-algebra coordinates (a[0:3] rotation, a[3:6] translation) and ``s`` the
three per-axis scale factors.  ``pose_to_matrix`` produces the 4x4 matrix

    psi(a, s) = expm([[hat(a[0:3]), a[3:6]], [0, 0]]) @ diag(s, 1)

which maps model-space points into world space (translate * rotate * scale).
All matrices are plain numpy arrays with row-vector-free, column-point
semantics: ``p_world = M @ [p, 1]``.

Quaternions are (w, x, y, z), canonicalized to w >= 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import ConvexHull, HalfspaceIntersection, QhullError


class Symmetry(Enum):
    """Rotational symmetry class about a canonical model axis."""

    NONE = "none"
    C2 = "c2"
    C4 = "c4"
    CINF = "cinf"


def _default_axis():
    return np.array([0.0, 1.0, 0.0])


@dataclass(frozen=True)
class SymmetryTag:
    kind: Symmetry = Symmetry.NONE
    axis: np.ndarray = field(default_factory=_default_axis)

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=float)
        n = np.linalg.norm(axis)
        if not n > 0:
            raise ValueError("symmetry axis must be nonzero")
        object.__setattr__(self, "axis", axis / n)


@dataclass
class PoseParams:
    """Lie-algebra coordinates plus per-axis scale."""

    a: np.ndarray  # (6,) rotation a[0:3], translation a[3:6]
    s: np.ndarray  # (3,) scale factors

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float).reshape(6)
        self.s = np.asarray(self.s, dtype=float).reshape(3)
        if not (np.all(np.isfinite(self.a)) and np.all(np.isfinite(self.s))):
            raise ValueError("pose parameters must be finite")

    @classmethod
    def identity(cls):
        return cls(np.zeros(6), np.ones(3))

    def copy(self):
        return PoseParams(self.a.copy(), self.s.copy())

    def rigid_matrix(self):
        """expm of the twist ``a`` as a 4x4, cached (``a`` is treated as
        immutable once constructed)."""
        E = getattr(self, "_rigid", None)
        if E is None:
            E = se3_exp(self.a)
            self._rigid = E
        return E


def hat(w):
    """Skew-symmetric matrix realizing the cross product: hat(w) @ v = w x v."""
    wx, wy, wz = np.asarray(w, dtype=float)
    return np.array([
        [0.0, -wz, wy],
        [wz, 0.0, -wx],
        [-wy, wx, 0.0],
    ])


def so3_exp(w):
    """Rodrigues rotation from an axis-angle vector."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    W = hat(w)
    if theta < 1e-6:
        # second-order series, accurate to ~1e-24 at this angle
        return np.eye(3) + W + 0.5 * (W @ W)
    A = np.sin(theta) / theta
    B = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + A * W + B * (W @ W)


def se3_exp(a):
    """Closed-form SE(3) exponential of (rotation, translation) coordinates."""
    a = np.asarray(a, dtype=float).reshape(6)
    w, u = a[:3], a[3:]
    theta = np.linalg.norm(w)
    W = hat(w)
    W2 = W @ W
    if theta < 1e-6:
        R = np.eye(3) + W + 0.5 * W2
        V = np.eye(3) + 0.5 * W + W2 / 6.0
    else:
        A = np.sin(theta) / theta
        B = (1.0 - np.cos(theta)) / theta**2
        C = (theta - np.sin(theta)) / theta**3
        R = np.eye(3) + A * W + B * W2
        V = np.eye(3) + B * W + C * W2
    m = np.eye(4)
    m[:3, :3] = R
    m[:3, 3] = V @ u
    return m


def se3_exp_batch(a):
    """Closed-form SE(3) exponential for a batch of (rotation, translation)
    coordinate vectors, shape (n, 6) -> (n, 4, 4)."""
    a = np.asarray(a, dtype=float).reshape(-1, 6)
    w, u = a[:, :3], a[:, 3:]
    n = len(a)
    theta = np.linalg.norm(w, axis=1)
    W = np.zeros((n, 3, 3))
    W[:, 0, 1] = -w[:, 2]
    W[:, 0, 2] = w[:, 1]
    W[:, 1, 0] = w[:, 2]
    W[:, 1, 2] = -w[:, 0]
    W[:, 2, 0] = -w[:, 1]
    W[:, 2, 1] = w[:, 0]
    W2 = W @ W
    small = theta < 1e-6
    t2 = np.where(small, 1.0, theta**2)
    A = np.where(small, 1.0, np.sin(theta) / np.where(small, 1.0, theta))
    B = np.where(small, 0.5, (1.0 - np.cos(theta)) / t2)
    C = np.where(small, 1.0 / 6.0,
                 (theta - np.sin(theta)) / np.where(small, 1.0, theta**3))
    eye = np.eye(3)
    R = eye + A[:, None, None] * W + B[:, None, None] * W2
    V = eye + B[:, None, None] * W + C[:, None, None] * W2
    m = np.zeros((n, 4, 4))
    m[:, 3, 3] = 1.0
    m[:, :3, :3] = R
    m[:, :3, 3] = np.einsum("nab,nb->na", V, u)
    return m


def so3_log(R):
    """Axis-angle vector of a rotation matrix."""
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < 1e-9:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    if abs(np.pi - theta) < 1e-6:
        # near pi the antisymmetric part vanishes; use the symmetric part
        S = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diagonal(S), 0.0, None))
        # fix signs from off-diagonals, anchored on the largest component
        k = int(np.argmax(axis))
        axis = S[:, k] / max(axis[k], 1e-12)
        axis = axis / np.linalg.norm(axis)
        return theta * axis
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return theta / (2.0 * np.sin(theta)) * w


def se3_log(m):
    """Lie-algebra coordinates of a rigid 4x4 transform."""
    m = np.asarray(m, dtype=float)
    w = so3_log(m[:3, :3])
    theta = np.linalg.norm(w)
    W = hat(w)
    W2 = W @ W
    if theta < 1e-6:
        V_inv = np.eye(3) - 0.5 * W + W2 / 12.0
    else:
        B = (1.0 - np.cos(theta)) / theta**2
        C = (theta - np.sin(theta)) / theta**3
        V = np.eye(3) + B * W + C * W2
        V_inv = np.linalg.inv(V)
    return np.concatenate([w, V_inv @ m[:3, 3]])


def pose_to_matrix(p: PoseParams):
    """The map psi: (a, s) -> 4x4 transform, expm of the twist times diag(s, 1)."""
    m = p.rigid_matrix().copy()
    m[:3, :3] = m[:3, :3] * p.s[np.newaxis, :]
    return m


def quat_from_matrix(R):
    """Unit quaternion (w, x, y, z) of a rotation matrix, canonicalized w >= 0."""
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    if t > 0:
        r = np.sqrt(1.0 + t)
        w = 0.5 * r
        x = (R[2, 1] - R[1, 2]) / (2.0 * r)
        y = (R[0, 2] - R[2, 0]) / (2.0 * r)
        z = (R[1, 0] - R[0, 1]) / (2.0 * r)
    else:
        i = int(np.argmax(np.diagonal(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        r = np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        q = np.empty(3)
        q[i] = 0.5 * r
        q[j] = (R[i, j] + R[j, i]) / (2.0 * r)
        q[k] = (R[k, i] + R[i, k]) / (2.0 * r)
        w = (R[k, j] - R[j, k]) / (2.0 * r)
        x, y, z = q
    q = np.array([w, x, y, z])
    q = q / np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return q


def matrix_from_quat(q):
    w, x, y, z = np.asarray(q, dtype=float)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def trs_to_matrix(translation, quat, scale):
    """Compose translation * rotation * scale into a 4x4 transform."""
    m = np.eye(4)
    m[:3, :3] = matrix_from_quat(quat) * np.asarray(scale, dtype=float)[np.newaxis, :]
    m[:3, 3] = np.asarray(translation, dtype=float)
    return m


def decompose(t):
    """Split a T*R*S transform into (translation, quaternion, scale).

    Raises ValueError for a non-positive determinant or near-singular scale.
    """
    t = np.asarray(t, dtype=float)
    B = t[:3, :3]
    if np.linalg.det(B) <= 0:
        raise ValueError("transform has non-positive determinant")
    scale = np.linalg.norm(B, axis=0)
    if np.any(scale < 1e-9):
        raise ValueError("near-singular scale")
    R = B / scale[np.newaxis, :]
    # guard against residual non-orthogonality from accumulated products
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U[:, -1] = -U[:, -1]
        R = U @ Vt
    return t[:3, 3].copy(), quat_from_matrix(R), scale


def rotation_angle_deg(R):
    """Geodesic angle of a rotation matrix, degrees."""
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    return np.degrees(np.arccos(cos_theta))


def _axis_rotation(axis, angle):
    return so3_exp(np.asarray(axis, dtype=float) * angle)


def rotation_error(q_pred, q_gt, sym: SymmetryTag = None):
    """Symmetry-aware rotation error in degrees.

    For C2/C4 the error is minimized over the discrete group of rotations
    about the model symmetry axis.  For Cinf only the axis direction matters:
    the error is the angle between the two images of the symmetry axis.
    """
    if sym is None:
        sym = SymmetryTag()
    Rp = matrix_from_quat(q_pred)
    Rg = matrix_from_quat(q_gt)
    if sym.kind is Symmetry.CINF:
        ap = Rp @ sym.axis
        ag = Rg @ sym.axis
        cos_theta = np.clip(np.dot(ap, ag), -1.0, 1.0)
        return np.degrees(np.arccos(cos_theta))
    if sym.kind is Symmetry.NONE:
        fold = 1
    elif sym.kind is Symmetry.C2:
        fold = 2
    else:
        fold = 4
    best = 180.0
    for k in range(fold):
        g = _axis_rotation(sym.axis, 2.0 * np.pi * k / fold)
        best = min(best, rotation_angle_deg((Rp @ g).T @ Rg))
    return best


def translation_error(t_pred, t_gt):
    """Euclidean translation error, meters."""
    return float(np.linalg.norm(np.asarray(t_pred, dtype=float) - np.asarray(t_gt, dtype=float)))


def scale_error(s_pred, s_gt):
    """Max per-axis relative scale deviation, percent."""
    s_pred = np.asarray(s_pred, dtype=float)
    s_gt = np.asarray(s_gt, dtype=float)
    if np.any(s_gt <= 0):
        raise ValueError("ground-truth scale must be strictly positive")
    return float(100.0 * np.max(np.abs(s_pred - s_gt) / s_gt))


# ---------------------------------------------------------------------------
# Oriented bounding boxes


_UNIT_CORNERS = np.array([
    [x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)
])


@dataclass(frozen=True)
class OrientedBox:
    """The canonical unit box [-0.5, 0.5]^3 carried through a transform."""

    transform: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.transform, dtype=float).reshape(4, 4)
        object.__setattr__(self, "transform", m)
        if self.volume() < 1e-12:
            raise ValueError("degenerate oriented box")

    def corners(self):
        h = self.transform @ np.concatenate([_UNIT_CORNERS, np.ones((8, 1))], axis=1).T
        return (h[:3] / h[3]).T

    def volume(self):
        return float(abs(np.linalg.det(np.asarray(self.transform)[:3, :3])))

    def halfspaces(self):
        """Face planes as (normal, offset) rows with normal . x <= offset inside."""
        inv = np.linalg.inv(self.transform)
        # unit-box faces n . u <= 0.5 pulled back through the transform
        A = []
        b = []
        for axis in range(3):
            for sign in (1.0, -1.0):
                n_unit = np.zeros(3)
                n_unit[axis] = sign
                n = n_unit @ inv[:3, :3]
                off = 0.5 - n_unit @ inv[:3, 3]
                A.append(n)
                b.append(off)
        return np.array(A), np.array(b)


def obb_iou(a: OrientedBox, b: OrientedBox):
    """Exact intersection-over-union of two oriented boxes.

    The intersection is the convex polytope cut out by both boxes' 12 face
    half-spaces; its volume comes from the half-space intersection around a
    Chebyshev-center interior point.
    """
    va, vb = a.volume(), b.volume()
    inter = _convex_intersection_volume(a, b)
    union = va + vb - inter
    return float(inter / union) if union > 0 else 0.0


def _convex_intersection_volume(a, b):
    Aa, ba = a.halfspaces()
    Ab, bb = b.halfspaces()
    A = np.vstack([Aa, Ab])
    off = np.concatenate([ba, bb])
    # Chebyshev center: max r s.t. A x + ||A_i|| r <= b
    norms = np.linalg.norm(A, axis=1)
    res = linprog(
        c=[0.0, 0.0, 0.0, -1.0],
        A_ub=np.column_stack([A, norms]),
        b_ub=off,
        bounds=[(None, None)] * 3 + [(0.0, None)],
        method="highs",
    )
    if not res.success or res.x[3] < 1e-12:
        return 0.0
    center = res.x[:3]
    halfspaces = np.column_stack([A, -off])
    try:
        hs = HalfspaceIntersection(halfspaces, center)
        return float(ConvexHull(hs.intersections).volume)
    except QhullError:
        return 0.0
