"""Space-time Gaussian splats.

Each splat is an anisotropic Gaussian over (x, y, z, t). Its 4x4 covariance is
Sigma = R S S^T R^T with S = diag(exp(log_scale)) and R the 4D rotation built
from a left/right quaternion pair. Querying the map at a time t conditions
each splat down to a 3D spatial Gaussian plus a scalar temporal weight.

Densities are unnormalized (peak value 1): a splat evaluated at its own mean
contributes full opacity, which is what the compositing model requires.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointFormatError, DegenerateTemporalExtentError, InvalidParameterError

SIGMA_TT_FLOOR = 1e-12

MAP_MAGIC = b"S4DG"
MAP_VERSION = 1
_RECORD_FLOATS = 22  # mu(4) log_scale(4) q_left(4) q_right(4) opacity(1) color(3) dynamics(1) birth(1)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=float)))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


# ---------------------------------------------------------------------------
# 4D rotation from a quaternion pair
# ---------------------------------------------------------------------------


def left_isoclinic(q):
    """Left quaternion-multiplication matrix; orthogonal for unit q.

    Accepts (4,) or (N, 4); returns (4, 4) or (N, 4, 4).
    """
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    rows = [
        [w, -x, -y, -z],
        [x, w, -z, y],
        [y, z, w, -x],
        [z, -y, x, w],
    ]
    M = np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)
    return M


def right_isoclinic(q):
    """Right quaternion-multiplication matrix; orthogonal for unit q."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    rows = [
        [w, -x, -y, -z],
        [x, w, z, -y],
        [y, -z, w, x],
        [z, y, -x, w],
    ]
    M = np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)
    return M


def rotation4d(q_left, q_right):
    """R = L(q_l) @ R(q_r); orthogonal when both quaternions are unit."""
    return left_isoclinic(q_left) @ right_isoclinic(q_right)


def _normalize_rows(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / n


def build_covariance(log_scale, q_left, q_right):
    """Sigma = R S S^T R^T for one splat or a batch.

    log_scale (…,4), quaternions (…,4) unit norm. Symmetric PD by construction;
    the eigenvalues are exp(log_scale)**2 independent of the quaternions.
    """
    log_scale = np.asarray(log_scale, dtype=float)
    q_left = np.asarray(q_left, dtype=float)
    q_right = np.asarray(q_right, dtype=float)
    if not (np.all(np.isfinite(log_scale)) and np.all(np.isfinite(q_left)) and np.all(np.isfinite(q_right))):
        raise InvalidParameterError("non-finite covariance parameters")
    R = rotation4d(_normalize_rows(q_left), _normalize_rows(q_right))
    s = np.exp(log_scale)
    A = R * s[..., None, :]  # R @ diag(s)
    return A @ np.swapaxes(A, -1, -2)


# ---------------------------------------------------------------------------
# Single-splat value types
# ---------------------------------------------------------------------------


@dataclass
class Gaussian4D:
    """One space-time splat.

    mu: (x, y, z, t) mean; log_scale: log scaling diagonal; q_left/q_right:
    unit quaternion pair of the 4D rotation; opacity_logit: pre-sigmoid
    opacity; color: DC RGB in [0,1]; dynamics: inherited dynamic label in
    [0,1]; birth_frame: frame index at insertion.
    """

    mu: np.ndarray
    log_scale: np.ndarray
    q_left: np.ndarray
    q_right: np.ndarray
    opacity_logit: float
    color: np.ndarray
    dynamics: float = 0.0
    birth_frame: int = 0

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float).reshape(4)
        self.log_scale = np.asarray(self.log_scale, dtype=float).reshape(4)
        self.q_left = _normalize_rows(np.asarray(self.q_left, dtype=float).reshape(4))
        self.q_right = _normalize_rows(np.asarray(self.q_right, dtype=float).reshape(4))
        self.color = np.asarray(self.color, dtype=float).reshape(3)
        if not (
            np.all(np.isfinite(self.mu))
            and np.all(np.isfinite(self.log_scale))
            and np.isfinite(self.opacity_logit)
            and np.all(np.isfinite(self.color))
        ):
            raise InvalidParameterError("non-finite Gaussian parameters")

    @property
    def alpha(self) -> float:
        return float(sigmoid(self.opacity_logit))

    def covariance(self):
        return build_covariance(self.log_scale, self.q_left, self.q_right)

    def color_at(self, view_dir=None, t=None):
        """DC color; the signature leaves room for view/time-dependent terms."""
        return self.color


@dataclass
class Gaussian3DConditional:
    """Spatial Gaussian obtained by conditioning a splat on a fixed time."""

    mu_xyz: np.ndarray
    cov_xyz: np.ndarray
    temporal_weight: float


def condition_at_time(g: Gaussian4D, t: float) -> Gaussian3DConditional:
    """Condition one splat on time t (Schur complement of the temporal block)."""
    if not np.isfinite(t):
        raise InvalidParameterError("query time must be finite")
    cov = g.covariance()
    mu_c, cov_c, p_t = condition_covariance(g.mu[None], cov[None], float(t))
    return Gaussian3DConditional(mu_c[0], cov_c[0], float(p_t[0]))


def condition_covariance(mu, cov, t):
    """Batched conditioning: mu (N,4), cov (N,4,4), scalar t.

    Returns mu_xyz (N,3), cov_xyz (N,3,3), temporal weight (N,).
    """
    mu = np.asarray(mu, dtype=float)
    cov = np.asarray(cov, dtype=float)
    sigma_tt = cov[:, 3, 3]
    if np.any(sigma_tt < SIGMA_TT_FLOOR):
        raise DegenerateTemporalExtentError(
            f"temporal variance below {SIGMA_TT_FLOOR:g} (min {sigma_tt.min():g})"
        )
    b = cov[:, :3, 3]
    dt = t - mu[:, 3]
    mu_xyz = mu[:, :3] + b * (dt / sigma_tt)[:, None]
    cov_xyz = cov[:, :3, :3] - b[:, :, None] * b[:, None, :] / sigma_tt[:, None, None]
    p_t = np.exp(-0.5 * dt * dt / sigma_tt)
    return mu_xyz, cov_xyz, p_t


def eval_density(g: Gaussian4D, x) -> float:
    """Unnormalized 4D density exp(-0.5 (x-mu)^T Sigma^-1 (x-mu)); 1 at the mean."""
    x = np.asarray(x, dtype=float).reshape(4)
    if not np.all(np.isfinite(x)):
        raise InvalidParameterError("non-finite query point")
    d = x - g.mu
    cov = g.covariance()
    sol = np.linalg.solve(cov, d)
    return float(np.exp(-0.5 * d @ sol))


# ---------------------------------------------------------------------------
# The mutable map (structure-of-arrays)
# ---------------------------------------------------------------------------

PARAM_FIELDS = ("mu", "log_scale", "q_left", "q_right", "opacity_logit", "color")


class GaussianMap:
    """Mutable splat collection with insertion/pruning bookkeeping.

    Parameters are float64 arrays, one row per splat. `observations` counts
    the distinct window keyframes that have seen each splat since birth;
    `matured` marks splats that already survived the young-splat pruning test.
    """

    def __init__(self):
        self.mu = np.zeros((0, 4))
        self.log_scale = np.zeros((0, 4))
        self.q_left = np.zeros((0, 4))
        self.q_right = np.zeros((0, 4))
        self.opacity_logit = np.zeros(0)
        self.color = np.zeros((0, 3))
        self.dynamics = np.zeros(0)
        self.birth_frame = np.zeros(0, dtype=int)
        self.observations = np.zeros(0, dtype=int)
        self.matured = np.zeros(0, dtype=bool)

    def __len__(self):
        return self.mu.shape[0]

    @property
    def alpha(self):
        return sigmoid(self.opacity_logit)

    def normalize_quaternions(self):
        if len(self):
            self.q_left = _normalize_rows(self.q_left)
            self.q_right = _normalize_rows(self.q_right)

    def covariances(self):
        return build_covariance(self.log_scale, self.q_left, self.q_right)

    def add(self, mu, log_scale, q_left, q_right, opacity_logit, color, dynamics, birth_frame):
        """Append a batch of splats; returns the new indices."""
        n0 = len(self)
        mu = np.atleast_2d(np.asarray(mu, dtype=float))
        n = mu.shape[0]
        self.mu = np.vstack([self.mu, mu])
        self.log_scale = np.vstack([self.log_scale, np.atleast_2d(np.asarray(log_scale, dtype=float))])
        self.q_left = np.vstack([self.q_left, _normalize_rows(np.atleast_2d(np.asarray(q_left, dtype=float)))])
        self.q_right = np.vstack([self.q_right, _normalize_rows(np.atleast_2d(np.asarray(q_right, dtype=float)))])
        self.opacity_logit = np.concatenate([self.opacity_logit, np.broadcast_to(np.asarray(opacity_logit, dtype=float), (n,)).copy()])
        self.color = np.vstack([self.color, np.atleast_2d(np.asarray(color, dtype=float))])
        self.dynamics = np.concatenate([self.dynamics, np.broadcast_to(np.asarray(dynamics, dtype=float), (n,)).copy()])
        self.birth_frame = np.concatenate([self.birth_frame, np.broadcast_to(np.asarray(birth_frame, dtype=int), (n,)).copy()])
        self.observations = np.concatenate([self.observations, np.zeros(n, dtype=int)])
        self.matured = np.concatenate([self.matured, np.zeros(n, dtype=bool)])
        return np.arange(n0, n0 + n)

    def add_gaussian(self, g: Gaussian4D):
        return self.add(
            g.mu[None], g.log_scale[None], g.q_left[None], g.q_right[None],
            g.opacity_logit, g.color[None], g.dynamics, g.birth_frame,
        )[0]

    def gaussian(self, i: int) -> Gaussian4D:
        return Gaussian4D(
            self.mu[i], self.log_scale[i], self.q_left[i], self.q_right[i],
            float(self.opacity_logit[i]), self.color[i],
            float(self.dynamics[i]), int(self.birth_frame[i]),
        )

    def keep(self, mask):
        """Drop splats where mask is False; returns old->new index map (-1 dropped)."""
        mask = np.asarray(mask, dtype=bool)
        remap = np.full(len(self), -1, dtype=int)
        remap[mask] = np.arange(int(mask.sum()))
        for name in PARAM_FIELDS + ("dynamics", "birth_frame", "observations", "matured"):
            setattr(self, name, getattr(self, name)[mask])
        return remap

    def copy(self) -> "GaussianMap":
        m = GaussianMap()
        for name in PARAM_FIELDS + ("dynamics", "birth_frame", "observations", "matured"):
            setattr(m, name, getattr(self, name).copy())
        return m

    # -- serialization ------------------------------------------------------

    def _record_matrix(self):
        return np.hstack(
            [
                self.mu,
                self.log_scale,
                self.q_left,
                self.q_right,
                self.opacity_logit[:, None],
                self.color,
                self.dynamics[:, None],
                self.birth_frame[:, None].astype(float),
            ]
        )

    def to_bytes(self) -> bytes:
        header = MAP_MAGIC + struct.pack("<IQ", MAP_VERSION, len(self))
        return header + self._record_matrix().astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "GaussianMap":
        if blob[:4] != MAP_MAGIC:
            raise CheckpointFormatError("bad magic for Gaussian record stream")
        version, count = struct.unpack("<IQ", blob[4:16])
        if version != MAP_VERSION:
            raise CheckpointFormatError(f"unsupported record stream version {version}")
        expect = 16 + count * _RECORD_FLOATS * 8
        if len(blob) < expect:
            raise CheckpointFormatError("truncated Gaussian record stream")
        data = np.frombuffer(blob[16:expect], dtype="<f8").reshape(count, _RECORD_FLOATS).astype(float)
        m = cls()
        m.mu = data[:, 0:4].copy()
        m.log_scale = data[:, 4:8].copy()
        m.q_left = data[:, 8:12].copy()
        m.q_right = data[:, 12:16].copy()
        m.opacity_logit = data[:, 16].copy()
        m.color = data[:, 17:20].copy()
        m.dynamics = data[:, 20].copy()
        m.birth_frame = data[:, 21].astype(int)
        m.observations = np.zeros(count, dtype=int)
        m.matured = np.ones(count, dtype=bool)
        return m

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "GaussianMap":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())

    def export_text(self, path):
        """Human-readable dump for debugging; one splat per line."""
        cols = (
            "mu_x mu_y mu_z mu_t ls_x ls_y ls_z ls_t "
            "ql_w ql_x ql_y ql_z qr_w qr_x qr_y qr_z "
            "opacity_logit r g b dynamics birth_frame"
        )
        with open(path, "w") as f:
            f.write(f"# columns: {cols}\n")
            for row in self._record_matrix():
                f.write(" ".join(format(v, ".17g") for v in row) + "\n")
