"""Static geometry and material constants of the manipulator.

One module is a pair of equilateral triangular plates joined by three rigid
vertical links and three bendable diagonal links.  All lengths are in mm,
stiffnesses and forces in relative units.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from .errors import DimensionMismatch, OutOfRange

# chord/arc ratio of a half-folded circular arc; the chord->angle map is
# invertible only above this ratio
_HALF_FOLD_RATIO = 2.0 / math.pi


@dataclass(frozen=True)
class ManipulatorParams:
    """Geometry and material constants shared by every simulation call.

    Attributes:
        n_modules: number of serially connected modules (N >= 1).
        plate_circumradius: distance from a plate centroid to each vertex, mm.
        vertical_link_length: rigid vertical link length, mm.
        spherical_stiffness: torsional stiffness of every plate/link joint,
            energy per rad^2 (uniform across all 12 joints of a module).
        force_limit: maximum tension a tendon can carry (relative units).
        stiffness_bounds: (s_min, s_max) admissible bending-stiffness range.
        chord_floor_factor: lower bound on chord/rest-chord; must stay above
            2/pi so the chord->bend-angle map remains invertible.
        diagonal_chirality: +1 routes diagonal i from bottom vertex i+1 to top
            vertex i, -1 the mirrored routing.
    """

    n_modules: int = 5
    plate_circumradius: float = 30.0
    vertical_link_length: float = 50.0
    spherical_stiffness: float = 0.05
    force_limit: float = 2.0
    stiffness_bounds: tuple = (0.4, 2.5)
    chord_floor_factor: float = 0.65
    diagonal_chirality: int = 1

    def __post_init__(self):
        if self.n_modules < 1:
            raise OutOfRange(f"n_modules must be >= 1, got {self.n_modules}")
        for name in ("plate_circumradius", "vertical_link_length",
                     "spherical_stiffness", "force_limit"):
            if getattr(self, name) <= 0:
                raise OutOfRange(f"{name} must be positive, got {getattr(self, name)}")
        s_min, s_max = self.stiffness_bounds
        if not s_min < s_max:
            raise OutOfRange(f"stiffness_bounds must satisfy s_min < s_max, got {self.stiffness_bounds}")
        if s_min <= 0:
            raise OutOfRange(f"stiffness lower bound must be positive, got {s_min}")
        if not _HALF_FOLD_RATIO < self.chord_floor_factor < 1.0:
            raise OutOfRange(
                f"chord_floor_factor must lie in (2/pi, 1), got {self.chord_floor_factor}")
        if self.diagonal_chirality not in (1, -1):
            raise OutOfRange(f"diagonal_chirality must be +1 or -1, got {self.diagonal_chirality}")

    @property
    def side(self) -> float:
        """Edge length of the triangular plates."""
        return self.plate_circumradius * math.sqrt(3.0)

    @property
    def b_ini(self) -> float:
        """Rest chord length of a straight diagonal link."""
        return math.hypot(self.vertical_link_length, self.side)

    @property
    def chord_floor(self) -> float:
        """Smallest admissible chord length."""
        return self.chord_floor_factor * self.b_ini

    @property
    def n_chords(self) -> int:
        """Total number of diagonal chords (3 per module)."""
        return 3 * self.n_modules

    @property
    def max_tendon_displacement(self) -> float:
        """Largest commanded shortening the chord box can absorb, mm."""
        return self.n_modules * self.b_ini * (1.0 - self.chord_floor_factor)

    def rest_shape(self) -> np.ndarray:
        """Chord vector of the straight (unactuated) manipulator."""
        return np.full(self.n_chords, self.b_ini)

    def validate_shape(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if b.shape != (self.n_chords,):
            raise DimensionMismatch(
                f"shape vector must have length {self.n_chords} (3N for N={self.n_modules}), "
                f"got {b.shape}")
        tol = 1e-9
        if np.any(b < self.chord_floor - tol) or np.any(b > self.b_ini + tol):
            raise OutOfRange(
                f"chords must lie in [{self.chord_floor:.6f}, {self.b_ini:.6f}] mm")
        return b

    def validate_stiffness(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if s.shape != (self.n_chords,):
            raise DimensionMismatch(
                f"stiffness vector must have length {self.n_chords} (3N for N={self.n_modules}), "
                f"got {s.shape[0] if s.ndim == 1 else s.shape}")
        s_min, s_max = self.stiffness_bounds
        tol = 1e-9
        if np.any(s < s_min - tol) or np.any(s > s_max + tol):
            raise OutOfRange(f"stiffnesses must lie in [{s_min}, {s_max}]")
        return s


def initial_geometry(params: ManipulatorParams):
    """Anchor layout of one module in its bottom-plate frame.

    Returns:
        (P, Q0): bottom vertices P_i and rest top vertices Q0_i = P_i + z*L_v,
        both (3, 3) arrays with one point per row.  P_i sit at angles 0, 120,
        240 degrees on a circle of the plate circumradius in the z=0 plane.
    """
    r = params.plate_circumradius
    ang = 2.0 * np.pi * np.arange(3) / 3.0
    p = np.stack([r * np.cos(ang), r * np.sin(ang), np.zeros(3)], axis=1)
    q0 = p + np.array([0.0, 0.0, params.vertical_link_length])
    return p, q0


def diagonal_indices(params: ManipulatorParams):
    """(bottom_vertex, top_vertex) index pairs of the three diagonal links."""
    i = np.arange(3)
    if params.diagonal_chirality == 1:
        return (i + 1) % 3, i
    return i, (i + 1) % 3
