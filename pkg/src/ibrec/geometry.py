"""Planar lattice heart inside a lead ring, and the lead-measurement operator.

Heart nodes form an nx-by-ny integer lattice at z=0 centered on the origin;
leads sit on a surrounding ring in the same plane.  The measurement operator
maps nodal sources to leads with a row-normalized inverse-distance kernel,
optionally after rotating the source coordinates about the Z axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

D_MIN = 0.1  # kernel distance clamp, lattice units
MAX_ROTATION_DEG = 45.0


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class Geometry:
    nx: int
    ny: int
    ring_radius: float
    heart_nodes: np.ndarray        # (U, 3) float64
    leads: np.ndarray              # (M, 3) float64
    adjacency: tuple               # tuple of tuples of neighbor indices
    lattice_xy: np.ndarray = field(repr=False, default=None)  # (U, 2) int lattice coords

    @property
    def n_nodes(self) -> int:
        return self.heart_nodes.shape[0]

    @property
    def n_leads(self) -> int:
        return self.leads.shape[0]


@dataclass(frozen=True)
class TissueMap:
    excitability: np.ndarray       # per-node AP threshold parameter
    scar_mask: np.ndarray          # per-node bool
    scar_center: int
    scar_radius: int


@dataclass(frozen=True)
class ForwardOperator:
    H: np.ndarray                  # (M, U) row-normalized weights
    rotation_deg: float


def lattice_distance(geom: Geometry, i: int, j: int) -> int:
    """Steps along the 4-neighbor lattice between two heart nodes."""
    xi, yi = geom.lattice_xy[i]
    xj, yj = geom.lattice_xy[j]
    return int(abs(xi - xj) + abs(yi - yj))


def build_grid(nx: int, ny: int, lead_count: int, ring_radius: float) -> Geometry:
    """Construct the lattice heart plus an equally spaced lead ring.

    The ring must clear the lattice's corner radius (half its diagonal) so
    that any Z-rotation keeps every node strictly inside the ring.
    """
    if nx < 2 or ny < 2:
        raise ConfigurationError("grid needs nx, ny >= 2")
    if lead_count < 1:
        raise ConfigurationError("need at least one lead")
    corner_radius = float(np.hypot(nx - 1, ny - 1)) / 2.0
    if ring_radius <= corner_radius + D_MIN:
        raise ConfigurationError(
            f"ring_radius {ring_radius} must exceed the lattice corner radius "
            f"{corner_radius:.3f} plus the kernel clamp {D_MIN}")

    xs = np.arange(nx, dtype=np.float64) - (nx - 1) / 2.0
    ys = np.arange(ny, dtype=np.float64) - (ny - 1) / 2.0
    nodes = np.array([[x, y, 0.0] for y in ys for x in xs])
    lattice_xy = np.array([[ix, iy] for iy in range(ny) for ix in range(nx)], dtype=np.int64)

    angles = 2.0 * np.pi * np.arange(lead_count) / lead_count
    leads = np.stack([ring_radius * np.cos(angles),
                      ring_radius * np.sin(angles),
                      np.zeros(lead_count)], axis=1)

    def node_index(ix, iy):
        return iy * nx + ix

    adjacency = []
    for iy in range(ny):
        for ix in range(nx):
            nbrs = []
            for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                jx, jy = ix + dx, iy + dy
                if 0 <= jx < nx and 0 <= jy < ny:
                    nbrs.append(node_index(jx, jy))
            adjacency.append(tuple(nbrs))

    dists = np.linalg.norm(leads[:, None, :] - nodes[None, :, :], axis=2)
    if np.min(dists) <= D_MIN:
        raise ConfigurationError("a lead falls within the kernel clamp distance of a node")

    return Geometry(nx=nx, ny=ny, ring_radius=float(ring_radius), heart_nodes=nodes,
                    leads=leads, adjacency=tuple(adjacency), lattice_xy=lattice_xy)


def rotate_z(coords: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate (N, 3) coordinates about the Z axis."""
    theta = np.deg2rad(degrees)
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return coords @ rot.T


def operator_from_coords(node_coords: np.ndarray, leads: np.ndarray,
                         rotation_deg: float = 0.0) -> ForwardOperator:
    kernel = 1.0 / np.maximum(
        np.linalg.norm(leads[:, None, :] - node_coords[None, :, :], axis=2), D_MIN)
    H = kernel / kernel.sum(axis=1, keepdims=True)
    return ForwardOperator(H=H, rotation_deg=float(rotation_deg))


def build_forward_operator(geom: Geometry, rotation_deg: float = 0.0) -> ForwardOperator:
    """Inverse-distance lead operator with the heart rotated about Z by `rotation_deg`."""
    if abs(rotation_deg) > MAX_ROTATION_DEG:
        raise ConfigurationError(
            f"|rotation| must be <= {MAX_ROTATION_DEG} degrees, got {rotation_deg}")
    rotated = rotate_z(geom.heart_nodes, rotation_deg) if rotation_deg else geom.heart_nodes
    return operator_from_coords(rotated, geom.leads, rotation_deg)


def build_tissue_map(geom: Geometry, scar_center: int, scar_radius: int,
                     a_healthy: float, a_scar: float) -> TissueMap:
    """Scar = lattice ball around `scar_center`; scar tissue gets the higher threshold."""
    if a_scar <= a_healthy:
        raise ConfigurationError("scar threshold must exceed the healthy threshold")
    mask = np.array([lattice_distance(geom, scar_center, j) <= scar_radius
                     for j in range(geom.n_nodes)])
    exc = np.where(mask, a_scar, a_healthy)
    return TissueMap(excitability=exc, scar_mask=mask,
                     scar_center=int(scar_center), scar_radius=int(scar_radius))
