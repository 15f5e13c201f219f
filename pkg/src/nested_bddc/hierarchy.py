"""Nested substructure hierarchy: faces, dof classification, averaging weights.

Each decomposition level groups the current grid's cells into square
subdomains.  The only interface entities are faces (no corners): every
interface flux dof lies on exactly one face shared by exactly two
subdomains.  Coarse dofs are the arithmetic mean of the signed fine dofs of
a face plus one pressure average per subdomain, so the faces of one level
become the flux dofs of the next, enumerated exactly like the edges of the
coarsened grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh_fem import CoefficientField, QuadMesh

__all__ = [
    "HierarchyError",
    "WeightsError",
    "HierarchyConfig",
    "Face",
    "FaceFunctional",
    "DofPartition",
    "LevelDecomposition",
    "AveragingWeights",
    "build_level_decomposition",
    "build_hierarchy",
    "classify_dofs",
    "compute_weights",
    "face_average_functional",
    "coarsen_element_values",
    "apply_average",
    "expand_to_previous_level",
    "hierarchy_summary",
]


class HierarchyError(ValueError):
    pass


class WeightsError(ValueError):
    pass


@dataclass(frozen=True)
class HierarchyConfig:
    """Number of levels, coarsening ratio per level, and scaling exponent.

    ``gamma=0`` is multiplicity scaling (plain halves on interfaces),
    ``gamma=1`` weighs by inverse coefficient (stiffness scaling for this
    mass-matrix energy).
    """

    levels: int
    ratio: int
    gamma: float = 1.0

    def __post_init__(self):
        if self.levels < 2:
            raise HierarchyError("at least two levels are required")
        if int(self.ratio) != self.ratio or self.ratio < 2:
            raise HierarchyError("coarsening ratio must be an integer >= 2")
        if self.gamma not in (0, 1, 0.0, 1.0):
            raise HierarchyError("scaling exponent must be 0 or 1")


@dataclass(frozen=True)
class Face:
    """Interface between two subdomains with its constituent flux dofs.

    The canonical face normal points from the lower-indexed subdomain to the
    higher one, which on this grid coincides with the global +x/+y edge
    orientation, so all dof signs are +1.
    """

    index: int
    axis: str  # "v" or "h"
    sub_lo: int
    sub_hi: int
    dofs: np.ndarray


class FaceFunctional:
    """Arithmetic mean of the (consistently oriented) dofs of one face."""

    def __init__(self, dofs: np.ndarray):
        self.dofs = np.asarray(dofs)
        self.coeffs = np.full(len(self.dofs), 1.0 / len(self.dofs))

    def __call__(self, flux: np.ndarray) -> float:
        return float(self.coeffs @ np.asarray(flux)[self.dofs])


@dataclass(frozen=True)
class DofPartition:
    interior: np.ndarray
    interface: np.ndarray
    dof_face: np.ndarray  # face id per flux dof, -1 for interior
    n_primal_flux: int  # one per face
    n_primal_pressure: int  # one per subdomain


@dataclass
class LevelDecomposition:
    """One level of the nested decomposition of a (possibly coarse) grid."""

    level: int
    grid: QuadMesh
    sub_grid: QuadMesh
    ratio: int
    faces: list[Face]
    face_dofs: np.ndarray  # (n_faces, ratio)
    cells_by_sub: list[np.ndarray]
    interior_by_sub: list[np.ndarray]
    faces_by_sub: np.ndarray  # (n_sub, 4) face ids by slot, -1 absent
    local_dofs_by_sub: list[np.ndarray]
    partition: DofPartition

    @property
    def n_sub(self) -> int:
        return self.sub_grid.n_cells

    @property
    def n_faces(self) -> int:
        return len(self.faces)


def build_level_decomposition(grid: QuadMesh, ratio: int, level: int) -> LevelDecomposition:
    """Group the cells of ``grid`` into ratio x ratio subdomains."""
    if grid.nx % ratio or grid.ny % ratio:
        raise HierarchyError(
            f"grid {grid.nx}x{grid.ny} is not divisible by ratio {ratio}"
        )
    sx, sy = grid.nx // ratio, grid.ny // ratio
    sub_grid = QuadMesh(sx, sy, grid.h * ratio)

    cells = np.arange(grid.n_cells)
    ci = cells % grid.nx
    cj = cells // grid.nx
    sub_of_cell = (cj // ratio) * sx + (ci // ratio)

    sides = grid.edge_sides
    sub_lo_side = sub_of_cell[sides[:, 0]]
    sub_hi_side = sub_of_cell[sides[:, 1]]
    interface_mask = sub_lo_side != sub_hi_side

    # Faces enumerate exactly like the edges of the coarsened grid.
    n_vfaces = sub_grid.n_vertical
    n_faces = sub_grid.n_flux
    face_dofs = np.empty((n_faces, ratio), dtype=np.int64)
    faces: list[Face] = []
    t = np.arange(ratio)
    for f in range(n_vfaces):
        line, row = f // sy + 1, f % sy
        dofs = grid.vertical_edge(line * ratio, row * ratio + t)
        face_dofs[f] = dofs
        faces.append(
            Face(f, "v", sub_grid.cell_id(line - 1, row), sub_grid.cell_id(line, row), dofs)
        )
    for f in range(n_vfaces, n_faces):
        line, col = (f - n_vfaces) // sx + 1, (f - n_vfaces) % sx
        dofs = grid.horizontal_edge(col * ratio + t, line * ratio)
        face_dofs[f] = dofs
        faces.append(
            Face(f, "h", sub_grid.cell_id(col, line - 1), sub_grid.cell_id(col, line), dofs)
        )

    dof_face = np.full(grid.n_flux, -1, dtype=np.int64)
    dof_face[face_dofs.ravel()] = np.repeat(np.arange(n_faces), ratio)

    interior = np.flatnonzero(~interface_mask)
    interface = np.flatnonzero(interface_mask)

    def _group(ids: np.ndarray, owner: np.ndarray, n: int) -> list[np.ndarray]:
        order = np.argsort(owner, kind="stable")
        counts = np.bincount(owner, minlength=n)
        return np.split(ids[order], np.cumsum(counts)[:-1])

    cells_by_sub = _group(cells, sub_of_cell, sub_grid.n_cells)
    interior_by_sub = _group(interior, sub_lo_side[interior], sub_grid.n_cells)

    faces_by_sub = sub_grid.cell_dof_slots
    local_dofs_by_sub = []
    for s in range(sub_grid.n_cells):
        own_faces = faces_by_sub[s]
        own_faces = own_faces[own_faces >= 0]
        local = np.concatenate([interior_by_sub[s], face_dofs[own_faces].ravel()])
        local_dofs_by_sub.append(np.sort(local))

    partition = DofPartition(
        interior=interior,
        interface=interface,
        dof_face=dof_face,
        n_primal_flux=n_faces,
        n_primal_pressure=sub_grid.n_cells,
    )
    return LevelDecomposition(
        level=level,
        grid=grid,
        sub_grid=sub_grid,
        ratio=ratio,
        faces=faces,
        face_dofs=face_dofs,
        cells_by_sub=cells_by_sub,
        interior_by_sub=interior_by_sub,
        faces_by_sub=faces_by_sub,
        local_dofs_by_sub=local_dofs_by_sub,
        partition=partition,
    )


def build_hierarchy(mesh: QuadMesh, config: HierarchyConfig) -> list[LevelDecomposition]:
    """Decompositions for levels 1..L-1; each sub grid is the next level's grid."""
    total = config.ratio ** (config.levels - 1)
    if mesh.nx % total or mesh.ny % total:
        raise HierarchyError(
            f"mesh {mesh.nx}x{mesh.ny} is not divisible by ratio^{config.levels - 1} = {total}"
        )
    decomps = []
    grid = mesh
    for level in range(1, config.levels):
        decomp = build_level_decomposition(grid, config.ratio, level)
        decomps.append(decomp)
        grid = decomp.sub_grid
    return decomps


def classify_dofs(decomp: LevelDecomposition) -> DofPartition:
    return decomp.partition


def face_average_functional(face: Face) -> FaceFunctional:
    if len(face.dofs) == 0:
        raise HierarchyError("face has no dofs")
    return FaceFunctional(face.dofs)


@dataclass
class AveragingWeights:
    """Interface weights per subdomain; interior dofs weigh 1.

    ``side_lo``/``side_hi`` hold, for every flux dof of the level, the weight
    of the lower/higher subdomain copy (1 and 0 on interior dofs so the sum
    is a partition of unity everywhere by construction).
    """

    gamma: float
    side_lo: np.ndarray
    side_hi: np.ndarray
    per_sub: list[np.ndarray]


def compute_weights(
    decomp: LevelDecomposition, coeff, gamma: float
) -> AveragingWeights:
    """Averaging weights k_i^-gamma / (k_i^-gamma + k_j^-gamma) per interface dof.

    ``coeff`` is either a :class:`CoefficientField` (finest level) or a
    per-element value array for the decomposed grid.  With ``gamma != 0``
    the element values adjacent to each face must be well defined and
    constant along it; mixed or varying materials are rejected because the
    subdomain weight would be ambiguous.
    """
    if isinstance(coeff, CoefficientField):
        values = coeff.values
    else:
        values = np.asarray(coeff, dtype=float)
    if values.shape != (decomp.grid.n_cells,):
        raise WeightsError("element values do not match the level grid")

    n_flux = decomp.grid.n_flux
    side_lo = np.ones(n_flux)
    side_hi = np.zeros(n_flux)
    interface = decomp.partition.interface
    if len(interface):
        if gamma == 0:
            side_lo[interface] = 0.5
            side_hi[interface] = 0.5
        else:
            sides = decomp.grid.edge_sides[interface]
            k_lo = values[sides[:, 0]]
            k_hi = values[sides[:, 1]]
            if not (np.all(np.isfinite(k_lo)) and np.all(np.isfinite(k_hi))):
                raise WeightsError(
                    "coefficient varies inside an element adjacent to an interface; "
                    "rho-scaling weights are ambiguous"
                )
            lo = np.empty(n_flux)
            hi = np.empty(n_flux)
            lo[interface] = k_lo
            hi[interface] = k_hi
            for face in decomp.faces:
                for vals in (lo[face.dofs], hi[face.dofs]):
                    if np.ptp(vals) > 1e-12 * max(1.0, np.abs(vals).max()):
                        raise WeightsError(
                            "coefficient varies along a face; rho-scaling weights "
                            "are ambiguous"
                        )
            a = k_lo ** (-gamma)
            b = k_hi ** (-gamma)
            e_lo = a / (a + b)
            side_lo[interface] = e_lo
            side_hi[interface] = 1.0 - e_lo  # exact partition of unity

    per_sub = []
    for s, local in enumerate(decomp.local_dofs_by_sub):
        w = np.ones(len(local))
        for f in decomp.faces_by_sub[s]:
            if f < 0:
                continue
            face = decomp.faces[f]
            pos = np.searchsorted(local, face.dofs)
            w[pos] = side_lo[face.dofs] if s == face.sub_lo else side_hi[face.dofs]
        per_sub.append(w)
    return AveragingWeights(gamma=float(gamma), side_lo=side_lo, side_hi=side_hi, per_sub=per_sub)


def coarsen_element_values(decomp: LevelDecomposition, values: np.ndarray) -> np.ndarray:
    """Per-subdomain representative values; NaN where children disagree."""
    values = np.asarray(values, dtype=float)
    out = np.empty(decomp.n_sub)
    for s, cells in enumerate(decomp.cells_by_sub):
        v = values[cells]
        first = v.flat[0]
        if np.all(v == first):
            out[s] = first
        else:
            out[s] = np.nan
    return out


def apply_average(
    decomp: LevelDecomposition, weights: AveragingWeights, per_sub_vectors
) -> np.ndarray:
    """Weighted average of per-subdomain copies into one continuous vector."""
    out = np.zeros(decomp.grid.n_flux)
    for s, local in enumerate(decomp.local_dofs_by_sub):
        np.add.at(out, local, weights.per_sub[s] * per_sub_vectors[s])
    return out


def expand_to_previous_level(decomp: LevelDecomposition, dofs) -> np.ndarray:
    """Constituent previous-level dofs of the given coarse flux dofs."""
    return np.unique(decomp.face_dofs[np.asarray(dofs)])


def hierarchy_summary(decomps: list[LevelDecomposition]) -> str:
    lines = []
    for d in decomps:
        lines.append(
            "level {lvl}: grid {gx}x{gy}, subdomains {sx}x{sy} ({ns}), faces {nf}, "
            "flux dofs {nu} (interface {ng}), pressure dofs {np_}".format(
                lvl=d.level,
                gx=d.grid.nx,
                gy=d.grid.ny,
                sx=d.sub_grid.nx,
                sy=d.sub_grid.ny,
                ns=d.n_sub,
                nf=d.n_faces,
                nu=d.grid.n_flux,
                ng=len(d.partition.interface),
                np_=d.grid.n_pressure,
            )
        )
    return "\n".join(lines)
