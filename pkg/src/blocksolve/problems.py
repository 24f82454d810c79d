"""3D Laplace test problem and block decomposition of the unknown grid.

Unknowns are the interior points of an (nx, ny, nz) grid surrounded by
Dirichlet boundary data, ordered x-fastest: index = i + nx*(j + ny*k).
Boolean masks over the grid are stored with shape (nz, ny, nx) so that
``mask.ravel()`` follows the same ordering.

A block decomposition splits the grid into disjoint owned boxes on a
(gx, gy, gz) block grid. With overlap o > 0, each block additionally solves
an extended region: the owned box dilated o times under the 7-point stencil
(never past the global boundary). Every grid point is covered by one or more
extended regions; overlapping values are later merged with equal weights
1/m over the m covering blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .errors import ConfigurationError
from .linalg import SparseMatrix

__all__ = [
    "FACES",
    "DirichletBoundary",
    "Grid3D",
    "LinearProblem",
    "BlockDecomposition",
    "build_laplace_3d",
    "decompose",
    "block_system",
]

FACES = ("x_lo", "x_hi", "y_lo", "y_hi", "z_lo", "z_hi")

FaceValue = Union[float, Callable[[int, int], float]]


class DirichletBoundary:
    """Per-face Dirichlet data.

    Each face carries either a constant or a callable (u, v) -> value over
    the in-face coordinates: (j, k) for x faces, (i, k) for y faces and
    (i, j) for z faces. Unspecified faces default to ``default``.
    """

    def __init__(self, faces: dict[str, FaceValue] | None = None, default: float = 0.0):
        faces = dict(faces or {})
        for name in faces:
            if name not in FACES:
                raise ConfigurationError(f"boundary: unknown face {name!r}")
        self._faces: dict[str, FaceValue] = {
            name: faces.get(name, float(default)) for name in FACES
        }

    @classmethod
    def constant(cls, value: float) -> "DirichletBoundary":
        return cls(default=float(value))

    @classmethod
    def zero(cls) -> "DirichletBoundary":
        return cls()

    def value(self, face: str, u: int, v: int) -> float:
        spec = self._faces[face]
        if callable(spec):
            return float(spec(u, v))
        return spec

    def face_constants(self) -> dict[str, float]:
        """Per-face constants; raises if any face holds a callable."""
        if any(callable(v) for v in self._faces.values()):
            raise ValueError("boundary with callable faces has no constant form")
        return {name: float(self._faces[name]) for name in FACES}

    def __eq__(self, other) -> bool:
        if not isinstance(other, DirichletBoundary):
            return NotImplemented
        return self._faces == other._faces

    def __repr__(self) -> str:
        return f"DirichletBoundary({self._faces!r})"


@dataclass(frozen=True)
class Grid3D:
    """Interior unknown counts per dimension plus the boundary data."""

    nx: int
    ny: int
    nz: int
    boundary: DirichletBoundary = field(default_factory=DirichletBoundary.zero)

    def __post_init__(self):
        for name in ("nx", "ny", "nz"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name}: must be at least 1")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def num_unknowns(self) -> int:
        return self.nx * self.ny * self.nz

    def index(self, i: int, j: int, k: int) -> int:
        return i + self.nx * (j + self.ny * k)


@dataclass
class LinearProblem:
    """Assembled operator A, right-hand side b and the generating grid."""

    matrix: SparseMatrix
    rhs: np.ndarray
    grid: Grid3D


def build_laplace_3d(grid: Grid3D) -> LinearProblem:
    """Assemble the 7-point 3D Laplace system with Dirichlet boundaries.

    Each unknown's row has diagonal 6 and -1 for every interior neighbor;
    boundary neighbors contribute their value to the right-hand side.
    """
    nx, ny, nz = grid.nx, grid.ny, grid.nz
    n = grid.num_unknowns
    bnd = grid.boundary

    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    rhs = np.zeros(n)

    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                p = grid.index(i, j, k)
                # neighbor offsets in ascending column order
                if k > 0:
                    rows.append(p), cols.append(p - nx * ny), vals.append(-1.0)
                else:
                    rhs[p] += bnd.value("z_lo", i, j)
                if j > 0:
                    rows.append(p), cols.append(p - nx), vals.append(-1.0)
                else:
                    rhs[p] += bnd.value("y_lo", i, k)
                if i > 0:
                    rows.append(p), cols.append(p - 1), vals.append(-1.0)
                else:
                    rhs[p] += bnd.value("x_lo", j, k)
                rows.append(p), cols.append(p), vals.append(6.0)
                if i < nx - 1:
                    rows.append(p), cols.append(p + 1), vals.append(-1.0)
                else:
                    rhs[p] += bnd.value("x_hi", j, k)
                if j < ny - 1:
                    rows.append(p), cols.append(p + nx), vals.append(-1.0)
                else:
                    rhs[p] += bnd.value("y_hi", i, k)
                if k < nz - 1:
                    rows.append(p), cols.append(p + nx * ny), vals.append(-1.0)
                else:
                    rhs[p] += bnd.value("z_hi", i, j)

    offsets = np.zeros(n + 1, dtype=np.int64)
    np.add.at(offsets, np.asarray(rows, dtype=np.int64) + 1, 1)
    np.cumsum(offsets, out=offsets)
    matrix = SparseMatrix(
        n, n, offsets, np.asarray(cols, dtype=np.int64), np.asarray(vals)
    )
    return LinearProblem(matrix, rhs, grid)


def _dilate(mask: np.ndarray, steps: int) -> np.ndarray:
    """Dilate a (nz, ny, nx) boolean mask under the 7-point stencil."""
    out = mask.copy()
    for _ in range(steps):
        grown = out.copy()
        grown[1:, :, :] |= out[:-1, :, :]
        grown[:-1, :, :] |= out[1:, :, :]
        grown[:, 1:, :] |= out[:, :-1, :]
        grown[:, :-1, :] |= out[:, 1:, :]
        grown[:, :, 1:] |= out[:, :, :-1]
        grown[:, :, :-1] |= out[:, :, 1:]
        out = grown
    return out


@dataclass(frozen=True)
class Box:
    """Half-open 3D index box [lo, hi) in (x, y, z) coordinates."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    @property
    def size(self) -> int:
        return (
            (self.hi[0] - self.lo[0])
            * (self.hi[1] - self.lo[1])
            * (self.hi[2] - self.lo[2])
        )

    @property
    def widths(self) -> tuple[int, int, int]:
        return tuple(self.hi[d] - self.lo[d] for d in range(3))

    def contains(self, i: int, j: int, k: int) -> bool:
        return all(self.lo[d] <= p < self.hi[d] for d, p in enumerate((i, j, k)))


def _split_ranges(n: int, g: int) -> list[tuple[int, int]]:
    """Split [0, n) into g nearly-equal ranges; remainder goes to the lowest blocks."""
    base, rem = divmod(n, g)
    ranges = []
    start = 0
    for b in range(g):
        width = base + (1 if b < rem else 0)
        ranges.append((start, start + width))
        start += width
    return ranges


@dataclass
class BlockDecomposition:
    """Owned boxes, extended regions and neighbor topology of a block grid.

    ``extended_indices[b]`` is the sorted array of global unknown indices in
    block b's extended region; ``cover_counts`` maps each grid point to the
    number of extended regions covering it (the merge weight is its inverse).
    """

    grid: Grid3D
    block_grid: tuple[int, int, int]
    overlap: int
    owned: list[Box]
    extended_indices: list[np.ndarray]
    neighbors: list[list[int]]
    cover_counts: np.ndarray

    @property
    def num_blocks(self) -> int:
        return len(self.owned)

    def block_coords(self, block_id: int) -> tuple[int, int, int]:
        gx, gy, gz = self.block_grid
        return (block_id % gx, (block_id // gx) % gy, block_id // (gx * gy))

    def owned_indices(self, block_id: int) -> np.ndarray:
        """Sorted global indices of the block's owned box."""
        box = self.owned[block_id]
        nx, ny = self.grid.nx, self.grid.ny
        ii = np.arange(box.lo[0], box.hi[0])
        jj = np.arange(box.lo[1], box.hi[1])
        kk = np.arange(box.lo[2], box.hi[2])
        idx = (
            ii[None, None, :]
            + nx * (jj[None, :, None] + ny * kk[:, None, None])
        )
        return idx.ravel()

    def extra_unknowns(self, block_id: int) -> int:
        """Extended-region size beyond the owned box."""
        return int(self.extended_indices[block_id].shape[0]) - self.owned[block_id].size

    def covering_blocks(self, flat_index: int) -> list[int]:
        """Blocks whose extended region covers the given grid point."""
        covering = []
        for b in range(self.num_blocks):
            ext = self.extended_indices[b]
            pos = np.searchsorted(ext, flat_index)
            if pos < ext.shape[0] and ext[pos] == flat_index:
                covering.append(b)
        return covering

    def owner_of(self, i: int, j: int, k: int) -> int:
        for b, box in enumerate(self.owned):
            if box.contains(i, j, k):
                return b
        raise ValueError(f"point ({i}, {j}, {k}) outside the grid")


def decompose(
    grid: Grid3D, block_grid: tuple[int, int, int], overlap: int = 0
) -> BlockDecomposition:
    """Split the grid into a (gx, gy, gz) block decomposition with overlap.

    Owned boxes partition the grid; each dimension is split into nearly
    equal contiguous ranges with the remainder given to the lowest-index
    blocks. The extended region is the owned box dilated ``overlap`` times
    under the stencil, which only ever grows toward neighboring blocks.
    """
    gx, gy, gz = block_grid
    nx, ny, nz = grid.nx, grid.ny, grid.nz
    for g, n, name in ((gx, nx, "gx"), (gy, ny, "gy"), (gz, nz, "gz")):
        if g < 1:
            raise ConfigurationError(f"{name}: must be at least 1")
        if g > n:
            raise ConfigurationError(
                f"{name}: {g} blocks exceed the {n} grid points of that dimension"
            )
    if overlap < 0:
        raise ConfigurationError("overlap: must be non-negative")
    ranges = {
        "x": _split_ranges(nx, gx),
        "y": _split_ranges(ny, gy),
        "z": _split_ranges(nz, gz),
    }
    for axis, g, name in (("x", gx, "gx"), ("y", gy, "gy"), ("z", gz, "gz")):
        if g > 1:
            min_width = min(hi - lo for lo, hi in ranges[axis])
            if overlap >= min_width:
                raise ConfigurationError(
                    f"overlap: {overlap} is not smaller than the narrowest "
                    f"{axis}-range width {min_width} ({name}={g})"
                )

    owned: list[Box] = []
    for bz in range(gz):
        for by in range(gy):
            for bx in range(gx):
                lo = (ranges["x"][bx][0], ranges["y"][by][0], ranges["z"][bz][0])
                hi = (ranges["x"][bx][1], ranges["y"][by][1], ranges["z"][bz][1])
                owned.append(Box(lo, hi))

    extended_indices: list[np.ndarray] = []
    extended_masks: list[np.ndarray] = []
    cover = np.zeros((nz, ny, nx), dtype=np.int64)
    for box in owned:
        mask = np.zeros((nz, ny, nx), dtype=bool)
        mask[
            box.lo[2] : box.hi[2], box.lo[1] : box.hi[1], box.lo[0] : box.hi[0]
        ] = True
        mask = _dilate(mask, overlap)
        extended_masks.append(mask)
        extended_indices.append(np.nonzero(mask.ravel())[0])
        cover += mask

    neighbors: list[list[int]] = [[] for _ in owned]
    reach = [_dilate(m, 1) for m in extended_masks]
    for a in range(len(owned)):
        for b in range(a + 1, len(owned)):
            if np.any(reach[a] & extended_masks[b]):
                neighbors[a].append(b)
                neighbors[b].append(a)

    return BlockDecomposition(
        grid=grid,
        block_grid=(gx, gy, gz),
        overlap=overlap,
        owned=owned,
        extended_indices=extended_indices,
        neighbors=neighbors,
        cover_counts=cover.ravel(),
    )


def block_system(
    problem: LinearProblem, decomp: BlockDecomposition, block_id: int
) -> tuple[SparseMatrix, list[tuple[int, int, float]]]:
    """Extract a block's local system from the global operator.

    Returns the principal submatrix of A on the block's extended region plus
    the coupling entries: every (local_row, external_global_col, coefficient)
    connecting the region to outside columns. The couplings define the
    block's halo dependency set.
    """
    if not 0 <= block_id < decomp.num_blocks:
        raise ValueError(f"block_id {block_id} out of range")
    a = problem.matrix
    ext = decomp.extended_indices[block_id]
    m = ext.shape[0]
    local_of = np.full(a.num_cols, -1, dtype=np.int64)
    local_of[ext] = np.arange(m)

    counts = a.row_offsets[ext + 1] - a.row_offsets[ext]
    total = int(counts.sum())
    # gather the global positions of all entries in the extended rows
    pos = np.repeat(a.row_offsets[ext], counts) + (
        np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    )
    local_rows = np.repeat(np.arange(m), counts)
    cols = a.col_indices[pos]
    vals = a.values[pos]
    loc_cols = local_of[cols]
    inside = loc_cols >= 0

    in_rows = local_rows[inside]
    offsets = np.zeros(m + 1, dtype=np.int64)
    np.add.at(offsets, in_rows + 1, 1)
    np.cumsum(offsets, out=offsets)
    # ext is ascending, so the local column order within each row is preserved
    a_ii = SparseMatrix(m, m, offsets, loc_cols[inside], vals[inside])

    coupling = list(
        zip(
            local_rows[~inside].tolist(),
            cols[~inside].tolist(),
            vals[~inside].tolist(),
        )
    )
    return a_ii, coupling
