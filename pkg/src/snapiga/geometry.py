"""Reference geometry of stacked bistable cells.

Cell layout
-----------
Each cell (row) is built from 18 tensor-product patches, all sharing the same
clamped knot vectors. Cell-local coordinates have their origin at the
bottom-left corner of the cell; ``s = stem_ratio * t`` is the stem width and
``c0, c1 = L/2 -+ s/2``::

    name          x-range              y-range                         rigid
    bar_0..bar_4  [0,2t] [2t,c0] [c0,c1] [c1,L-2t] [L-2t,L]
                                       [0, t]                          yes
    wall_l_low    [0, 2t]              [t, yr - tb/2]                  yes
    wall_l_root   [0, 2t]              [yr - tb/2, yr + tb/2]          no
    wall_l_up     [0, 2t]              [yr + tb/2, yr + tb/2 + t]      yes
    wall_r_*      [L-2t, L]            (mirror of the left wall)
    beam_0..4     [2t, c0] (two halves), [c0, c1], [c1, L-2t] (two halves)
                                       centerline yr + w0(x - 2t)      no
    stem_0/1      [c0, c1]             beam top -> t + h3 (two halves)  no

with ``yr = t + h1`` the beam root centerline. The cosine beam of span
``L - 4t`` is clamped into the root blocks of the side walls; its crown
carries a stem up to the bar of the next cell (or the loaded top edge of the
structure). ``h3`` is the clear height between bars, so one cell is
``t + h3`` tall. The ``h1``/``h3`` reading lives in :func:`_cell_frame` only.

Boundary conditions: bottom bar edge fixed, outer side edges guided
(horizontal fixed), top edge of the uppermost stem prescribed to
``(0, -d)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .splines import (
    KnotVector,
    basis_matrix,
    greville_abscissae,
    interpolation_matrix,
    open_uniform,
)

__all__ = [
    "GeometryError",
    "DesignParams",
    "Patch",
    "Interface",
    "PatchSet",
    "DirichletEdge",
    "DofMap",
    "beam_centerline",
    "build_unit_cell",
    "assemble_structure",
    "build_dofmap",
    "local_to_global",
    "global_to_local",
    "geometry_jacobian",
    "build_strip",
    "edge_indices",
    "DEFAULT_RESOLUTION",
    "DEFAULT_DEGREE",
]

DEFAULT_RESOLUTION = 7
DEFAULT_DEGREE = 3
STEM_RATIO = 1.0
SIDES = ("u0", "u1", "v0", "v1")

CELL_PATCHES = (
    "bar_0", "bar_1", "bar_2", "bar_3", "bar_4",
    "wall_l_low", "wall_l_root", "wall_l_up",
    "wall_r_low", "wall_r_root", "wall_r_up",
    "beam_0", "beam_1", "beam_2", "beam_3", "beam_4",
    "stem_0", "stem_1",
)
RIGID_PATCHES = frozenset(
    ("bar_0", "bar_1", "bar_2", "bar_3", "bar_4",
     "wall_l_low", "wall_l_up", "wall_r_low", "wall_r_up")
)
CELL_INTERFACES = (
    ("bar_0", "u1", "bar_1", "u0"),
    ("bar_1", "u1", "bar_2", "u0"),
    ("bar_2", "u1", "bar_3", "u0"),
    ("bar_3", "u1", "bar_4", "u0"),
    ("bar_0", "v1", "wall_l_low", "v0"),
    ("bar_4", "v1", "wall_r_low", "v0"),
    ("wall_l_low", "v1", "wall_l_root", "v0"),
    ("wall_l_root", "v1", "wall_l_up", "v0"),
    ("wall_r_low", "v1", "wall_r_root", "v0"),
    ("wall_r_root", "v1", "wall_r_up", "v0"),
    ("wall_l_root", "u1", "beam_0", "u0"),
    ("beam_0", "u1", "beam_1", "u0"),
    ("beam_1", "u1", "beam_2", "u0"),
    ("beam_2", "u1", "beam_3", "u0"),
    ("beam_3", "u1", "beam_4", "u0"),
    ("beam_4", "u1", "wall_r_root", "u0"),
    ("beam_2", "v1", "stem_0", "v0"),
    ("stem_0", "v1", "stem_1", "v0"),
)
LEFT_EDGES = ("bar_0", "wall_l_low", "wall_l_root", "wall_l_up")
RIGHT_EDGES = ("bar_4", "wall_r_low", "wall_r_root", "wall_r_up")


class GeometryError(ValueError):
    """Invalid design parameters or degenerate constructed geometry."""


# ---------------------------------------------------------------------------
# design parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DesignParams:
    """Geometric design parameters (cm) of a single-column structure plus E (MPa).

    ``h1``, ``h2``, ``h3`` hold one value in identical-cell mode and one value
    per row otherwise; ``tb`` always holds one beam thickness per row, bottom
    row first.
    """

    L: float
    t: float
    h1: tuple
    h2: tuple
    h3: tuple
    tb: tuple
    E: float = 70.0
    mode: str = "identical"
    optimize_E: bool = False
    bounds: tuple | None = None

    def __post_init__(self):
        for name in ("h1", "h2", "h3", "tb"):
            val = getattr(self, name)
            object.__setattr__(self, name, tuple(np.atleast_1d(val).tolist()))
        if self.mode not in ("identical", "non-identical"):
            raise GeometryError(f"unknown mode {self.mode!r}")
        n = len(self.tb)
        want = 1 if self.mode == "identical" else n
        for name in ("h1", "h2", "h3"):
            if len(getattr(self, name)) != want:
                raise GeometryError(
                    f"{name} needs {want} value(s) in {self.mode} mode, "
                    f"got {len(getattr(self, name))}")
        if self.bounds is not None:
            b = np.asarray(self.bounds, dtype=float)
            if b.shape != (self.n_params, 2):
                raise GeometryError(f"bounds must have shape ({self.n_params}, 2)")
            if np.any(b[:, 0] > b[:, 1]):
                raise GeometryError("bounds have lower > upper")
            object.__setattr__(self, "bounds", tuple(map(tuple, b.tolist())))

    @property
    def n_rows(self) -> int:
        return len(self.tb)

    @property
    def n_geometric(self) -> int:
        n = self.n_rows
        return 5 + n if self.mode == "identical" else 2 + 4 * n

    @property
    def n_params(self) -> int:
        return self.n_geometric + int(self.optimize_E)

    def names(self) -> list[str]:
        n = self.n_rows
        if self.mode == "identical":
            out = ["L", "t", "h1", "h2", "h3"] + [f"t{i + 1}" for i in range(n)]
        else:
            out = ["L", "t"]
            for key in ("h1", "h2", "h3"):
                out += [f"{key}_{i + 1}" for i in range(n)]
            out += [f"t{i + 1}" for i in range(n)]
        if self.optimize_E:
            out.append("E")
        return out

    def to_vector(self) -> np.ndarray:
        v = [self.L, self.t, *self.h1, *self.h2, *self.h3, *self.tb]
        if self.optimize_E:
            v.append(self.E)
        return np.asarray(v, dtype=float)

    def with_vector(self, theta) -> "DesignParams":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise GeometryError(f"expected {self.n_params} parameters, got {theta.shape}")
        k = 1 if self.mode == "identical" else self.n_rows
        n = self.n_rows
        pos = 2
        h1 = theta[pos:pos + k]; pos += k
        h2 = theta[pos:pos + k]; pos += k
        h3 = theta[pos:pos + k]; pos += k
        tb = theta[pos:pos + n]; pos += n
        E = theta[pos] if self.optimize_E else self.E
        return replace(self, L=float(theta[0]), t=float(theta[1]), h1=h1, h2=h2,
                       h3=h3, tb=tb, E=float(E))

    def bounds_array(self) -> np.ndarray:
        if self.bounds is None:
            return np.column_stack([np.full(self.n_params, -np.inf),
                                    np.full(self.n_params, np.inf)])
        return np.asarray(self.bounds, dtype=float)

    def row_params(self, theta=None):
        """Per-row ``(h1, h2, h3, tb)`` tuples (array entries may be complex)."""
        if theta is None:
            theta = self.to_vector()
        return _rows_from_vector(theta, self.mode, self.n_rows)

    def validate(self, stem_ratio: float = STEM_RATIO):
        """Raise :class:`GeometryError` naming the first violated constraint."""
        v = self.to_vector()
        if not np.all(np.isfinite(v)):
            raise GeometryError("design parameters must be finite")
        if self.E <= 0:
            raise GeometryError("E > 0 violated")
        for row, (h1, h2, h3, tb) in enumerate(self.row_params()):
            _check_cell(self.L, self.t, h1, h2, h3, tb, stem_ratio, strict=True, row=row)
        if self.bounds is not None:
            b = self.bounds_array()
            bad = np.flatnonzero((v < b[:, 0]) | (v > b[:, 1]))
            if bad.size:
                name = self.names()[bad[0]]
                raise GeometryError(f"parameter {name}={v[bad[0]]} outside bounds {tuple(b[bad[0]])}")


def _rows_from_vector(theta, mode, n):
    L, t = theta[0], theta[1]
    k = 1 if mode == "identical" else n
    h1 = theta[2:2 + k]
    h2 = theta[2 + k:2 + 2 * k]
    h3 = theta[2 + 2 * k:2 + 3 * k]
    tb = theta[2 + 3 * k:2 + 3 * k + n]
    rows = []
    for i in range(n):
        j = 0 if mode == "identical" else i
        rows.append((h1[j], h2[j], h3[j], tb[i]))
    return rows


def _check_cell(L, t, h1, h2, h3, tb, stem_ratio, strict=True, row=0):
    L, t, h1, h2, h3, tb = (float(np.real(x)) for x in (L, t, h1, h2, h3, tb))
    where = f" (row {row})"
    for name, val in (("L", L), ("t", t), ("h1", h1), ("h2", h2), ("h3", h3), ("t_beam", tb)):
        if not val > 0:
            raise GeometryError(f"{name} > 0 violated{where}")
    if not tb < h1:
        raise GeometryError(f"t_beam < h1 violated{where}")
    if strict and not h2 > h1:
        raise GeometryError(f"h2 > h1 violated{where}")
    if not h2 >= h1:
        raise GeometryError(f"h2 >= h1 violated{where}")
    if not L > 4 * t:
        raise GeometryError(f"L > 4t violated{where}")
    span = L - 4 * t
    if not span > stem_ratio * t:
        raise GeometryError(f"L - 4t > stem width violated{where}")
    if not h3 > h2 + 0.5 * tb:
        raise GeometryError(f"h3 > h2 + t_beam/2 violated: beam crown exceeds the cell interior{where}")
    if not h3 > h1 + 0.5 * tb + t:
        raise GeometryError(f"h3 > h1 + t_beam/2 + t violated: side wall exceeds the cell interior{where}")
    amp = h2 - h1
    kappa = 0.5 * amp * (2 * np.pi / span) ** 2
    if kappa > 0 and not tb < 1.0 / kappa:
        raise GeometryError(f"t_beam < 2 * min curvature radius violated: beam offset self-intersects{where}")


# ---------------------------------------------------------------------------
# patch containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Patch:
    name: str
    control: np.ndarray  # (nu, nv, 2)
    weights: np.ndarray  # (nu, nv)
    rigid: bool = False
    row: int = -1


@dataclass(frozen=True)
class Interface:
    """Edge ``side_a`` of patch ``a`` coincides with edge ``side_b`` of patch ``b``."""

    a: int
    side_a: str
    b: int
    side_b: str
    reversed: bool = False


@dataclass(frozen=True)
class DirichletEdge:
    """Component ``comp`` of all points on an edge equals ``coef * d``."""

    patch: int
    side: str
    comp: int
    coef: float = 0.0


@dataclass(frozen=True)
class PatchSet:
    patches: tuple
    interfaces: tuple
    kv_u: KnotVector
    kv_v: KnotVector
    dirichlet: tuple = ()
    n_rows: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_patches(self) -> int:
        return len(self.patches)

    @property
    def shape(self):
        return (self.kv_u.n_basis, self.kv_v.n_basis)

    @property
    def n_local_points(self) -> int:
        nu, nv = self.shape
        return self.n_patches * nu * nv

    def control_array(self) -> np.ndarray:
        """All control points stacked as ``(P, nu, nv, 2)``."""
        return np.stack([p.control for p in self.patches])

    def rigid_mask(self) -> np.ndarray:
        return np.array([p.rigid for p in self.patches], dtype=bool)

    def index(self, name: str, row: int | None = None) -> int:
        for k, p in enumerate(self.patches):
            if p.name == name and (row is None or p.row == row):
                return k
        raise KeyError(name if row is None else f"{name} (row {row})")

    def with_rigid(self, rigid: bool) -> "PatchSet":
        """Copy with every patch's rigid flag forced to ``rigid`` (False: all deformable)."""
        patches = tuple(replace(p, rigid=rigid and p.rigid) for p in self.patches)
        return replace(self, patches=patches)

    def with_control(self, control) -> "PatchSet":
        control = np.asarray(control)
        patches = tuple(replace(p, control=control[k]) for k, p in enumerate(self.patches))
        return replace(self, patches=patches)


def edge_indices(side: str, nu: int, nv: int) -> np.ndarray:
    """Flat point indices (``i * nv + j``) along a patch edge, in increasing parameter order."""
    if side == "u0":
        return np.arange(nv)
    if side == "u1":
        return (nu - 1) * nv + np.arange(nv)
    if side == "v0":
        return np.arange(nu) * nv
    if side == "v1":
        return np.arange(nu) * nv + nv - 1
    raise GeometryError(f"unknown side {side!r}")


# ---------------------------------------------------------------------------
# cell construction
# ---------------------------------------------------------------------------


def beam_centerline(h1, h2, L, t, x):
    """Initial centerline rise ``w0(x) = (h2-h1)/2 (1 - cos(2 pi x / (L-4t)))``."""
    span = L - 4 * t
    x_re = np.real(x)
    if np.any(x_re < -1e-12 * abs(np.real(span))) or np.any(x_re > np.real(span) * (1 + 1e-12)):
        raise GeometryError(f"x outside the beam span [0, {np.real(span)}]")
    return 0.5 * (h2 - h1) * (1.0 - np.cos(2.0 * np.pi * x / span))


def _centerline_slope(h1, h2, L, t, x):
    span = L - 4 * t
    return 0.5 * (h2 - h1) * (2.0 * np.pi / span) * np.sin(2.0 * np.pi * x / span)


def _block(x0, x1, y0, y1, gu, gv):
    """Control net of an axis-aligned rectangle (exact bilinear map)."""
    X = (1 - gu)[:, None] * x0 + gu[:, None] * x1 + 0 * gv[None, :]
    Y = (1 - gv)[None, :] * y0 + gv[None, :] * y1 + 0 * gu[:, None]
    return np.stack([X, Y], axis=-1)


def _ruled(bottom, top, gv):
    """Net blending a bottom row of points into a top row (ruled surface)."""
    return (1 - gv)[None, :, None] * bottom[:, None, :] + gv[None, :, None] * top[:, None, :]


def _cell_frame(L, t, h1, h2, h3, tb, stem_ratio):
    """Characteristic cell coordinates (cell-local, origin bottom-left)."""
    s = stem_ratio * t
    yr = t + h1
    return dict(
        s=s, yr=yr, c0=0.5 * L - 0.5 * s, c1=0.5 * L + 0.5 * s,
        x_root_l=2 * t, x_root_r=L - 2 * t,
        y_crown_top=yr + (h2 - h1) + 0.5 * tb, y_top=t + h3,
    )


def _beam_net(xa, xb, L, t, h1, h2, tb, yr, gu, gv, Binv):
    """Beam patch: Greville interpolation of the centerline, offset along normals."""
    X = (1 - gu) * xa + gu * xb
    xr = X - 2 * t
    yc = yr + beam_centerline(h1, h2, L, t, xr)
    Y = Binv @ yc
    Y[0], Y[-1] = yc[0], yc[-1]
    slope = _centerline_slope(h1, h2, L, t, xr)
    norm = np.sqrt(1.0 + slope * slope)
    nx, ny = -slope / norm, 1.0 / norm
    off = (gv - 0.5) * tb
    net_x = X[:, None] + off[None, :] * nx[:, None]
    net_y = Y[:, None] + off[None, :] * ny[:, None]
    return np.stack([net_x, net_y], axis=-1)


def _cell_nets(L, t, h1, h2, h3, tb, y0, kv_u, kv_v, stem_ratio=STEM_RATIO):
    """Control nets of the 18 cell patches, keyed by name (dtype follows inputs)."""
    gu, gv = greville_abscissae(kv_u), greville_abscissae(kv_v)
    Binv = np.linalg.inv(interpolation_matrix(kv_u))
    f = _cell_frame(L, t, h1, h2, h3, tb, stem_ratio)
    c0, c1, yr = f["c0"], f["c1"], f["yr"]
    xl, xr_ = f["x_root_l"], f["x_root_r"]
    bar_x = (0.0 * L, xl, c0, c1, xr_, L)
    nets = {}
    for k in range(5):
        nets[f"bar_{k}"] = _block(bar_x[k], bar_x[k + 1], y0, y0 + t, gu, gv)
    lo, hi = yr - 0.5 * tb, yr + 0.5 * tb
    for side, (xa, xb) in (("l", (0.0 * L, xl)), ("r", (xr_, L))):
        nets[f"wall_{side}_low"] = _block(xa, xb, y0 + t, y0 + lo, gu, gv)
        nets[f"wall_{side}_root"] = _block(xa, xb, y0 + lo, y0 + hi, gu, gv)
        nets[f"wall_{side}_up"] = _block(xa, xb, y0 + hi, y0 + hi + t, gu, gv)
    beam_x = (xl, 0.5 * (xl + c0), c0, c1, 0.5 * (c1 + xr_), xr_)
    for k in range(5):
        nets[f"beam_{k}"] = _beam_net(beam_x[k], beam_x[k + 1], L, t, h1, h2, tb,
                                      y0 + yr, gu, gv, Binv)
    bottom = nets["beam_2"][:, -1, :]
    y_top = y0 + f["y_top"]
    y_mid = 0.5 * (y0 + f["y_crown_top"] + y_top)
    xs = (1 - gu) * c0 + gu * c1
    mid = np.stack([xs, y_mid + 0 * xs], axis=-1)
    top = np.stack([xs, y_top + 0 * xs], axis=-1)
    nets["stem_0"] = _ruled(bottom, mid, gv)
    nets["stem_1"] = _ruled(mid, top, gv)
    return nets


def _default_knots(resolution, degree):
    kv = open_uniform(resolution, degree)
    return kv, kv


def build_unit_cell(cell_params, L, t, resolution=DEFAULT_RESOLUTION, degree=DEFAULT_DEGREE,
                    stem_ratio=STEM_RATIO, y0=0.0, row=0, rigid=True) -> PatchSet:
    """PatchSet of one cell; ``cell_params = (h1, h2, h3, t_beam)``.

    Boundary edges are those of a stand-alone cell (fixed bar bottom, guided
    sides, prescribed stem top).
    """
    h1, h2, h3, tb = cell_params
    design = DesignParams(L=L, t=t, h1=h1, h2=h2, h3=h3, tb=(tb,))
    _check_cell(L, t, h1, h2, h3, tb, stem_ratio, strict=False)
    return _assemble(design, design.to_vector(), resolution, degree, stem_ratio, rigid, y_base=y0,
                     row_offset=row)


def _structure_nets(theta, design, kv_u, kv_v, stem_ratio, y_base=0.0):
    rows = _rows_from_vector(theta, design.mode, design.n_rows)
    L, t = theta[0], theta[1]
    y0 = y_base + 0.0 * L
    out = []
    for (h1, h2, h3, tb) in rows:
        out.append(_cell_nets(L, t, h1, h2, h3, tb, y0, kv_u, kv_v, stem_ratio))
        y0 = y0 + t + h3
    return out


def _topology(n_rows):
    """Patch names/rows, interfaces, and Dirichlet edges for ``n_rows`` stacked cells."""
    names, rows = [], []
    for r in range(n_rows):
        for name in CELL_PATCHES:
            names.append(name)
            rows.append(r)
    idx = {(n, r): k for k, (n, r) in enumerate(zip(names, rows))}
    interfaces = []
    for r in range(n_rows):
        for a, sa, b, sb in CELL_INTERFACES:
            interfaces.append(Interface(idx[a, r], sa, idx[b, r], sb))
        if r + 1 < n_rows:
            interfaces.append(Interface(idx["stem_1", r], "v1", idx["bar_2", r + 1], "v0"))
    dirichlet = []
    for k in range(5):
        for comp in (0, 1):
            dirichlet.append(DirichletEdge(idx[f"bar_{k}", 0], "v0", comp, 0.0))
    for r in range(n_rows):
        for name in LEFT_EDGES:
            dirichlet.append(DirichletEdge(idx[name, r], "u0", 0, 0.0))
        for name in RIGHT_EDGES:
            dirichlet.append(DirichletEdge(idx[name, r], "u1", 0, 0.0))
    top = idx["stem_1", n_rows - 1]
    dirichlet.append(DirichletEdge(top, "v1", 0, 0.0))
    dirichlet.append(DirichletEdge(top, "v1", 1, -1.0))
    return names, rows, interfaces, dirichlet


def _incidence_groups(n_patches, nu, nv, interfaces):
    """Union-find over local points joined by interfaces; returns root per point."""
    parent = np.arange(n_patches * nu * nv)

    def find(i):
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    def union(i, j):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)

    npp = nu * nv
    for itf in interfaces:
        ea = itf.a * npp + edge_indices(itf.side_a, nu, nv)
        eb = itf.b * npp + edge_indices(itf.side_b, nu, nv)
        if itf.reversed:
            eb = eb[::-1]
        for i, j in zip(ea, eb):
            union(int(i), int(j))
    return np.array([find(i) for i in range(parent.size)]), union, find


def _stitch(control, groups):
    """Overwrite every point with its incidence-group representative (bitwise agreement)."""
    flat = control.reshape(-1, 2)
    return flat[groups].reshape(control.shape)


def _assemble(design, theta, resolution, degree, stem_ratio, rigid=True, y_base=0.0, row_offset=0,
              check_fit=True):
    kv_u, kv_v = _default_knots(resolution, degree)
    nets = _structure_nets(theta, design, kv_u, kv_v, stem_ratio, y_base)
    names, rows, interfaces, dirichlet = _topology(design.n_rows)
    control = np.stack([nets[r][n] for n, r in zip(names, rows)])
    nu, nv = kv_u.n_basis, kv_v.n_basis
    groups, _, _ = _incidence_groups(len(names), nu, nv, interfaces)
    if check_fit:
        flat = np.real(control).reshape(-1, 2)
        gap = np.abs(flat - flat[groups]).max()
        if gap > 1e-8 * float(np.real(theta[0])):
            raise GeometryError(f"patch edges do not meet (gap {gap:.3e} cm)")
    control = _stitch(control, groups)
    patches = tuple(
        Patch(name=n, control=control[k], weights=np.ones((nu, nv)),
              rigid=rigid and n in RIGID_PATCHES, row=r + row_offset)
        for k, (n, r) in enumerate(zip(names, rows))
    )
    meta = dict(stem_ratio=stem_ratio, resolution=resolution, degree=degree)
    return PatchSet(patches=patches, interfaces=tuple(interfaces), kv_u=kv_u, kv_v=kv_v,
                    dirichlet=tuple(dirichlet), n_rows=design.n_rows, meta=meta)


def assemble_structure(design: DesignParams, resolution=DEFAULT_RESOLUTION, degree=DEFAULT_DEGREE,
                       rigid=True, stem_ratio=STEM_RATIO):
    """Build the stacked structure and its constraint bookkeeping.

    Returns ``(PatchSet, DofMap)``. With ``rigid=False`` every patch is
    deformable (reference runs for the rigid-patch error metric).
    """
    design.validate(stem_ratio)
    ps = _assemble(design, design.to_vector(), resolution, degree, stem_ratio, rigid)
    return ps, build_dofmap(ps)


def structure_control(design: DesignParams, theta=None, resolution=DEFAULT_RESOLUTION,
                      degree=DEFAULT_DEGREE, stem_ratio=STEM_RATIO) -> np.ndarray:
    """Stitched control points ``(P, nu, nv, 2)`` for a parameter vector (complex allowed)."""
    theta = design.to_vector() if theta is None else theta
    return _assemble(design, np.asarray(theta), resolution, degree, stem_ratio,
                     check_fit=False).control_array()


def geometry_jacobian(design: DesignParams, resolution=DEFAULT_RESOLUTION, degree=DEFAULT_DEGREE,
                      stem_ratio=STEM_RATIO, step=1e-30):
    """Sparse ``d(control coordinates)/d(theta)`` of shape ``(2 * n_local_points, n_params)``.

    The construction is analytic in the parameters, so each column is taken
    with a complex-step perturbation (no truncation error). Rows follow
    ``control_array().ravel()`` ordering; the E column (if any) is zero.
    """
    design.validate(stem_ratio)
    theta = design.to_vector()
    n_out = 2 * design.n_rows * len(CELL_PATCHES) * resolution * resolution
    cols = []
    for k in range(design.n_params):
        if design.optimize_E and k == design.n_params - 1:
            cols.append(sp.csc_matrix((n_out, 1)))
            continue
        th = theta.astype(complex)
        th[k] += 1j * step
        ctrl = structure_control(design, th, resolution, degree, stem_ratio)
        d = np.imag(ctrl).ravel() / step
        d[np.abs(d) < 1e-14] = 0.0
        cols.append(sp.csc_matrix(d[:, None]))
    return sp.hstack(cols, format="csr")


# ---------------------------------------------------------------------------
# constraint bookkeeping
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DofMap:
    """Map between local control-point displacements and global unknowns.

    Every local point belongs to one group whose members share a displacement
    (incidence groups, and whole rigidity groups). A group component is either
    a global dof or prescribed as ``coef * d``.
    """

    point_group: np.ndarray   # (n_local,) group id of each local point
    group_rep: np.ndarray     # (n_groups,) representative local point
    group_rigid: np.ndarray   # (n_groups,) bool
    group_dof: np.ndarray     # (n_groups, 2) global dof or -1
    group_coef: np.ndarray    # (n_groups, 2) Dirichlet coefficient (nan: free)
    n_dofs: int
    local_dof: np.ndarray     # (2 n_local,) global dof per local dof, -1 if prescribed
    local_coef: np.ndarray    # (2 n_local,) Dirichlet coefficient (0 where free)
    rep_local_dof: np.ndarray  # (n_dofs,) local dof index holding each global dof

    @property
    def n_groups(self) -> int:
        return self.group_rep.size

    @property
    def n_local(self) -> int:
        return self.point_group.size

    @property
    def n_global_points(self) -> int:
        """Number of constraint groups that carry at least one global dof."""
        return int(np.count_nonzero((self.group_dof >= 0).any(axis=1)))


def build_dofmap(ps: PatchSet) -> DofMap:
    nu, nv = ps.shape
    npp = nu * nv
    roots, union, find = _incidence_groups(ps.n_patches, nu, nv, ps.interfaces)
    for k, patch in enumerate(ps.patches):
        if patch.rigid:
            base = k * npp
            for i in range(1, npp):
                union(base, base + i)
    roots = np.array([find(i) for i in range(ps.n_local_points)])
    uniq, point_group = np.unique(roots, return_inverse=True)
    n_groups = uniq.size
    group_rep = uniq.copy()

    rigid_pts = np.repeat(ps.rigid_mask(), npp)
    group_rigid = np.zeros(n_groups, dtype=bool)
    np.logical_or.at(group_rigid, point_group, rigid_pts)

    coef = np.full((n_groups, 2), np.nan)
    for de in ps.dirichlet:
        pts = de.patch * npp + edge_indices(de.side, nu, nv)
        for g in np.unique(point_group[pts]):
            old = coef[g, de.comp]
            if not np.isnan(old) and old != de.coef:
                raise GeometryError(
                    f"conflicting Dirichlet values on group {g} (component {de.comp})")
            coef[g, de.comp] = de.coef

    group_dof = np.full((n_groups, 2), -1, dtype=np.int64)
    free = np.isnan(coef)
    group_dof[free] = np.arange(np.count_nonzero(free))
    n_dofs = int(np.count_nonzero(free))

    local_dof = group_dof[point_group].reshape(-1)
    local_coef = np.nan_to_num(coef[point_group], nan=0.0).reshape(-1)
    rep_pt = group_rep[np.nonzero(free)[0]]
    rep_comp = np.nonzero(free)[1]
    rep_local_dof = 2 * rep_pt + rep_comp
    return DofMap(point_group=point_group, group_rep=group_rep, group_rigid=group_rigid,
                  group_dof=group_dof, group_coef=coef, n_dofs=n_dofs, local_dof=local_dof,
                  local_coef=local_coef, rep_local_dof=rep_local_dof)


def global_to_local(dm: DofMap, q, d=0.0) -> np.ndarray:
    """Local displacements ``(n_local, 2)`` from global dofs and load level ``d``."""
    q = np.asarray(q)
    if q.shape != (dm.n_dofs,):
        raise GeometryError(f"global vector has shape {q.shape}, expected ({dm.n_dofs},)")
    u = d * dm.local_coef
    u = u.astype(np.result_type(q, u))
    mask = dm.local_dof >= 0
    u[mask] = q[dm.local_dof[mask]]
    return u.reshape(-1, 2)


def local_to_global(dm: DofMap, u_local) -> np.ndarray:
    """Global dofs read from the representative of each constraint group."""
    u = np.asarray(u_local)
    if u.size != 2 * dm.n_local:
        raise GeometryError(f"local array has {u.size} entries, expected {2 * dm.n_local}")
    return u.reshape(-1)[dm.rep_local_dof].copy()


def transfer_matrix(dm: DofMap) -> sp.csr_matrix:
    """Sparse ``T`` with ``u_local = T q + d * local_coef``."""
    mask = dm.local_dof >= 0
    rows = np.flatnonzero(mask)
    return sp.csr_matrix((np.ones(rows.size), (rows, dm.local_dof[mask])),
                         shape=(2 * dm.n_local, dm.n_dofs))


# ---------------------------------------------------------------------------
# generic strip (constraint demo)
# ---------------------------------------------------------------------------


def build_strip(n_patches=4, resolution=4, degree=3, rigid: Sequence[int] = (0,), fixed_top=True,
                length=1.0, height=1.0) -> PatchSet:
    """Straight strip of square patches in series (constraint bookkeeping demo)."""
    kv = open_uniform(resolution, degree)
    gu = greville_abscissae(kv)
    patches, interfaces, dirichlet = [], [], []
    for k in range(n_patches):
        net = _block(k * length, (k + 1) * length, 0.0, height, gu, gu)
        patches.append(Patch(name=f"strip_{k}", control=net, weights=np.ones(net.shape[:2]),
                             rigid=k in rigid))
        if k:
            interfaces.append(Interface(k - 1, "u1", k, "u0"))
        if fixed_top:
            dirichlet += [DirichletEdge(k, "v1", 0), DirichletEdge(k, "v1", 1)]
    nu = kv.n_basis
    groups, _, _ = _incidence_groups(n_patches, nu, nu, interfaces)
    control = _stitch(np.stack([p.control for p in patches]), groups)
    patches = [replace(p, control=control[k]) for k, p in enumerate(patches)]
    return PatchSet(patches=tuple(patches), interfaces=tuple(interfaces), kv_u=kv, kv_v=kv,
                    dirichlet=tuple(dirichlet))


def centerline_points(ps: PatchSet, row: int, n_samples: int = 41) -> np.ndarray:
    """Beam centerline of one row sampled from the patch maps (reference config)."""
    from .splines import basis_matrix as _bm

    kv_u, kv_v = ps.kv_u, ps.kv_v
    xi = np.linspace(0.0, 1.0, n_samples)
    Bu = _bm(kv_u, xi)[0]
    Bv = _bm(kv_v, [0.5])[0][0]
    out = []
    for k in range(5):
        net = ps.patches[ps.index(f"beam_{k}", row)].control
        pts = np.einsum("si,j,ijc->sc", Bu, Bv, net)
        out.append(pts if k == 0 else pts[1:])
    return np.concatenate(out)
