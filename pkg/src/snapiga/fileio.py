"""Run configuration, curve CSV files, STL export, and run manifests.

Configs are JSON documents validated strictly (unknown keys are rejected)
before any computation; the validated config, with every default filled in,
is echoed into the run manifest so a run can be repeated exactly.
"""

from __future__ import annotations

import csv
import json
import platform
import struct
import sys
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .analysis import AnalysisError, EnergyCurve
from .design import CurveTarget, ExtremaTarget, OptimizerOptions
from .geometry import (DEFAULT_DEGREE, DEFAULT_RESOLUTION, DesignParams, GeometryError,
                       assemble_structure)
from .material import NU_DEFAULT
from .solver import SolverOptions
from .splines import basis_matrix

__all__ = [
    "ConfigError",
    "CurveFormatError",
    "ExportError",
    "RunConfig",
    "load_config",
    "parse_config",
    "design_from_config",
    "write_curve",
    "read_curve",
    "structure_outline",
    "stl_triangles",
    "export_stl",
    "read_stl",
    "mesh_checks",
    "write_manifest",
    "environment_info",
]

CURVE_HEADER = ("displacement_cm", "strain_energy_J", "reaction_force_N")
EXTRUSION_CM = 1.0


class ConfigError(ValueError):
    """Unparseable or invalid run configuration."""


class CurveFormatError(ValueError):
    """Malformed curve CSV."""


class ExportError(RuntimeError):
    """Geometry that cannot be exported as a closed mesh."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


Scalars = Union[float, list[float]]


class DesignBlock(_Strict):
    mode: Literal["identical", "non-identical"] = "identical"
    n_rows: int = Field(1, ge=1)
    L: float
    t: float
    h1: Scalars
    h2: Scalars
    h3: Scalars
    tb: Scalars
    bounds: dict[str, tuple[float, float]] = Field(default_factory=dict)


class MaterialBlock(_Strict):
    E: Optional[float] = Field(70.0, gt=0)
    catalog: Optional[list[float]] = None
    nu: float = Field(NU_DEFAULT, gt=-1.0, lt=0.5)
    optimize_E: bool = False
    E_bounds: Optional[tuple[float, float]] = None

    @field_validator("catalog")
    @classmethod
    def _positive(cls, v):
        if v is not None and (not v or any(e <= 0 for e in v)):
            raise ValueError("catalog must be a non-empty list of positive moduli")
        return v


class SolverBlock(_Strict):
    resolution: int = Field(DEFAULT_RESOLUTION, ge=4)
    degree: int = Field(DEFAULT_DEGREE, ge=1)
    rtol: float = Field(1e-8, gt=0)
    atol: float = Field(1e-10, gt=0)
    max_iter: int = Field(50, ge=1)
    d_max: Optional[float] = Field(None, gt=0)
    n_samples: int = Field(41, ge=3)
    increments_per_h3: int = Field(40, ge=4)


class ExtremaBlock(_Strict):
    minima: list[float]
    barriers: list[float]
    releases: Optional[list[float]] = None
    d_max: Optional[float] = None
    n_samples: int = 41
    w_location: float = 1.0
    w_barrier: float = 1.0
    w_release: float = 1.0
    penalty: float = 10.0


class TargetBlock(_Strict):
    curve: Optional[str] = None
    extrema: Optional[ExtremaBlock] = None

    @model_validator(mode="after")
    def _one(self):
        if (self.curve is None) == (self.extrema is None):
            raise ValueError("target needs exactly one of 'curve' or 'extrema'")
        return self


class OptimizerBlock(_Strict):
    method: Literal["auto", "levenberg-marquardt", "gauss-newton", "scaled-gradient"] = "auto"
    alpha: float = Field(0.05, gt=0)
    alpha_max: float = Field(0.2, gt=0)
    max_iter: int = Field(300, ge=0)
    loss_tol: float = Field(0.01, gt=0)


class RunConfig(_Strict):
    design: DesignBlock
    material: MaterialBlock = Field(default_factory=MaterialBlock)
    solver: SolverBlock = Field(default_factory=SolverBlock)
    target: Optional[TargetBlock] = None
    optimizer: OptimizerBlock = Field(default_factory=OptimizerBlock)
    output: Optional[str] = None

    def echo(self) -> dict:
        """Fully populated config as plain JSON data."""
        return self.model_dump(mode="json")

    def solver_options(self) -> SolverOptions:
        return SolverOptions(rtol=self.solver.rtol, atol=self.solver.atol, max_iter=self.solver.max_iter)

    def optimizer_options(self) -> OptimizerOptions:
        o = self.optimizer
        return OptimizerOptions(alpha=o.alpha, alpha_max=o.alpha_max, max_iter=o.max_iter,
                                loss_tol=o.loss_tol, method=o.method, resolution=self.solver.resolution,
                                degree=self.solver.degree, increments_per_h3=self.solver.increments_per_h3,
                                nu=self.material.nu, solver=self.solver_options())

    def samples(self, design: DesignParams) -> np.ndarray:
        """Displacement samples; ``d_max`` defaults to twice the summed arch rises."""
        d_max = self.solver.d_max
        if d_max is None:
            d_max = 2.0 * sum(float(h2 - h1) for h1, h2, _, _ in design.row_params())
        return np.linspace(0.0, d_max, self.solver.n_samples)

    def build_target(self, base: Path | None = None):
        if self.target is None:
            raise ConfigError("config has no target block")
        if self.target.curve is not None:
            path = Path(self.target.curve)
            if base is not None and not path.is_absolute():
                path = base / path
            curve = read_curve(path)
            return CurveTarget(curve.d, curve.energy)
        return ExtremaTarget(**self.target.extrema.model_dump())


def _per_row(val, n, name, mode):
    vals = list(np.atleast_1d(val).astype(float))
    want = 1 if (mode == "identical" and name != "tb") else n
    if len(vals) == 1 and want > 1:
        vals = vals * want
    if len(vals) != want:
        raise ConfigError(f"design.{name}: expected {want} value(s), got {len(vals)}")
    return tuple(vals)


def design_from_config(cfg: RunConfig, E: float | None = None) -> DesignParams:
    """Validated :class:`DesignParams` from the design and material blocks."""
    d, m = cfg.design, cfg.material
    n = d.n_rows
    kw = {k: _per_row(getattr(d, k), n, k, d.mode) for k in ("h1", "h2", "h3", "tb")}
    if E is None:
        E = m.E if m.E is not None else (m.catalog[0] if m.catalog else 70.0)
    optimize_E = bool(m.optimize_E and m.catalog is None)
    probe = DesignParams(L=d.L, t=d.t, E=E, mode=d.mode, optimize_E=optimize_E, **kw)
    names = probe.names()
    unknown = set(d.bounds) - set(names)
    if unknown:
        raise ConfigError(f"design.bounds: unknown parameter(s) {sorted(unknown)}; valid: {names}")
    bounds = None
    if d.bounds or (optimize_E and m.E_bounds is not None):
        b = np.column_stack([np.full(len(names), -np.inf), np.full(len(names), np.inf)])
        for k, (lo, hi) in d.bounds.items():
            b[names.index(k)] = (lo, hi)
        if optimize_E and m.E_bounds is not None:
            b[-1] = m.E_bounds
        _check_bound_rules(b, names, probe)
        bounds = tuple(map(tuple, b.tolist()))
    try:
        design = DesignParams(L=d.L, t=d.t, E=E, mode=d.mode, optimize_E=optimize_E, bounds=bounds, **kw)
        design.validate()
    except GeometryError as exc:
        raise ConfigError(f"design: {exc}") from exc
    return design


def _check_bound_rules(b, names, design):
    """Reject boxes that admit beams thicker than their root height.

    Only explicit finite bounds are compared; designs leaving an unbounded
    box through a cell invariant are rejected step by step by the optimizer.
    """
    if np.any(b[:, 0] > b[:, 1]):
        k = int(np.flatnonzero(b[:, 0] > b[:, 1])[0])
        raise ConfigError(f"design.bounds.{names[k]}: lower bound exceeds upper bound")
    n = design.n_rows
    ident = design.mode == "identical"
    for r in range(n):
        h1 = names.index("h1" if ident else f"h1_{r + 1}")
        tb = names.index(f"t{r + 1}")
        if np.isfinite(b[h1, 0]) and b[tb, 1] >= b[h1, 0]:
            raise ConfigError(f"design.bounds: constraint tb < h1 violated by bounds of "
                              f"{names[tb]} (upper {b[tb, 1]}) and {names[h1]} (lower {b[h1, 0]})")


def parse_config(data: dict) -> RunConfig:
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        loc = ".".join(str(p) for p in err["loc"])
        raise ConfigError(f"{loc}: {err['msg']}") from exc
    if cfg.material.optimize_E and cfg.material.catalog is not None:
        raise ConfigError("material: optimize_E and catalog are mutually exclusive")
    design_from_config(cfg)
    return cfg


def load_config(path) -> RunConfig:
    """Parse and fully validate a JSON run configuration."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return parse_config(data)


# ---------------------------------------------------------------------------
# curves


def write_curve(curve: EnergyCurve, path) -> None:
    """Comma-separated curve with a header; floats use round-trip repr."""
    cols = [curve.d, curve.energy] + ([curve.force] if curve.force is not None else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADER[:len(cols)])
        for row in zip(*cols):
            w.writerow([repr(float(v)) for v in row])


def read_curve(path) -> EnergyCurve:
    """Read a curve CSV written by :func:`write_curve` (or by hand)."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise CurveFormatError(f"{path}: {exc.strerror}") from exc
    if not rows:
        raise CurveFormatError(f"{path}: empty file")
    header = tuple(h.strip() for h in rows[0])
    if header not in (CURVE_HEADER[:2], CURVE_HEADER):
        raise CurveFormatError(f"{path}: header must be {','.join(CURVE_HEADER[:2])}"
                               f"[,{CURVE_HEADER[2]}], got {','.join(header)}")
    ncol = len(header)
    data = []
    for k, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != ncol:
            raise CurveFormatError(f"{path}: row {k}: expected {ncol} fields, got {len(row)}")
        try:
            vals = [float(c) for c in row]
        except ValueError as exc:
            raise CurveFormatError(f"{path}: row {k}: {exc}") from exc
        if not all(np.isfinite(vals)):
            raise CurveFormatError(f"{path}: row {k}: non-finite value")
        data.append(vals)
    if not data:
        raise CurveFormatError(f"{path}: no data rows")
    arr = np.array(data)
    bad = np.flatnonzero(np.diff(arr[:, 0]) <= 0)
    if bad.size:
        raise CurveFormatError(f"{path}: row {bad[0] + 3}: displacements must increase strictly")
    try:
        return EnergyCurve(arr[:, 0], arr[:, 1], arr[:, 2] if ncol == 3 else None)
    except AnalysisError as exc:
        raise CurveFormatError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# STL


def _patch_loop(patch, Bu, Bv):
    """Counter-clockwise boundary samples of one patch (no repeated corner)."""
    w = patch.weights
    num = np.einsum("si,tj,ij,ijc->stc", Bu, Bv, w, patch.control)
    den = np.einsum("si,tj,ij->st", Bu, Bv, w)
    pts = num / den[..., None]
    m = pts.shape[0] - 1
    return np.concatenate([pts[:m, 0], pts[m, :m], pts[m:0:-1, m], pts[0, m:0:-1]])


def _segments_cross(loop):
    """True if two non-adjacent edges of a closed polyline intersect."""
    a = loop
    b = np.roll(loop, -1, axis=0)
    n = len(a)

    def orient(p, q, r):
        return np.sign((q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1])
                       - (q[..., 1] - p[..., 1]) * (r[..., 0] - p[..., 0]))

    i, j = np.triu_indices(n, k=2)
    keep = ~((i == 0) & (j == n - 1))
    i, j = i[keep], j[keep]
    o1 = orient(a[i], b[i], a[j])
    o2 = orient(a[i], b[i], b[j])
    o3 = orient(a[j], b[j], a[i])
    o4 = orient(a[j], b[j], b[i])
    return bool(np.any((o1 * o2 < 0) & (o3 * o4 < 0)))


def structure_outline(design: DesignParams, resolution: int = 16, stem_ratio: float | None = None):
    """Per-patch counter-clockwise boundary loops with ``resolution`` segments per edge."""
    if resolution < 1:
        raise ExportError("resolution must be positive")
    kw = {} if stem_ratio is None else dict(stem_ratio=stem_ratio)
    ps, _ = assemble_structure(design, **kw)
    s = np.linspace(0.0, 1.0, resolution + 1)
    Bu = basis_matrix(ps.kv_u, s)[0]
    Bv = basis_matrix(ps.kv_v, s)[0]
    loops = [_patch_loop(p, Bu, Bv) for p in ps.patches]
    for p, loop in zip(ps.patches, loops):
        x, y = loop[:, 0], loop[:, 1]
        area = 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)
        if area <= 0 or _segments_cross(loop):
            raise ExportError(f"patch {p.name} (row {p.row}) has a self-intersecting outline")
    return loops


def stl_triangles(design: DesignParams, resolution: int = 16, thickness: float = EXTRUSION_CM,
                  stem_ratio: float | None = None):
    """Closed extruded mesh ``(vertices (n, 3), faces (m, 3))`` with outward winding."""
    import mapbox_earcut as earcut
    from scipy.spatial import cKDTree

    loops = structure_outline(design, resolution, stem_ratio)
    pts2 = np.concatenate(loops)
    scale = float(np.ptp(pts2, axis=0).max())
    # merge samples shared by neighbouring patches
    tree = cKDTree(pts2)
    pairs = tree.query_pairs(1e-9 * scale, output_type="ndarray")
    rep = np.arange(len(pts2))
    for i, j in sorted(map(tuple, pairs), key=lambda p: p[1]):
        ri, rj = rep[i], rep[j]
        while rep[ri] != ri:
            ri = rep[ri]
        while rep[rj] != rj:
            rj = rep[rj]
        rep[max(ri, rj)] = min(ri, rj)
    for k in range(len(rep)):
        r = k
        while rep[r] != r:
            r = rep[r]
        rep[k] = r
    uniq, inv = np.unique(rep, return_inverse=True)
    verts2 = pts2[uniq]
    tris, off = [], 0
    for loop in loops:
        n = len(loop)
        idx = earcut.triangulate_float64(loop, np.array([n], dtype=np.uint32)).reshape(-1, 3)
        if len(idx) != n - 2:
            raise ExportError("patch outline could not be triangulated")
        tris.append(inv[off + idx])
        off += n
    tri = np.concatenate(tris)
    e = tri[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    # earcut winding follows the input loop; force counter-clockwise
    p = verts2[tri]
    cross = ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
             - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0]))
    tri[cross < 0] = tri[cross < 0][:, ::-1]
    e = tri[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    key = np.sort(e, axis=1)
    _, first, counts = np.unique(key, axis=0, return_index=True, return_counts=True)
    if np.any(counts > 2):
        raise ExportError("non-manifold outline (edge shared by more than two patches)")
    boundary = e[first[counts == 1]]
    nv = len(verts2)
    verts = np.vstack([np.column_stack([verts2, np.zeros(nv)]),
                       np.column_stack([verts2, np.full(nv, thickness)])])
    bottom = tri[:, ::-1]
    top = tri + nv
    a, b = boundary[:, 0], boundary[:, 1]
    side = np.vstack([np.column_stack([a, b, b + nv]), np.column_stack([a, b + nv, a + nv])])
    faces = np.vstack([bottom, top, side]).astype(np.int64)
    return verts, faces


def _normals(verts, faces):
    p = verts[faces]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.where(norm > 0, norm, 1.0)


def export_stl(design: DesignParams, resolution: int, path, ascii: bool = False,
               thickness: float = EXTRUSION_CM, stem_ratio: float | None = None) -> dict:
    """Write the extruded structure as STL; returns mesh statistics."""
    verts, faces = stl_triangles(design, resolution, thickness, stem_ratio)
    stats = mesh_checks(verts, faces)
    if not stats["watertight"]:
        raise ExportError("extruded mesh is not watertight")
    normals = _normals(verts, faces)
    tri = verts[faces]
    if ascii:
        lines = ["solid snapiga"]
        for n, t in zip(normals, tri):
            lines.append(f"  facet normal {n[0]:.9e} {n[1]:.9e} {n[2]:.9e}")
            lines.append("    outer loop")
            for v in t:
                lines.append(f"      vertex {v[0]:.9e} {v[1]:.9e} {v[2]:.9e}")
            lines.append("    endloop")
            lines.append("  endfacet")
        lines.append("endsolid snapiga")
        Path(path).write_text("\n".join(lines) + "\n")
    else:
        rec = np.zeros(len(faces), dtype=[("n", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")])
        rec["n"] = normals
        rec["v"] = tri
        with open(path, "wb") as fh:
            fh.write(b"snapiga binary STL".ljust(80, b"\0"))
            fh.write(struct.pack("<I", len(faces)))
            fh.write(rec.tobytes())
    return stats


def read_stl(path):
    """Triangles ``(m, 3, 3)`` from a binary or ASCII STL file."""
    raw = Path(path).read_bytes()
    if raw[:5] == b"solid" and b"facet" in raw[:512]:
        vals = [list(map(float, ln.split()[1:])) for ln in raw.decode().splitlines()
                if ln.strip().startswith("vertex")]
        return np.array(vals).reshape(-1, 3, 3)
    (n,) = struct.unpack("<I", raw[80:84])
    rec = np.frombuffer(raw[84:84 + 50 * n],
                        dtype=[("n", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")])
    return rec["v"].astype(float)


def mesh_checks(verts, faces) -> dict:
    """Watertightness (each directed edge matched once by its reverse), volume, bounds."""
    e = faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    fwd = {tuple(x) for x in e.tolist()}
    watertight = len(fwd) == len(e) and all((b, a) in fwd for a, b in fwd)
    p = verts[faces]
    volume = float(np.einsum("ij,ij->i", p[:, 0], np.cross(p[:, 1], p[:, 2])).sum() / 6.0)
    lo, hi = verts.min(axis=0), verts.max(axis=0)
    return dict(n_vertices=int(len(verts)), n_triangles=int(len(faces)), watertight=bool(watertight),
                volume_cm3=volume, bbox_min=lo.tolist(), bbox_max=hi.tolist())


# ---------------------------------------------------------------------------
# manifest


def environment_info() -> dict:
    import scipy

    from . import BACKEND, __version__

    return dict(snapiga=__version__, kernel_backend=BACKEND, python=sys.version.split()[0],
                numpy=np.__version__, scipy=scipy.__version__, platform=platform.platform())


def write_manifest(path, command: str, argv, config: dict | None, timings: dict, summary: dict,
                   status: str = "ok", threads: int | None = None, seed: int | None = None) -> dict:
    """JSON manifest holding everything needed to repeat a run."""
    man = dict(command=command, argv=list(argv), status=status, threads=threads, seed=seed,
               config=config, environment=environment_info(), timings_s=timings, summary=summary)
    Path(path).write_text(json.dumps(man, indent=2, default=_jsonable) + "\n")
    return man


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")
