"""Point cloud container, file I/O, synthetic shapes and augmentation."""

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, InvalidInputError

SHAPE_FAMILIES = ("plane-with-crease", "cube", "sphere", "cylinder-with-caps", "L-bracket", "chair-like")
ROTATION_MODES = ("none", "z-axis", "full-so3")
CLUTTER_LABEL = -1


@dataclass(frozen=True, eq=False)
class PointCloud:
    """``N x C`` point features; the first three columns are xyz.

    ``metadata`` carries per-point side information such as crease flags
    from the generator or extra PLY properties from a loaded file.
    """

    points: np.ndarray
    cloud_label: int | None = None
    point_labels: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 3:
            raise InvalidInputError(f"points must be N x C with N >= 1 and C >= 3, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidInputError("point features must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.point_labels is not None:
            labels = np.array(self.point_labels, dtype=np.int64)
            if labels.shape != (pts.shape[0],):
                raise InvalidInputError(f"point_labels length {labels.shape} != number of points {pts.shape[0]}")
            labels.setflags(write=False)
            object.__setattr__(self, "point_labels", labels)

    @property
    def n_points(self):
        return self.points.shape[0]

    @property
    def n_channels(self):
        return self.points.shape[1]

    @property
    def xyz(self):
        return self.points[:, :3]

    def subset(self, idx):
        """Rows ``idx`` with labels and per-point metadata carried along."""
        idx = np.asarray(idx)
        meta = {k: np.asarray(v)[idx] if _is_per_point(v, self.n_points) else v for k, v in self.metadata.items()}
        labels = None if self.point_labels is None else self.point_labels[idx]
        return PointCloud(self.points[idx], self.cloud_label, labels, meta)


def _is_per_point(value, n):
    return isinstance(value, np.ndarray) and value.ndim >= 1 and value.shape[0] == n


# --------------------------------------------------------------------- I/O


def load_cloud(path, format=None, n_samples=1024, seed=0):
    """Read an ascii XYZ, ascii PLY or OFF file.

    OFF meshes are turned into points by area-weighted uniform surface
    sampling of ``n_samples`` points. Coordinates are returned as stored.
    """
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if fmt == "xyz":
        cloud = _parse_xyz(text, path)
    elif fmt == "ply":
        cloud = _parse_ply(text, path)
    elif fmt == "off":
        verts, faces = _parse_off(text, path)
        cloud = PointCloud(sample_mesh(verts, faces, n_samples, seed))
    else:
        raise FormatError(f"unknown point cloud format {fmt!r} for {path}")
    return cloud


def _parse_xyz(text, path):
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            vals = [float(v) for v in line.replace(",", " ").split()]
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-numeric value in {line!r}") from None
        if len(vals) < 3:
            raise FormatError(f"{path}:{lineno}: expected at least 3 values, got {len(vals)}")
        if rows and len(vals) != len(rows[0]):
            raise FormatError(f"{path}:{lineno}: expected {len(rows[0])} values, got {len(vals)}")
        rows.append(vals)
    if not rows:
        raise InvalidInputError(f"{path}: empty point cloud")
    return PointCloud(np.array(rows))


def _parse_ply(text, path):
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}:1: missing 'ply' magic")
    n_vertex = None
    props = []
    current = None
    body_start = None
    for lineno, line in enumerate(lines[1:], 2):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise FormatError(f"{path}:{lineno}: only ascii PLY is supported")
        elif tok[0] == "element":
            current = tok[1]
            if current == "vertex":
                n_vertex = int(tok[2])
        elif tok[0] == "property" and current == "vertex":
            if tok[1] == "list":
                raise FormatError(f"{path}:{lineno}: list properties on vertices are not supported")
            props.append(tok[-1])
        elif tok[0] == "end_header":
            body_start = lineno
            break
    if body_start is None or n_vertex is None:
        raise FormatError(f"{path}: malformed PLY header")
    if n_vertex == 0:
        raise InvalidInputError(f"{path}: empty point cloud")
    for axis in ("x", "y", "z"):
        if axis not in props:
            raise FormatError(f"{path}: vertex property {axis!r} missing")
    rows = []
    for lineno in range(body_start + 1, body_start + 1 + n_vertex):
        if lineno - 1 >= len(lines):
            raise FormatError(f"{path}:{lineno}: file ends before {n_vertex} vertices")
        try:
            vals = [float(v) for v in lines[lineno - 1].split()]
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-numeric vertex value") from None
        if len(vals) != len(props):
            raise FormatError(f"{path}:{lineno}: expected {len(props)} values, got {len(vals)}")
        rows.append(vals)
    table = np.array(rows)
    xyz = table[:, [props.index(a) for a in ("x", "y", "z")]]
    meta = {p: table[:, i] for i, p in enumerate(props) if p not in ("x", "y", "z")}
    labels = None
    if "label" in meta:
        labels = meta.pop("label").astype(np.int64)
    return PointCloud(xyz, point_labels=labels, metadata=meta)


def _parse_off(text, path):
    tokens = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if line:
            tokens.append((lineno, line))
    if not tokens or not tokens[0][1].startswith("OFF"):
        raise FormatError(f"{path}:1: missing 'OFF' header")
    head = tokens[0][1][3:].strip()
    # some exporters glue the counts onto the header line ("OFF8 6 0")
    rest = tokens[1:] if not head else [(tokens[0][0], head)] + tokens[1:]
    if not rest:
        raise FormatError(f"{path}: missing counts line")
    lineno, counts = rest[0]
    try:
        n_verts, n_faces = (int(v) for v in counts.split()[:2])
    except ValueError:
        raise FormatError(f"{path}:{lineno}: bad counts line {counts!r}") from None
    if n_verts == 0 or n_faces == 0:
        raise InvalidInputError(f"{path}: mesh has no vertices or faces")
    body = rest[1:]
    if len(body) < n_verts + n_faces:
        raise FormatError(f"{path}: expected {n_verts} vertices and {n_faces} faces, file is short")
    verts = np.empty((n_verts, 3))
    for i in range(n_verts):
        lineno, line = body[i]
        try:
            verts[i] = [float(v) for v in line.split()[:3]]
        except ValueError:
            raise FormatError(f"{path}:{lineno}: bad vertex {line!r}") from None
    faces = np.empty((n_faces, 3), dtype=np.int64)
    for i in range(n_faces):
        lineno, line = body[n_verts + i]
        vals = line.split()
        if vals[0] != "3":
            raise FormatError(f"{path}:{lineno}: only triangular faces are supported")
        faces[i] = [int(v) for v in vals[1:4]]
    if faces.min() < 0 or faces.max() >= n_verts:
        raise FormatError(f"{path}: face index out of range")
    return verts, faces


def sample_mesh(verts, faces, n_samples, seed=0):
    """Area-weighted uniform samples on a triangle mesh surface."""
    rng = np.random.default_rng(seed)
    tri = verts[faces]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    if area.sum() <= 0:
        raise InvalidInputError("mesh has zero surface area")
    which = rng.choice(len(faces), size=n_samples, p=area / area.sum())
    r1 = np.sqrt(rng.random(n_samples))
    r2 = rng.random(n_samples)
    a, b, c = tri[which, 0], tri[which, 1], tri[which, 2]
    return (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c


def export_ply(cloud, path, scalars=None, extra=None):
    """Write an ascii PLY with x, y, z and an optional ``variation`` scalar.

    ``extra`` maps further property names to per-point arrays.
    """
    n = cloud.n_points
    props = {}
    if scalars is not None:
        props["variation"] = np.asarray(scalars, dtype=np.float64)
    for name, values in (extra or {}).items():
        props[name] = np.asarray(values, dtype=np.float64)
    for name, values in props.items():
        if values.shape != (n,):
            raise InvalidInputError(f"property {name!r} has length {values.shape}, expected {n}")
    header = ["ply", "format ascii 1.0", f"element vertex {n}"]
    header += [f"property float {a}" for a in ("x", "y", "z")]
    header += [f"property float {name}" for name in props]
    header.append("end_header")
    cols = [cloud.xyz] + [v[:, None] for v in props.values()]
    table = np.hstack(cols)
    body = "\n".join(" ".join(f"{v:.17g}" for v in row) for row in table)
    Path(path).write_text("\n".join(header) + "\n" + body + "\n")


# ------------------------------------------------------------ preprocessing


def normalize_unit_sphere(cloud):
    """Center xyz at the origin and scale so the farthest point has norm 1."""
    xyz = cloud.xyz - cloud.xyz.mean(axis=0)
    radius = np.linalg.norm(xyz, axis=1).max()
    # spread below the coordinates' own resolution is rounding residue, not shape
    floor = 64 * np.finfo(np.float64).eps * np.abs(cloud.xyz).max()
    xyz = xyz / radius if radius > floor else np.zeros_like(xyz)
    pts = cloud.points.copy()
    pts[:, :3] = xyz
    return replace(cloud, points=pts)


# -------------------------------------------------------- synthetic shapes


@dataclass(frozen=True)
class SyntheticSpec:
    shape_family: str
    n_points: int = 1024
    seed: int = 0
    part_labels: bool = False


CREASE_BAND = 0.05
PLANE_BEND = np.deg2rad(90.0)


def generate_synthetic(spec):
    """Sample a canonical shape surface; a pure function of ``spec``.

    ``plane-with-crease`` and ``L-bracket`` carry ``metadata['crease']``
    (points within ``CREASE_BAND`` of the analytic crease line) and
    ``metadata['interior']`` (points well away from every sharp feature).
    """
    if spec.shape_family not in SHAPE_FAMILIES:
        raise ConfigError(f"unknown shape family {spec.shape_family!r}; choose from {SHAPE_FAMILIES}")
    if spec.n_points < 1:
        raise ConfigError("n_points must be >= 1")
    rng = np.random.default_rng(spec.seed)
    n = spec.n_points
    meta = {}
    family = spec.shape_family
    if family == "sphere":
        v = rng.normal(size=(n, 3))
        pts = v / np.linalg.norm(v, axis=1, keepdims=True)
        parts = (pts[:, 2] >= 0).astype(np.int64)
    elif family == "cube":
        pts, parts = _sample_boxes(rng, n, [((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))], per_face=True)
    elif family == "cylinder-with-caps":
        pts, parts = _sample_cylinder(rng, n, radius=0.5, height=1.5)
    elif family == "plane-with-crease":
        pts, parts, meta = _sample_crease_plane(rng, n)
    elif family == "L-bracket":
        pts, parts, meta = _sample_l_bracket(rng, n)
    else:
        pts, parts = _sample_chair(rng, n)
    return PointCloud(pts, point_labels=parts if spec.part_labels else None, metadata=meta)


def _faces_of_box(lo, hi):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    faces = []
    for axis in range(3):
        for side, val in ((0, lo[axis]), (1, hi[axis])):
            others = [a for a in range(3) if a != axis]
            faces.append((axis, val, others, lo[others], hi[others], 2 * axis + side))
    return faces


def _sample_faces(rng, n, faces):
    """Uniform samples over a list of axis-aligned rectangles."""
    areas = np.array([np.prod(h - l) for _, _, _, l, h, _ in faces])
    which = rng.choice(len(faces), size=n, p=areas / areas.sum())
    uv = rng.random((n, 2))
    pts = np.empty((n, 3))
    labels = np.empty(n, dtype=np.int64)
    for f, (axis, val, others, l, h, label) in enumerate(faces):
        sel = which == f
        pts[sel, axis] = val
        pts[np.ix_(sel, others)] = l + uv[sel] * (h - l)
        labels[sel] = label
    return pts, labels


def _sample_boxes(rng, n, boxes, per_face=False):
    faces = []
    for b, (lo, hi) in enumerate(boxes):
        for axis, val, others, l, h, label in _faces_of_box(lo, hi):
            faces.append((axis, val, others, l, h, label if per_face else b))
    return _sample_faces(rng, n, faces)


def _sample_cylinder(rng, n, radius, height):
    body_area = 2 * np.pi * radius * height
    cap_area = np.pi * radius**2
    is_cap = rng.random(n) < 2 * cap_area / (body_area + 2 * cap_area)
    theta = rng.uniform(0, 2 * np.pi, n)
    r = np.where(is_cap, radius * np.sqrt(rng.random(n)), radius)
    top = rng.random(n) < 0.5
    z = np.where(is_cap, np.where(top, height / 2, -height / 2), rng.uniform(-height / 2, height / 2, n))
    pts = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    return pts, is_cap.astype(np.int64)


def _sample_crease_plane(rng, n):
    # two 2x1 panels hinged on the y axis, the second bent up by PLANE_BEND
    t = rng.random(n)
    y = rng.uniform(-1, 1, n)
    right = rng.random(n) < 0.5
    x = np.where(right, t * np.cos(PLANE_BEND), -t)
    z = np.where(right, t * np.sin(PLANE_BEND), 0.0)
    pts = np.stack([x, y, z], axis=1)
    # t is the distance to the crease line within each panel
    crease = t <= CREASE_BAND
    to_boundary = np.minimum(1 - t, 1 - np.abs(y))
    interior = (t >= 0.25) & (to_boundary >= 0.25)
    meta = {"crease": crease, "interior": interior}
    return pts, right.astype(np.int64), meta


L_ARM, L_THICK, L_DEPTH = 1.0, 0.25, 1.0


def _sample_l_bracket(rng, n):
    """Closed surface of an L-profile prism extruded along y."""
    a, t, d = L_ARM, L_THICK, L_DEPTH
    profile = np.array([(0, 0), (a, 0), (a, t), (t, t), (t, a), (0, a)], dtype=float)
    edges = list(zip(profile, np.roll(profile, -1, axis=0)))
    lengths = np.array([np.linalg.norm(q - p) for p, q in edges])
    cap_area = 2 * a * t - t * t
    areas = np.concatenate([lengths * d, [cap_area, cap_area]])
    which = rng.choice(len(areas), size=n, p=areas / areas.sum())
    pts = np.empty((n, 3))
    labels = np.empty(n, dtype=np.int64)
    for e, (p, q) in enumerate(edges):
        sel = which == e
        s = rng.random(sel.sum())
        xz = p + s[:, None] * (q - p)
        pts[sel] = np.stack([xz[:, 0], rng.uniform(0, d, sel.sum()), xz[:, 1]], axis=1)
    for c, yval in ((len(edges), 0.0), (len(edges) + 1, d)):
        sel = np.flatnonzero(which == c)
        xz = _sample_l_profile(rng, len(sel), a, t)
        pts[sel] = np.stack([xz[:, 0], np.full(len(sel), yval), xz[:, 1]], axis=1)
    # part 1 is the vertical arm above the corner block, part 0 the rest
    labels[:] = (pts[:, 2] > t) & (pts[:, 0] <= t)
    # the reentrant corner runs along y at (x, z) = (t, t)
    dist = np.hypot(pts[:, 0] - t, pts[:, 2] - t)
    crease = dist <= 2 * CREASE_BAND
    edge_dist = _l_bracket_edge_distance(pts, a, t, d)
    interior = edge_dist >= 0.1
    return pts, labels, {"crease": crease, "interior": interior}


def _sample_l_profile(rng, n, a, t):
    out = np.empty((n, 2))
    filled = 0
    while filled < n:
        cand = rng.random((2 * (n - filled) + 8, 2)) * a
        keep = cand[(cand[:, 0] <= t) | (cand[:, 1] <= t)]
        take = min(len(keep), n - filled)
        out[filled : filled + take] = keep[:take]
        filled += take
    return out


def _l_bracket_edge_distance(pts, a, t, d):
    """Distance from each surface point to the nearest sharp edge of the prism."""
    x, y, z = pts.T
    profile = np.array([(0, 0), (a, 0), (a, t), (t, t), (t, a), (0, a)], dtype=float)
    xz = np.stack([x, z], axis=1)
    best = np.minimum(y, d - y)  # edges where side walls meet the end caps
    for v in profile:
        best = np.minimum(best, np.linalg.norm(xz - v, axis=1))
    return best


def _sample_chair(rng, n):
    seat = ((-0.5, -0.5, 0.0), (0.5, 0.5, 0.1))
    back = ((-0.5, 0.4, 0.1), (0.5, 0.5, 1.0))
    legs = [((sx - 0.05, sy - 0.05, -0.8), (sx + 0.05, sy + 0.05, 0.0)) for sx in (-0.4, 0.4) for sy in (-0.4, 0.4)]
    pts, box_id = _sample_boxes(rng, n, [seat, back] + legs)
    parts = np.minimum(box_id, 2)
    return pts, parts


# ------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentSpec:
    """Random transform parameters.

    Stages run in a fixed order: rotate, scale, translate, jitter, dropout,
    clutter, shuffle. ``rotation_angle`` pins the z-axis angle instead of
    drawing it.
    """

    scale_range: tuple = (1.0, 1.0)
    translate_range: float = 0.0
    rotation_mode: str = "none"
    dropout_keep: float = 1.0
    jitter_sigma: float = 0.0
    clutter_fraction: float = 0.0
    seed: int = 0
    rotation_angle: float | None = None
    shuffle: bool = True

    def __post_init__(self):
        lo, hi = self.scale_range
        vals = (lo, hi, self.translate_range, self.jitter_sigma, self.clutter_fraction, self.dropout_keep)
        if not all(np.isfinite(v) for v in vals):
            raise ConfigError("augmentation ranges must be finite")
        if lo > hi:
            raise ConfigError(f"scale_range lo {lo} > hi {hi}")
        if not 0 < self.dropout_keep <= 1:
            raise ConfigError(f"dropout_keep must lie in (0, 1], got {self.dropout_keep}")
        if self.rotation_mode not in ROTATION_MODES:
            raise ConfigError(f"unknown rotation mode {self.rotation_mode!r}")
        if self.translate_range < 0 or self.jitter_sigma < 0 or self.clutter_fraction < 0:
            raise ConfigError("translate_range, jitter_sigma and clutter_fraction must be >= 0")


def rotation_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def random_rotation(rng):
    """Uniform rotation from SO(3) via QR of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def augment(cloud, spec):
    rng = np.random.default_rng(spec.seed)
    pts = cloud.points.copy()
    labels = None if cloud.point_labels is None else cloud.point_labels.copy()
    meta = dict(cloud.metadata)
    n = len(pts)

    if spec.rotation_mode != "none":
        if spec.rotation_mode == "z-axis":
            angle = spec.rotation_angle if spec.rotation_angle is not None else rng.uniform(0, 2 * np.pi)
            rot = rotation_z(angle)
        else:
            rot = random_rotation(rng)
        pts[:, :3] = pts[:, :3] @ rot.T
        if pts.shape[1] >= 6:
            pts[:, 3:6] = pts[:, 3:6] @ rot.T
    lo, hi = spec.scale_range
    if (lo, hi) != (1.0, 1.0):
        pts[:, :3] *= rng.uniform(lo, hi)
    if spec.translate_range > 0:
        pts[:, :3] += rng.uniform(-spec.translate_range, spec.translate_range, size=3)
    if spec.jitter_sigma > 0:
        pts[:, :3] += rng.normal(0, spec.jitter_sigma, size=(n, 3))

    keep = np.arange(n)
    if spec.dropout_keep < 1:
        n_keep = int(round(spec.dropout_keep * n))
        if n_keep < 8:
            raise InvalidInputError(f"dropout leaves {n_keep} points; at least 8 are required")
        keep = np.sort(rng.choice(n, size=n_keep, replace=False))
    pts = pts[keep]
    if labels is not None:
        labels = labels[keep]
    meta = {k: np.asarray(v)[keep] if _is_per_point(v, n) else v for k, v in meta.items()}

    if spec.clutter_fraction > 0:
        n_extra = int(round(spec.clutter_fraction * len(pts)))
        extra = np.zeros((n_extra, pts.shape[1]))
        extra[:, :3] = rng.uniform(-1, 1, size=(n_extra, 3))
        pts = np.vstack([pts, extra])
        if labels is not None:
            labels = np.concatenate([labels, np.full(n_extra, CLUTTER_LABEL)])
        meta = {k: _pad_meta(v, len(keep), n_extra) for k, v in meta.items()}

    if spec.shuffle:
        perm = rng.permutation(len(pts))
        pts = pts[perm]
        if labels is not None:
            labels = labels[perm]
        meta = {k: np.asarray(v)[perm] if _is_per_point(v, len(perm)) else v for k, v in meta.items()}
    return PointCloud(pts, cloud.cloud_label, labels, meta)


def _pad_meta(value, n, n_extra):
    if not _is_per_point(value, n):
        return value
    fill = np.zeros((n_extra,) + value.shape[1:], dtype=value.dtype)
    return np.concatenate([value, fill])
