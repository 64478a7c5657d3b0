"""Frozen stand-in encoders and the synthetic object world.

Objects are simple parametric solids with a named colour and a size bin.
Both encoders reduce their input to the same small attribute vector
(shape signature, colour, size) and push it through one frozen orthonormal
map into the C-dim embedding space, so a caption and a point cloud of the
same object land close together without any joint training.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .pooling import fps_tokens

CATEGORIES = (
    "sphere", "cube", "cylinder", "cone", "torus",
    "pyramid", "capsule", "disk", "ellipsoid", "prism",
)

# aspect-ratio range for each family's single shape parameter
SHAPE_PARAM_RANGES = {
    "sphere": (1.0, 1.0),
    "cube": (1.0, 1.0),
    "cylinder": (1.3, 2.0),    # height / diameter
    "cone": (0.8, 1.4),        # height / base diameter
    "torus": (0.25, 0.45),     # tube radius / ring radius
    "pyramid": (0.8, 1.4),     # height / base side
    "capsule": (1.6, 2.4),     # total height / diameter
    "disk": (0.12, 0.25),      # height / diameter
    "ellipsoid": (1.5, 2.2),   # long axis / short axis
    "prism": (1.3, 2.0),       # length / triangle side
}

COLORS = {
    "red": (0.85, 0.12, 0.12),
    "green": (0.15, 0.7, 0.2),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.92, 0.85, 0.15),
    "orange": (0.95, 0.55, 0.1),
    "purple": (0.55, 0.2, 0.7),
    "white": (0.93, 0.93, 0.93),
    "black": (0.08, 0.08, 0.08),
    "gray": (0.5, 0.5, 0.5),
    "brown": (0.5, 0.3, 0.15),
}

SIZES = {
    "small": (0.30, 0.45),
    "medium": (0.50, 0.65),
    "large": (0.70, 0.90),
}

PART_FLAGS = ("handle", "lid", "base")

USAGE = {
    "sphere": "a ball for games or a decorative ornament",
    "cube": "a building block or a storage box",
    "cylinder": "a container such as a can or a jar",
    "cone": "a traffic marker or a funnel",
    "torus": "a ring toy or a float",
    "pyramid": "a paperweight or a model monument",
    "capsule": "a pill model or a rounded container",
    "disk": "a coaster or a plate",
    "ellipsoid": "an egg model or a rounded ornament",
    "prism": "a wedge or a tent model",
}

SHAPE_WORDS = {
    "sphere": "perfectly round",
    "cube": "square with flat faces and sharp edges",
    "cylinder": "tall and round with flat ends",
    "cone": "round at the base and pointed at the top",
    "torus": "shaped like a ring with a hole in the middle",
    "pyramid": "square at the base with flat faces meeting at a point",
    "capsule": "long and round with curved ends",
    "disk": "flat and round",
    "ellipsoid": "stretched and smoothly rounded",
    "prism": "long with triangular ends",
}

N_CAT = len(CATEGORIES)
ATTR_DIM = N_CAT + 8  # category evidence + 4 shape + 3 colour + 1 size
_CAT_W, _SHAPE_W, _COLOR_W, _SIZE_W = 2.0, 1.0, 1.0, 1.0
# temperature of the geometric category evidence (standardised units, squared)
CATEGORY_TEMPERATURE = 0.5


@dataclass(frozen=True)
class ObjectSpec:
    id: str
    category: str
    color_name: str
    color: tuple[float, float, float]
    size_name: str
    size: float
    shape_params: tuple[float, ...]
    parts: tuple[str, ...] = ()

    @property
    def shape(self) -> str:
        return self.category

    def attribute_vector(self) -> np.ndarray:
        return standardize(_one_hot(self.category), canonical_signature(self.category),
                           np.asarray(self.color), self.size)


@dataclass
class PointCloud:
    points: np.ndarray  # n x 6, xyz then rgb

    @property
    def n(self) -> int:
        return int(self.points.shape[0])

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def rgb(self) -> np.ndarray:
        return self.points[:, 3:6]

    def validate(self) -> None:
        if self.points.ndim != 2 or self.points.shape[1] != 6:
            raise ValueError(f"point cloud must be n x 6, got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud has non-finite coordinates")
        rgb = self.rgb
        if rgb.min() < 0.0 or rgb.max() > 1.0:
            raise ValueError("point cloud colours must lie in [0, 1]")


@dataclass
class TokenSequence:
    tokens: np.ndarray        # N x C
    class_token: np.ndarray   # C
    source: str               # "text" | "point"
    layer_tag: str = "final"  # tag of ``tokens``; the class token is always final-layer

    @property
    def C(self) -> int:
        return int(self.class_token.shape[0])


# -- surface sampling ---------------------------------------------------------

def _unit_sphere(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _triangles(rng, tris: np.ndarray, n: int) -> np.ndarray:
    """Area-weighted uniform samples on a list of triangles (T x 3 x 3)."""
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    pick = rng.choice(len(tris), size=n, p=area / area.sum())
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    return a[pick] + u[:, None] * (b[pick] - a[pick]) + v[:, None] * (c[pick] - a[pick])


def _quad(p0, p1, p2, p3):
    return [(p0, p1, p2), (p0, p2, p3)]


def _cylinder(rng, n, r, h, caps=True):
    side = 2 * np.pi * r * h
    cap = np.pi * r * r if caps else 0.0
    k = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    th = rng.uniform(0, 2 * np.pi, n)
    rad = np.where(k == 0, r, r * np.sqrt(rng.random(n)))
    z = np.where(k == 0, rng.uniform(-h / 2, h / 2, n), np.where(k == 1, h / 2, -h / 2))
    return np.stack([rad * np.cos(th), rad * np.sin(th), z], axis=1)


def _surface(category: str, p: float, rng, n: int) -> np.ndarray:
    if category == "sphere":
        return 0.5 * _unit_sphere(rng, n)
    if category == "ellipsoid":
        return _unit_sphere(rng, n) * np.array([0.5, 0.5, 0.5 * p])
    if category == "cube":
        face = rng.integers(0, 6, n)
        pts = rng.uniform(-0.5, 0.5, (n, 3))
        axis, sign = face // 2, np.where(face % 2 == 0, -0.5, 0.5)
        pts[np.arange(n), axis] = sign
        return pts
    if category in ("cylinder", "disk"):
        return _cylinder(rng, n, 0.5, p)
    if category == "capsule":
        r = 0.5
        hc = max(p - 1.0, 0.0)  # straight section length, diameter 1
        side, caps = 2 * np.pi * r * hc, 4 * np.pi * r * r
        on_side = rng.random(n) < side / (side + caps)
        pts = _cylinder(rng, n, r, hc, caps=False)
        s = r * _unit_sphere(rng, n)
        s[:, 2] += np.sign(s[:, 2]) * hc / 2
        return np.where(on_side[:, None], pts, s)
    if category == "cone":
        r, h = 0.5, p
        lat, base = np.pi * r * np.hypot(r, h), np.pi * r * r
        on_lat = rng.random(n) < lat / (lat + base)
        th = rng.uniform(0, 2 * np.pi, n)
        t = np.sqrt(rng.random(n))  # distance fraction from the apex
        rad = np.where(on_lat, r * t, r * np.sqrt(rng.random(n)))
        z = np.where(on_lat, h / 2 - h * t, -h / 2)
        return np.stack([rad * np.cos(th), rad * np.sin(th), z], axis=1)
    if category == "torus":
        R = 0.5 / (1 + p)
        r = p * R
        out = np.empty((0, 3))
        while len(out) < n:
            m = 2 * (n - len(out)) + 16
            u, v = rng.uniform(0, 2 * np.pi, m), rng.uniform(0, 2 * np.pi, m)
            keep = rng.random(m) < (R + r * np.cos(v)) / (R + r)
            u, v = u[keep], v[keep]
            ring = R + r * np.cos(v)
            out = np.concatenate([out, np.stack([ring * np.cos(u), ring * np.sin(u), r * np.sin(v)], 1)])
        return out[:n]
    if category == "pyramid":
        h = p
        b = [np.array(q) for q in ((-.5, -.5, -h / 2), (.5, -.5, -h / 2), (.5, .5, -h / 2), (-.5, .5, -h / 2))]
        apex = np.array((0.0, 0.0, h / 2))
        tris = _quad(b[0], b[1], b[2], b[3]) + [(b[i], b[(i + 1) % 4], apex) for i in range(4)]
        return _triangles(rng, np.array(tris), n)
    if category == "prism":
        L = p
        tri = [np.array((-.5, -np.sqrt(3) / 4)), np.array((.5, -np.sqrt(3) / 4)), np.array((0.0, np.sqrt(3) / 4))]
        lo = [np.array((q[0], q[1], -L / 2)) for q in tri]
        hi = [np.array((q[0], q[1], L / 2)) for q in tri]
        tris = [(lo[0], lo[1], lo[2]), (hi[0], hi[1], hi[2])]
        for i in range(3):
            j = (i + 1) % 3
            tris += _quad(lo[i], lo[j], hi[j], hi[i])
        return _triangles(rng, np.array(tris), n)
    raise ValueError(f"unknown shape family {category!r}")


def sample_point_cloud(spec: ObjectSpec, n: int = 1024, seed: int = 0,
                       xyz_jitter: float = 0.004, rgb_jitter: float = 0.03) -> PointCloud:
    """Sample ``n`` coloured points on the surface of ``spec``'s solid.

    The solid is scaled so its largest extent equals ``spec.size`` and is
    centred in the unit cube.
    """
    if n < 64:
        raise ValueError(f"need at least 64 points, got {n}")
    if spec.category not in SHAPE_PARAM_RANGES:
        raise ValueError(f"unknown shape family {spec.category!r}")
    rng = np.random.default_rng([seed, _stable_int(spec.id)])
    p = spec.shape_params[0] if spec.shape_params else 1.0
    pts = _surface(spec.category, p, rng, n)
    extent = (pts.max(0) - pts.min(0)).max()
    pts = pts / extent * spec.size
    pts = pts - 0.5 * (pts.max(0) + pts.min(0)) + 0.5
    pts = pts + rng.normal(0, xyz_jitter, pts.shape)
    rgb = np.clip(np.asarray(spec.color) + rng.normal(0, rgb_jitter, (n, 3)), 0.0, 1.0)
    return PointCloud(np.concatenate([pts, rgb], axis=1))


# -- attributes -----------------------------------------------------------------

def shape_signature(xyz: np.ndarray) -> np.ndarray:
    """Scale-free geometry proxy: normalised bbox extents and radial spread."""
    lo, hi = xyz.min(0), xyz.max(0)
    ext = hi - lo
    scale = ext.max()
    centred = (xyz - 0.5 * (lo + hi)) / scale
    r = np.linalg.norm(centred, axis=1)
    return np.array([*(ext / scale), r.std() / r.mean()])


@lru_cache(maxsize=None)
def _canonical_signatures() -> dict[str, np.ndarray]:
    out = {}
    for i, cat in enumerate(CATEGORIES):
        lo, hi = SHAPE_PARAM_RANGES[cat]
        pts = _surface(cat, 0.5 * (lo + hi), np.random.default_rng([4242, i]), 8192)
        out[cat] = shape_signature(pts)
    return out


def canonical_signature(category: str) -> np.ndarray:
    return _canonical_signatures()[category]


@lru_cache(maxsize=None)
def _standardizer():
    sigs = np.stack(list(_canonical_signatures().values()))
    cols = np.array(list(COLORS.values()))
    sizes = np.array([0.5 * (a + b) for a, b in SIZES.values()])
    return (sigs.mean(0), sigs.std(0) + 1e-6, cols.mean(0), cols.std(0) + 1e-6,
            sizes.mean(), sizes.std())


def _one_hot(category: str) -> np.ndarray:
    v = np.zeros(N_CAT)
    v[CATEGORIES.index(category)] = 1.0
    return v


def standardize(cat: np.ndarray | None, sig: np.ndarray | None, rgb: np.ndarray | None,
                size: float | None) -> np.ndarray:
    """Map raw attributes to the weighted, zero-centred attribute vector.

    Missing attributes become zero slots.
    """
    ms, ss, mc, sc, mz, sz = _standardizer()
    a = np.zeros(ATTR_DIM)
    if cat is not None:
        a[:N_CAT] = _CAT_W * (np.asarray(cat) - 1.0 / N_CAT)
    if sig is not None:
        a[N_CAT:N_CAT + 4] = _SHAPE_W * (np.asarray(sig) - ms) / ss
    if rgb is not None:
        a[N_CAT + 4:N_CAT + 7] = _COLOR_W * (np.asarray(rgb) - mc) / sc
    if size is not None:
        a[N_CAT + 7] = _SIZE_W * (size - mz) / sz
    return a


def category_evidence(sig: np.ndarray) -> np.ndarray:
    """Soft category assignment from a measured shape signature."""
    ms, ss = _standardizer()[:2]
    z = (sig - ms) / ss
    canon = (np.stack([canonical_signature(c) for c in CATEGORIES]) - ms) / ss
    logits = -((canon - z) ** 2).sum(1) / CATEGORY_TEMPERATURE
    p = np.exp(logits - logits.max())
    return p / p.sum()


def estimate_attributes(cloud: PointCloud) -> np.ndarray:
    xyz = cloud.xyz
    size = float((xyz.max(0) - xyz.min(0)).max())
    sig = shape_signature(xyz)
    return standardize(category_evidence(sig), sig, cloud.rgb.mean(0), size)


_WORD_RE = re.compile(r"[a-z0-9]+")


def parse_caption(caption: str) -> dict:
    """First category, colour and size word found in the text (or None)."""
    words = _WORD_RE.findall(caption.lower())
    found = {"category": None, "color": None, "size": None}
    for w in words:
        if found["category"] is None and w in CATEGORIES:
            found["category"] = w
        elif found["color"] is None and w in COLORS:
            found["color"] = w
        elif found["size"] is None and w in SIZES:
            found["size"] = w
    return found


def caption_attributes(caption: str) -> np.ndarray:
    f = parse_caption(caption)
    cat = _one_hot(f["category"]) if f["category"] else None
    sig = canonical_signature(f["category"]) if f["category"] else None
    rgb = np.asarray(COLORS[f["color"]]) if f["color"] else None
    size = 0.5 * sum(SIZES[f["size"]]) if f["size"] else None
    return standardize(cat, sig, rgb, size)


# -- world ----------------------------------------------------------------------

_CAPTION_TEMPLATES = (
    "A 3D model of a {size} {color} {category}{parts}.",
    "A {size} {color} {category}{parts}.",
    "This is a {color} {category}{parts}, {size} in size.",
    "A {color} {category}{parts} of {size} size.",
)


def _stable_int(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


def make_object(idx: int, rng: np.random.Generator) -> ObjectSpec:
    cat = CATEGORIES[int(rng.integers(len(CATEGORIES)))]
    cname = list(COLORS)[int(rng.integers(len(COLORS)))]
    color = tuple(float(c) for c in np.clip(np.asarray(COLORS[cname]) + rng.uniform(-0.04, 0.04, 3), 0, 1))
    sname = list(SIZES)[int(rng.integers(len(SIZES)))]
    size = float(rng.uniform(*SIZES[sname]))
    lo, hi = SHAPE_PARAM_RANGES[cat]
    param = float(rng.uniform(lo, hi))
    parts = tuple(p for p in PART_FLAGS if rng.random() < 0.2)
    return ObjectSpec(id=f"obj{idx:05d}", category=cat, color_name=cname, color=color,
                      size_name=sname, size=size, shape_params=(param,), parts=parts)


def describe_parts(parts: tuple[str, ...]) -> str:
    if not parts:
        return ""
    names = [f"a {p}" for p in parts]
    if len(names) == 1:
        return " with " + names[0]
    return " with " + ", ".join(names[:-1]) + " and " + names[-1]


def make_caption(spec: ObjectSpec, rng: np.random.Generator) -> str:
    tpl = _CAPTION_TEMPLATES[int(rng.integers(len(_CAPTION_TEMPLATES)))]
    return tpl.format(size=spec.size_name, color=spec.color_name, category=spec.category,
                      parts=describe_parts(spec.parts))


def synth_world(num_objects: int, seed: int = 0) -> list[tuple[ObjectSpec, str]]:
    if num_objects < 1:
        raise ValueError("num_objects must be >= 1")
    out = []
    for i in range(num_objects):
        rng = np.random.default_rng([seed, i])
        spec = make_object(i, rng)
        out.append((spec, make_caption(spec, rng)))
    return out


# -- encoders -------------------------------------------------------------------

@dataclass
class EncoderConfig:
    C: int = 64
    n_patches: int = 512
    group_size: int = 32
    modality_noise: float = 0.05
    patch_hidden: int = 64
    seed: int = 1234


_PATCH_FEATS = 10


class FrozenEncoders:
    """Text and point encoders sharing one frozen attribute-to-latent map."""

    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        if cfg.C < ATTR_DIM:
            raise ValueError(f"C must be >= {ATTR_DIM}")
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 0])
        q, _ = np.linalg.qr(rng.normal(size=(cfg.C, ATTR_DIM)))
        self.latent_map = q  # C x ATTR_DIM, orthonormal columns
        self.patch_w1 = rng.normal(0, 1 / np.sqrt(_PATCH_FEATS), (_PATCH_FEATS, cfg.patch_hidden))
        self.patch_b1 = rng.normal(0, 0.1, cfg.patch_hidden)
        self.patch_w2 = rng.normal(0, 1 / np.sqrt(cfg.patch_hidden), (cfg.patch_hidden, cfg.C))
        for a in self.parameters().values():
            a.setflags(write=False)

    def parameters(self) -> dict[str, np.ndarray]:
        return {"latent_map": self.latent_map, "patch_w1": self.patch_w1,
                "patch_b1": self.patch_b1, "patch_w2": self.patch_w2}

    def parameter_hash(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.parameters().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    def latent(self, attrs: np.ndarray) -> np.ndarray:
        return self.latent_map @ attrs

    def _perturbation(self, key: bytes, source: str) -> np.ndarray:
        seed = int.from_bytes(hashlib.blake2b(source.encode() + key, digest_size=8).digest(), "little")
        return np.random.default_rng([self.cfg.seed, seed]).normal(0, self.cfg.modality_noise, self.cfg.C)

    def word_token(self, word: str) -> np.ndarray:
        rng = np.random.default_rng([self.cfg.seed, 7, _stable_int(word)])
        return rng.normal(0, 1 / np.sqrt(self.cfg.C), self.cfg.C)

    def text_encode(self, caption: str) -> TokenSequence:
        words = _WORD_RE.findall(caption.lower()) or [""]
        tokens = np.stack([self.word_token(w) for w in words])
        return TokenSequence(tokens=tokens, class_token=self.class_token_text(caption),
                             source="text", layer_tag="final")

    def class_token_text(self, caption: str) -> np.ndarray:
        return self.latent(caption_attributes(caption)) + self._perturbation(caption.encode("utf-8"), "text")

    def _patch_features(self, cloud: PointCloud) -> np.ndarray:
        from .pooling import knn_tokens

        xyz = cloud.xyz.astype(np.float64)
        lo, hi = xyz.min(0), xyz.max(0)
        scale = (hi - lo).max()
        centred = (xyz - 0.5 * (lo + hi)) / scale
        centers = fps_tokens(centred, self.cfg.n_patches)
        groups = knn_tokens(centers, centred, self.cfg.group_size)
        g = centred[groups]                                  # P x k x 3
        mu = g.mean(1)
        d = g - mu[:, None, :]
        cov = np.einsum("pki,pkj->pij", d, d) / g.shape[1]
        ev = np.linalg.eigvalsh(cov)                          # ascending
        ev = ev / (ev.sum(1, keepdims=True) + 1e-12)
        spread = np.sqrt(np.einsum("pki,pki->p", d, d) / g.shape[1])
        col = cloud.rgb[groups].mean(1)
        return np.concatenate([centred[centers] * 2.0, ev * 3.0, (col - 0.5) * 2.0,
                               spread[:, None] * 10.0], axis=1)

    def point_encode(self, cloud: PointCloud) -> TokenSequence:
        cloud.validate()
        if cloud.n < self.cfg.n_patches:
            raise ValueError(f"cloud has {cloud.n} points, fewer than {self.cfg.n_patches} patches")
        feats = self._patch_features(cloud)
        hidden = np.tanh(feats @ self.patch_w1 + self.patch_b1)
        key = np.ascontiguousarray(cloud.points, dtype=np.float64).tobytes()
        cls = self.latent(estimate_attributes(cloud)) + self._perturbation(key, "point")
        # output tokens share the class token's space: global context plus local detail
        tokens = cls[None, :] + 0.5 * (hidden @ self.patch_w2)
        return TokenSequence(tokens=tokens, class_token=cls, source="point", layer_tag="penultimate")


# -- point-cloud files ------------------------------------------------------------

def write_cloud(path: str | Path, cloud: PointCloud, spec_id: str, category: str) -> None:
    """Write ``<path>`` (LE f32, n x 6 row-major) and ``<path>.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(cloud.points, dtype="<f4").tobytes())
    sidecar = {"id": spec_id, "category": category, "n": cloud.n}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, sort_keys=True) + "\n")


def read_cloud(path: str | Path) -> tuple[PointCloud, dict]:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    if raw.size != meta["n"] * 6:
        raise ValueError(f"{path}: expected {meta['n'] * 6} floats, found {raw.size}")
    return PointCloud(raw.reshape(meta["n"], 6).astype(np.float64)), meta
