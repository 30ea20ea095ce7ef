"""Synthetic video sequences with analytically exact flow and masks.

Scenes are textured shapes translating over a textured, optionally panning
background. Objects are drawn in three layers: static distractors (same look as
the foreground, never labeled), moving foreground objects, and occluders on top.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from ..errors import FormatError, SpecError
from .fileio import read_flo, read_mask, read_ppm, write_flo, write_pgm, write_ppm
from .flowcodec import decode_flow, default_max_mag, encode_flow

ATTRIBUTES = ("AC", "BC", "CS", "DB", "DE", "EA", "FM", "HO", "IO", "LR", "MB", "OC", "OV", "SC", "SV")
SHAPES = ("square", "disc", "polygon")


@dataclass
class ObjectSpec:
    shape: str = "square"
    size: int = 16
    texture_seed: int = 0
    velocity: tuple = (2.0, 0.0)  # (u, v) px/frame relative to the background
    start: tuple | None = None  # (x, y) of the top-left corner at frame 0, in image pixels
    occluder: bool = False
    static: bool = False
    vertices: int = 6

    @property
    def foreground(self) -> bool:
        return not (self.occluder or self.static)


@dataclass
class SceneSpec:
    width: int = 64
    height: int = 64
    frames: int = 8
    objects: list = field(default_factory=lambda: [ObjectSpec()])
    background_seed: int = 0
    camera_pan: tuple = (0.0, 0.0)
    attributes: tuple = ()

    def __post_init__(self):
        self.objects = [o if isinstance(o, ObjectSpec) else ObjectSpec(**o) for o in self.objects]
        self.camera_pan = tuple(self.camera_pan)
        self.attributes = tuple(self.attributes)
        if self.frames < 2:
            raise SpecError(f"a sequence needs at least 2 frames, got {self.frames}")
        for i, o in enumerate(self.objects):
            if o.shape not in SHAPES:
                raise SpecError(f"object {i}: unknown shape {o.shape!r}")
            o.velocity = tuple(float(x) for x in o.velocity)
            if o.start is not None:
                o.start = tuple(float(x) for x in o.start)
        for tag in self.attributes:
            if tag not in ATTRIBUTES:
                raise SpecError(f"unknown attribute tag {tag!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class SequenceDataset:
    """In-memory sequence: ``frames[t]`` (h, w, 3) in [0, 1], ``flow[t]`` (h, w, 2) for t -> t+1."""

    frames: list
    flow: list
    flow_rgb: list
    gt_mask: list
    manifest: dict = field(default_factory=dict)
    name: str = ""

    def __len__(self):
        return len(self.frames)


# ---------------------------------------------------------------- rendering


def make_texture(seed: int, h: int, w: int, smooth: float, tint=None) -> np.ndarray:
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((h, w, 3))
    tex = np.stack([ndimage.gaussian_filter(noise[..., c], smooth, mode="wrap") for c in range(3)], axis=-1)
    tex = (tex - tex.min()) / (np.ptp(tex) + 1e-12)
    if tint is None:
        tint = rng.uniform(0.3, 1.0, size=3)
    return np.clip(0.15 + 0.7 * tex * tint, 0.0, 1.0)


def _shape_mask(o: ObjectSpec, ly: np.ndarray, lx: np.ndarray) -> np.ndarray:
    """Indicator of object-local pixel coordinates inside the shape's ``size x size`` box."""
    s = o.size
    inside = (lx >= 0) & (lx < s) & (ly >= 0) & (ly < s)
    if o.shape == "square":
        return inside
    cy = cx = (s - 1) / 2.0
    if o.shape == "disc":
        return inside & ((ly - cy) ** 2 + (lx - cx) ** 2 <= (s / 2.0) ** 2)
    rng = np.random.default_rng(o.texture_seed + 7919)
    n = max(3, o.vertices)
    ang = np.sort(rng.uniform(0, 2 * np.pi, n))
    rad = rng.uniform(0.6, 1.0, n) * s / 2.0
    vy, vx = cy + rad * np.sin(ang), cx + rad * np.cos(ang)
    # even-odd rule against the polygon edges
    hit = np.zeros(ly.shape, dtype=bool)
    for i in range(n):
        y0, x0, y1, x1 = vy[i], vx[i], vy[(i + 1) % n], vx[(i + 1) % n]
        crosses = (y0 > ly) != (y1 > ly)
        xint = x0 + (ly - y0) * (x1 - x0) / np.where(y1 != y0, y1 - y0, 1.0)
        hit ^= crosses & (lx < xint)
    return inside & hit


def _sample(tex: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Bilinear lookup with wraparound; exact at integer coordinates."""
    h, w = tex.shape[:2]
    y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
    fy, fx = (ys - y0)[..., None], (xs - x0)[..., None]
    y0, x0 = y0 % h, x0 % w
    y1, x1 = (y0 + 1) % h, (x0 + 1) % w
    return ((1 - fy) * (1 - fx) * tex[y0, x0] + (1 - fy) * fx * tex[y0, x1]
            + fy * (1 - fx) * tex[y1, x0] + fy * fx * tex[y1, x1])


def _image_velocity(o: ObjectSpec, pan) -> tuple:
    if o.occluder or o.static:
        return (pan[0], pan[1])
    return (o.velocity[0] + pan[0], o.velocity[1] + pan[1])


def _choose_starts(spec: SceneSpec, rng: np.random.Generator) -> list:
    starts = []
    for o in spec.objects:
        vu, vv = _image_velocity(o, spec.camera_pan)
        if o.start is not None:
            starts.append(o.start)
            continue
        pos = []
        for extent, vel in ((spec.width, vu), (spec.height, vv)):
            travel = vel * (spec.frames - 1)
            lo, hi = -min(0.0, travel), extent - o.size - max(0.0, travel)
            pos.append(float(rng.integers(int(np.ceil(lo)), int(np.floor(hi)) + 1)) if hi >= lo
                       else (extent - o.size) / 2.0 - travel / 2.0)
        starts.append(tuple(pos))
    return starts


def render(spec: SceneSpec, seed: int) -> SequenceDataset:
    """Render frames, exact flow, and masks in memory."""
    rng = np.random.default_rng(seed)
    h, w, n = spec.height, spec.width, spec.frames
    bg = make_texture(spec.background_seed * 1000003 + seed, h + 32, w + 32, smooth=3.0)
    textures = [make_texture(o.texture_seed, o.size, o.size, smooth=1.0) for o in spec.objects]
    starts = _choose_starts(spec, rng)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    pan = spec.camera_pan
    layers = sorted(range(len(spec.objects)),
                    key=lambda i: (0 if spec.objects[i].static else 1 if spec.objects[i].foreground else 2))

    frames, masks, flows = [], [], []
    for t in range(n):
        img = _sample(bg, ys - pan[1] * t, xs - pan[0] * t)
        flow = np.empty((h, w, 2))
        flow[..., 0], flow[..., 1] = pan
        fg = np.zeros((h, w), dtype=bool)
        for i in layers:
            o = spec.objects[i]
            vu, vv = _image_velocity(o, pan)
            oy, ox = starts[i][1] + vv * t, starts[i][0] + vu * t
            ly, lx = ys - oy, xs - ox
            cover = _shape_mask(o, ly, lx)
            if not cover.any() and o.foreground:
                raise SpecError(f"object {i} ({o.shape}) leaves the frame entirely at frame {t}")
            img[cover] = _sample(textures[i], ly[cover], lx[cover])
            flow[cover] = (vu, vv)
            if o.foreground:
                fg |= cover
            else:
                fg &= ~cover
        frames.append(np.clip(img, 0.0, 1.0))
        masks.append(fg)
        flows.append(flow)
    flows = flows[:-1]
    max_mag = default_max_mag(flows)
    flow_rgb = [encode_flow(f, max_mag) for f in flows]
    manifest = {
        "seed": seed,
        "spec": spec.to_dict(),
        "attributes": list(spec.attributes),
        "max_mag": max_mag,
        "frames": n,
        "size": [w, h],
    }
    return SequenceDataset(frames, flows, flow_rgb, masks, manifest)


# ---------------------------------------------------------------- on-disk layout


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_sequence(ds: SequenceDataset, seq_dir) -> Path:
    """Write the directory tree; ``manifest.json`` goes last and lists every file's SHA-256."""
    seq_dir = Path(seq_dir)
    for sub in ("frames", "flow", "flow_rgb", "masks"):
        (seq_dir / sub).mkdir(parents=True, exist_ok=True)
    files = []
    for t, img in enumerate(ds.frames):
        files.append(f"frames/{t:05d}.ppm")
        write_ppm(seq_dir / files[-1], img)
        files.append(f"masks/{t:05d}.pgm")
        write_pgm(seq_dir / files[-1], ds.gt_mask[t])
    for t, (f, rgb) in enumerate(zip(ds.flow, ds.flow_rgb)):
        files.append(f"flow/{t:05d}.flo")
        write_flo(seq_dir / files[-1], f)
        files.append(f"flow_rgb/{t:05d}.ppm")
        write_ppm(seq_dir / files[-1], rgb)
    manifest = dict(ds.manifest)
    manifest["files"] = {name: _sha256(seq_dir / name) for name in sorted(files)}
    (seq_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return seq_dir / "manifest.json"


def synth_generate(spec: SceneSpec, seed: int, seq_dir) -> SequenceDataset:
    """Render ``spec`` deterministically and write it under ``seq_dir``."""
    ds = render(spec, seed)
    ds.name = Path(seq_dir).name
    write_sequence(ds, seq_dir)
    return ds


def verify_sequence(seq_dir) -> list:
    """Problems found in a sequence directory (empty when the manifest checks out)."""
    seq_dir = Path(seq_dir)
    path = seq_dir / "manifest.json"
    if not path.exists():
        return [f"{seq_dir}: manifest.json missing"]
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        return [f"{path}: unreadable manifest ({exc})"]
    problems = []
    for name, digest in manifest.get("files", {}).items():
        f = seq_dir / name
        if not f.exists():
            problems.append(f"{f}: missing")
        elif _sha256(f) != digest:
            problems.append(f"{f}: checksum mismatch")
    return problems


def load_sequence(seq_dir, decode_flow_rgb: bool = False) -> SequenceDataset:
    """Read a sequence directory back into memory.

    Exact ``.flo`` files are preferred; when only ``flow_rgb`` images exist and
    ``decode_flow_rgb`` is set, flow is recovered from the color coding.
    """
    seq_dir = Path(seq_dir)
    manifest_path = seq_dir / "manifest.json"
    manifest = {}
    if manifest_path.exists():
        try:
            manifest = json.loads(manifest_path.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"corrupt manifest: {exc.msg}", offset=exc.pos, path=manifest_path) from None
    frame_files = sorted((seq_dir / "frames").glob("*.ppm"))
    if not frame_files:
        raise FormatError("no frames found", path=seq_dir / "frames")
    frames = [read_ppm(p) / 255.0 for p in frame_files]
    mask_dir = seq_dir / "masks"
    masks = [read_mask(p) for p in sorted(mask_dir.glob("*.pgm"))] if mask_dir.exists() else []
    n = len(frames)
    flow_dir, rgb_dir = seq_dir / "flow", seq_dir / "flow_rgb"
    flow_files = sorted(flow_dir.glob("*.flo")) if flow_dir.exists() else []
    rgb_files = sorted(rgb_dir.glob("*.ppm")) if rgb_dir.exists() else []
    max_mag = float(manifest.get("max_mag", 0.0)) or None
    if len(flow_files) == n - 1:
        flows = [read_flo(p) for p in flow_files]
    elif decode_flow_rgb and len(rgb_files) == n - 1 and max_mag:
        flows = [decode_flow(read_ppm(p), max_mag) for p in rgb_files]
    else:
        raise FormatError(f"expected {n - 1} flow files, found {len(flow_files)}", path=flow_dir)
    if len(rgb_files) == n - 1:
        flow_rgb = [read_ppm(p) / 255.0 for p in rgb_files]
    else:
        flow_rgb = [encode_flow(f, max_mag or default_max_mag(flows)) for f in flows]
    return SequenceDataset(frames, flows, flow_rgb, masks, manifest, name=seq_dir.name)


# ---------------------------------------------------------------- scene sampling


def sample_scene(seed: int, size: int = 64, frames: int = 8, attributes=()) -> SceneSpec:
    """Random scene whose content follows the requested attribute tags.

    ``BC`` adds static lookalike distractors (same texture family as the
    foreground), ``CS`` a camera pan, ``FM`` faster motion, ``OC`` an
    occluder crossing the scene, and ``SC`` irregular polygon shapes.
    Other tags are carried as labels only.
    """
    rng = np.random.default_rng(seed)
    attributes = tuple(attributes)
    obj_size = max(6, size // 4)
    # integer motion keeps masks exactly related by the rounded flow
    lo, hi = (3, 4) if "FM" in attributes else (1, 2)
    vel = np.zeros(2)
    while not lo <= np.abs(vel).max() <= hi:
        vel = rng.integers(-hi, hi + 1, 2).astype(float)
    shape = "polygon" if "SC" in attributes else str(rng.choice(["square", "disc"]))
    tex = int(rng.integers(1 << 30))
    objects = [ObjectSpec(shape=shape, size=obj_size, texture_seed=tex,
                          velocity=(float(vel[0]), float(vel[1])))]
    if "BC" in attributes:
        for _ in range(2):
            objects.append(ObjectSpec(shape=shape, size=obj_size, texture_seed=tex, static=True))
    if "OC" in attributes:
        objects.append(ObjectSpec(shape="square", size=max(4, size // 8), texture_seed=tex + 1, occluder=True))
    pan = (0.0, 0.0)
    if "CS" in attributes:
        pan = tuple(float(v) for v in rng.choice([-1.0, 1.0], 2) * rng.integers(0, 2, 2))
    return SceneSpec(width=size, height=size, frames=frames, objects=objects,
                     background_seed=int(rng.integers(1 << 30)), camera_pan=pan, attributes=attributes)
