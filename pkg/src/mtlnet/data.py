"""Synthetic driving scenes and the file formats around them.

Random numbers
--------------
All randomness comes from two fully specified generators so that a dataset
is reproducible bit-for-bit by any implementation:

* ``splitmix64(x)``: ``x += 0x9E3779B97F4A7C15``; ``z = x``;
  ``z = (z ^ z>>30) * 0xBF58476D1CE4E5B9``; ``z = (z ^ z>>27) * 0x94D049BB133111EB``;
  return ``z ^ z>>31`` (all mod 2**64).
* A sample's key is ``splitmix64(splitmix64(seed) ^ index)``. Scalar draws use
  xorshift64* seeded with ``splitmix64(key ^ stream)`` (``x ^= x>>12;
  x ^= x<<25; x ^= x>>27; out = x * 0x2545F4914F6CDD1D``). A uniform double is
  ``(out >> 11) * 2**-53``.
* Per-pixel noise is counter based: value ``i`` of a field is
  ``splitmix64(key ^ stream + i * 0x9E3779B97F4A7C15)``, converted the same way.

Because each sample depends only on ``(seed, index)``, generation order and
parallelism cannot change content.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15

SEG_CLASSES = ("background", "road", "sidewalk")
SEG_CLASSES_FISHEYE = ("background", "road", "lane", "curb")
DET_CLASSES = ("car", "person", "cyclist")


def splitmix64(x: int) -> int:
    x = (x + GOLDEN) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _splitmix64_np(x: np.ndarray) -> np.ndarray:
    x = x + np.uint64(GOLDEN)
    z = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def sample_key(seed: int, index: int) -> int:
    return splitmix64(splitmix64(seed & MASK64) ^ (index & MASK64))


class XorShift64Star:
    """Scalar stream; see the module docstring for the exact recurrence."""

    def __init__(self, key: int, stream: int = 0):
        self.state = splitmix64(key ^ stream) or GOLDEN

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK64
        x ^= x >> 27
        self.state = x
        return (x * 0x2545F4914F6CDD1D) & MASK64

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return lo + (hi - lo) * ((self.next_u64() >> 11) * 2.0 ** -53)

    def randint(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi] inclusive."""
        return lo + int(self.uniform() * (hi - lo + 1)) if hi > lo else lo

    def permutation(self, n: int) -> list:
        # Fisher-Yates from the top
        out = list(range(n))
        for i in range(n - 1, 0, -1):
            j = int(self.uniform() * (i + 1))
            out[i], out[j] = out[j], out[i]
        return out


def noise_field(key: int, stream: int, shape: tuple) -> np.ndarray:
    """Counter-based uniform [0, 1) field."""
    n = int(np.prod(shape))
    base = np.uint64((key ^ stream) & MASK64)
    with np.errstate(over="ignore"):
        ctr = np.arange(n, dtype=np.uint64) * np.uint64(GOLDEN) + base
        bits = _splitmix64_np(ctr)
    return ((bits >> np.uint64(11)).astype(np.float64) * 2.0 ** -53).reshape(shape)


# --------------------------------------------------------------------------
# scene generation


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    size: tuple = (96, 128)
    counts: dict = field(default_factory=lambda: {"car": (0, 2), "person": (0, 1), "cyclist": (0, 1)})
    horizon: tuple = (0.35, 0.45)  # fraction of H
    noise: float = 0.08
    road_bottom_width: tuple = (0.45, 0.75)  # fraction of W
    road_top_width: tuple = (0.06, 0.12)
    sidewalk_width: tuple = (0.5, 0.8)  # fraction of road half-width at the same row
    grid_stride: int = 32  # objects never share a detection cell
    max_retries: int = 30
    seg_variant: str = "kitti3"  # or "fisheye4"

    def __post_init__(self):
        object.__setattr__(self, "size", tuple(int(v) for v in self.size))
        object.__setattr__(self, "horizon", tuple(float(v) for v in self.horizon))
        object.__setattr__(self, "counts", {k: tuple(int(x) for x in v) for k, v in dict(self.counts).items()})
        for name in ("road_bottom_width", "road_top_width", "sidewalk_width"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        h, w = self.size
        if h <= 0 or w <= 0 or h % 32 or w % 32:
            raise ValueError(f"scene size {self.size} must be positive multiples of 32")
        if not 0 < self.horizon[0] <= self.horizon[1] < 1:
            raise ValueError("horizon fractions must satisfy 0 < lo <= hi < 1")
        for k, (lo, hi) in self.counts.items():
            if k not in DET_CLASSES or lo < 0 or hi < lo:
                raise ValueError(f"bad object count range for {k!r}")
        if self.seg_variant not in ("kitti3", "fisheye4"):
            raise ValueError(f"unknown seg_variant {self.seg_variant!r}")

    @property
    def seg_classes(self) -> tuple:
        return SEG_CLASSES if self.seg_variant == "kitti3" else SEG_CLASSES_FISHEYE

    def to_json(self) -> dict:
        d = asdict(self)
        d["counts"] = {k: list(v) for k, v in self.counts.items()}
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_json(cls, d: dict) -> "SceneConfig":
        return cls(**d)


@dataclass
class Sample:
    image: np.ndarray  # float32 [3, H, W] in [0, 1]
    seg_labels: np.ndarray  # uint8 [H, W]
    boxes: list  # (class_idx, cx, cy, w, h) normalised
    image_id: str
    dropped: int = 0  # objects that could not be placed

    def horizon_row(self) -> Optional[int]:
        rows = np.nonzero((self.seg_labels != 0).any(axis=1))[0]
        return int(rows[0]) if rows.size else None


_PALETTE = {
    "car": (0.85, 0.15, 0.12),
    "person": (0.15, 0.25, 0.9),
    "cyclist": (0.95, 0.85, 0.1),
}


def _shape_mask(kind: str, w: int, h: int) -> np.ndarray:
    """Boolean [h, w] mask for an object drawn in a w x h box."""
    yy, xx = np.mgrid[0:h, 0:w]
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    if kind == "car":
        m = np.ones((h, w), dtype=bool)
    elif kind == "person":
        m = ((xx - cx) / (w / 2.0)) ** 2 + ((yy - cy) / (h / 2.0)) ** 2 <= 1.0
    else:
        # two wheels side by side, joined by a frame bar across the middle
        r = h / 2.0
        c1 = (xx - (r - 0.5)) ** 2 + (yy - cy) ** 2 <= r * r
        c2 = (xx - (w - r - 0.5)) ** 2 + (yy - cy) ** 2 <= r * r
        bar = np.abs(yy - cy) <= max(1.0, h / 8.0)
        m = c1 | c2 | bar
    return m


def _object_size(kind: str, rng: XorShift64Star, h_img: int, w_img: int) -> tuple:
    if kind == "car":
        w = rng.uniform(0.16, 0.32) * w_img
        h = w * rng.uniform(0.5, 0.8)
    elif kind == "person":
        h = rng.uniform(0.25, 0.45) * h_img
        w = h * rng.uniform(0.3, 0.42)
    else:
        h = rng.uniform(0.14, 0.24) * h_img
        w = h * rng.uniform(1.9, 2.3)
    return max(4, int(round(w))), max(4, int(round(h)))


def _roadway(cfg: SceneConfig, rng: XorShift64Star, h: int, w: int) -> tuple:
    hr = int(round(rng.uniform(*cfg.horizon) * h))
    xv = w * (0.5 + rng.uniform(-0.12, 0.12))
    xb = w * (0.5 + rng.uniform(-0.1, 0.1))
    top = 0.5 * w * rng.uniform(*cfg.road_top_width)
    bot = 0.5 * w * rng.uniform(*cfg.road_bottom_width)
    sw = rng.uniform(*cfg.sidewalk_width)
    labels = np.zeros((h, w), dtype=np.uint8)
    ys = np.arange(hr, h)
    t = (ys - hr) / max(1, h - 1 - hr)
    centre = xv + t * (xb - xv)
    half = top + t * (bot - top)
    xs = np.arange(w)[None, :] + 0.5
    d = np.abs(xs - centre[:, None])
    band = labels[hr:]
    road = d <= half[:, None]
    side = (~road) & (d <= (half * (1 + sw) + 1.0)[:, None])
    if cfg.seg_variant == "kitti3":
        band[road] = 1
        band[side] = 2
    else:
        band[road] = 1
        band[side] = 3  # curb
        lane = road & (np.abs(xs - centre[:, None]) <= np.maximum(0.6, 0.04 * half)[:, None])
        dashes = ((ys - hr) // max(2, h // 24)) % 2 == 0
        band[lane & dashes[:, None]] = 2
    return labels, hr


def generate(cfg: SceneConfig, index: int) -> Sample:
    """One synthetic scene, a pure function of ``(cfg, index)``."""
    h, w = cfg.size
    key = sample_key(cfg.seed, index)
    rng = XorShift64Star(key, stream=1)
    labels, hr = _roadway(cfg, rng, h, w)

    colors = {
        "sky": np.array([0.55, 0.72, 0.92]) + rng.uniform(-0.05, 0.05),
        "ground": np.array([0.32, 0.52, 0.26]) + rng.uniform(-0.05, 0.05),
        1: np.array([0.42, 0.42, 0.45]) + rng.uniform(-0.04, 0.04),
        2: np.array([0.95, 0.95, 0.95]) if cfg.seg_variant == "fisheye4" else np.array([0.78, 0.58, 0.64]),
        3: np.array([0.78, 0.58, 0.64]),
    }
    img = np.empty((h, w, 3), dtype=np.float64)
    img[:hr] = colors["sky"]
    img[hr:] = colors["ground"]
    for cls in (1, 2, 3):
        img[labels == cls] = colors[cls]

    # objects
    placed: list = []
    occupied_cells: set = set()
    dropped = 0
    order = [k for k in DET_CLASSES for _ in range(rng.randint(*cfg.counts.get(k, (0, 0))))]
    for kind in order:
        ow, oh = _object_size(kind, rng, h, w)
        ow, oh = min(ow, w - 2), min(oh, h - 2)
        ok = False
        for _ in range(cfg.max_retries):
            x1 = rng.randint(0, w - ow)
            y2_lo = min(h, hr + max(4, oh // 2))
            y2 = rng.randint(y2_lo, h)
            y1 = y2 - oh
            if y1 < 0:
                continue
            mask = _shape_mask(kind, ow, oh)
            ys, xs = np.nonzero(mask)
            bx1, bx2 = x1 + int(xs.min()), x1 + int(xs.max()) + 1
            by1, by2 = y1 + int(ys.min()), y1 + int(ys.max()) + 1
            cell = (int(((bx1 + bx2) / 2) // cfg.grid_stride), int(((by1 + by2) / 2) // cfg.grid_stride))
            if cell in occupied_cells:
                continue
            if any(bx1 < p[2] + 2 and p[0] < bx2 + 2 and by1 < p[3] + 2 and p[1] < by2 + 2 for p in placed):
                continue
            ok = True
            break
        if not ok:
            dropped += 1
            continue
        occupied_cells.add(cell)
        placed.append((bx1, by1, bx2, by2, kind, x1, y1, mask))

    boxes = []
    for bx1, by1, bx2, by2, kind, x1, y1, mask in placed:
        base = np.array(_PALETTE[kind]) + rng.uniform(-0.06, 0.06)
        region = img[y1:y1 + mask.shape[0], x1:x1 + mask.shape[1]]
        shade = 0.85 + 0.15 * noise_field(key, 100 + len(boxes), mask.shape)
        region[mask] = np.clip(base[None, :] * shade[mask][:, None], 0, 1)
        labels[y1:y1 + mask.shape[0], x1:x1 + mask.shape[1]][mask] = 0
        boxes.append((DET_CLASSES.index(kind), (bx1 + bx2) / 2 / w, (by1 + by2) / 2 / h,
                      (bx2 - bx1) / w, (by2 - by1) / h))

    noise = noise_field(key, 7, (h, w, 3)) - 0.5
    img = np.clip(img + cfg.noise * 2 * noise, 0.0, 1.0)
    # quantise so the in-memory sample equals its PPM round-trip
    img8 = np.round(img * 255).astype(np.uint8)
    image = (img8.astype(np.float32) / 255.0).transpose(2, 0, 1).copy()
    return Sample(image, labels, boxes, f"{index:06d}", dropped)


def image_to_uint8(image: np.ndarray) -> np.ndarray:
    """[3, H, W] float in [0, 1] -> [H, W, 3] uint8."""
    return np.clip(np.round(np.asarray(image) * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def uint8_to_image(arr: np.ndarray) -> np.ndarray:
    return (np.asarray(arr).astype(np.float32) / 255.0).transpose(2, 0, 1).copy()


# --------------------------------------------------------------------------
# PPM / PGM


class FormatError(ValueError):
    pass


def _parse_header(buf: bytes, magic: bytes) -> tuple:
    if buf[:2] != magic:
        raise FormatError(f"expected {magic!r} header, got {buf[:2]!r}")
    pos, fields = 2, []
    while len(fields) < 3:
        if pos >= len(buf):
            raise FormatError("truncated header")
        c = buf[pos:pos + 1]
        if c == b"#":
            end = buf.find(b"\n", pos)
            if end < 0:
                raise FormatError("unterminated comment in header")
            pos = end + 1
        elif c.isspace():
            pos += 1
        else:
            m = re.compile(rb"\d+").match(buf, pos)
            if not m:
                raise FormatError(f"malformed header near byte {pos}")
            fields.append(int(m.group()))
            pos = m.end()
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after maxval")
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}")
    if width <= 0 or height <= 0:
        raise FormatError("non-positive image size")
    return width, height, pos + 1


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    w, h, start = _parse_header(buf, magic)
    n = w * h * channels
    payload = buf[start:start + n]
    if len(payload) != n:
        raise FormatError(f"truncated payload: {len(payload)} of {n} bytes")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape(h, w, channels) if channels == 3 else arr.reshape(h, w)


def _write_netpbm(path, arr: np.ndarray, magic: bytes, comments: Sequence[str] = ()) -> None:
    a = np.ascontiguousarray(arr)
    if a.dtype != np.uint8:
        raise FormatError("only 8-bit images are supported")
    h, w = a.shape[:2]
    head = magic + b"\n" + b"".join(b"# " + c.encode() + b"\n" for c in comments)
    head += f"{w} {h}\n255\n".encode()
    with open(path, "wb") as fh:
        fh.write(head + a.tobytes())


def read_ppm(path) -> np.ndarray:
    """Binary P6 -> uint8 [H, W, 3]."""
    return _read_netpbm(path, b"P6", 3)


def write_ppm(path, arr: np.ndarray, comments: Sequence[str] = ()) -> None:
    a = np.asarray(arr)
    if a.ndim != 3 or a.shape[2] != 3:
        raise FormatError("PPM needs an [H, W, 3] array")
    _write_netpbm(path, a, b"P6", comments)


def read_pgm(path) -> np.ndarray:
    """Binary P5 -> uint8 [H, W]."""
    return _read_netpbm(path, b"P5", 1)


def write_pgm(path, arr: np.ndarray, comments: Sequence[str] = ()) -> None:
    a = np.asarray(arr)
    if a.ndim != 2:
        raise FormatError("PGM needs an [H, W] array")
    _write_netpbm(path, a, b"P5", comments)


# --------------------------------------------------------------------------
# KITTI labels


@dataclass(frozen=True)
class KittiRecord:
    cls: str
    truncation: float
    occlusion: int
    alpha: float
    box: tuple  # x1, y1, x2, y2 pixels
    dims: tuple  # h, w, l metres
    location: tuple  # x, y, z camera coordinates
    rotation_y: float

    @property
    def dont_care(self) -> bool:
        return self.cls == "DontCare"


def parse_kitti_label(line: str) -> KittiRecord:
    parts = line.split()
    if len(parts) != 15:
        raise ValueError(f"KITTI label needs 15 fields, got {len(parts)}")
    try:
        nums = [float(v) for v in parts[1:]]
    except ValueError as e:
        raise ValueError(f"non-numeric KITTI field in {line!r}") from e
    occ = nums[1]
    if occ != int(occ):
        raise ValueError("occlusion must be an integer")
    return KittiRecord(parts[0], nums[0], int(occ), nums[2], tuple(nums[3:7]), tuple(nums[7:10]),
                       tuple(nums[10:13]), nums[13])


def format_kitti_label(r: KittiRecord) -> str:
    vals = [r.truncation, r.occlusion, r.alpha, *r.box, *r.dims, *r.location, r.rotation_y]
    return " ".join([r.cls] + [repr(int(v)) if i == 1 else repr(float(v)) for i, v in enumerate(vals)])


def kitti_to_boxes(records: Iterable[KittiRecord], img_size: tuple, class_map: dict) -> list:
    """Normalised (class_idx, cx, cy, w, h) rows; DontCare, unmapped classes
    and boxes under one pixel are dropped."""
    h_img, w_img = img_size
    out = []
    for r in records:
        if r.dont_care or r.cls not in class_map:
            continue
        x1, y1, x2, y2 = r.box
        x1, x2 = max(0.0, x1), min(float(w_img), x2)
        y1, y2 = max(0.0, y1), min(float(h_img), y2)
        if x2 - x1 < 1 or y2 - y1 < 1:
            continue
        out.append((class_map[r.cls], (x1 + x2) / 2 / w_img, (y1 + y2) / 2 / h_img,
                    (x2 - x1) / w_img, (y2 - y1) / h_img))
    return out


# --------------------------------------------------------------------------
# resizing


def _align_coords(n_out: int, n_in: int) -> np.ndarray:
    if n_out == 1:
        return np.zeros(1)
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def resize_bilinear(image: np.ndarray, size: tuple) -> np.ndarray:
    """Corner-aligned bilinear resize of a [C, H, W] array."""
    c, h, w = image.shape
    th, tw = size
    if th <= 0 or tw <= 0:
        raise ValueError("target size must be positive")
    if (th, tw) == (h, w):
        return image.copy()
    ys, xs = _align_coords(th, h), _align_coords(tw, w)
    y0 = np.minimum(np.floor(ys).astype(int), h - 1)
    x0 = np.minimum(np.floor(xs).astype(int), w - 1)
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    src = image.astype(np.float64)
    top = src[:, y0][:, :, x0] * (1 - fx) + src[:, y0][:, :, x1] * fx
    bot = src[:, y1][:, :, x0] * (1 - fx) + src[:, y1][:, :, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(image.dtype)


def resize_labels(labels: np.ndarray, size: tuple) -> np.ndarray:
    """Nearest-neighbour resize of an [H, W] label map, same corner convention."""
    h, w = labels.shape
    th, tw = size
    ys = np.minimum(np.floor(_align_coords(th, h) + 0.5).astype(int), h - 1)
    xs = np.minimum(np.floor(_align_coords(tw, w) + 0.5).astype(int), w - 1)
    return labels[ys][:, xs]


def rescale_boxes(boxes_px: Sequence, src_size: tuple, dst_size: tuple) -> list:
    """Scale pixel (x1, y1, x2, y2) boxes between image sizes (H, W)."""
    sy, sx = dst_size[0] / src_size[0], dst_size[1] / src_size[1]
    return [(b[0] * sx, b[1] * sy, b[2] * sx, b[3] * sy) for b in boxes_px]


def boxes_to_corners(boxes: Sequence, img_size: tuple) -> list:
    """Normalised (class, cx, cy, w, h) -> (class, (x1, y1, x2, y2)) pixels."""
    h, w = img_size
    return [(int(c), ((cx - bw / 2) * w, (cy - bh / 2) * h, (cx + bw / 2) * w, (cy + bh / 2) * h))
            for c, cx, cy, bw, bh in boxes]


# --------------------------------------------------------------------------
# dataset directories


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_sample(out: Path, s: Sample) -> None:
    write_ppm(out / "images" / f"{s.image_id}.ppm", image_to_uint8(s.image))
    write_pgm(out / "seg" / f"{s.image_id}.pgm", s.seg_labels)
    with open(out / "boxes" / f"{s.image_id}.jsonl", "w") as fh:
        for c, cx, cy, bw, bh in s.boxes:
            fh.write(json.dumps({"class": DET_CLASSES[c], "class_idx": c, "cx": cx, "cy": cy,
                                 "w": bw, "h": bh}, sort_keys=True) + "\n")


def write_dataset(cfg: SceneConfig, count: int, out_dir, start: int = 0) -> dict:
    """Generate ``count`` samples into ``out_dir``; returns the meta document."""
    out = Path(out_dir)
    for sub in ("images", "seg", "boxes"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    ids, dropped = [], 0
    for i in range(start, start + count):
        s = generate(cfg, i)
        write_sample(out, s)
        ids.append(s.image_id)
        dropped += s.dropped
    checksums = {}
    for sid in ids:
        for sub, ext in (("images", "ppm"), ("seg", "pgm"), ("boxes", "jsonl")):
            rel = f"{sub}/{sid}.{ext}"
            checksums[rel] = _sha256(out / rel)
    digest = hashlib.sha256("".join(f"{k}:{v}\n" for k, v in sorted(checksums.items())).encode()).hexdigest()
    meta = {"config": cfg.to_json(), "count": count, "start": start, "ids": ids,
            "seg_classes": list(cfg.seg_classes), "det_classes": list(DET_CLASSES),
            "dropped_objects": dropped, "checksums": checksums, "dataset_sha256": digest}
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta


def read_sample(root, image_id: str) -> Sample:
    root = Path(root)
    image = uint8_to_image(read_ppm(root / "images" / f"{image_id}.ppm"))
    labels = read_pgm(root / "seg" / f"{image_id}.pgm").copy()
    boxes = []
    p = root / "boxes" / f"{image_id}.jsonl"
    if p.exists():
        for line in p.read_text().splitlines():
            if line.strip():
                r = json.loads(line)
                boxes.append((int(r["class_idx"]), float(r["cx"]), float(r["cy"]), float(r["w"]), float(r["h"])))
    return Sample(image, labels, boxes, image_id)


class Dataset:
    """Samples from a dataset directory (or generated in memory), cached."""

    def __init__(self, samples: Sequence[Sample], seg_classes=SEG_CLASSES, det_classes=DET_CLASSES):
        self.samples = list(samples)
        self.seg_classes = tuple(seg_classes)
        self.det_classes = tuple(det_classes)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    @classmethod
    def load(cls, root) -> "Dataset":
        root = Path(root)
        meta = json.loads((root / "meta.json").read_text())
        return cls([read_sample(root, i) for i in meta["ids"]], meta.get("seg_classes", SEG_CLASSES),
                   meta.get("det_classes", DET_CLASSES))

    @classmethod
    def synthetic(cls, cfg: SceneConfig, count: int, start: int = 0) -> "Dataset":
        return cls([generate(cfg, i) for i in range(start, start + count)], cfg.seg_classes)

    def batch(self, indices: Sequence[int]) -> tuple:
        imgs = np.stack([self.samples[i].image for i in indices])
        labels = np.stack([self.samples[i].seg_labels for i in indices])
        boxes = [self.samples[i].boxes for i in indices]
        return imgs, labels, boxes
