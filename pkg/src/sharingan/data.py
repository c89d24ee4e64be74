"""Annotation files and the procedural toy gaze world."""

from __future__ import annotations

import io
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .person import PersonInput
from .tensor import interp_matrix


class AnnotationParseError(ValueError):
    def __init__(self, line_no: int, field_name: str, message: str):
        super().__init__(f"line {line_no}: field '{field_name}': {message}")
        self.line_no = line_no
        self.field_name = field_name


class GenerationError(RuntimeError):
    """Scene placement failed within the retry budget; use another seed."""


@dataclass
class AnnotationRecord:
    image_ref: str
    h_bbox: tuple[float, float, float, float]
    inout: int
    gaze_points: list[tuple[float, float]] = field(default_factory=list)

    def validate(self) -> None:
        x0, y0, x1, y1 = self.h_bbox
        if not (0.0 <= x0 <= x1 <= 1.0 and 0.0 <= y0 <= y1 <= 1.0):
            raise ValueError(f"invalid head box {self.h_bbox}")
        if self.inout not in (0, 1):
            raise ValueError(f"in-out label must be 0 or 1, got {self.inout}")
        if self.inout == 1 and not self.gaze_points:
            raise ValueError("an in-frame record needs at least one gaze point")
        for x, y in self.gaze_points:
            if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
                raise ValueError(f"gaze point {(x, y)} outside [0, 1]^2")

    @property
    def head_center(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.h_bbox
        return (x0 + x1) / 2.0, (y0 + y1) / 2.0


# ---------------------------------------------------------------------------
# Annotation file: image_ref, 4 box coords, inout, k, then k (x, y) pairs.
# ---------------------------------------------------------------------------

_BOX_FIELDS = ("x_min", "y_min", "x_max", "y_max")


def _num(text: str, line_no: int, name: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise AnnotationParseError(line_no, name, f"not a number: {text!r}") from None
    if not math.isfinite(value):
        raise AnnotationParseError(line_no, name, f"not finite: {text!r}")
    return value


def parse_annotation_line(line: str, line_no: int = 1) -> AnnotationRecord:
    parts = line.rstrip("\r\n").split("\t")
    if len(parts) < 7:
        raise AnnotationParseError(line_no, "record", f"expected at least 7 fields, got {len(parts)}")
    image_ref = parts[0]
    if not image_ref:
        raise AnnotationParseError(line_no, "image_ref", "empty")
    box = [_num(parts[1 + i], line_no, name) for i, name in enumerate(_BOX_FIELDS)]
    for value, name in zip(box, _BOX_FIELDS):
        if not 0.0 <= value <= 1.0:
            raise AnnotationParseError(line_no, name, f"{value} outside [0, 1]")
    if box[2] < box[0]:
        raise AnnotationParseError(line_no, "x_max", "x_max < x_min")
    if box[3] < box[1]:
        raise AnnotationParseError(line_no, "y_max", "y_max < y_min")
    if parts[5] not in ("0", "1"):
        raise AnnotationParseError(line_no, "inout", f"expected 0 or 1, got {parts[5]!r}")
    inout = int(parts[5])
    try:
        k = int(parts[6])
    except ValueError:
        raise AnnotationParseError(line_no, "k", f"not an integer: {parts[6]!r}") from None
    if k < 0:
        raise AnnotationParseError(line_no, "k", "negative point count")
    if len(parts) != 7 + 2 * k:
        raise AnnotationParseError(line_no, "record", f"k={k} requires {7 + 2 * k} fields, got {len(parts)}")
    if inout == 1 and k == 0:
        raise AnnotationParseError(line_no, "k", "in-frame record without gaze points")
    points = []
    for j in range(k):
        x = _num(parts[7 + 2 * j], line_no, f"x{j + 1}")
        y = _num(parts[8 + 2 * j], line_no, f"y{j + 1}")
        for value, name in ((x, f"x{j + 1}"), (y, f"y{j + 1}")):
            if not 0.0 <= value <= 1.0:
                raise AnnotationParseError(line_no, name, f"{value} outside [0, 1]")
        points.append((x, y))
    return AnnotationRecord(image_ref, tuple(box), inout, points)


def format_annotation(rec: AnnotationRecord) -> str:
    rec.validate()
    fields = [rec.image_ref, *(f"{v:.6f}" for v in rec.h_bbox), str(rec.inout), str(len(rec.gaze_points))]
    for x, y in rec.gaze_points:
        fields += [f"{x:.6f}", f"{y:.6f}"]
    return "\t".join(fields)


def load_annotations(source) -> list[AnnotationRecord]:
    """Parse an annotation file (path or iterable of lines); '#' lines and blank lines are skipped."""
    if isinstance(source, (str, os.PathLike)):
        with open(source, encoding="utf-8") as fh:
            lines = fh.readlines()
    else:
        lines = list(source)
    records = []
    for line_no, line in enumerate(lines, start=1):
        if not line.strip() or line.startswith("#"):
            continue
        records.append(parse_annotation_line(line, line_no))
    return records


def read_manifest(path) -> dict:
    """Key/value pairs of the '# seed=... params=...' header, if present."""
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("# seed="):
                head, _, params = line[2:].rstrip("\n").partition(" params=")
                return {"seed": int(head.split("=", 1)[1]), "params": json.loads(params) if params else {}}
    return {}


def save_annotations(records: Iterable[AnnotationRecord], path, header: Sequence[str] = ()) -> None:
    buf = io.StringIO()
    for line in header:
        buf.write(f"# {line}\n")
    for rec in records:
        buf.write(format_annotation(rec) + "\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


# ---------------------------------------------------------------------------
# Image helpers
# ---------------------------------------------------------------------------


def crop_head(image: np.ndarray, h_bbox: Sequence[float], size: int = 224) -> np.ndarray:
    """Bilinear crop of the normalized box region resampled to ``size`` x ``size``.

    Returns float64 pixels on the input's scale.
    """
    H, W = image.shape[:2]
    x0, y0, x1, y1 = h_bbox
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"head box {tuple(h_bbox)} has zero area")
    ry = interp_matrix(H, size, y0 * H, (y1 - y0) * H)
    rx = interp_matrix(W, size, x0 * W, (x1 - x0) * W)
    img = np.asarray(image, dtype=np.float64)
    rows = np.tensordot(ry, img, axes=(1, 0))  # [size, W, C]
    return np.tensordot(rx, rows, axes=(1, 1)).transpose(1, 0, 2)


def resize_image(image: np.ndarray, size: int) -> np.ndarray:
    return crop_head(image, (0.0, 0.0, 1.0, 1.0), size)


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_image(image: np.ndarray, path) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------------------
# Toy gaze world
# ---------------------------------------------------------------------------

BACKGROUND = (90, 90, 90)
MARKER_COLOR = (235, 200, 160)
TICK_COLOR = (0, 0, 0)
PALETTE = (
    (220, 40, 40),
    (40, 200, 60),
    (50, 90, 230),
    (230, 220, 40),
    (210, 50, 210),
    (40, 210, 210),
)


@dataclass(frozen=True)
class ToySceneSpec:
    """Generation parameters; geometry is in pixels of the square scene image."""

    seed: int = 0
    image_size: int = 112
    n_persons: int = 4
    n_objects: int = 3
    marker_size: float = 10.0
    tick_length: float = 9.0
    tick_width: float = 2.0
    head_window: float = 20.0
    disc_radius: float = 7.0
    crop_size: int = 32
    p_aim: float = 0.7
    p_offscreen: float = 0.2
    exit_margin: float = 0.02
    n_annotators: int = 1
    annotator_sigma: float = 0.02
    max_retries: int = 1000

    def params(self) -> dict:
        d = asdict(self)
        d.pop("seed")
        return d


@dataclass
class ToyPerson:
    center: tuple[float, float]  # pixels
    theta: float

    @property
    def direction(self) -> tuple[float, float]:
        return math.cos(self.theta), math.sin(self.theta)


@dataclass
class ToyObject:
    center: tuple[float, float]
    color: tuple[int, int, int]


@dataclass
class ToyScene:
    spec: ToySceneSpec
    image: np.ndarray
    persons: list[PersonInput]
    records: list[AnnotationRecord]
    people: list[ToyPerson]
    objects: list[ToyObject]


def _ray_disc_hit(origin, direction, center, radius) -> float | None:
    ox, oy = origin[0] - center[0], origin[1] - center[1]
    dx, dy = direction
    b = ox * dx + oy * dy
    c = ox * ox + oy * oy - radius * radius
    disc = b * b - c
    if disc < 0:
        return None
    t = -b - math.sqrt(disc)
    if t <= 0:
        t = -b + math.sqrt(disc)
    return t if t > 0 else None


def _exit(origin, direction, size: float) -> tuple[float, float, str]:
    """Where a ray from inside the square leaves it, and through which edge."""
    dx, dy = direction
    candidates = []
    if dx > 1e-12:
        candidates.append(((size - origin[0]) / dx, "right"))
    if dx < -1e-12:
        candidates.append((-origin[0] / dx, "left"))
    if dy > 1e-12:
        candidates.append(((size - origin[1]) / dy, "bottom"))
    if dy < -1e-12:
        candidates.append((-origin[1] / dy, "top"))
    t, edge = min(candidates)
    return origin[0] + t * dx, origin[1] + t * dy, edge


def gaze_target(head: Sequence[float], theta: float, objects: Sequence[ToyObject], spec: ToySceneSpec):
    """Ground truth for one person: ((x, y) normalized or None, inout label).

    The target is the center of the first disc hit by the gaze ray; a ray
    missing every disc and leaving through the top edge looks out of frame,
    otherwise its exit point (pulled inside by ``exit_margin``) is the target.
    """
    d = (math.cos(theta), math.sin(theta))
    best = None
    for obj in objects:
        t = _ray_disc_hit(head, d, obj.center, spec.disc_radius)
        if t is not None and (best is None or t < best[0]):
            best = (t, obj)
    S = spec.image_size
    if best is not None:
        cx, cy = best[1].center
        return (cx / S, cy / S), 1
    ex, ey, edge = _exit(head, d, S)
    if edge == "top":
        return None, 0
    m = spec.exit_margin
    return (min(max(ex / S, m), 1 - m), min(max(ey / S, m), 1 - m)), 1


def _is_grazing(head, theta, objects, radius, band: float = 1.0) -> bool:
    """True when the ray passes within ``band`` px of a disc's rim (pixel-level ambiguity)."""
    dx, dy = math.cos(theta), math.sin(theta)
    for obj in objects:
        vx, vy = obj.center[0] - head[0], obj.center[1] - head[1]
        if vx * dx + vy * dy <= 0:
            continue
        perp = abs(vx * dy - vy * dx)
        if abs(perp - radius) < band:
            return True
    return False


def render_scene(spec: ToySceneSpec, people: Sequence[ToyPerson], objects: Sequence[ToyObject]) -> np.ndarray:
    S = spec.image_size
    img = np.empty((S, S, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    ys, xs = np.mgrid[0:S, 0:S] + 0.5
    for obj in objects:
        cx, cy = obj.center
        img[(xs - cx) ** 2 + (ys - cy) ** 2 <= spec.disc_radius**2] = obj.color
    half = spec.marker_size / 2.0
    for p in people:
        cx, cy = p.center
        img[(np.abs(xs - cx) <= half) & (np.abs(ys - cy) <= half)] = MARKER_COLOR
        dx, dy = p.direction
        # distance from pixel centers to the tick segment [center, center + L*d]
        t = np.clip((xs - cx) * dx + (ys - cy) * dy, 0.0, spec.tick_length)
        dist2 = (xs - cx - t * dx) ** 2 + (ys - cy - t * dy) ** 2
        img[dist2 <= (spec.tick_width / 2.0) ** 2] = TICK_COLOR
    return img


def head_box(center: Sequence[float], spec: ToySceneSpec) -> tuple[float, float, float, float]:
    """Normalized window around a marker, rounded to the annotation file's 6 decimals."""
    S = spec.image_size
    h = spec.head_window / 2.0
    return (
        round(max(0.0, (center[0] - h) / S), 6),
        round(max(0.0, (center[1] - h) / S), 6),
        round(min(1.0, (center[0] + h) / S), 6),
        round(min(1.0, (center[1] + h) / S), 6),
    )


def _place(rng: np.random.Generator, spec: ToySceneSpec) -> tuple[list, list]:
    S = spec.image_size
    hw = spec.head_window / 2.0
    r = spec.disc_radius
    for _ in range(spec.max_retries):
        heads = []
        ok = True
        for _ in range(spec.n_persons):
            for _ in range(spec.max_retries):
                c = tuple(rng.uniform(hw + 1.0, S - hw - 1.0, size=2))
                if all(max(abs(c[0] - h[0]), abs(c[1] - h[1])) >= 2 * hw + 2.0 for h in heads):
                    heads.append(c)
                    break
            else:
                ok = False
                break
        if not ok:
            continue
        discs = []
        clearance = hw * math.sqrt(2.0) + r + 2.0
        for _ in range(spec.n_objects):
            for _ in range(spec.max_retries):
                c = tuple(rng.uniform(r + 2.0, S - r - 2.0, size=2))
                if all(math.dist(c, d) >= 2 * r + 4.0 for d in discs) and all(
                    math.dist(c, h) >= clearance for h in heads
                ):
                    discs.append(c)
                    break
            else:
                ok = False
                break
        if ok:
            return heads, discs
    raise GenerationError(f"could not place {spec.n_persons} persons and {spec.n_objects} objects")


def _sample_theta(rng, head, objects, spec: ToySceneSpec) -> float:
    S = spec.image_size
    for _ in range(spec.max_retries):
        u = rng.uniform()
        if u < spec.p_aim and objects:
            obj = objects[rng.integers(len(objects))]
            vx, vy = obj.center[0] - head[0], obj.center[1] - head[1]
            spread = 0.5 * math.asin(min(1.0, spec.disc_radius / math.hypot(vx, vy)))
            theta = math.atan2(vy, vx) + rng.uniform(-spread, spread)
        elif u < spec.p_aim + spec.p_offscreen:
            theta = math.atan2(-head[1], rng.uniform(0.0, S) - head[0])
        else:
            theta = rng.uniform(-math.pi, math.pi)
        if not _is_grazing(head, theta, objects, spec.disc_radius):
            return theta
    raise GenerationError("could not sample an unambiguous gaze direction")


def scene_rng(base_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([base_seed, index]))


def build_scene(spec: ToySceneSpec, people: Sequence[ToyPerson], objects: Sequence[ToyObject],
                image_ref: str = "toy", rng: np.random.Generator | None = None) -> ToyScene:
    """Render explicit person/object states and derive crops and ground truth."""
    image = render_scene(spec, people, objects)
    persons, records = [], []
    for p in people:
        box = head_box(p.center, spec)
        crop = to_uint8(crop_head(image, box, spec.crop_size))
        persons.append(PersonInput(crop, box))
        target, inout = gaze_target(p.center, p.theta, objects, spec)
        points = []
        if target is not None:
            if spec.n_annotators <= 1 or rng is None:
                points = [target]
            else:
                jitter = rng.normal(0.0, spec.annotator_sigma, size=(spec.n_annotators, 2))
                points = [tuple(np.clip(np.asarray(target) + j, 0.0, 1.0)) for j in jitter]
        points = [(round(float(q[0]), 6), round(float(q[1]), 6)) for q in points]
        records.append(AnnotationRecord(image_ref, box, inout, points))
    return ToyScene(spec, image, persons, records, list(people), list(objects))


def gen_toy_scene(spec: ToySceneSpec, image_ref: str = "toy") -> ToyScene:
    """Sample a scene from ``spec.seed`` and render it; a pure function of the spec."""
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    heads, discs = _place(rng, spec)
    colors = rng.permutation(len(PALETTE))[: len(discs)]
    objects = [ToyObject(c, PALETTE[k]) for c, k in zip(discs, colors)]
    people = [ToyPerson(h, _sample_theta(rng, h, objects, spec)) for h in heads]
    return build_scene(spec, people, objects, image_ref, rng)


# ---------------------------------------------------------------------------
# Datasets: scenes with a variable number of persons, packed into arrays
# ---------------------------------------------------------------------------


@dataclass
class GazeDataset:
    images: np.ndarray  # [S, H, W, 3] uint8
    crops: np.ndarray  # [S, P, c, c, 3] uint8 (zeros beyond n_persons)
    bboxes: np.ndarray  # [S, P, 4]
    inout: np.ndarray  # [S, P] int
    points: np.ndarray  # [S, P, K, 2], NaN where absent
    n_persons: np.ndarray  # [S]

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def max_persons(self) -> int:
        return self.crops.shape[1]

    def chunks(self, size: int) -> list[tuple[int, tuple[int, ...]]]:
        """(scene, person indices) groups of at most ``size`` persons, in scene order."""
        out = []
        for s in range(len(self)):
            idx = list(range(int(self.n_persons[s])))
            for i in range(0, len(idx), size):
                out.append((s, tuple(idx[i : i + size])))
        return out

    def annotator_points(self, scene: int, person: int) -> np.ndarray:
        pts = self.points[scene, person]
        return pts[~np.isnan(pts[:, 0])]

    def mean_point(self, scene: int, person: int) -> np.ndarray:
        pts = self.annotator_points(scene, person)
        return pts.mean(axis=0) if len(pts) else np.array([np.nan, np.nan])

    def subset(self, scenes: Sequence[int]) -> "GazeDataset":
        idx = np.asarray(scenes, dtype=np.int64)
        return GazeDataset(self.images[idx], self.crops[idx], self.bboxes[idx], self.inout[idx],
                           self.points[idx], self.n_persons[idx])


def pack_scenes(images: Sequence[np.ndarray], persons: Sequence[Sequence[PersonInput]],
                records: Sequence[Sequence[AnnotationRecord]], crop_size: int) -> GazeDataset:
    S = len(images)
    P = max((len(p) for p in persons), default=1) or 1
    K = max((len(r.gaze_points) for rs in records for r in rs), default=1) or 1
    H, W = (images[0].shape[:2] if S else (1, 1))
    data = GazeDataset(
        images=np.zeros((S, H, W, 3), dtype=np.uint8),
        crops=np.zeros((S, P, crop_size, crop_size, 3), dtype=np.uint8),
        bboxes=np.zeros((S, P, 4)),
        inout=np.zeros((S, P), dtype=np.int64),
        points=np.full((S, P, K, 2), np.nan),
        n_persons=np.array([len(p) for p in persons], dtype=np.int64),
    )
    for s in range(S):
        data.images[s] = images[s]
        for i, (p, r) in enumerate(zip(persons[s], records[s])):
            data.crops[s, i] = p.h_crop
            data.bboxes[s, i] = p.h_bbox
            data.inout[s, i] = r.inout
            for k, q in enumerate(r.gaze_points):
                data.points[s, i, k] = q
    return data


def gen_toy_dataset(base_seed: int, n_scenes: int, spec: ToySceneSpec | None = None) -> GazeDataset:
    spec = spec or ToySceneSpec()
    images, persons, records = [], [], []
    for index in range(n_scenes):
        scene = gen_toy_scene(_scene_spec(spec, base_seed, index), image_ref=image_name(index))
        images.append(scene.image)
        persons.append(scene.persons)
        records.append(scene.records)
    return pack_scenes(images, persons, records, spec.crop_size)


def _scene_spec(spec: ToySceneSpec, base_seed: int, index: int) -> ToySceneSpec:
    seed = int(np.random.SeedSequence([base_seed, index]).generate_state(1, dtype=np.uint64)[0])
    return ToySceneSpec(**{**asdict(spec), "seed": seed})


def image_name(index: int) -> str:
    return f"images/{index:06d}.png"


def write_toy_dataset(out_dir, base_seed: int, n_scenes: int, spec: ToySceneSpec | None = None) -> Path:
    """Write images, annotations.tsv and a manifest header reproducible from the arguments."""
    spec = spec or ToySceneSpec()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    all_records = []
    for index in range(n_scenes):
        scene = gen_toy_scene(_scene_spec(spec, base_seed, index), image_ref=image_name(index))
        save_image(scene.image, out / image_name(index))
        for rec in scene.records:
            rec.validate()
        all_records.extend(scene.records)
    params = json.dumps(spec.params(), sort_keys=True, separators=(",", ":"))
    save_annotations(all_records, out / "annotations.tsv", header=[f"seed={base_seed} params={params}"])
    return out


def read_dataset(path, image_size: int | None = None, crop_size: int = 32) -> GazeDataset:
    """Load an annotation file (or a directory holding annotations.tsv) plus its images.

    Records sharing an image_ref form one scene, in first-appearance order.
    """
    path = Path(path)
    ann = path / "annotations.tsv" if path.is_dir() else path
    root = ann.parent
    records = load_annotations(ann)
    groups: dict[str, list[AnnotationRecord]] = {}
    for rec in records:
        groups.setdefault(rec.image_ref, []).append(rec)
    images, persons, recs = [], [], []
    for ref, rs in groups.items():
        img = load_image(root / ref)
        if image_size is not None and img.shape[:2] != (image_size, image_size):
            img = to_uint8(resize_image(img, image_size))
        images.append(img)
        persons.append([PersonInput(to_uint8(crop_head(img, r.h_bbox, crop_size)), r.h_bbox) for r in rs])
        recs.append(rs)
    return pack_scenes(images, persons, recs, crop_size)
