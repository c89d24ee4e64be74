import math

import numpy as np
import pytest

from sharingan.data import (BACKGROUND, MARKER_COLOR, PALETTE, TICK_COLOR, AnnotationParseError, AnnotationRecord,
                            ToyObject, ToyPerson, ToySceneSpec, build_scene, crop_head, format_annotation,
                            gen_toy_dataset, gen_toy_scene, load_annotations, parse_annotation_line, read_dataset,
                            read_manifest, write_toy_dataset)


def test_parse_examples():
    rec = parse_annotation_line("img/1.jpg\t0.1\t0.2\t0.3\t0.4\t1\t1\t0.50\t0.60")
    assert rec == AnnotationRecord("img/1.jpg", (0.1, 0.2, 0.3, 0.4), 1, [(0.5, 0.6)])
    rec = parse_annotation_line("img/2.jpg\t0.1\t0.2\t0.3\t0.4\t0\t0")
    assert rec.inout == 0 and rec.gaze_points == []


@pytest.mark.parametrize("line,field", [
    ("a\t0.3\t0.2\t0.1\t0.4\t1\t1\t0.5\t0.5", "x_max"),
    ("a\t0.1\t0.2\t0.3\tfoo\t1\t1\t0.5\t0.5", "y_max"),
    ("a\t0.1\t0.2\t0.3\t0.4\t2\t1\t0.5\t0.5", "inout"),
    ("a\t0.1\t0.2\t0.3\t0.4\t1\t2\t0.5\t0.5", "record"),
    ("a\t0.1\t0.2\t0.3\t0.4\t1\t1\t1.5\t0.5", "x1"),
    ("a\t0.1\t0.2", "record"),
    ("a\t0.1\t0.2\t0.3\t0.4\t1\t0", "k"),
])
def test_parse_errors_name_line_and_field(line, field):
    with pytest.raises(AnnotationParseError) as err:
        load_annotations(["# header\n", "ok\t0\t0\t1\t1\t0\t0\n", line + "\n"])
    assert err.value.line_no == 3 and err.value.field_name == field
    assert "line 3" in str(err.value) and field in str(err.value)


def test_format_parse_roundtrip():
    rec = AnnotationRecord("x.png", (0.125, 0.25, 0.5, 0.75), 1, [(0.1, 0.2), (0.3, 0.4)])
    assert parse_annotation_line(format_annotation(rec)) == rec


def test_scene_determinism():
    spec = ToySceneSpec(seed=42)
    a, b = gen_toy_scene(spec), gen_toy_scene(spec)
    assert np.array_equal(a.image, b.image) and a.records == b.records
    assert not np.array_equal(a.image, gen_toy_scene(ToySceneSpec(seed=43)).image)


def test_aim_at_lone_object_center():
    spec = ToySceneSpec(n_persons=1, n_objects=1)
    head, obj = (30.0, 40.0), (80.0, 70.0)
    theta = math.atan2(obj[1] - head[1], obj[0] - head[0])
    scene = build_scene(spec, [ToyPerson(head, theta)], [ToyObject(obj, PALETTE[0])])
    assert scene.records[0].inout == 1
    assert scene.records[0].gaze_points == [(round(80 / 112, 6), round(70 / 112, 6))]


def ray_march_oracle(image, head, theta, spec):
    """Recover the GT from rendered pixels: first palette-colored pixel on the ray, else the frame exit."""
    S = spec.image_size
    colors = {tuple(c) for c in PALETTE}
    dx, dy = math.cos(theta), math.sin(theta)
    x, y = head
    step = 0.02
    while True:
        nx, ny = x + step * dx, y + step * dy
        if not (0 <= nx < S and 0 <= ny < S):
            break
        x, y = nx, ny
        px = tuple(image[int(y), int(x)])
        if px in colors:
            ys, xs = np.nonzero(np.all(image == px, axis=-1))
            return ((xs + 0.5).mean() / S, (ys + 0.5).mean() / S), 1
    if y + step * dy < 0:
        return None, 0
    m = spec.exit_margin
    return (min(max(x / S, m), 1 - m), min(max(y / S, m), 1 - m)), 1


def test_ground_truth_matches_ray_march_oracle():
    spec = ToySceneSpec()
    for seed in range(40):
        scene = gen_toy_scene(ToySceneSpec(seed=seed))
        for person, rec in zip(scene.people, scene.records):
            point, inout = ray_march_oracle(scene.image, person.center, person.theta, spec)
            assert inout == rec.inout
            if inout:
                gx, gy = rec.gaze_points[0]
                assert math.hypot((gx - point[0]) * 112, (gy - point[1]) * 112) <= 1.0


def test_crop_head_examples():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (20, 20, 3)).astype(np.uint8)
    np.testing.assert_allclose(crop_head(img, (0, 0, 1, 1), 20), img, atol=1e-9)
    const = np.full((30, 40, 3), 77, np.uint8)
    np.testing.assert_allclose(crop_head(const, (0.1, 0.2, 0.5, 0.9), 16), 77.0)
    with pytest.raises(ValueError):
        crop_head(img, (0.3, 0.3, 0.3, 0.5), 8)


def test_crop_contains_tick():
    spec = ToySceneSpec(n_persons=1, n_objects=0, crop_size=32)
    theta = 0.3
    scene = build_scene(spec, [ToyPerson((50.0, 60.0), theta)], [])
    crop = scene.persons[0].h_crop.astype(float)
    dark = np.nonzero(crop.sum(-1) < 150)
    assert dark[0].size > 0
    # window is 20 px mapped to 32 px: tick points away from the crop center along theta
    cy, cx = dark[0].mean() + 0.5, dark[1].mean() + 0.5
    ang = math.atan2(cy - 16, cx - 16)
    assert abs(ang - theta) < 0.3


def test_out_of_frame_fraction():
    data = gen_toy_dataset(5, 300)
    frac_out = 1 - data.inout[:, :4].mean()
    assert 0.12 < frac_out < 0.28


def test_dataset_files_reproducible(tmp_path):
    a = write_toy_dataset(tmp_path / "a", 3, 5)
    b = write_toy_dataset(tmp_path / "b", 3, 5)
    assert (a / "annotations.tsv").read_bytes() == (b / "annotations.tsv").read_bytes()
    assert (a / "images/000004.png").read_bytes() == (b / "images/000004.png").read_bytes()
    man = read_manifest(a / "annotations.tsv")
    assert man["seed"] == 3 and man["params"]["n_persons"] == 4
    empty = write_toy_dataset(tmp_path / "e", 3, 0)
    text = (empty / "annotations.tsv").read_text()
    assert text.startswith("# seed=3 params=") and len(text.splitlines()) == 1


def test_read_dataset_matches_memory(tmp_path):
    out = write_toy_dataset(tmp_path / "d", 9, 4)
    disk, mem = read_dataset(out), gen_toy_dataset(9, 4)
    assert np.array_equal(disk.images, mem.images)
    assert np.array_equal(disk.crops, mem.crops)
    np.testing.assert_array_equal(disk.bboxes, mem.bboxes)
    np.testing.assert_array_equal(disk.points, mem.points)
    for rec in load_annotations(out / "annotations.tsv"):
        rec.validate()


def test_more_persons_than_capacity_chunked():
    data = gen_toy_dataset(0, 2, ToySceneSpec(n_persons=7, n_objects=2, image_size=160))
    assert data.n_persons.tolist() == [7, 7]
    chunks = data.chunks(6)
    assert [len(p) for _, p in chunks] == [6, 1, 6, 1]


def test_multi_annotator_points():
    data = gen_toy_dataset(0, 10, ToySceneSpec(n_annotators=3, annotator_sigma=0.02))
    s, p = np.argwhere(data.inout == 1)[0]
    pts = data.annotator_points(s, p)
    assert pts.shape == (3, 2) and np.all((pts >= 0) & (pts <= 1))
    assert len({tuple(q) for q in pts}) == 3
