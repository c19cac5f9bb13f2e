import numpy as np
import pytest

from hoi_forge import body
from hoi_forge import geometry as geo
from hoi_forge.checkpoint import FormatError
from hoi_forge.contact import stable_grasp_check
from hoi_forge.dataio import (HOIRecord, annotate_hand_type, correct_interpenetration, dumps_dataset,
                              filter_stable, generate_synthetic_scene, loads_dataset, read_dataset,
                              write_dataset, write_manifest)
from hoi_forge.objects import SceneObject, box_mesh, unpack_mask
from hoi_forge.text import AnnotationError, parse_prompt

T = body.default_template()


def record_with(labels, lift, prompt="lift box with left hand"):
    c = np.zeros((30, 4))
    c[list(labels), 3] = 1.0
    return HOIRecord(prompt, 0, np.zeros(159), "box", [0, 0, 0, 0, 0, 0.4 + lift], c, 0.4)


def cloud_object(points, normals=None):
    pts = np.asarray(points, dtype=np.float64)
    if normals is None:
        normals = np.tile([0.0, 0, 1], (len(pts), 1))
    return SceneObject("probe", pts, normals, box_mesh(1, 1, 1), np.ones(len(pts), dtype=bool))


def test_round_trip_bitwise(tmp_path, small_dataset):
    write_dataset(small_dataset, tmp_path / "d.hoid")
    back = read_dataset(tmp_path / "d.hoid")
    assert dumps_dataset(back) == (tmp_path / "d.hoid").read_bytes()
    for a, b in zip(small_dataset, back):
        assert a.prompt == b.prompt and a.object_name == b.object_name and a.action == b.action
        assert a.state.tobytes() == b.state.tobytes() and a.contact.tobytes() == b.contact.tobytes()
        assert a.rest_height == b.rest_height


def test_empty_dataset():
    buf = dumps_dataset([])
    assert len(buf) == 16 and loads_dataset(buf) == []


def test_parse_errors_carry_offsets(small_dataset):
    buf = dumps_dataset(small_dataset[:2])
    with pytest.raises(FormatError) as err:
        loads_dataset(b"XOID" + buf[4:])
    assert err.value.offset == 0
    with pytest.raises(FormatError) as err:
        loads_dataset(buf[:4] + (2).to_bytes(4, "little") + buf[8:])
    assert err.value.offset == 4
    with pytest.raises(FormatError) as err:
        loads_dataset(buf[:-5])
    assert 16 < err.value.offset < len(buf)
    with pytest.raises(FormatError):
        loads_dataset(buf + b"\0")


def test_manifest(tmp_path, library):
    path = write_manifest(library, tmp_path)
    lines = path.read_text().splitlines()
    assert len(lines) == len(library)
    name, n, mask_file = lines[0].split("\t")
    mask = unpack_mask((tmp_path / mask_file).read_bytes())[: int(n)]
    np.testing.assert_array_equal(mask, library[name].contact_mask)


def test_annotate_hand_type():
    hj = body.hand_joints(np.zeros(159), T).positions
    left, right = hj[4], hj[19]
    assert annotate_hand_type(np.zeros(159), cloud_object([right, left + [0.1, 0, 0]]), np.zeros(6)) == "right"
    assert annotate_hand_type(np.zeros(159), cloud_object([right, left]), np.zeros(6)) == "both"
    assert annotate_hand_type(np.zeros(159), cloud_object([left + [0.004, 0, 0]]), np.zeros(6)) == "left"
    with pytest.raises(AnnotationError):
        annotate_hand_type(np.zeros(159), cloud_object([left + [0, 0, 0.5]]), np.zeros(6))


@pytest.mark.parametrize("labels,lift,want", [
    ({0, 4}, 0.006, True),        # thumb + index, lifted 6 mm
    ({0, 4}, 0.001, False),       # lifted 1 mm
    ({0, 1, 2}, 0.05, False),     # thumb only
    (set(), 0.05, False),         # no contact at all
])
def test_filter_stable_examples(labels, lift, want):
    assert filter_stable(record_with(labels, lift)) is want


def test_correct_interpenetration_uniform_offset():
    human = np.zeros(159)
    human[156:159] = [0.0, 0.0, 1.0]
    active = [0, 4, 7]
    pads = body.hand_joints(human, T).pads[active]
    obj = cloud_object(pads + [0, 0, 0.003])
    c = np.zeros((30, 4))
    c[active, :3] = obj.points
    c[active, 3] = 1.0
    rec = HOIRecord("lift probe with left hand", 0, human, "probe", np.zeros(6), c, 0.0)
    out = correct_interpenetration(rec, obj, T)
    assert out.human[158] - human[158] == pytest.approx(0.003, abs=1e-12)
    np.testing.assert_array_equal(out.human[:158], human[:158])
    residual = geo.chamfer(body.hand_joints(out.human, T).pads[active], obj.points)
    assert residual < 1e-4
    same = correct_interpenetration(out, obj, T)
    assert same.human.tobytes() == out.human.tobytes()
    none = record_with(set(), 0.1)
    assert correct_interpenetration(none, obj, T) is none


def test_correct_interpenetration_never_worse(small_dataset, library):
    rng = np.random.default_rng(0)
    for k in range(200):
        rec = small_dataset[k % len(small_dataset)]
        obj = library[rec.object_name]
        jit = HOIRecord(rec.prompt, rec.action, rec.human.copy(), rec.object_name, rec.object_pose,
                        rec.contact, rec.rest_height)
        jit.human[156:159] += rng.normal(0, 0.004, 3)
        active = np.flatnonzero(jit.contact[:, 3] > 0.5)
        tgt = geo.apply_rigid(jit.object_pose, jit.contact[active, :3])
        before = geo.chamfer(body.hand_joints(jit.human, T).pads[active], tgt)
        out = correct_interpenetration(jit, obj, T)
        after = geo.chamfer(body.hand_joints(out.human, T).pads[active], tgt)
        assert after <= before


def test_generated_scene_contract(library):
    rng = np.random.default_rng(5)
    for kind in ("box", "cylinder", "sphere", "mug"):
        rec = generate_synthetic_scene(kind, rng, library)
        p = parse_prompt(rec.prompt)
        assert p.obj == kind and filter_stable(rec, library)
        off = 0 if p.hand == "left" else 15
        active = np.flatnonzero(rec.contact[off:off + 15, 3] > 0.5) + off
        assert stable_grasp_check(active)
        assert rec.object_pose[5] - rec.rest_height >= 0.006
    with pytest.raises(KeyError):
        generate_synthetic_scene("teapot", rng, library)


@pytest.mark.slow
def test_generator_agrees_with_filter(toy_data):
    lib = toy_data.library
    assert len(toy_data.records) >= 1000
    for rec in toy_data.records:
        parse_prompt(rec.prompt)
        assert filter_stable(rec, lib)
        assert filter_stable(rec)
