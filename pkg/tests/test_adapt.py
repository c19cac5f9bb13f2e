import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hoi_forge import body
from hoi_forge.adapt import (AugmentConfig, DeformParams, SynonymLexicon, adjust_semantics,
                             augment_batch, deform_object, sample_affine)
from hoi_forge.contact import extract_contact_truth
from hoi_forge.diffusion import ConfigError
from hoi_forge.objects import KINDS, make_object
from hoi_forge.text import ACTIONS, parse_prompt

seeds = st.integers(0, 2**31 - 1)
LEX = SynonymLexicon.load()
OBJECTS = {k: make_object(k) for k in KINDS}


def test_params_validation():
    assert DeformParams(stretch=(0.9, 1.1)).stretch == ((0.9, 1.1),) * 3
    for bad in (dict(eta=1.5), dict(stretch=(0.0, 1.0)), dict(stretch=(1.2, 0.8)),
                dict(max_angle=4.0), dict(rho=-0.1)):
        with pytest.raises(ConfigError):
            DeformParams(**bad)


@given(seeds)
def test_sampled_affine_within_bounds(seed):
    p = DeformParams(stretch=((0.8, 1.2), (0.5, 0.6), (1.0, 1.0)), max_angle=0.4)
    A = sample_affine(p, np.random.default_rng(seed))
    s = np.linalg.svd(A, compute_uv=False)
    assert 0.5 - 1e-12 <= s.min() and s.max() <= 1.2 + 1e-12
    assert abs(abs(np.linalg.det(A)) - np.prod(np.linalg.norm(A, axis=0))) < 1e-9


def test_eta_zero_is_identity():
    obj = OBJECTS["mug"]
    out = deform_object(obj, DeformParams(eta=0.0), np.random.default_rng(0))
    assert out.points.tobytes() == obj.points.tobytes()
    assert out.normals.tobytes() == obj.normals.tobytes()


def test_fixed_stretch_plug_in():
    obj = OBJECTS["box"]
    free = np.flatnonzero(~obj.contact_mask)
    k, n = int(free[0]), len(free)
    # place point k so that it sits at (non-contact centroid) + (0.1, 0, 0)
    others = obj.points[free[1:]].sum(0)
    pts = obj.points.copy()
    pts[k] = (np.array([0.1, 0, 0]) + others / n) / (1 - 1 / n)
    center = pts[free].mean(0)
    np.testing.assert_allclose(pts[k] - center, [0.1, 0, 0], atol=1e-12)
    probe = dataclasses.replace(obj, points=pts, _index=None)
    out = deform_object(probe, DeformParams(eta=1.0, rho=0.0), np.random.default_rng(0),
                        affine=np.diag([2.0, 1.0, 1.0]))
    np.testing.assert_allclose(out.points[k], center + [0.2, 0, 0], atol=1e-12)


def test_contact_region_immutable_1000_trials():
    rng = np.random.default_rng(7)
    params = DeformParams(eta=1.0)
    for trial in range(1000):
        obj = OBJECTS[KINDS[trial % len(KINDS)]]
        out = deform_object(obj, params, rng)
        m = obj.contact_mask
        assert out.points.shape == obj.points.shape
        assert out.points[m].tobytes() == obj.points[m].tobytes()
        assert out.contact_mask.tobytes() == m.tobytes()


def test_deformed_normals_and_mesh():
    obj = OBJECTS["cylinder"]
    out = deform_object(obj, DeformParams(eta=1.0, rho=0.0), np.random.default_rng(3))
    np.testing.assert_allclose(np.linalg.norm(out.normals, axis=1), 1.0, atol=1e-12)
    assert out.mesh.is_watertight()
    assert np.abs(out.points - obj.points).max() > 1e-3


def test_lexicon_contents_and_collisions(tmp_path):
    for a in ACTIONS:
        assert len(LEX[a]) == 3
    assert LEX["lift"] == ["raise", "up", "uplift"]
    with pytest.raises(ConfigError):
        SynonymLexicon({"lift": ["raise"], "pass": ["raise"]})
    with pytest.raises(ConfigError):
        SynonymLexicon.parse("lift raise")
    (tmp_path / "lex.txt").write_text(LEX.dumps())
    assert SynonymLexicon.load(tmp_path / "lex.txt") == LEX


def test_adjust_semantics_examples():
    seen = set()
    for s in range(200):
        out, warn = adjust_semantics("lift cube with left hand", LEX, np.random.default_rng(s))
        assert not warn
        seen.add(out)
    assert seen == {f"{v} cube with left hand" for v in ("lift", "raise", "up", "uplift")}
    out, warn = adjust_semantics("juggle cube with left hand", LEX, np.random.default_rng(0))
    assert warn and out == "juggle cube with left hand"
    a = adjust_semantics("pass mug with right hand", LEX, np.random.default_rng(5))
    assert a == adjust_semantics("pass mug with right hand", LEX, np.random.default_rng(5))


@given(st.sampled_from(ACTIONS), st.sampled_from(KINDS), st.sampled_from(["left", "right", "both"]),
       seeds)
def test_adjusted_prompt_reparses(action, kind, hand, seed):
    prompt = f"{action} {kind} with {'both hands' if hand == 'both' else hand + ' hand'}"
    out, _ = adjust_semantics(prompt, LEX, np.random.default_rng(seed))
    p, q = parse_prompt(prompt), parse_prompt(out)
    assert (q.obj, q.hand) == (p.obj, p.hand)
    assert q.action in [action, *LEX[action]]


def test_ablation_rows():
    rows = {n: AugmentConfig.ablation(n) for n in ("none", "w/o GD", "w/o SA", "w GD&SA")}
    assert len({(c.geometry, c.semantic) for c in rows.values()}) == 4
    with pytest.raises(ConfigError):
        AugmentConfig.ablation("w/o everything")


def test_augment_toggles(small_dataset, library):
    recs = small_dataset[:12]
    rng = np.random.default_rng(0)
    same, lib = augment_batch(recs, library, AugmentConfig.ablation("none"), LEX, rng)
    assert same == recs and lib == dict(library)
    gd, lib = augment_batch(recs, library, AugmentConfig(True, False, DeformParams(eta=1.0)), LEX, rng)
    assert [r.prompt for r in gd] == [r.prompt for r in recs]
    assert all(r.object_name in lib and "~" in r.object_name for r in gd)
    sa, _ = augment_batch(recs, library, AugmentConfig.ablation("w/o GD"), LEX, rng)
    assert [r.object_name for r in sa] == [r.object_name for r in recs]
    for r in AugmentConfig.__dataclass_fields__:
        assert r in ("geometry", "semantic", "deform")
    both, _ = augment_batch(recs, library, AugmentConfig.ablation("w GD&SA"), LEX, rng)
    assert len(both) == len(recs)


@pytest.mark.slow
def test_contact_labels_survive_deformation(toy_data):
    lib = toy_data.library
    rng = np.random.default_rng(11)
    params = DeformParams(eta=1.0)
    for rec in toy_data.records[:200]:
        obj = lib[rec.object_name]
        out = deform_object(obj, params, rng)
        joints = body.hand_joints(rec.human)
        before = extract_contact_truth(joints, obj, rec.object_pose)
        after = extract_contact_truth(joints, out, rec.object_pose)
        idx, _ = obj.index.query(before[:, :3])
        region = (before[:, 3] == 1) & obj.contact_mask[idx]
        np.testing.assert_array_equal(after[region, 3], 1.0)
