"""Training-time augmentation: contact-preserving object deformation and verb synonyms."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from . import body
from .contact import D_CONTACT, extract_contact_truth
from .diffusion import ConfigError
from .objects import SceneObject
from .text import parse_prompt

LEXICON_FILE = "synonyms.txt"


@dataclass
class DeformParams:
    eta: float = 0.5                      # probability that a deformation is applied
    stretch: tuple = ((0.8, 1.2),) * 3    # per-axis (low, high) scale
    max_angle: float = np.pi / 6
    rho: float = 0.02                     # blend falloff from the contact region, meters

    def __post_init__(self):
        st = np.asarray(self.stretch, dtype=np.float64)
        if st.shape == (2,):
            st = np.tile(st, (3, 1))
        if st.shape != (3, 2) or np.any(st <= 0) or np.any(st[:, 0] > st[:, 1]):
            raise ConfigError("stretch needs positive (low, high) bounds per axis")
        self.stretch = tuple(map(tuple, st.tolist()))
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError("eta must lie in [0, 1]")
        if not 0.0 <= self.max_angle <= np.pi:
            raise ConfigError("rotation bound must lie in [0, pi]")
        if self.rho < 0:
            raise ConfigError("falloff radius must be non-negative")


def sample_affine(params: DeformParams, rng: np.random.Generator) -> np.ndarray:
    """3x3 map: rotation (random axis, angle up to the bound) after per-axis stretch."""
    st = np.asarray(params.stretch)
    scale = rng.uniform(st[:, 0], st[:, 1])
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, params.max_angle)
    return Rotation.from_rotvec(axis * angle).as_matrix() @ np.diag(scale)


def _blend(x, A, center, contact_pts, rho):
    """Move ``x`` toward the affine image with weight min(1, dist / rho) to the contact region."""
    d, _ = cKDTree(contact_pts).query(x)
    w = np.ones(len(x)) if rho == 0 else np.minimum(1.0, d / rho)
    w = np.where(d == 0, 0.0, w)
    target = (x - center) @ A.T + center
    return x + w[:, None] * (target - x), w


def deform_object(obj: SceneObject, params: DeformParams, rng: np.random.Generator,
                  affine: np.ndarray | None = None) -> SceneObject:
    if rng.random() >= params.eta:
        return obj
    A = sample_affine(params, rng) if affine is None else np.asarray(affine, dtype=np.float64)
    mask = obj.contact_mask
    free = ~mask
    if not free.any():
        return obj
    contact_pts = obj.points[mask]
    center = obj.points[free].mean(0)
    pts = obj.points.copy()
    moved, w = _blend(obj.points[free], A, center, contact_pts, params.rho)
    pts[free] = moved
    # normals: inverse-transpose of the blended linear part
    nrm = obj.normals.copy()
    J = np.eye(3) + w[:, None, None] * (A - np.eye(3))
    n = np.einsum("ni,nij->nj", obj.normals[free], np.linalg.inv(J))
    nrm[free] = n / np.linalg.norm(n, axis=1, keepdims=True)
    # the mesh follows the same field; vertices on the contact region stay put
    mv = obj.mesh.vertices
    vd, _ = cKDTree(contact_pts).query(mv)
    on_contact = vd <= 1e-12
    vnew = mv.copy()
    vnew[~on_contact], _ = _blend(mv[~on_contact], A, center, contact_pts, params.rho)
    mesh = dataclasses.replace(obj.mesh, vertices=vnew)
    return obj.with_geometry(pts, nrm, mesh)


# ---------------------------------------------------------------------------
# semantic adjustment
# ---------------------------------------------------------------------------
class SynonymLexicon(dict):
    """action verb -> list of synonyms."""

    def __init__(self, table: dict[str, list[str]] | None = None):
        super().__init__({k: list(v) for k, v in (table or {}).items()})
        owner: dict[str, str] = {}
        for action, syns in self.items():
            for w in [action, *syns]:
                if owner.setdefault(w, action) != action:
                    raise ConfigError(f"synonym '{w}' is listed under both '{owner[w]}' and '{action}'")

    @classmethod
    def parse(cls, text: str) -> "SynonymLexicon":
        table = {}
        for ln, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if ":" not in line:
                raise ConfigError(f"lexicon line {ln}: expected 'action: syn1, syn2'")
            action, rest = line.split(":", 1)
            table[action.strip().lower()] = [w.strip().lower() for w in rest.split(",") if w.strip()]
        return cls(table)

    @classmethod
    def load(cls, path=None) -> "SynonymLexicon":
        if path is None:
            text = resources.files("hoi_forge").joinpath("assets").joinpath(LEXICON_FILE).read_text()
        else:
            text = Path(path).read_text()
        return cls.parse(text)

    def dumps(self) -> str:
        return "".join(f"{a}: {', '.join(s)}\n" for a, s in self.items())


def adjust_semantics(prompt: str, lexicon: SynonymLexicon, rng: np.random.Generator) -> tuple[str, bool]:
    """Swap the action verb for a random synonym (or itself). Returns (prompt, warning)."""
    p = parse_prompt(prompt)
    if p.action not in lexicon:
        return prompt, True
    choices = [p.action, *lexicon[p.action]]
    verb = choices[int(rng.integers(len(choices)))]
    rest = " ".join(prompt.split())[len(p.action):]
    return verb + rest, False


# ---------------------------------------------------------------------------
# batch augmentation
# ---------------------------------------------------------------------------
@dataclass
class AugmentConfig:
    geometry: bool = True   # GD toggle
    semantic: bool = True   # SA toggle
    deform: DeformParams = dataclasses.field(default_factory=DeformParams)

    @classmethod
    def ablation(cls, name: str) -> "AugmentConfig":
        rows = {"none": (False, False), "w/o GD": (False, True), "w/o SA": (True, False),
                "w GD&SA": (True, True)}
        if name not in rows:
            raise ConfigError(f"unknown augmentation row '{name}'")
        gd, sa = rows[name]
        return cls(gd, sa)


def augment_batch(records, objects, cfg: AugmentConfig, lexicon: SynonymLexicon,
                  rng: np.random.Generator, template=None, d_contact: float = D_CONTACT):
    """Returns (records, objects); deformed objects get fresh names and re-snapped contacts."""
    out, lib = [], dict(objects)
    warnings = 0
    for k, rec in enumerate(records):
        new = rec
        if cfg.geometry:
            obj = objects[rec.object_name]
            deformed = deform_object(obj, cfg.deform, rng)
            if deformed is not obj:
                name = f"{obj.name}~{k}"
                deformed = deformed.with_geometry(deformed.points, deformed.normals, deformed.mesh, name)
                lib[name] = deformed
                joints = body.hand_joints(rec.human, template)
                contact = extract_contact_truth(joints, deformed, rec.object_pose, d_contact)
                new = dataclasses.replace(new, object_name=name, contact=contact)
        if cfg.semantic:
            prompt, warn = adjust_semantics(new.prompt, lexicon, rng)
            warnings += warn
            new = dataclasses.replace(new, prompt=prompt)
        out.append(new)
    return out, lib
