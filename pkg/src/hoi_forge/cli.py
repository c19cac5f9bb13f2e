"""hoi-forge command line: synthgen, train, sample, refine, evaluate, fdcheck, augment."""
from __future__ import annotations

import argparse
import contextlib
import json
import sys
import warnings
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import adapt, dataio, geometry as geo, metrics, objects as objlib
from .body import default_template, forward_kinematics
from .checkpoint import FormatError
from .contact import ContactConfig, ContactPredictor
from .diffusion import ConfigError
from .prior import PosePrior, PriorConfig
from .refiner import GuidanceConfig, guided_sample
from .text import AnnotationError, parse_prompt
from . import checkpoint, pipeline

EXIT_OK, EXIT_VERIFY, EXIT_IO, EXIT_PARSE, EXIT_CONFIG = 0, 1, 2, 3, 4
ABLATIONS = ("fcon", "fnorm", "gd", "sa")

DEFAULTS = {
    "seed": None,
    "paths": {"dataset": "data.hoid", "objects": None, "checkpoints": "checkpoints", "reports": "reports"},
    "prior": asdict(PriorConfig()),
    "contact": asdict(ContactConfig()),
    "classifier": asdict(metrics.ClassifierConfig()),
    "guidance": asdict(GuidanceConfig(lam=1.0, lam_schedule="constant")),
    "deform": asdict(adapt.DeformParams()),
    "train": {"prior_steps": 3000, "contact_steps": 2000, "batch": 32, "lr": 1e-3, "log_every": 50},
    "metrics": {"diversity_pairs": 300, "voxel": metrics.VOXEL},
    "ablate": [],
}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key '{k}'")
        out[k] = _merge(base[k], v) if isinstance(base[k], dict) and isinstance(v, dict) else v
    return out


def _typed(cls, d: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


def load_config(args) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS))
    if args.config:
        try:
            user = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as e:
            raise CliError(EXIT_CONFIG, f"config is not valid JSON: {e}")
        cfg = _merge(cfg, user)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if getattr(args, "variant", None):
        cfg["prior"]["variant"] = args.variant
    for a in args.ablate or []:
        if a not in cfg["ablate"]:
            cfg["ablate"].append(a)
    return cfg


def _seed(cfg: dict) -> int:
    if cfg["seed"] is None:
        raise CliError(EXIT_CONFIG, "a seed is required (--seed or config 'seed')")
    return int(cfg["seed"])


def _guidance(cfg: dict, enabled: bool) -> GuidanceConfig:
    g = dict(cfg["guidance"])
    if "fcon" in cfg["ablate"]:
        g["use_con"] = False
    if "fnorm" in cfg["ablate"]:
        g["use_norm"] = False
    if not enabled:
        g["lam"] = 0.0
    return _typed(GuidanceConfig, g)


def _library(cfg: dict, override=None) -> objlib.ObjectLibrary:
    lib = dataio.default_library()
    path = override or cfg["paths"]["objects"]
    if path:
        for name, obj in objlib.library_from_tensors(checkpoint.load(path)).items():
            lib[name] = obj
    return lib


def _sidecar(path, cfg: dict, command: str, **extra) -> None:
    meta = {"command": command, "fingerprint": metrics.fingerprint(cfg), "config": cfg, **extra}
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------
def cmd_synthgen(args, cfg) -> int:
    seed = _seed(cfg)
    out = Path(args.out or cfg["paths"]["dataset"])
    lib = dataio.default_library()
    try:
        records = dataio.generate_dataset(args.count, seed, lib)
    except RuntimeError as e:
        raise CliError(EXIT_VERIFY, str(e))
    rate = np.mean([dataio.filter_stable(r, lib) for r in records]) if records else 1.0
    dataio.write_dataset(records, out)
    _sidecar(out, cfg, "synthgen", count=len(records))
    print(f"wrote {len(records)} records to {out}")
    print(f"stable-filter pass rate: {rate:.3f}")
    return EXIT_OK if rate == 1.0 else EXIT_VERIFY


def _read_records(path) -> list:
    return dataio.read_dataset(path)


def cmd_train(args, cfg) -> int:
    seed = _seed(cfg)
    records = _read_records(args.data or cfg["paths"]["dataset"])
    lib = _library(cfg, args.objects)
    out = Path(args.out or Path(cfg["paths"]["checkpoints"]) / args.stage)
    out.parent.mkdir(parents=True, exist_ok=True)
    tr = cfg["train"]
    if args.stage == "prior":
        model, log = pipeline.train_prior(records, lib, _typed(PriorConfig, cfg["prior"]), tr["prior_steps"],
                                          seed, tr["batch"], tr["lr"], tr["log_every"])
        model.save(out)
    elif args.stage == "contact":
        model, log = pipeline.train_contact(records, lib, _typed(ContactConfig, cfg["contact"]),
                                            tr["contact_steps"], seed, tr["batch"], tr["lr"], tr["log_every"])
        model.save(out)
    else:
        ccfg = _typed(metrics.ClassifierConfig, cfg["classifier"])
        res = pipeline.train_action_classifier(records, ccfg, seed)
        res.extractor.save(out)
        from .prior import TrainLog
        every = 50
        log = TrainLog(list(range(every, every * len(res.losses) + 1, every)), res.losses)
        print(f"held-out accuracy: {res.holdout_accuracy:.4f}")
    csv = out.with_suffix(".loss.csv")
    log.to_csv(csv)
    _sidecar(out.with_suffix(".hoif"), cfg, f"train {args.stage}")
    print(f"saved {args.stage} checkpoint to {out.with_suffix('.hoif')}; loss curve {csv}")
    if log.losses:
        print(f"loss: first {log.losses[0]:.6f} final {log.losses[-1]:.6f}")
    return EXIT_OK


def _load(kind, path):
    p = Path(path)
    if not p.with_suffix(".hoif").exists() or not p.with_suffix(".json").exists():
        raise FileNotFoundError(f"missing checkpoint {p.with_suffix('.hoif')}")
    return kind.load(p)


def _prompt_batch(args, cfg, lib, vocab, n_points):
    parse_prompt(args.prompt)
    if args.object not in lib:
        raise CliError(EXIT_PARSE, f"unknown object '{args.object}'")
    prompts = [args.prompt] * args.count
    names = [args.object] * args.count
    from .encoders import make_condition
    cond = make_condition(prompts, [lib[args.object].points] * args.count, vocab, n_points)
    return prompts, names, cond


def export_obj(path, state, obj, template=None) -> None:
    """Body joints as a marker cloud plus the posed object mesh."""
    joints = forward_kinematics(state[:159], template).positions.data
    mesh = obj.mesh.transformed(state[159:])
    verts = np.vstack([joints, mesh.vertices])
    geo.write_obj(path, verts, mesh.faces + len(joints),
                  comment=f"{len(joints)} joint markers, then the object mesh")


def _write_outputs(args, cfg, records, lib, command, **extra):
    out = Path(args.out)
    dataio.write_dataset(records, out)
    _sidecar(out, cfg, command, **extra)
    if args.obj_export:
        base = Path(args.obj_export)
        for k, r in enumerate(records):
            p = base if len(records) == 1 else base.with_name(f"{base.stem}_{k}{base.suffix or '.obj'}")
            export_obj(p, r.state, lib[r.object_name])
    print(f"wrote {len(records)} records to {out}")


def cmd_sample(args, cfg) -> int:
    seed = _seed(cfg)
    lib = _library(cfg, args.objects)
    prior = _load(PosePrior, args.prior)
    prompts, names, cond = _prompt_batch(args, cfg, lib, prior.vocab, prior.cfg.n_points)
    states = prior.sample(cond, np.random.default_rng(seed))
    lex = adapt.SynonymLexicon.load()
    _write_outputs(args, cfg, pipeline.records_from_states(states, prompts, names, lexicon=lex), lib, "sample")
    return EXIT_OK


def cmd_refine(args, cfg) -> int:
    seed = _seed(cfg)
    lib = _library(cfg, args.objects)
    prior = _load(PosePrior, args.prior)
    cmodel = _load(ContactPredictor, args.contact)
    prompts, names, cond = _prompt_batch(args, cfg, lib, prior.vocab, prior.cfg.n_points)
    gcfg = _guidance(cfg, args.guidance == "on")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = guided_sample(prior, cmodel, cond, prompts, [lib[n] for n in names], gcfg,
                            np.random.default_rng(seed), trace=args.trace)
    lex = adapt.SynonymLexicon.load()
    recs = pipeline.records_from_states(res.states, prompts, names, res.contacts, lex)
    _write_outputs(args, cfg, recs, lib, "refine", flagged=res.flagged.tolist(), warnings=res.warnings)
    if args.trace:
        tp = Path(str(args.out) + ".trace.txt")
        lines = [f"# guidance trace, config {metrics.fingerprint(cfg)}", "# sample step g_total"]
        for t, vals in res.trace:
            lines += [f"{k} {t} {v:.17g}" for k, v in enumerate(vals)]
        tp.write_text("\n".join(lines) + "\n")
        print(f"trace written to {tp}")
    for w in res.warnings:
        print(f"warning: {w}")
    return EXIT_OK


def cmd_evaluate(args, cfg) -> int:
    ext = _load(metrics.FeatureExtractor, args.classifier)
    gen = _read_records(args.generated)
    ref = _read_records(args.reference)
    lib = _library(cfg, args.objects)
    seed = cfg["seed"] if cfg["seed"] is not None else 0
    rng = np.random.default_rng(seed)
    gh = np.stack([r.human for r in gen])
    labels = np.array([r.action for r in gen])
    acc = metrics.accuracy_top3(ext.logits(gh), labels)
    fg, fr = ext.features(gh), ext.features(np.stack([r.human for r in ref]))
    pairs = cfg["metrics"]["diversity_pairs"]
    div = metrics.diversity(fg, min(pairs, len(fg) // 2), rng) if len(fg) >= 2 else 0.0
    groups = [fg[labels == c] for c in np.unique(labels)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            mm = metrics.multimodality(groups, rng=rng)
        except Exception:
            mm = 0.0
    iv = float(np.mean([metrics.intersect_volume(r.human, lib[r.object_name], r.object_pose,
                                                 voxel=cfg["metrics"]["voxel"]) for r in gen]))
    report = metrics.MetricReport(acc, metrics.fid(fg, fr), div, mm, iv,
                                  {"generated": len(gen), "reference": len(ref)},
                                  metrics.fingerprint(cfg))
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_fdcheck(args, cfg) -> int:
    from .gradcheck import fd_suite
    seed = cfg["seed"] if cfg["seed"] is not None else 0
    results = fd_suite(args.configs, args.tol, seed)
    for r in results:
        print(r.line())
    bad = [r for r in results if not r.ok]
    if bad:
        print("failing: " + ", ".join(f"{r.op} ({r.max_rel_err:.3e})" for r in bad))
        return EXIT_VERIFY
    return EXIT_OK


def cmd_augment(args, cfg) -> int:
    seed = _seed(cfg)
    records = _read_records(args.data or cfg["paths"]["dataset"])
    lib = _library(cfg, args.objects)
    acfg = adapt.AugmentConfig("gd" not in cfg["ablate"], "sa" not in cfg["ablate"],
                               _typed(adapt.DeformParams, cfg["deform"]))
    lex = adapt.SynonymLexicon.load(args.lexicon)
    out_recs, out_lib = adapt.augment_batch(records, lib, acfg, lex, np.random.default_rng(seed))
    dataio.write_dataset(out_recs, args.out)
    new = {k: v for k, v in out_lib.items() if k not in lib}
    obj_out = args.objects_out or str(args.out) + ".objects.hoif"
    checkpoint.save(obj_out, objlib.library_tensors(new))
    _sidecar(args.out, cfg, "augment", objects=obj_out)
    print(f"wrote {len(out_recs)} records to {args.out}; {len(new)} deformed objects to {obj_out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--ablate", action="append", choices=ABLATIONS)
    common.add_argument("--objects", help="extra object library file")

    p = argparse.ArgumentParser(prog="hoi-forge", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("synthgen", parents=[common])
    s.add_argument("--count", type=int, default=1000)
    s.add_argument("--out")
    s = sub.add_parser("train", parents=[common])
    s.add_argument("stage", choices=("prior", "contact", "classifier"))
    s.add_argument("--data")
    s.add_argument("--out")
    s.add_argument("--variant", choices=("single", "dual", "rm_enc", "rm"))
    for name in ("sample", "refine"):
        s = sub.add_parser(name, parents=[common])
        s.add_argument("--prior", required=True)
        s.add_argument("--prompt", required=True)
        s.add_argument("--object", required=True)
        s.add_argument("--count", type=int, default=1)
        s.add_argument("--out", required=True)
        s.add_argument("--obj-export", dest="obj_export")
        if name == "refine":
            s.add_argument("--contact", required=True)
            s.add_argument("--guidance", choices=("on", "off"), default="on")
            s.add_argument("--trace", action="store_true")
    s = sub.add_parser("evaluate", parents=[common])
    s.add_argument("--classifier", required=True)
    s.add_argument("--generated", required=True)
    s.add_argument("--reference", required=True)
    s.add_argument("--out")
    s = sub.add_parser("fdcheck", parents=[common])
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--configs", type=int, default=100)
    s = sub.add_parser("augment", parents=[common])
    s.add_argument("--data")
    s.add_argument("--out", required=True)
    s.add_argument("--objects-out", dest="objects_out")
    s.add_argument("--lexicon")
    return p


COMMANDS = {"synthgen": cmd_synthgen, "train": cmd_train, "sample": cmd_sample, "refine": cmd_refine,
            "evaluate": cmd_evaluate, "fdcheck": cmd_fdcheck, "augment": cmd_augment}


def _threads(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(limits=max(1, n))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_PARSE
    try:
        cfg = load_config(args)
        with _threads(args.threads):
            return COMMANDS[args.command](args, cfg)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (FileNotFoundError, IsADirectoryError, PermissionError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except AnnotationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PARSE
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
