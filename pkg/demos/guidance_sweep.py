"""Contact error and interpenetration of guided vs unguided samples over a few step sizes.

    python3 demos/guidance_sweep.py --steps 3000 --rows 50
"""
import argparse
import dataclasses
import warnings

import numpy as np
from threadpoolctl import threadpool_limits

from hoi_forge import metrics as M
from hoi_forge.contact import ContactConfig
from hoi_forge.dataio import default_library, generate_dataset
from hoi_forge.pipeline import prior_condition, train_contact, train_prior
from hoi_forge.prior import PriorConfig
from hoi_forge.refiner import GuidanceConfig, guided_sample, objective_grad
from hoi_forge.text import Vocab


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=20240607)
    ap.add_argument("--steps", type=int, default=3000)
    ap.add_argument("--rows", type=int, default=50)
    ap.add_argument("--lam", type=float, nargs="+", default=[0.0, 0.1, 0.3, 1.0])
    args = ap.parse_args()

    lib = default_library()
    recs = generate_dataset(1000 + args.rows, args.seed, lib)
    train, held = recs[:1000], recs[1000:]
    vocab = Vocab.from_prompts([r.prompt for r in recs])
    with threadpool_limits(1):
        prior, _ = train_prior(train, lib, PriorConfig(cfg_scale=1.0), args.steps, args.seed, vocab=vocab)
        contact, _ = train_contact(train, lib, ContactConfig(), 2 * args.steps // 3, args.seed, vocab=vocab)

    objs = [lib[r.object_name] for r in held]
    cond = prior_condition(held, lib, vocab, prior.cfg.n_points)
    con = GuidanceConfig(use_norm=False, use_balance=False)
    iv = lambda S: np.mean([M.intersect_volume(s[:159], o, s[159:]) for s, o in zip(S, objs)])
    print(f"heldout ground truth: IV {iv(np.stack([r.state for r in held])):.3f} cm3")
    print("lam    g_con unguided  g_con guided  IV unguided  IV guided")
    for lam in args.lam:
        cfg = dataclasses.replace(GuidanceConfig(lam_schedule="constant"), lam=lam)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = guided_sample(prior, contact, cond, [r.prompt for r in held], objs, cfg,
                                np.random.default_rng(7))
        live = ~res.flagged
        if not live.any():
            print(f"{lam:<6} no contacts predicted")
            continue
        gu = np.median(objective_grad(res.coarse, res.targets, con)[0][live])
        gr = np.median(objective_grad(res.states, res.targets, con)[0][live])
        print(f"{lam:<6} {gu:14.5f}  {gr:12.5f}  {iv(res.coarse):11.3f}  {iv(res.states):9.3f}")


if __name__ == "__main__":
    main()
