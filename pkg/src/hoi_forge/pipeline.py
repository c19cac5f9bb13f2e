"""Glue between records, object libraries and the three model stages."""
from __future__ import annotations

import numpy as np

from .contact import ContactConfig, ContactPredictor, hand_indicator, masked_hand
from .dataio import HOIRecord
from .encoders import ConditionBundle, make_condition
from .metrics import ClassifierConfig, train_classifier
from .prior import Normalizer, PosePrior, PriorConfig
from .text import ACTIONS, AnnotationError, Vocab, parse_prompt


def prompts_of(records) -> list[str]:
    return [r.prompt for r in records]


def clouds_of(records, objects) -> list[np.ndarray]:
    missing = {r.object_name for r in records} - set(objects)
    if missing:
        raise KeyError(f"objects not in the library: {sorted(missing)}")
    return [objects[r.object_name].points for r in records]


def prior_condition(records, objects, vocab: Vocab, n_points: int, cache=None) -> ConditionBundle:
    return make_condition(prompts_of(records), clouds_of(records, objects), vocab, n_points, cache=cache)


def contact_condition(records, objects, vocab: Vocab, n_points: int, cache=None) -> ConditionBundle:
    ind = np.array([hand_indicator(r.prompt) for r in records])
    hand = masked_hand(np.stack([r.human for r in records]), ind)
    return make_condition(prompts_of(records), clouds_of(records, objects), vocab, n_points, hand, cache)


def train_prior(records, objects, cfg: PriorConfig, steps: int, seed: int, batch: int = 32,
                lr: float = 1e-3, log_every: int = 50, vocab: Vocab | None = None):
    vocab = vocab or Vocab.from_prompts(prompts_of(records))
    states = np.stack([r.state for r in records])
    prior = PosePrior(cfg, vocab, Normalizer.fit(states), seed=seed)
    cond = prior_condition(records, objects, vocab, cfg.n_points)
    log = prior.fit(states, cond, steps, np.random.default_rng(seed), batch=batch, lr=lr,
                    log_every=log_every)
    return prior, log


def train_contact(records, objects, cfg: ContactConfig, steps: int, seed: int, batch: int = 32,
                  lr: float = 1e-3, log_every: int = 50, vocab: Vocab | None = None):
    vocab = vocab or Vocab.from_prompts(prompts_of(records))
    targets = np.stack([r.contact for r in records])
    model = ContactPredictor.for_data(cfg, vocab, targets, seed=seed)
    cond = contact_condition(records, objects, vocab, cfg.n_points)
    log = model.fit(targets, cond, steps, np.random.default_rng(seed), batch=batch, lr=lr,
                    log_every=log_every)
    return model, log


def train_action_classifier(records, cfg: ClassifierConfig, seed: int):
    poses = np.stack([r.human for r in records])
    return train_classifier(poses, [r.action for r in records], cfg, np.random.default_rng(seed))


def action_id(prompt: str, lexicon=None) -> int:
    """Action class of a prompt; synonyms map back to their action."""
    verb = parse_prompt(prompt).action
    if verb in ACTIONS:
        return ACTIONS.index(verb)
    for action, syns in (lexicon or {}).items():
        if verb in syns and action in ACTIONS:
            return ACTIONS.index(action)
    raise AnnotationError(f"unknown action '{verb}' in prompt {prompt!r}")


def records_from_states(states, prompts, object_names, contacts=None, lexicon=None,
                        meta: dict | None = None) -> list[HOIRecord]:
    out = []
    for k, s in enumerate(np.asarray(states, dtype=np.float64)):
        c = np.zeros((30, 4)) if contacts is None else contacts[k]
        out.append(HOIRecord(prompts[k], action_id(prompts[k], lexicon), s[:159], object_names[k],
                             s[159:], c, 0.0, dict(meta or {})))
    return out
