"""
Synthetic scene corpus.

Each scene is a pure function of its seed: object count, classes, boxes and
probabilities come from one generator, features from per-object child seeds,
and the reference captions from a small grammar that names relative size and
left/right order, so a model has to read box geometry to caption correctly.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Sequence

import numpy as np

from src.core.config import get_settings
from src.core.exceptions import ConfigError
from src.core.rng import derive_seed
from src.domain.run_models import SynthConfig
from src.domain.scene_models import Box, Proposal, Scene

logger = logging.getLogger(__name__)

CLASS_WORDS: tuple[str, ...] = (
    "cat", "dog", "car", "van", "boy", "girl",
    "tree", "ball", "horse", "bird", "chair", "table",
)

FEATURE_NOISE = 0.05
_PROTOTYPE_SALT = 7919
_BACKGROUND_SALT = 104729

PAIR_TEMPLATES: tuple[str, ...] = (
    "a {s} {rel} a {o}",
    "there is a {s} {rel} a {o}",
    "a {o} {inv} a {s}",
    "a photo of a {s} {rel} a {o}",
    "the {s} is {rel} the {o}",
)

SINGLE_TEMPLATES: tuple[str, ...] = (
    "a {s}",
    "there is a {s}",
    "a photo of a {s}",
    "a {s} in the picture",
    "a single {s}",
)


def pseudo_features(
    class_id: int,
    box: Box,
    seed: int,
    d_feat: int = 64,
    image_w: float = 640.0,
    image_h: float = 480.0,
) -> np.ndarray:
    """
    Unit-norm stand-in for a detector feature.

    The first d_feat - 4 entries are the class prototype plus N(0, 0.05) noise
    drawn from `seed`; the last 4 hold the box normalized by the image size.
    """
    if class_id < 0:
        raise ConfigError(f"Invalid class id {class_id}")
    body = d_feat - 4
    prototype = np.random.default_rng(derive_seed(_PROTOTYPE_SALT, class_id)).standard_normal(body)
    noise = np.random.default_rng(derive_seed(seed, class_id)).normal(0.0, FEATURE_NOISE, body)
    slots = np.array([box.x / image_w, box.y / image_h, box.w / image_w, box.h / image_h])
    vec = np.concatenate([prototype + noise, slots])
    return vec / np.linalg.norm(vec)


def _size_words(subject: Proposal, obj: Proposal) -> tuple[str, str]:
    ratio = subject.box.area / obj.box.area
    if ratio > 2.0:
        return "big ", "small "
    if ratio < 0.5:
        return "small ", "big "
    return "", ""


def render_captions(proposals: Sequence[Proposal], count: int = 5) -> list[str]:
    """
    Reference captions for the first one or two proposals.

    Size comparatives appear when the area ratio is above 2 or below 1/2;
    "left of" / "right of" follow the center x order. A third object adds
    a " near a <class>" suffix.
    """
    if not proposals:
        raise ConfigError("render_captions needs at least one proposal")

    if len(proposals) == 1:
        s = proposals[0].class_word
        captions = [t.format(s=s) for t in SINGLE_TEMPLATES]
    else:
        subject, obj = proposals[0], proposals[1]
        s_adj, o_adj = _size_words(subject, obj)
        left = subject.box.x < obj.box.x
        rel, inv = ("left of", "right of") if left else ("right of", "left of")
        fill = dict(s=f"{s_adj}{subject.class_word}", o=f"{o_adj}{obj.class_word}", rel=rel, inv=inv)
        captions = [t.format(**fill) for t in PAIR_TEMPLATES]
        if len(proposals) >= 3:
            captions = [f"{c} near a {proposals[2].class_word}" for c in captions]

    return [captions[i % len(captions)] for i in range(count)]


def generate_scene(seed: int, cfg: SynthConfig, scene_id: Optional[str] = None) -> Scene:
    """
    Build one scene deterministically from `seed`.

    Raises:
        ConfigError: If more classes are requested than the grammar knows
    """
    if cfg.n_classes > len(CLASS_WORDS):
        raise ConfigError(f"n_classes={cfg.n_classes} exceeds the {len(CLASS_WORDS)} known class words")

    rng = np.random.default_rng(seed)
    n_objects = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
    width, height = float(cfg.image_w), float(cfg.image_h)

    proposals: list[Proposal] = []
    for index in range(n_objects):
        class_id = int(rng.integers(cfg.n_classes))
        w = float(rng.uniform(0.05, 0.5)) * width
        h = float(rng.uniform(0.05, 0.5)) * height
        box = Box(
            x=float(rng.uniform(w / 2, width - w / 2)),
            y=float(rng.uniform(h / 2, height - h / 2)),
            w=w,
            h=h,
        )
        # (0.7, 1.0]: every synthetic proposal clears the detection threshold
        prob = 0.7 + 0.3 * (1.0 - float(rng.random()))
        feature = pseudo_features(class_id, box, derive_seed(seed, index), cfg.d_feat, width, height)
        proposals.append(Proposal(
            box=box,
            class_word=CLASS_WORDS[class_id],
            class_id=class_id,
            class_prob=prob,
            feature=feature.tolist(),
        ))

    background = np.random.default_rng(derive_seed(seed, _BACKGROUND_SALT)).standard_normal(cfg.d_feat)
    background /= np.linalg.norm(background)

    return Scene(
        id=scene_id or f"scene-{seed:05d}",
        image_w=width,
        image_h=height,
        proposals=proposals,
        background=background.tolist(),
        refs=render_captions(proposals, cfg.captions_per_scene),
    )


def generate_corpus(cfg: SynthConfig) -> list[Scene]:
    """Scenes for seeds cfg.seed .. cfg.seed + n_scenes - 1, in seed order."""
    seeds = range(cfg.seed, cfg.seed + cfg.n_scenes)
    workers = get_settings().threads
    if workers > 1 and cfg.n_scenes > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scenes = list(pool.map(lambda s: generate_scene(s, cfg), seeds))
    else:
        scenes = [generate_scene(s, cfg) for s in seeds]
    logger.info(f"Generated {len(scenes)} synthetic scenes (seed {cfg.seed}, {cfg.n_classes} classes)")
    return scenes
