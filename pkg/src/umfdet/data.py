"""Manifest data model and toy-corpus synthesis.

A corpus is a JSONL manifest, one sample per line, with the fixed field
layout ``id, title, image, label, manipulation{kind, mask_ref, p_src, p_mod,
rewrite_log, edit_strength, similarity}, cot{think, answer, verdict}``.
The toy synthesizer produces balanced ternary samples whose category cues
(sensational wording, image-feature perturbation, distorted titles) scale
with a single cue-strength knob, plus a template rationale per sample.
"""

from __future__ import annotations

import base64
import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, ManifestError


class Category(enum.Enum):
    REAL = "real"
    HUMAN_CRAFTED = "human_crafted"
    AI_SYNTHESIZED = "ai_synthesized"

    @property
    def expert_index(self) -> int:
        """Expert slot this category corresponds to: reality/deception/synthesis."""
        return _EXPERT_INDEX[self]

    @classmethod
    def parse(cls, text: str) -> "Category | None":
        try:
            return cls(text.strip().lower())
        except ValueError:
            return None


_EXPERT_INDEX = {Category.REAL: 0, Category.HUMAN_CRAFTED: 1, Category.AI_SYNTHESIZED: 2}
CATEGORY_NAMES = tuple(c.value for c in Category)

MANIPULATION_KINDS = ("none", "face_swap", "face_attribute", "full_generation",
                      "inpaint_replace", "style_transfer", "pure_fake_text",
                      "keyword_distortion")
TEXT_KINDS = ("pure_fake_text", "keyword_distortion")


@dataclass
class ImagePayload:
    """Either a raw array [C, S, S] (S <= 64), a feature matrix [N_v, H_v],
    or an unresolved relative file reference; exactly one is set."""
    raw: np.ndarray | None = None
    feat: np.ndarray | None = None
    path: str | None = None

    def __post_init__(self):
        present = sum(x is not None for x in (self.raw, self.feat, self.path))
        if present != 1:
            raise DataError(f"image payload needs exactly one variant, got {present}")
        if self.raw is not None:
            self.raw = np.asarray(self.raw, dtype=np.float64)
            if self.raw.ndim != 3 or self.raw.shape[0] not in (1, 3):
                raise DataError(f"raw image must be [C, S, S] with C in (1, 3), got {self.raw.shape}")
            if self.raw.shape[1] != self.raw.shape[2] or self.raw.shape[1] > 64:
                raise DataError(f"raw image must be square with side <= 64, got {self.raw.shape}")
            if not np.isfinite(self.raw).all():
                raise DataError("raw image contains non-finite values")
        if self.feat is not None:
            self.feat = np.asarray(self.feat, dtype=np.float64)
            if self.feat.ndim != 2:
                raise DataError(f"feature payload must be [N_v, H_v], got {self.feat.shape}")
            if not np.isfinite(self.feat).all():
                raise DataError("feature payload contains non-finite values")

    def to_json(self):
        if self.path is not None:
            return {"path": self.path}
        if self.feat is not None:
            return {"feat": [[float(x) for x in row] for row in self.feat]}
        return {"raw_b64": base64.b64encode(self.raw.astype("<f8").tobytes()).decode("ascii"),
                "shape": list(self.raw.shape)}

    @classmethod
    def from_json(cls, obj):
        if not isinstance(obj, dict):
            raise DataError("image field must be an object")
        keys = set(obj)
        if keys == {"path"}:
            return cls(path=obj["path"])
        if keys == {"feat"}:
            return cls(feat=np.asarray(obj["feat"], dtype=np.float64))
        if keys == {"raw_b64", "shape"}:
            buf = np.frombuffer(base64.b64decode(obj["raw_b64"]), dtype="<f8")
            return cls(raw=buf.reshape(obj["shape"]).copy())
        raise DataError(f"unrecognized image payload keys {sorted(keys)}")


@dataclass
class ManipulationAnnotation:
    kind: str = "none"
    mask_ref: str | None = None
    prompt_pair: tuple | None = None  # (p_src, p_mod)
    rewrite_log: dict | None = None   # embedded RewriteLog (see textforge)
    edit_strength: float | None = None
    similarity: float | None = None

    def validate(self, label: Category):
        if self.kind not in MANIPULATION_KINDS:
            raise DataError(f"unknown manipulation kind {self.kind!r}")
        if (self.kind == "none") != (label is Category.REAL):
            raise DataError(f"kind {self.kind!r} inconsistent with label {label.value!r} "
                            "(kind none <=> label real)")
        if self.kind == "inpaint_replace" and (self.mask_ref is None or self.prompt_pair is None):
            raise DataError("inpaint_replace requires mask_ref and prompt_pair")
        if self.kind in TEXT_KINDS and self.rewrite_log is None:
            raise DataError(f"text manipulation {self.kind!r} requires rewrite_log")
        if self.similarity is not None and not 0.0 <= self.similarity <= 1.0:
            raise DataError(f"similarity {self.similarity} outside [0, 1]")

    def to_json(self):
        return {
            "kind": self.kind,
            "mask_ref": self.mask_ref,
            "p_src": self.prompt_pair[0] if self.prompt_pair else None,
            "p_mod": self.prompt_pair[1] if self.prompt_pair else None,
            "rewrite_log": self.rewrite_log,
            "edit_strength": self.edit_strength,
            "similarity": self.similarity,
        }

    @classmethod
    def from_json(cls, obj):
        allowed = {"kind", "mask_ref", "p_src", "p_mod", "rewrite_log",
                   "edit_strength", "similarity"}
        extra = set(obj) - allowed
        if extra:
            raise DataError(f"unknown manipulation keys {sorted(extra)}")
        pair = None
        if obj.get("p_src") is not None or obj.get("p_mod") is not None:
            pair = (obj.get("p_src"), obj.get("p_mod"))
        return cls(kind=obj.get("kind", "none"), mask_ref=obj.get("mask_ref"),
                   prompt_pair=pair, rewrite_log=obj.get("rewrite_log"),
                   edit_strength=obj.get("edit_strength"), similarity=obj.get("similarity"))


@dataclass
class CotNote:
    """Manifest-level rationale record: the persisted slice of a CotRecord."""
    think: str
    answer: str
    verdict: str

    def to_json(self):
        return {"think": self.think, "answer": self.answer, "verdict": self.verdict}

    @classmethod
    def from_json(cls, obj):
        extra = set(obj) - {"think", "answer", "verdict"}
        if extra:
            raise DataError(f"unknown cot keys {sorted(extra)}")
        return cls(think=obj["think"], answer=obj["answer"], verdict=obj["verdict"])


@dataclass
class NewsSample:
    id: str
    title: str
    image: ImagePayload
    label: Category
    annotation: ManipulationAnnotation = field(default_factory=ManipulationAnnotation)
    cot: CotNote | None = None

    def validate(self):
        if not self.id:
            raise DataError("sample id must be non-empty")
        self.annotation.validate(self.label)

    def to_json(self):
        return {
            "id": self.id,
            "title": self.title,
            "image": self.image.to_json(),
            "label": self.label.value,
            "manipulation": self.annotation.to_json(),
            "cot": self.cot.to_json() if self.cot else None,
        }

    @classmethod
    def from_json(cls, obj):
        extra = set(obj) - {"id", "title", "image", "label", "manipulation", "cot"}
        if extra:
            raise DataError(f"unknown sample keys {sorted(extra)}")
        label = Category.parse(obj.get("label", ""))
        if label is None:
            raise DataError(f"unknown label {obj.get('label')!r}")
        sample = cls(
            id=obj["id"],
            title=obj["title"],
            image=ImagePayload.from_json(obj["image"]),
            label=label,
            annotation=ManipulationAnnotation.from_json(obj.get("manipulation") or {}),
            cot=CotNote.from_json(obj["cot"]) if obj.get("cot") else None,
        )
        sample.validate()
        return sample


# ---------------------------------------------------------------------------
# manifest io


def save_manifest(samples, path):
    with open(path, "w", encoding="utf-8") as fh:
        for sample in samples:
            fh.write(json.dumps(sample.to_json(), sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def load_manifest(path):
    """Parse a JSONL manifest; failures cite the 1-based line number."""
    samples = []
    seen_ids = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"malformed JSON ({exc.msg})", line=lineno) from exc
            try:
                sample = NewsSample.from_json(obj)
            except DataError as exc:
                raise ManifestError(str(exc), line=lineno) from exc
            if sample.id in seen_ids:
                raise ManifestError(
                    f"duplicate id {sample.id!r} (first seen on line {seen_ids[sample.id]})",
                    line=lineno)
            seen_ids[sample.id] = lineno
            samples.append(sample)
    return samples


def similarity_gate(samples, threshold: float = 0.7):
    """Keep samples whose similarity score is >= threshold (inclusive).

    Samples without a score are not subject to the gate and pass through.
    """
    kept, dropped = [], []
    for sample in samples:
        sim = sample.annotation.similarity
        if sim is None or sim >= threshold:
            kept.append(sample)
        else:
            dropped.append(sample)
    return kept, dropped


# ---------------------------------------------------------------------------
# splitting


@dataclass
class SplitSpec:
    ratios: tuple = (8, 1, 1)
    seed: int = 0


def split(samples, spec: SplitSpec):
    """Stratified, seeded 8:1:1 partition; returns (train, val, test)."""
    if len(spec.ratios) != 3 or any(r <= 0 for r in spec.ratios):
        raise ConfigError(f"ratios must be three positive numbers, got {spec.ratios}")
    by_label = {c: [] for c in Category}
    for sample in samples:
        by_label[sample.label].append(sample)
    for c, group in by_label.items():
        if 0 < len(group) < 10:
            raise ConfigError(f"class {c.value} has only {len(group)} samples; "
                              "need >= 10 to stratify")
    rng = np.random.default_rng(spec.seed)
    total = sum(spec.ratios)
    train, val, test = [], [], []
    for c in Category:
        group = by_label[c]
        if not group:
            continue
        order = rng.permutation(len(group))
        n = len(group)
        n_train = math.floor(n * spec.ratios[0] / total)
        n_val = math.floor(n * spec.ratios[1] / total)
        shuffled = [group[i] for i in order]
        train.extend(shuffled[:n_train])
        val.extend(shuffled[n_train:n_train + n_val])
        test.extend(shuffled[n_train + n_val:])
    return train, val, test


# ---------------------------------------------------------------------------
# toy corpus synthesis

_PERSONS = ("Obama", "Merkel", "Macron", "Ardern", "Biden", "Modi")
_LOCATIONS = ("Berlin", "Oslo", "Paris", "London", "Tokyo", "Madrid", "Cairo", "Sydney")
_DAYS = ("Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday")
_VERBS = ("visits", "opens", "announces", "inspects", "praises", "tours")
_NOUNS = ("bridge", "summit", "festival", "harbor", "museum", "stadium", "library", "market")
_ADJS = ("large", "peaceful", "happy", "strong", "bright", "calm", "modern", "quiet")
_SENSATIONAL = ("Shocking:", "Unbelievable:", "Exposed:", "Outrageous:")

TOY_FEAT_TOKENS = 4
TOY_FEAT_WIDTH = 64
# Added (scaled by cue strength) to every feature row of ai_synthesized images.
_AI_PATTERN = np.zeros((TOY_FEAT_TOKENS, TOY_FEAT_WIDTH))
_AI_PATTERN[:, :16] = 2.0

_THINK_TEMPLATES = {
    Category.REAL:
        "Scene and caption line up with no manipulation traces visible [image]. "
        "Wording around {ent} stays factual with no rewriting cues [text]. "
        "Evidence points to authentic reporting.",
    Category.HUMAN_CRAFTED:
        "The photo itself shows no editing artifacts [image]. "
        "Phrasing is sensational and overstates the situation in {ent} [text]. "
        "This reads like a human written rumor.",
    Category.AI_SYNTHESIZED:
        "Feature patterns in the image suggest generative manipulation [image]. "
        "Wording of the claim about {ent} looks rewritten [text]. "
        "Cues match machine generated content.",
}


def template_cot(label: Category, entity: str) -> CotNote:
    """Schema-valid rationale consistent with the label, grounded in both modalities."""
    think = _THINK_TEMPLATES[label].format(ent=entity)
    return CotNote(think=think, answer=label.value, verdict="accepted")


def _toy_title(rng):
    person = _PERSONS[rng.integers(len(_PERSONS))]
    verb = _VERBS[rng.integers(len(_VERBS))]
    adj = _ADJS[rng.integers(len(_ADJS))]
    noun = _NOUNS[rng.integers(len(_NOUNS))]
    location = _LOCATIONS[rng.integers(len(_LOCATIONS))]
    day = _DAYS[rng.integers(len(_DAYS))]
    return f"{person} {verb} the {adj} {noun} in {location} on {day}", person, location, noun


def synth_toy_corpus(n: int, cue_strength: float, seed: int):
    """Balanced ternary corpus with label cues in both modalities.

    Cue strength 1 makes the categories cleanly separable (sensational
    wording for rumors, a fixed feature perturbation plus optional title
    distortion for ai content); cue strength 0 makes all three label
    conditionals identical. Toy rumors are fabricated by sensational
    rewriting, so they carry a pure_fake_text annotation with the insertion
    logged (the manifest invariant ties kind "none" to real samples only).
    """
    from . import textforge  # late import: textforge depends on this module

    if n < 30:
        raise ConfigError(f"toy corpus needs n >= 30, got {n}")
    if not 0.0 <= cue_strength <= 1.0:
        raise ConfigError(f"cue_strength must be in [0, 1], got {cue_strength}")
    rng = np.random.default_rng(seed)
    lexicon = textforge.default_lexicon()
    gazetteer = _toy_gazetteer()
    labels = [list(Category)[i % 3] for i in range(n)]
    samples = []
    for i, label in enumerate(labels):
        title, person, location, noun = _toy_title(rng)
        feat = rng.normal(0.0, 1.0, (TOY_FEAT_TOKENS, TOY_FEAT_WIDTH))
        annotation = ManipulationAnnotation()
        if label is Category.HUMAN_CRAFTED:
            preserved = [person, location]
            replacements = []
            if rng.random() < cue_strength:
                prefix = _SENSATIONAL[rng.integers(len(_SENSATIONAL))]
                title = f"{prefix} {title}"
                replacements.append({"original": "", "replacement": prefix, "position": 0})
            log = {"strategy": "pure_fake", "preserved_entities": preserved,
                   "replacements": replacements, "output_title": title}
            annotation = ManipulationAnnotation(kind="pure_fake_text", rewrite_log=log)
        elif label is Category.AI_SYNTHESIZED:
            feat = feat + cue_strength * _AI_PATTERN
            if rng.random() < cue_strength:
                entities = _entities_for(title, gazetteer)
                child = np.random.default_rng(rng.integers(2**32))
                title, log = textforge.keyword_distortion(title, entities, lexicon, child)
                annotation = ManipulationAnnotation(kind="keyword_distortion",
                                                    rewrite_log=log.to_manifest())
            else:
                kind = ("full_generation", "inpaint_replace", "style_transfer")[rng.integers(3)]
                similarity = float(0.7 + 0.29 * rng.random())
                if kind == "inpaint_replace":
                    annotation = ManipulationAnnotation(
                        kind=kind, mask_ref=f"masks/toy-{i:05d}.png",
                        prompt_pair=(noun, f"painted {noun}"), similarity=similarity)
                else:
                    annotation = ManipulationAnnotation(kind=kind, similarity=similarity)
        entity = person if rng.random() < 0.5 else location
        sample = NewsSample(
            id=f"toy-{i:05d}",
            title=title,
            image=ImagePayload(feat=feat),
            label=label,
            annotation=annotation,
            cot=template_cot(label, entity),
        )
        sample.validate()
        samples.append(sample)
    return samples


def _toy_gazetteer():
    from .cot import Gazetteer  # late import: cot depends on this module
    entries = {}
    entries.update({p: "person" for p in _PERSONS})
    entries.update({loc: "location" for loc in _LOCATIONS})
    entries.update({d: "event_time" for d in _DAYS})
    return Gazetteer(entries)


def _entities_for(title, gazetteer):
    from .cot import extract_entities
    return extract_entities(title, gazetteer)


# ---------------------------------------------------------------------------
# statistics

REFERENCE_COUNTS = {"real": 49034, "human_crafted": 24726, "ai_synthesized": 53523}
REFERENCE_TOTAL = 127283


def corpus_stats(samples):
    by_label = {name: 0 for name in CATEGORY_NAMES}
    by_kind = {}
    for sample in samples:
        by_label[sample.label.value] += 1
        by_kind[sample.annotation.kind] = by_kind.get(sample.annotation.kind, 0) + 1
    by_label_total = sum(by_label.values())
    return {
        "total": by_label_total,
        "by_label": by_label,
        "by_kind": dict(sorted(by_kind.items())),
        "matches_full_scale_reference": check_reference_counts(by_label),
    }


def check_reference_counts(by_label) -> bool:
    """True iff the counts equal the full-scale reference corpus breakdown
    (49,034 real + 24,726 human_crafted + 53,523 ai_synthesized = 127,283)."""
    try:
        counts = {name: int(by_label[name]) for name in CATEGORY_NAMES}
    except (KeyError, TypeError, ValueError):
        return False
    if counts != REFERENCE_COUNTS:
        return False
    return sum(counts.values()) == REFERENCE_TOTAL
