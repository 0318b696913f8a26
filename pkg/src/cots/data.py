"""Synthetic paired image-token / text-token corpora.

Each concept owns one categorical distribution per image position and per text
position; ``concept_sharpness`` scales the logits (``inf`` collapses every
distribution to its mode). On top of the concept signal, a fixed subset of text
positions are "descriptive": they carry a lexicon translation of the image
token at a fixed image position. That shared instance content is what makes
instance-level retrieval (one true match among many same-concept candidates)
learnable rather than capped at concept-level chance.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, GenerationError, ParseError

SHARPNESS_SCALE = 8.0


def derive_seed(root: int, tag: str) -> int:
    """Child seed for a named component; stable across runs and platforms."""
    ss = np.random.SeedSequence([int(root) & 0xFFFFFFFF, zlib.crc32(tag.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass
class CorpusConfig:
    n_pairs: int = 2000
    vocab_image: int = 64
    vocab_text: int = 64
    image_len: int = 16
    text_len_min: int = 8
    text_len_max: int = 16
    n_concepts: int = 4
    concept_sharpness: float = 20.0
    coupling: float = 0.5
    noise_rate: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.noise_rate < 1.0:
            raise ConfigError(f"noise_rate must be in [0, 1), got {self.noise_rate}")
        if self.n_concepts < 2:
            raise ConfigError("n_concepts must be >= 2")
        for name in ("n_pairs", "vocab_image", "vocab_text", "image_len", "text_len_min", "text_len_max"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.text_len_min > self.text_len_max:
            raise ConfigError("text_len_min > text_len_max")
        if not 0.0 <= self.coupling <= 1.0:
            raise ConfigError("coupling must be in [0, 1]")
        if not self.concept_sharpness > 0:
            raise ConfigError("concept_sharpness must be positive")


@dataclass
class PairedSample:
    image_tokens: list[int]
    text_tokens: list[int]
    concept_id: int
    is_noise: bool = False

    def to_record(self) -> dict:
        return {
            "image_tokens": list(map(int, self.image_tokens)),
            "text_tokens": list(map(int, self.text_tokens)),
            "concept_id": int(self.concept_id),
            "is_noise": bool(self.is_noise),
        }


@dataclass
class VideoSample:
    frames: list[list[int]]
    caption: list[int]
    concept_id: int
    source_indices: list[int] = field(default_factory=list)


@dataclass
class ConceptModel:
    """Per-concept token distributions plus the image-to-text coupling."""

    image_probs: np.ndarray  # [n_concepts, image_len, vocab_image]
    text_probs: np.ndarray  # [n_concepts, text_len_max, vocab_text]
    lexicon: np.ndarray  # image token -> text token
    coupled: np.ndarray  # bool [text_len_max]
    source_pos: np.ndarray  # text position -> image position


def _sharpen(logits: np.ndarray, sharpness: float) -> np.ndarray:
    if math.isinf(sharpness):
        p = np.zeros_like(logits)
        np.put_along_axis(p, logits.argmax(axis=-1)[..., None], 1.0, axis=-1)
        return p
    z = logits * (sharpness / SHARPNESS_SCALE)
    z -= z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


def concept_model(cfg: CorpusConfig) -> ConceptModel:
    rng = np.random.default_rng(derive_seed(cfg.seed, "concepts"))
    img_logits = rng.standard_normal((cfg.n_concepts, cfg.image_len, cfg.vocab_image))
    txt_logits = rng.standard_normal((cfg.n_concepts, cfg.text_len_max, cfg.vocab_text))
    if cfg.vocab_text >= cfg.vocab_image:
        lexicon = rng.permutation(cfg.vocab_text)[: cfg.vocab_image]
    else:
        lexicon = rng.integers(0, cfg.vocab_text, size=cfg.vocab_image)
    n_coupled = int(round(cfg.coupling * cfg.text_len_max))
    coupled = np.zeros(cfg.text_len_max, dtype=bool)
    coupled[rng.permutation(cfg.text_len_max)[:n_coupled]] = True
    reps = -(-cfg.text_len_max // cfg.image_len)
    source_pos = np.concatenate([rng.permutation(cfg.image_len) for _ in range(reps)])[: cfg.text_len_max]
    return ConceptModel(
        image_probs=_sharpen(img_logits, cfg.concept_sharpness),
        text_probs=_sharpen(txt_logits, cfg.concept_sharpness),
        lexicon=lexicon.astype(np.int64),
        coupled=coupled,
        source_pos=np.asarray(source_pos, dtype=np.int64),
    )


def _draw(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """One categorical draw per row of ``probs`` via inverse CDF."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    idx = (cdf < u[:, None]).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def generate_corpus(cfg: CorpusConfig, n_pairs: int | None = None, stream: str = "samples") -> list[PairedSample]:
    """Deterministic corpus of clean pairs (noise is applied by ``inject_noise``).

    ``stream`` names an independent sample stream over the same concepts, so a
    held-out split can be drawn without touching the training draws.
    """
    cfg.validate()
    n = cfg.n_pairs if n_pairs is None else n_pairs
    cm = concept_model(cfg)
    rng = np.random.default_rng(derive_seed(cfg.seed, stream))
    out = []
    for _ in range(n):
        c = int(rng.integers(cfg.n_concepts))
        image = _draw(rng, cm.image_probs[c])
        length = int(rng.integers(cfg.text_len_min, cfg.text_len_max + 1))
        text = _draw(rng, cm.text_probs[c, :length])
        sel = cm.coupled[:length]
        text[sel] = cm.lexicon[image[cm.source_pos[:length][sel]]]
        out.append(PairedSample(image.tolist(), text.tolist(), c, False))
    return out


def inject_noise(corpus: list[PairedSample], noise_rate: float, seed: int) -> list[PairedSample]:
    """Mismatch ``floor(noise_rate * n)`` pairs by permuting their texts.

    Texts rotate among the chosen pairs so that each receives a text from a
    different concept; the multiset of texts is unchanged.
    """
    if not 0.0 <= noise_rate < 1.0:
        raise ConfigError(f"noise_rate must be in [0, 1), got {noise_rate}")
    out = [PairedSample(list(s.image_tokens), list(s.text_tokens), s.concept_id, s.is_noise) for s in corpus]
    n_noise = int(math.floor(noise_rate * len(corpus)))
    if n_noise == 0:
        return out
    rng = np.random.default_rng(seed)
    for _ in range(32):
        chosen = rng.choice(len(corpus), size=n_noise, replace=False)
        concepts = np.array([corpus[i].concept_id for i in chosen])
        if np.bincount(concepts).max() * 2 <= n_noise:
            break
    else:
        raise GenerationError("cannot mismatch the requested pairs: one concept dominates the selection")
    order = chosen[np.argsort(concepts, kind="stable")]
    shift = int(np.bincount(concepts).max())
    for pos, i in enumerate(order):
        donor = corpus[order[(pos + shift) % n_noise]]
        out[i].text_tokens = list(donor.text_tokens)
        out[i].is_noise = True
    return out


def make_videos(
    corpus: list[PairedSample],
    frames_per_video: int,
    seed: int,
    videos_per_concept: int | None = None,
) -> list[VideoSample]:
    """Group clean same-concept pairs into videos; caption comes from the first frame's pair."""
    if frames_per_video < 1:
        raise GenerationError("frames_per_video must be >= 1")
    rng = np.random.default_rng(seed)
    by_concept: dict[int, list[int]] = {}
    for i, s in enumerate(corpus):
        if not s.is_noise:
            by_concept.setdefault(s.concept_id, []).append(i)
    videos = []
    for c in sorted(by_concept):
        idx = rng.permutation(by_concept[c])
        n_videos = len(idx) // frames_per_video
        if videos_per_concept is not None:
            if n_videos < videos_per_concept:
                raise GenerationError(
                    f"concept {c} has {len(idx)} clean samples; need {videos_per_concept * frames_per_video}"
                )
            n_videos = videos_per_concept
        for v in range(n_videos):
            members = [int(i) for i in idx[v * frames_per_video : (v + 1) * frames_per_video]]
            videos.append(
                VideoSample(
                    frames=[list(corpus[i].image_tokens) for i in members],
                    caption=list(corpus[members[0]].text_tokens),
                    concept_id=c,
                    source_indices=members,
                )
            )
    if not videos:
        raise GenerationError("not enough same-concept samples to build a single video")
    return videos


def save_corpus(corpus: list[PairedSample], path) -> None:
    """Write one JSON object per line (UTF-8)."""
    with open(path, "w", encoding="utf-8") as f:
        for s in corpus:
            f.write(json.dumps(s.to_record(), separators=(",", ":")))
            f.write("\n")


_FIELDS = ("image_tokens", "text_tokens", "concept_id", "is_noise")


def load_corpus(path) -> list[PairedSample]:
    out = []
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    for i, line in enumerate(lines):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}: record {i} (line {i + 1}) is not valid JSON: {e.msg}", record=i) from None
        if not isinstance(rec, dict) or any(k not in rec for k in _FIELDS):
            raise ParseError(f"{path}: record {i} (line {i + 1}) lacks one of {_FIELDS}", record=i)
        try:
            sample = PairedSample(
                [int(t) for t in rec["image_tokens"]],
                [int(t) for t in rec["text_tokens"]],
                int(rec["concept_id"]),
                bool(rec["is_noise"]),
            )
        except (TypeError, ValueError) as e:
            raise ParseError(f"{path}: record {i} (line {i + 1}) has a malformed field: {e}", record=i) from None
        out.append(sample)
    return out


def token_histograms(corpus: list[PairedSample], vocab_image: int, vocab_text: int | None = None) -> np.ndarray:
    """Per-sample image-token counts (and text-token counts when ``vocab_text`` is given)."""
    rows = []
    for s in corpus:
        h = np.bincount(s.image_tokens, minlength=vocab_image).astype(float)
        if vocab_text is not None:
            h = np.concatenate([h, np.bincount(s.text_tokens, minlength=vocab_text)])
        rows.append(h)
    return np.array(rows).reshape(len(corpus), -1)


def corpus_summary(corpus: list[PairedSample]) -> dict:
    return {
        "n_pairs": len(corpus),
        "n_noise": int(np.sum([s.is_noise for s in corpus])),
        "concept_counts": np.bincount([s.concept_id for s in corpus]).tolist() if corpus else [],
    }


def config_dict(cfg: CorpusConfig) -> dict:
    return asdict(cfg)
