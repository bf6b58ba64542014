"""Synthetic triage corpus generation, tokenization, vocabulary, and splits.

The generator plants ground truth: urgent cases carry either one
red-flag token or one adjacent token pair whose members are harmless on
their own; general-practice cases carry at least one moderate symptom;
telecare cases carry only mild symptoms. Mild co-symptoms appear in
every class (with a skewed frequency profile, so the most frequent
tokens carry no class signal), which keeps documents length-matched and
the classes separable by token content alone when label noise is off.
Isolated pair members additionally leak into all classes at the noise
rate, so each member stays individually uninformative and only the
adjacent combination signals urgency.
"""

from __future__ import annotations

import hashlib
import json
import math
import string
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

LABELS = ("urgent_care", "general_practice", "telecare")
URGENT, GENERAL_PRACTICE, TELECARE = LABELS

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
PAD_ID = 0
UNK_ID = 1

GENDERS = ("male", "female")
MAX_AGE = 110


class SpecValidationError(ValueError):
    """A generator spec, record, or split request is malformed."""


@dataclass
class CaseRecord:
    """One synthetic patient contact.

    ``planted_flags`` holds token indices of ground-truth red-flag
    content (a red-flag single, or both members of a planted pair),
    independent of any later label flip.
    """

    tokens: list[str]
    label: str
    age: int
    gender: str
    planted_flags: list[int] = field(default_factory=list)


@dataclass(frozen=True)
class GeneratorSpec:
    """Knobs for the synthetic corpus generator."""

    n_red_flags: int = 10
    n_red_pairs: int = 5
    n_moderate: int = 90
    n_benign: int = 180
    n_filler: int = 200
    proportions: tuple[float, float, float] = (0.44, 0.17, 0.39)
    urgent_length: tuple[int, int, int] = (3, 8, 16)
    gp_length: tuple[int, int, int] = (3, 8, 16)
    tele_length: tuple[int, int, int] = (3, 8, 16)
    p_noise: float = 0.1
    label_noise: float = 0.0
    mode: str = "symptoms"
    pair_case_rate: float = 0.35

    def validate(self) -> None:
        for name in ("n_red_flags", "n_red_pairs", "n_moderate", "n_benign", "n_filler"):
            if getattr(self, name) < 1:
                raise SpecValidationError(f"{name} must be >= 1")
        if len(self.proportions) != 3 or any(p <= 0 for p in self.proportions):
            raise SpecValidationError("proportions must be three positive numbers")
        if abs(sum(self.proportions) - 1.0) > 1e-9:
            raise SpecValidationError("proportions must sum to 1")
        for name in ("urgent_length", "gp_length", "tele_length"):
            lo, mean, hi = getattr(self, name)
            if not (1 <= lo <= mean <= hi):
                raise SpecValidationError(f"{name} must satisfy 1 <= min <= mean <= max")
        if self.urgent_length[0] < 2:
            raise SpecValidationError("urgent_length min must be >= 2 to fit a planted pair")
        for name in ("p_noise", "label_noise"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise SpecValidationError(f"{name} must be in [0, 1)")
        if self.mode not in ("symptoms", "fulltext"):
            raise SpecValidationError(f"unknown mode {self.mode!r}")
        if not 0.0 <= self.pair_case_rate <= 1.0:
            raise SpecValidationError("pair_case_rate must be in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise SpecValidationError(f"unknown generator fields: {sorted(unknown)}")
        d = dict(d)
        for key in ("proportions", "urgent_length", "gp_length", "tele_length"):
            if key in d:
                d[key] = tuple(d[key])
        spec = cls(**d)
        spec.validate()
        return spec

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class Lexicon:
    """The disjoint token strata a spec generates from."""

    red_flags: tuple[str, ...]
    pairs: tuple[tuple[str, str], ...]
    moderate: tuple[str, ...]
    benign: tuple[str, ...]
    filler: tuple[str, ...]


def build_lexicon(spec: GeneratorSpec) -> Lexicon:
    """Deterministic stratified lexicon for a spec; strata never overlap."""
    return Lexicon(
        red_flags=tuple(f"crit{i:02d}" for i in range(spec.n_red_flags)),
        pairs=tuple((f"duo{i:02d}a", f"duo{i:02d}b") for i in range(spec.n_red_pairs)),
        moderate=tuple(f"mod{i:02d}" for i in range(spec.n_moderate)),
        benign=tuple(f"mild{i:02d}" for i in range(spec.n_benign)),
        filler=tuple(f"word{i:03d}" for i in range(spec.n_filler)),
    )


def oracle_label(tokens: Sequence[str], lexicon: Lexicon) -> str:
    """Rule the generator plants: red single or adjacent complete pair means
    urgent, else any moderate symptom means general practice, else telecare."""
    toks = set(tokens)
    if toks & set(lexicon.red_flags):
        return URGENT
    for a, b in lexicon.pairs:
        if a in toks and b in toks:
            return URGENT
    if toks & set(lexicon.moderate):
        return GENERAL_PRACTICE
    return TELECARE


@dataclass
class Corpus:
    """Generated or loaded case records plus generation provenance."""

    records: list[CaseRecord]
    spec_hash: str | None = None
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.records)


def _largest_remainder(quotas: Sequence[float], total: int) -> list[int]:
    floors = [math.floor(q) for q in quotas]
    remainder = total - sum(floors)
    by_frac = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - floors[i]), i))
    for i in by_frac[:remainder]:
        floors[i] += 1
    return floors


def _zipf_weights(n: int, s: float = 1.0) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


def _draw_length(rng: np.random.Generator, dist: tuple[int, int, int]) -> int:
    lo, mean, hi = dist
    return int(np.clip(lo + rng.poisson(mean - lo), lo, hi))


class _CaseBuilder:
    def __init__(self, spec: GeneratorSpec, lex: Lexicon, rng: np.random.Generator):
        self.spec = spec
        self.lex = lex
        self.rng = rng
        self.red = np.array(lex.red_flags)
        self.benign = np.array(lex.benign)
        self.moderate = np.array(lex.moderate)
        self.filler = np.array(lex.filler)
        self.members = np.array([t for pair in lex.pairs for t in pair])
        self.w_benign = _zipf_weights(len(self.benign))
        self.w_moderate = _zipf_weights(len(self.moderate))
        self.w_filler = _zipf_weights(len(self.filler))

    def _sample(self, pool: np.ndarray, weights: np.ndarray, n: int) -> list[str]:
        n = min(n, len(pool))
        if n <= 0:
            return []
        return [str(t) for t in self.rng.choice(pool, size=n, replace=False, p=weights)]

    def _shuffle(self, items: list[str]) -> list[str]:
        order = self.rng.permutation(len(items))
        return [items[i] for i in order]

    def _lone_member(self, budget: int) -> list[str]:
        # a single pair member is harmless on its own; never plant its partner
        if budget > 0 and self.rng.random() < self.spec.p_noise:
            return [str(self.rng.choice(self.members))]
        return []

    def build(self, label: str) -> tuple[list[str], list[int]]:
        rng = self.rng
        if label == URGENT:
            length = _draw_length(rng, self.spec.urgent_length)
            pair_case = rng.random() < self.spec.pair_case_rate
            planted = 2 if pair_case else 1
            # co-symptoms stay benign: a moderate symptom planted next to a
            # red flag reliably steals the attention maximum and saturates
            # the urgent-class feature ranking with non-red tokens
            extras: list[str] = []
            if not pair_case:
                extras += self._lone_member(length - planted)
            co = self._shuffle(
                extras + self._sample(self.benign, self.w_benign, length - planted - len(extras))
            )
            if pair_case:
                a, b = self.lex.pairs[int(rng.integers(0, len(self.lex.pairs)))]
                pos = int(rng.integers(0, len(co) + 1))
                return co[:pos] + [a, b] + co[pos:], [pos, pos + 1]
            red = str(rng.choice(self.red))
            pos = int(rng.integers(0, len(co) + 1))
            return co[:pos] + [red] + co[pos:], [pos]
        if label == GENERAL_PRACTICE:
            length = _draw_length(rng, self.spec.gp_length)
            n_mod = max(1, min(int(rng.poisson(1.5)), length - 1, 3))
            co = self._sample(self.moderate, self.w_moderate, n_mod)
            co += self._lone_member(length - len(co))
            co += self._sample(self.benign, self.w_benign, length - len(co))
            return self._shuffle(co), []
        length = _draw_length(rng, self.spec.tele_length)
        co = self._lone_member(length - 1)
        co += self._sample(self.benign, self.w_benign, length - len(co))
        return self._shuffle(co), []

    def interleave_filler(
        self, tokens: list[str], flags: list[int]
    ) -> tuple[list[str], list[int]]:
        # pad the symptom sequence with function words; a planted pair
        # stays adjacent so it remains one width-2 window
        rng = self.rng
        pair_tail = set()
        if len(flags) == 2 and flags[1] == flags[0] + 1:
            pair_tail.add(flags[1])
        out: list[str] = []
        new_flags = dict.fromkeys(flags, -1)
        for i, tok in enumerate(tokens):
            if i not in pair_tail:
                run = int(rng.poisson(3.0))
                out.extend(self.rng.choice(self.filler, size=run, p=self.w_filler))
            if i in new_flags:
                new_flags[i] = len(out)
            out.append(tok)
        out.extend(rng.choice(self.filler, size=int(rng.poisson(3.0)), p=self.w_filler))
        return [str(t) for t in out], [new_flags[i] for i in flags]


def generate_corpus(spec: GeneratorSpec, n: int, seed: int) -> Corpus:
    """Generate ``n`` records under ``spec``, deterministically in ``seed``."""
    spec.validate()
    if n < 1:
        raise SpecValidationError("corpus size must be >= 1")
    rng = np.random.default_rng(seed)
    lex = build_lexicon(spec)
    builder = _CaseBuilder(spec, lex, rng)

    counts = _largest_remainder([n * p for p in spec.proportions], n)
    records: list[CaseRecord] = []
    for label, count in zip(LABELS, counts):
        for _ in range(count):
            tokens, flags = builder.build(label)
            if spec.mode == "fulltext":
                tokens, flags = builder.interleave_filler(tokens, flags)
            final_label = label
            if spec.label_noise > 0 and rng.random() < spec.label_noise:
                others = [c for c in LABELS if c != label]
                final_label = others[int(rng.integers(0, 2))]
            records.append(
                CaseRecord(
                    tokens=tokens,
                    label=final_label,
                    age=int(rng.integers(0, 101)),
                    gender=str(rng.choice(np.array(GENDERS))),
                    planted_flags=flags,
                )
            )
    rng.shuffle(records)
    return Corpus(records=records, spec_hash=spec.hash(), seed=seed)


# -- tokenization and vocabulary ------------------------------------------

_PUNCT = string.punctuation


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip edge punctuation.

    Interior punctuation survives, so "37,4" stays one token.
    """
    out = []
    for word in text.lower().split():
        word = word.strip(_PUNCT)
        if word:
            out.append(word)
    return out


class Vocabulary:
    """Token-to-id mapping with reserved padding (0) and unknown (1) slots."""

    def __init__(self, tokens_in_order: Sequence[str]):
        self.id_to_token = [PAD_TOKEN, UNK_TOKEN] + list(tokens_in_order)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise SpecValidationError("vocabulary tokens must be unique")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.id_to_token[2:], fh, ensure_ascii=False)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))


def build_vocab(
    records: Iterable[CaseRecord],
    min_count: int = 1,
    stopwords: Iterable[str] = (),
) -> Vocabulary:
    """Count tokens, drop stopwords and rare tokens, assign dense ids.

    Ids start at 2 and follow (count desc, token asc) order, so equal
    corpora always produce equal vocabularies.
    """
    stop = set(stopwords)
    counts: dict[str, int] = {}
    for r in records:
        for tok in r.tokens:
            counts[tok] = counts.get(tok, 0) + 1
    kept = [t for t, c in counts.items() if c >= min_count and t not in stop]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


@dataclass
class EncodedCase:
    """Model-ready view of a record: padded ids, demographics, class index."""

    ids: np.ndarray
    demographics: np.ndarray
    label: int


def encode(record: CaseRecord, vocab: Vocabulary, max_len: int) -> EncodedCase:
    """Map tokens to ids (truncate/pad to ``max_len``) and pack demographics."""
    if max_len < 1:
        raise SpecValidationError("max_len must be >= 1")
    if not record.tokens:
        raise SpecValidationError("cannot encode a record with no tokens")
    ids = np.zeros(max_len, dtype=np.int64)
    for i, tok in enumerate(record.tokens[:max_len]):
        ids[i] = vocab.id_of(tok)
    demo = np.array(
        [
            record.age / MAX_AGE,
            1.0 if record.gender == "male" else 0.0,
            1.0 if record.gender == "female" else 0.0,
        ]
    )
    return EncodedCase(ids=ids, demographics=demo, label=LABELS.index(record.label))


def decode(ids: np.ndarray, vocab: Vocabulary) -> list[str]:
    """Inverse of encode up to truncation and unknown tokens; drops padding."""
    return [vocab.id_to_token[i] for i in ids if i != PAD_ID]


def encode_corpus(
    records: Sequence[CaseRecord], vocab: Vocabulary, max_len: int
) -> list[EncodedCase]:
    return [encode(r, vocab, max_len) for r in records]


# -- splits ----------------------------------------------------------------


def split(
    records: Sequence[CaseRecord],
    ratios: tuple[float, float, float] = (0.9, 0.05, 0.05),
    seed: int = 0,
) -> tuple[list[int], list[int], list[int]]:
    """Stratified train/val/test index split.

    Split totals follow largest-remainder rounding of the ratios; each
    class lands within one record of its ideal quota per split. The
    same records, ratios, and seed always produce the same partition.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise SpecValidationError("ratios must be three nonnegative numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise SpecValidationError("ratios must sum to 1")
    n = len(records)
    targets = _largest_remainder([n * r for r in ratios], n)

    rng = np.random.default_rng(seed)
    by_class: dict[str, list[int]] = {c: [] for c in LABELS}
    for i, r in enumerate(records):
        if r.label not in by_class:
            raise SpecValidationError(f"unknown label {r.label!r}")
        by_class[r.label].append(i)
    for idxs in by_class.values():
        rng.shuffle(idxs)

    classes = [c for c in LABELS if by_class[c]]
    quota = {c: [len(by_class[c]) * r for r in ratios] for c in classes}
    alloc = {c: [math.floor(q) for q in quota[c]] for c in classes}
    row_deficit = {c: len(by_class[c]) - sum(alloc[c]) for c in classes}
    col_deficit = [t - sum(alloc[c][s] for c in classes) for s, t in enumerate(targets)]

    cells = sorted(
        ((c, s) for c in classes for s in range(3)),
        key=lambda cs: (-(quota[cs[0]][cs[1]] - math.floor(quota[cs[0]][cs[1]])), cs[0], cs[1]),
    )
    while sum(col_deficit) > 0:
        progressed = False
        for c, s in cells:
            if row_deficit[c] > 0 and col_deficit[s] > 0:
                alloc[c][s] += 1
                row_deficit[c] -= 1
                col_deficit[s] -= 1
                progressed = True
        if not progressed:  # pragma: no cover - deficits always clear
            raise RuntimeError("split allocation failed to converge")

    out: tuple[list[int], list[int], list[int]] = ([], [], [])
    for c in classes:
        start = 0
        for s in range(3):
            out[s].extend(by_class[c][start : start + alloc[c][s]])
            start += alloc[c][s]
    return out


# -- serialization -----------------------------------------------------------


def _validate_record(rec: CaseRecord) -> None:
    if not rec.tokens or any(not isinstance(t, str) or not t for t in rec.tokens):
        raise SpecValidationError("record tokens must be a nonempty list of nonempty strings")
    if rec.label not in LABELS:
        raise SpecValidationError(f"unknown label {rec.label!r}")
    if not isinstance(rec.age, int) or not 0 <= rec.age <= MAX_AGE:
        raise SpecValidationError(f"age must be an integer in [0, {MAX_AGE}]")
    if rec.gender not in GENDERS:
        raise SpecValidationError(f"gender must be one of {GENDERS}")
    for i in rec.planted_flags:
        if not isinstance(i, int) or not 0 <= i < len(rec.tokens):
            raise SpecValidationError("planted_flags must index into tokens")


def save_corpus(corpus: Corpus, path) -> None:
    """Write one compact JSON object per record."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in corpus.records:
            _validate_record(rec)
            obj = {
                "tokens": rec.tokens,
                "label": rec.label,
                "age": rec.age,
                "gender": rec.gender,
                "planted_flags": rec.planted_flags,
            }
            fh.write(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n")


def load_corpus(path) -> Corpus:
    """Read a JSONL corpus; ``planted_flags`` is optional per record."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise SpecValidationError(f"line {line_no}: not valid JSON ({e})") from e
            if not isinstance(obj, dict):
                raise SpecValidationError(f"line {line_no}: expected an object")
            try:
                rec = CaseRecord(
                    tokens=list(obj["tokens"]),
                    label=obj["label"],
                    age=obj["age"],
                    gender=obj["gender"],
                    planted_flags=list(obj.get("planted_flags", [])),
                )
            except (KeyError, TypeError) as e:
                raise SpecValidationError(f"line {line_no}: missing field ({e})") from e
            _validate_record(rec)
            records.append(rec)
    if not records:
        raise SpecValidationError("corpus file holds no records")
    return Corpus(records=records)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()
