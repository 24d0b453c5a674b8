"""Recipe corpus handling: layer1-style JSON loading, a synthetic structured
corpus with planted trees, tokenization, and vocabulary construction."""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass, field, replace

from .errors import ConfigError, CorpusParseError, CorpusSchemaError
from .treekit import AdjacencyVector, SentenceTree, canonical_order, decode_vector, encode_tree

PAD, BOS, EOS, UNK, SEP = 0, 1, 2, 3, 4
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>", "<sep>")

PARTITIONS = ("train", "val", "test")

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


def split_text(text: str) -> tuple[str, ...]:
    """Lowercase and split into word/punctuation tokens."""
    return tuple(_TOKEN_RE.findall(text.lower()))


@dataclass(frozen=True)
class RecipeSample:
    id: str
    title: str
    ingredients: tuple[tuple[str, ...], ...]
    instructions: tuple[tuple[str, ...], ...]
    partition: str
    image_key: str
    planted_tree: SentenceTree | None = None

    def __post_init__(self):
        if not self.instructions:
            raise CorpusSchemaError(f"record {self.id}: no instructions")
        if any(len(s) == 0 for s in self.instructions):
            raise CorpusSchemaError(f"record {self.id}: empty instruction sentence")
        if self.partition not in PARTITIONS:
            raise CorpusSchemaError(
                f"record {self.id}: partition {self.partition!r} not in {PARTITIONS}"
            )
        if self.planted_tree is not None and self.planted_tree.leaf_count != len(
            self.instructions
        ):
            raise CorpusSchemaError(
                f"record {self.id}: planted tree has {self.planted_tree.leaf_count} "
                f"leaves for {len(self.instructions)} sentences"
            )


class Vocabulary:
    """Token/id maps with fixed reserved ids (PAD=0, BOS=1, EOS=2, UNK=3, SEP=4)."""

    def __init__(self, tokens):
        self.id_to_token = list(RESERVED_TOKENS) + [
            t for t in tokens if t not in RESERVED_TOKENS
        ]
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise CorpusSchemaError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.id_to_token)

    @classmethod
    def build(cls, samples, min_count: int = 5) -> "Vocabulary":
        """Count tokens over instructions, titles and ingredients; keep freq >= min_count."""
        counts: dict[str, int] = {}
        for sample in samples:
            seqs = list(sample.instructions) + list(sample.ingredients)
            seqs.append(split_text(sample.title))
            for seq in seqs:
                for tok in seq:
                    counts[tok] = counts.get(tok, 0) + 1
        kept = sorted(t for t, c in counts.items() if c >= min_count)
        return cls(kept)

    def encode(self, tokens) -> list[int]:
        return [self.token_to_id.get(t, UNK) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.id_to_token[i] for i in ids]


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """Split raw text and map to ids; out-of-vocabulary tokens become UNK."""
    return vocab.encode(split_text(text))


def detokenize(ids, vocab: Vocabulary) -> str:
    return " ".join(vocab.decode(ids))


def load_recipe1m(path, min_sentences: int) -> list[RecipeSample]:
    """Load a layer1-style JSON array, keeping samples with >= min_sentences sentences.

    Each instructions/ingredients element is a {"text": ...} record; one
    instruction element is one sentence. Instruction entries whose text
    tokenizes to nothing are dropped before the sentence-count filter.
    """
    with open(path, "rb") as f:
        raw = f.read()
    try:
        records = json.loads(raw)
    except json.JSONDecodeError as e:
        raise CorpusParseError(f"{path}: invalid JSON at byte {e.pos}: {e.msg}") from e
    if not isinstance(records, list):
        raise CorpusParseError(f"{path}: top level must be a JSON array")

    samples = []
    for idx, rec in enumerate(records):
        rec_id = rec.get("id", f"#{idx}") if isinstance(rec, dict) else f"#{idx}"
        if not isinstance(rec, dict):
            raise CorpusSchemaError(f"record {rec_id}: not an object")
        for field_name in ("id", "title", "ingredients", "instructions", "partition"):
            if field_name not in rec:
                raise CorpusSchemaError(f"record {rec_id}: missing field {field_name!r}")
        instructions = tuple(
            toks
            for entry in rec["instructions"]
            if (toks := split_text(_entry_text(rec_id, entry)))
        )
        if len(instructions) < min_sentences:
            continue
        ingredients = tuple(
            split_text(_entry_text(rec_id, entry)) for entry in rec["ingredients"]
        )
        planted = None
        if rec.get("planted_tree"):
            planted = decode_vector(AdjacencyVector.from_string(rec["planted_tree"]))
        samples.append(
            RecipeSample(
                id=rec["id"],
                title=rec["title"],
                ingredients=ingredients,
                instructions=instructions,
                partition=rec["partition"],
                image_key=rec.get("image_key", rec["id"]),
                planted_tree=planted,
            )
        )
    return samples


def _entry_text(rec_id, entry) -> str:
    if not isinstance(entry, dict) or "text" not in entry:
        raise CorpusSchemaError(f"record {rec_id}: entry without 'text' field")
    return entry["text"]


def save_corpus(samples, path, annotations=None) -> None:
    """Write samples in the layer1-style schema (+ planted/parsed tree bit strings)."""
    records = []
    for sample in samples:
        rec = {
            "id": sample.id,
            "title": sample.title,
            "partition": sample.partition,
            "image_key": sample.image_key,
            "ingredients": [{"text": " ".join(t)} for t in sample.ingredients],
            "instructions": [{"text": " ".join(t)} for t in sample.instructions],
        }
        if sample.planted_tree is not None:
            rec["planted_tree"] = encode_tree(sample.planted_tree.canonical()).to_string()
        if annotations and sample.id in annotations:
            rec["parsed_tree"] = encode_tree(annotations[sample.id].canonical()).to_string()
        records.append(rec)
    with open(path, "w") as f:
        json.dump(records, f)


def load_annotations(path) -> dict[str, SentenceTree]:
    """Read parsed_tree bit strings back from a corpus file written by save_corpus."""
    with open(path) as f:
        records = json.load(f)
    return {
        rec["id"]: decode_vector(AdjacencyVector.from_string(rec["parsed_tree"]))
        for rec in records
        if rec.get("parsed_tree")
    }


# ---------------------------------------------------------------------------
# Synthetic corpus: templated dishes over four cooking phases with planted trees
# ---------------------------------------------------------------------------

PHASES = ("prepare", "combine", "cook", "finish")

# Ordered template chains; a sample draws a consecutive run per phase so the
# next sentence within a phase is strongly predictable from the previous one.
PHASE_TEMPLATES = {
    "prepare": (
        "rinse the {a} under cold running water",
        "pat the {a} dry with a clean towel",
        "peel the {a} and discard the skins",
        "chop the {a} into small even pieces",
        "slice the {b} into thin strips",
        "dice the {b} on a sturdy cutting board",
        "trim the {b} and set the scraps aside",
        "mince the {c} as finely as you can",
        "measure the {c} into a small bowl",
        "crush the {c} with the back of a spoon",
        "grate the {d} using the coarse side",
        "soak the {d} while you prepare the rest",
    ),
    "combine": (
        "place the {a} in a large mixing bowl",
        "add the {b} and the {c} to the bowl",
        "scatter the {d} over everything",
        "mix well with a wooden spoon",
        "fold in the {d} gently so it keeps its shape",
        "whisk the mixture until completely smooth",
        "toss until the {a} is evenly coated",
        "knead briefly to bring it together",
        "press the mixture flat with your palms",
        "drizzle a spoonful of oil over the {b}",
    ),
    "cook": (
        "heat a heavy pan over medium heat",
        "pour the mixture into the hot pan",
        "cook for {t} minutes without stirring",
        "turn the heat down to a gentle simmer",
        "stir occasionally so nothing sticks or burns",
        "cover with a tight lid and cook another {t} minutes",
        "flip everything once the bottom turns golden",
        "splash in some water if the pan looks dry",
        "taste and adjust the seasoning midway",
        "remove from the heat when thick and glossy",
        "transfer the pan to a hot oven to roast",
        "bake until the edges begin to brown",
    ),
    "finish": (
        "season with plenty of salt and black pepper",
        "squeeze a wedge of citrus over the pan",
        "sprinkle the {d} generously over the top",
        "garnish with a little fresh {b}",
        "spoon everything onto a warm platter",
        "let it rest for a few minutes before cutting",
        "serve warm in shallow bowls",
        "store any leftovers in a sealed container",
    ),
}

INGREDIENT_POOL = (
    "beans", "rice", "onions", "garlic", "peppers", "tomatoes", "carrots",
    "celery", "potatoes", "mushrooms", "spinach", "basil", "parsley", "thyme",
    "lentils", "chickpeas", "corn", "zucchini", "leeks", "ginger", "cumin",
    "paprika", "lemon", "butter", "cream", "cheese", "noodles", "barley",
    "squash", "kale", "scallions", "cilantro", "eggplant", "turnips", "fennel",
    "shallots", "walnuts", "almonds", "raisins", "olives", "capers", "yogurt",
    "tofu", "quinoa", "millet", "cabbage", "radishes", "beets",
)

DISH_NOUNS = (
    "stew", "soup", "salad", "bake", "skillet", "curry", "pilaf", "hash",
    "gratin", "ragout", "medley", "casserole",
)
COOK_TIMES = ("five", "ten", "fifteen", "twenty", "thirty", "forty")


@dataclass(frozen=True)
class SyntheticConfig:
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200
    min_sentences: int = 4
    max_sentences: int = 10
    n_dishes: int = 16

    def __post_init__(self):
        if not 1 <= self.min_sentences <= self.max_sentences <= 19:
            raise ConfigError(
                f"sentence-count range [{self.min_sentences}, {self.max_sentences}] "
                "must lie within [1, 19]"
            )
        if min(self.n_train, self.n_val, self.n_test) < 0 or self.n_dishes < 1:
            raise ConfigError("corpus sizes must be non-negative and n_dishes >= 1")


@dataclass(frozen=True)
class _Dish:
    dish_id: int
    name: str
    ingredients: tuple[str, ...]
    phase_counts: tuple[tuple[int, int], ...]  # (lo, hi) per phase; (0, 0) = absent


def _make_dishes(config: SyntheticConfig, rng: random.Random) -> list[_Dish]:
    dishes = []
    for d in range(config.n_dishes):
        main = rng.sample(INGREDIENT_POOL, 4)
        name = f"{main[0]} {rng.choice(DISH_NOUNS)}"
        counts = []
        for phase in PHASES:
            if phase == "finish" and rng.random() < 0.4:
                counts.append((0, 0))
                continue
            lo = rng.randint(1, 3) if phase != "finish" else rng.randint(1, 2)
            counts.append((lo, min(lo + rng.randint(0, 1), len(PHASE_TEMPLATES[phase]))))
        dishes.append(_Dish(d, name, tuple(main), tuple(counts)))
    return dishes


def _phase_sentences(dish: _Dish, phase: str, count: int, rng: random.Random):
    templates = PHASE_TEMPLATES[phase]
    start = rng.randint(0, len(templates) - count)
    slots = {
        "a": dish.ingredients[0],
        "b": dish.ingredients[1],
        "c": dish.ingredients[2],
        "d": dish.ingredients[3],
        "t": rng.choice(COOK_TIMES),
    }
    return [templates[start + k].format(**slots) for k in range(count)]


def _sample_counts(dish: _Dish, config: SyntheticConfig, rng: random.Random):
    counts = [rng.randint(lo, hi) if hi else 0 for lo, hi in dish.phase_counts]
    # trim from the largest phases / grow the smallest until within range
    while sum(counts) > config.max_sentences:
        i = max(range(len(counts)), key=lambda k: counts[k])
        counts[i] -= 1
    while sum(counts) < config.min_sentences:
        grow = [k for k, (lo, hi) in enumerate(dish.phase_counts) if hi]
        i = min(grow, key=lambda k: counts[k])
        counts[i] += 1
    return counts


def _planted_tree(counts) -> SentenceTree:
    """Root with one subtree per non-empty phase; single-sentence phases attach directly."""
    edges, labels = set(), {}
    next_id = 1
    sent = 0
    for c in counts:
        if c == 0:
            continue
        if c == 1:
            edges.add((0, next_id))
            labels[next_id] = sent
            next_id += 1
            sent += 1
        else:
            group = next_id
            edges.add((0, group))
            next_id += 1
            for _ in range(c):
                edges.add((group, next_id))
                labels[next_id] = sent
                next_id += 1
                sent += 1
    if not edges:  # single sentence overall
        return SentenceTree((-1,), ((0, 0),))
    return canonical_order(edges, 0, labels)


def make_synthetic_corpus(config: SyntheticConfig, seed: int) -> list[RecipeSample]:
    """Generate a deterministic templated corpus with planted phase trees.

    image_key encodes the dish template id plus the sample's per-phase
    sentence counts ("dish007:p2132:000123") — the synthetic stand-in for a
    photograph showing both what the dish is and how elaborate it actually is
    — so image features carry the structural signal the tree generator
    learns from.
    """
    rng = random.Random(seed)
    dishes = _make_dishes(config, rng)
    sizes = {"train": config.n_train, "val": config.n_val, "test": config.n_test}
    samples = []
    idx = 0
    for partition in PARTITIONS:
        for _ in range(sizes[partition]):
            dish = dishes[rng.randrange(len(dishes))]
            counts = _sample_counts(dish, config, rng)
            sentences = []
            for phase, count in zip(PHASES, counts):
                if count:
                    sentences.extend(_phase_sentences(dish, phase, count, rng))
            profile = "".join(str(min(c, 9)) for c in counts)
            samples.append(
                RecipeSample(
                    id=f"syn-{idx:06d}",
                    title=dish.name,
                    ingredients=tuple(split_text(t) for t in dish.ingredients),
                    instructions=tuple(split_text(s) for s in sentences),
                    partition=partition,
                    image_key=f"dish{dish.dish_id:03d}:p{profile}:{idx:06d}",
                    planted_tree=_planted_tree(counts),
                )
            )
            idx += 1
    return samples


def by_partition(samples) -> dict[str, list[RecipeSample]]:
    out = {p: [] for p in PARTITIONS}
    for s in samples:
        out[s.partition].append(s)
    return out


def target_stream(sample: RecipeSample, vocab: Vocabulary) -> list[int]:
    """Instruction sentences joined by SEP, terminated by EOS."""
    ids: list[int] = []
    for i, sent in enumerate(sample.instructions):
        if i:
            ids.append(SEP)
        ids.extend(vocab.encode(sent))
    ids.append(EOS)
    return ids
