"""Dataset ingestion (SQuAD v1.1 JSON, jsonl), export, and the synthetic corpus."""

from __future__ import annotations

import hashlib
import json
import logging
import random
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

from tsas.core import QaExample, TsasError

log = logging.getLogger(__name__)

FORMATS = ("squad_json", "jsonl")


class IngestError(TsasError, ValueError):
    pass


class SizingError(TsasError, ValueError):
    pass


@dataclass(frozen=True)
class DatasetFile:
    path: Path
    format: str = "jsonl"
    split: str = "test"

    def __post_init__(self) -> None:
        if self.format not in FORMATS:
            raise IngestError(f"unknown dataset format {self.format!r}")
        object.__setattr__(self, "path", Path(self.path))

    @classmethod
    def guess(cls, path: str | Path, split: str = "test") -> DatasetFile:
        path = Path(path)
        fmt = "squad_json" if path.suffix == ".json" else "jsonl"
        return cls(path, fmt, split)


def _content_id(question: str, context: str) -> str:
    return hashlib.sha1(f"{context}\x1f{question}".encode("utf-8")).hexdigest()[:16]


@dataclass
class IngestStats:
    kept: int = 0
    rejected_empty: int = 0


def _finish(rows: list[tuple[str, str, str, list[str]]], source: Path, stats: IngestStats) -> list[QaExample]:
    ids = Counter(r[0] for r in rows if r[1].strip() and r[2].strip())
    dups = sorted(i for i, c in ids.items() if c > 1)
    if dups:
        raise IngestError(f"{source}: duplicate ids: {', '.join(dups[:20])}")
    out = []
    for ex_id, question, context, answers in rows:
        if not question.strip() or not context.strip():
            stats.rejected_empty += 1
            continue
        out.append(QaExample(ex_id, question, context, tuple(answers)))
    stats.kept = len(out)
    if stats.rejected_empty:
        log.warning("%s: rejected %d records with empty question or context", source, stats.rejected_empty)
    return out


def _read_jsonl(path: Path, stats: IngestStats) -> list[QaExample]:
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(f"{path}:{lineno}: invalid JSON ({exc.msg} at column {exc.colno})") from exc
            if not isinstance(rec, dict):
                raise IngestError(f"{path}:{lineno}: record is not an object")
            for key in ("question", "context"):
                if not isinstance(rec.get(key), str):
                    raise IngestError(f"{path}:{lineno}: missing or non-string field {key!r}")
            answers = rec.get("answers", [])
            if not isinstance(answers, list) or not all(isinstance(a, str) for a in answers):
                raise IngestError(f"{path}:{lineno}: 'answers' must be a list of strings")
            ex_id = str(rec["id"]) if rec.get("id") not in (None, "") else _content_id(rec["question"], rec["context"])
            rows.append((ex_id, rec["question"], rec["context"], answers))
    return _finish(rows, path, stats)


def _read_squad(path: Path, stats: IngestStats) -> list[QaExample]:
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise IngestError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("data"), list):
        raise IngestError(f"{path}: expected a top-level object with a 'data' list")
    rows = []
    for a_i, article in enumerate(doc["data"]):
        for p_i, para in enumerate(article.get("paragraphs", [])):
            context = para.get("context")
            if not isinstance(context, str):
                raise IngestError(f"{path}: data[{a_i}].paragraphs[{p_i}] lacks a 'context' string")
            for q_i, qa in enumerate(para.get("qas", [])):
                question = qa.get("question")
                if not isinstance(question, str):
                    raise IngestError(f"{path}: data[{a_i}].paragraphs[{p_i}].qas[{q_i}] lacks a 'question' string")
                answers = [a["text"] for a in qa.get("answers", []) if isinstance(a, dict) and "text" in a]
                ex_id = str(qa["id"]) if qa.get("id") else _content_id(question, context)
                rows.append((ex_id, question, context, answers))
    return _finish(rows, path, stats)


def ingest(file: DatasetFile, stats: IngestStats | None = None) -> list[QaExample]:
    stats = stats if stats is not None else IngestStats()
    if not file.path.exists():
        raise IngestError(f"{file.path}: no such file")
    if file.format == "squad_json":
        return _read_squad(file.path, stats)
    return _read_jsonl(file.path, stats)


def load(path: str | Path) -> list[QaExample]:
    return ingest(DatasetFile.guess(path))


def to_record(ex: QaExample) -> dict:
    return {"id": ex.id, "question": ex.question, "context": ex.document, "answers": list(ex.gold_answers)}


def export_jsonl(examples: Sequence[QaExample], path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(json.dumps(to_record(ex), ensure_ascii=False) + "\n")
    tmp.replace(path)


# --- synthetic shifted corpus -------------------------------------------------

NAMES = (
    "alice bob carol dave erin frank grace heidi ivan judy mallory oscar peggy rupert sybil trent "
    "victor walter xavier yvonne zelda arthur bianca cedric delia edgar fiona gustav hazel igor "
    "jasper kira leon mabel nestor olga pavel quinn rosa silas tamsin ulric vera wendel ximena "
    "yusuf zora anton beryl cosmo dorit elmer flora gideon hilda ingrid jonas klaus lorna magnus "
    "nadia otto petra rufus selma tobias una viggo willa xander yara zeno amos bettina caspar "
    "dagny emil freya gunnar helga isak jarl karin linus marit nils ottar"
).split()

VALUES = {
    "city": (
        "paris", "rome", "madrid", "berlin", "vienna", "lisbon", "oslo", "dublin", "prague", "warsaw",
        "athens", "cairo", "lagos", "nairobi", "tokyo", "seoul", "lima", "quito", "havana", "denver",
        "new york", "los angeles", "buenos aires", "hong kong", "san diego", "cape town", "tel aviv",
        "kuala lumpur", "rio de janeiro", "salt lake city", "boston", "toronto", "sydney", "perth",
        "milan", "naples", "geneva", "zurich", "bergen", "tallinn",
    ),
    "company": (
        "acme", "globex", "initech", "umbrella", "hooli", "vandelay", "stark industries", "wayne enterprises",
        "soylent", "cyberdyne", "tyrell", "wonka", "gringotts", "monarch", "oscorp", "aperture",
        "black mesa", "blue sun", "dunder mifflin", "pied piper", "massive dynamic", "nakatomi",
        "weyland", "virtucon", "zorg", "ollivanders", "buy more", "prestige worldwide",
    ),
    "instrument": (
        "violin", "cello", "piano", "flute", "oboe", "clarinet", "trumpet", "harp", "drums", "banjo",
        "ukulele", "accordion", "bassoon", "tuba", "sitar", "mandolin", "french horn", "bass guitar",
        "pan flute", "steel drum", "xylophone", "harmonica",
    ),
    "animal": (
        "cat", "dog", "parrot", "hamster", "rabbit", "tortoise", "goldfish", "ferret", "iguana", "canary",
        "pony", "gecko", "guinea pig", "hedgehog", "chinchilla", "corn snake", "bearded dragon", "axolotl",
        "cockatoo", "tarantula",
    ),
    "food": (
        "pizza", "sushi", "tacos", "ramen", "curry", "lasagna", "falafel", "paella", "dumplings", "risotto",
        "goulash", "pierogi", "ceviche", "kimchi", "hummus", "pad thai", "fish and chips", "apple pie",
        "pho", "burritos", "gnocchi", "moussaka",
    ),
}

# relation -> (value pool, family A templates, family B templates); each template is (statement, question).
# Both families share sentence structures; family B swaps in unseen relation wording.
RELATIONS: dict[str, tuple[str, list[tuple[str, str]], list[tuple[str, str]]]] = {
    "birthplace": (
        "city",
        [("{p} was born in {v} .", "where was {p} born ?"),
         ("the birthplace of {p} is {v} .", "what is the birthplace of {p} ?")],
        [("{p} was raised in {v} .", "where was {p} raised ?"),
         ("the hometown of {p} is {v} .", "what is the hometown of {p} ?")],
    ),
    "residence": (
        "city",
        [("{p} lives in {v} .", "where does {p} live ?"),
         ("the residence of {p} is {v} .", "what is the residence of {p} ?")],
        [("{p} resides in {v} .", "where does {p} reside ?"),
         ("the current address of {p} is {v} .", "what is the current address of {p} ?")],
    ),
    "employer": (
        "company",
        [("{p} works for {v} .", "who does {p} work for ?"),
         ("the employer of {p} is {v} .", "what is the employer of {p} ?")],
        [("{p} is hired by {v} .", "who is {p} hired by ?"),
         ("the company of {p} is {v} .", "what is the company of {p} ?")],
    ),
    "instrument": (
        "instrument",
        [("{p} plays the {v} .", "which instrument does {p} play ?"),
         ("the instrument of {p} is the {v} .", "what is the instrument of {p} ?")],
        [("{p} performs on the {v} .", "what does {p} perform on ?"),
         ("the musical tool of {p} is the {v} .", "what is the musical tool of {p} ?")],
    ),
    "pet": (
        "animal",
        [("{p} owns a {v} .", "what pet does {p} own ?"),
         ("the pet of {p} is a {v} .", "what is the pet of {p} ?")],
        [("{p} adopted a {v} .", "what did {p} adopt ?"),
         ("the companion animal of {p} is a {v} .", "what is the companion animal of {p} ?")],
    ),
    "food": (
        "food",
        [("{p} likes to eat {v} .", "what does {p} like to eat ?"),
         ("the favorite food of {p} is {v} .", "what is the favorite food of {p} ?")],
        [("{p} enjoys eating {v} .", "what does {p} enjoy eating ?"),
         ("the preferred dish of {p} is {v} .", "what is the preferred dish of {p} ?")],
    ),
}


@dataclass(frozen=True)
class SynthSpec:
    num_train: int = 200
    num_test: int = 200
    entity_pool_size: int = 40
    distractors: int = 4
    shift: bool = True
    # Fraction of each value pool reserved for the test split when shifted.
    heldout_values: float = 0.3
    seed: int = 0


def _span_count(doc_toks: list[str], span: list[str]) -> int:
    m = len(span)
    return sum(1 for i in range(len(doc_toks) - m + 1) if doc_toks[i : i + m] == span)


def _split_pool(pool: Sequence[str], frac: float, rng: random.Random) -> tuple[list[str], list[str]]:
    items = list(pool)
    rng.shuffle(items)
    k = max(1, int(round(len(items) * frac)))
    return items[k:], items[:k]


def _make_example(ex_id, people, values, family_idx, distractors, rng) -> QaExample:
    rel_names = sorted(RELATIONS)
    person = rng.choice(people)
    rel = rng.choice(rel_names)
    pool_name = RELATIONS[rel][0]
    used_values: set[str] = set()

    def pick_value(pool: str) -> str:
        choices = [v for v in values[pool] if v not in used_values]
        v = rng.choice(choices)
        used_values.add(v)
        return v

    def statement(p: str, r: str) -> tuple[str, str]:
        templates = RELATIONS[r][1 + family_idx]
        t = rng.choice(templates)
        return t[0].format(p=p, v=pick_value(RELATIONS[r][0])), t[1].format(p=p)

    answer_stmt_t = rng.choice(RELATIONS[rel][1 + family_idx])
    answer = pick_value(pool_name)
    sentences = [answer_stmt_t[0].format(p=person, v=answer)]
    question = answer_stmt_t[1].format(p=person)
    other_people = [p for p in people if p != person]
    other_rels = [r for r in rel_names if r != rel]
    for d in range(distractors):
        kind = d % 3
        if kind == 0:  # same person, other relation
            sentences.append(statement(person, rng.choice(other_rels))[0])
        elif kind == 1:  # other person, same relation
            sentences.append(statement(rng.choice(other_people), rel)[0])
        else:
            sentences.append(statement(rng.choice(other_people), rng.choice(rel_names))[0])
    rng.shuffle(sentences)
    document = " ".join(sentences)
    doc_toks = document.split()
    if _span_count(doc_toks, answer.split()) != 1:
        return None  # type: ignore[return-value]
    return QaExample(ex_id, question, document, (answer,))


def synth(spec: SynthSpec) -> tuple[list[QaExample], list[QaExample]]:
    """Deterministic train/test splits; the test split is shifted when ``spec.shift``."""
    rng = random.Random(spec.seed)
    needed = 2 * spec.entity_pool_size if spec.shift else spec.entity_pool_size
    if needed > len(NAMES):
        raise SizingError(f"entity pool of {spec.entity_pool_size} needs {needed} names, only {len(NAMES)} available")
    if spec.entity_pool_size < 2:
        raise SizingError("entity pool must hold at least two names")
    names = list(NAMES)
    rng.shuffle(names)
    train_people = names[: spec.entity_pool_size]
    test_people = names[spec.entity_pool_size : needed] if spec.shift else train_people
    train_values: dict[str, list[str]] = {}
    test_values: dict[str, list[str]] = {}
    for pool, items in sorted(VALUES.items()):
        if spec.shift:
            train_values[pool], test_values[pool] = _split_pool(items, spec.heldout_values, rng)
        else:
            train_values[pool] = test_values[pool] = list(items)
        if min(len(train_values[pool]), len(test_values[pool])) < spec.distractors + 1:
            raise SizingError(f"value pool {pool!r} too small for {spec.distractors} distractors")

    def make_split(tag: str, count: int, people, values, family_idx) -> list[QaExample]:
        out: list[QaExample] = []
        attempts = 0
        while len(out) < count:
            attempts += 1
            if attempts > 50 * count + 100:
                raise SizingError(f"could not generate {count} unambiguous {tag} examples")
            ex = _make_example(f"{tag}-{spec.seed}-{len(out):05d}", people, values, family_idx, spec.distractors, rng)
            if ex is not None:
                out.append(ex)
        return out

    train = make_split("train", spec.num_train, train_people, train_values, 0)
    test = make_split("test", spec.num_test, test_people, test_values, 1 if spec.shift else 0)
    return train, test


def synth_to_files(spec: SynthSpec, out_dir: str | Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, test = synth(spec)
    train_path, test_path = out_dir / "train.jsonl", out_dir / "test.jsonl"
    export_jsonl(train, train_path)
    export_jsonl(test, test_path)
    with open(out_dir / "synth_spec.json", "w", encoding="utf-8") as f:
        json.dump(asdict(spec), f, indent=2, sort_keys=True)
    return train_path, test_path
