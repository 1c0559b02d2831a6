"""Deterministic toy corpora.

Vocabulary layout (default ``vocab_size=128``)::

    0 PAD, 1 BOS, 2 SEP, 3 INSTR
    4..11    task markers (one per task)
    12..27   answer labels (two per task)
    28..31   spare
    32..     byte-level ids for external text; the synthetic general
             language uses the top ``alphabet_size`` ids

General text comes from an order-2 Markov chain whose transition table is
drawn from the seed. Tasks are instruction -> answer classification problems
over the same alphabet, laid out as
``[BOS, marker, INSTR, x_1 .. x_n, SEP, answer]``.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

PAD, BOS, SEP, INSTR = 0, 1, 2, 3
MARKER_BASE, N_MARKERS = 4, 8
LABEL_BASE, N_LABELS = 12, 16
RESERVED = 32

RULES = ("marker_presence", "token_majority", "parity_of_count", "pair_order")


def array_hash(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype="<i4")
        h.update(repr(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


# ----------------------------------------------------------- general corpus


@dataclass
class MarkovSource:
    alphabet: np.ndarray  # token ids, shape (A,)
    successors: np.ndarray  # (A, A, k) indices into alphabet
    probs: np.ndarray  # (A, A, k)

    @classmethod
    def from_seed(cls, seed: int, vocab_size: int = 128, alphabet_size: int = 32, branching: int = 3) -> MarkovSource:
        if alphabet_size > vocab_size - RESERVED:
            raise ValueError("alphabet does not fit above the reserved range")
        rng = np.random.default_rng([seed, 0xA11])
        A = alphabet_size
        alphabet = np.arange(vocab_size - A, vocab_size)
        succ = np.stack([[rng.choice(A, size=branching, replace=False) for _ in range(A)] for _ in range(A)])
        top = rng.uniform(0.5, 0.9, size=(A, A))
        rest = rng.dirichlet(np.ones(branching - 1), size=(A, A)) * (1.0 - top)[..., None]
        probs = np.concatenate([top[..., None], rest], axis=-1)
        return cls(alphabet, succ, probs)

    def sample(self, rng: np.random.Generator, n: int, length: int) -> np.ndarray:
        """``n`` sequences of ``length`` tokens, each starting with BOS."""
        A = len(self.alphabet)
        out = np.empty((n, length), dtype=np.int64)
        out[:, 0] = BOS
        idx = np.empty((n, length - 1), dtype=np.int64)
        idx[:, :2] = rng.integers(0, A, size=(n, 2))
        cum = np.cumsum(self.probs, axis=-1)
        for t in range(2, length - 1):
            a, b = idx[:, t - 2], idx[:, t - 1]
            u = rng.random(n)
            choice = (u[:, None] > cum[a, b]).sum(axis=1)
            choice = np.minimum(choice, self.probs.shape[-1] - 1)
            idx[:, t] = self.successors[a, b, choice]
        out[:, 1:] = self.alphabet[idx]
        return out

    def argmax_next(self, tokens: np.ndarray) -> np.ndarray:
        """Most likely next token after each position (-1 where undefined)."""
        offset = self.alphabet[0]
        pred = np.full(tokens.shape, -1, dtype=np.int64)
        for t in range(2, tokens.shape[1]):
            a, b = tokens[:, t - 1] - offset, tokens[:, t] - offset
            ok = (tokens[:, t - 1] >= offset) & (tokens[:, t] >= offset)
            best = self.successors[a[ok], b[ok], np.argmax(self.probs[a[ok], b[ok]], axis=-1)]
            pred[ok, t] = self.alphabet[best]
        return pred


@dataclass
class GeneralCorpus:
    pretrain: np.ndarray
    replay_pool: np.ndarray
    heldout: np.ndarray
    source: MarkovSource
    seed: int

    def digest(self) -> str:
        return array_hash(self.pretrain, self.replay_pool, self.heldout)


def gen_general_corpus(
    seed: int,
    pretrain: int = 4000,
    replay_pool: int = 1000,
    heldout: int = 300,
    length: int = 32,
    vocab_size: int = 128,
    alphabet_size: int = 32,
) -> GeneralCorpus:
    if min(pretrain, replay_pool, heldout) < 1 or length < 4:
        raise ValueError("corpus sizes must be >= 1 and length >= 4")
    source = MarkovSource.from_seed(seed, vocab_size, alphabet_size)
    rng = np.random.default_rng([seed, 0xC0])
    allseq = source.sample(rng, pretrain + replay_pool + heldout, length)
    # index partition keeps the splits disjoint by construction
    return GeneralCorpus(
        allseq[:pretrain],
        allseq[pretrain : pretrain + replay_pool],
        allseq[pretrain + replay_pool :],
        source,
        seed,
    )


# ------------------------------------------------------------------ tasks


@dataclass
class TaskSpec:
    task_id: str
    rule: str
    marker: int
    labels: tuple[int, int]
    rule_tokens: tuple[int, ...]
    train_size: int = 2000
    test_size: int = 500
    input_len: int = 12

    @property
    def prefix(self) -> tuple[int, int, int]:
        return (BOS, self.marker, INSTR)

    @property
    def seq_len(self) -> int:
        return len(self.prefix) + self.input_len + 2

    def label_of(self, x: np.ndarray) -> int:
        """Reference rule: 0/1 label index for one input sequence."""
        x = list(x)
        if self.rule == "marker_presence":
            return int(self.rule_tokens[0] in x)
        if self.rule == "token_majority":
            a, b = self.rule_tokens
            return int(x.count(a) > x.count(b))
        if self.rule == "parity_of_count":
            return int(x.count(self.rule_tokens[0]) % 2 == 1)
        if self.rule == "pair_order":
            a, b = self.rule_tokens
            return int(x.index(a) < x.index(b))
        raise ValueError(f"unknown rule {self.rule}")

    def answer_of(self, x: np.ndarray) -> int:
        return self.labels[self.label_of(x)]


@dataclass
class TaskData:
    spec: TaskSpec
    train: np.ndarray  # (n, seq_len) full sequences ending with the answer
    test: np.ndarray

    @property
    def task_id(self) -> str:
        return self.spec.task_id


def _task_input(spec: TaskSpec, label: int, rng: np.random.Generator, alphabet: np.ndarray) -> np.ndarray:
    n = spec.input_len
    special = set(spec.rule_tokens)
    filler = np.array([t for t in alphabet if t not in special])
    x = rng.choice(filler, size=n)
    if spec.rule == "marker_presence":
        if label:
            x[rng.integers(n)] = spec.rule_tokens[0]
    elif spec.rule == "token_majority":
        a, b = spec.rule_tokens
        lo = int(rng.integers(1, 4))
        hi = int(rng.integers(lo + 1, 5))
        ca, cb = (hi, lo) if label else (lo, hi)
        pos = rng.permutation(n)[: ca + cb]
        x[pos[:ca]] = a
        x[pos[ca:]] = b
    elif spec.rule == "parity_of_count":
        # counts restricted to {1, 2}
        count = 1 if label else 2
        x[rng.permutation(n)[:count]] = spec.rule_tokens[0]
    elif spec.rule == "pair_order":
        a, b = spec.rule_tokens
        i = int(rng.integers(n - 1))
        x[i], x[i + 1] = (a, b) if label else (b, a)
    return x


def _materialize(spec: TaskSpec, n: int, rng: np.random.Generator, alphabet: np.ndarray, exclude: set) -> np.ndarray:
    rows, seen = [], set(exclude)
    labels = np.array([i % 2 for i in range(n)])
    rng.shuffle(labels)
    for lab in labels:
        while True:
            x = _task_input(spec, int(lab), rng, alphabet)
            key = x.tobytes()
            if key not in seen:
                break
        seen.add(key)
        assert spec.label_of(x) == lab
        rows.append(np.concatenate([spec.prefix, x, [SEP, spec.labels[lab]]]))
    return np.asarray(rows, dtype=np.int64)


def gen_tasks(
    seed: int,
    k: int = 4,
    train_size: int = 2000,
    test_size: int = 500,
    input_len: int = 12,
    vocab_size: int = 128,
    alphabet_size: int = 32,
) -> list[TaskData]:
    """``k`` tasks cycling through the rules, each with its own marker and labels."""
    if k < 1:
        raise ValueError("need at least one task")
    if k > min(N_MARKERS, N_LABELS // 2):
        raise ValueError(f"at most {min(N_MARKERS, N_LABELS // 2)} distinct tasks fit the reserved vocabulary")
    rng = np.random.default_rng([seed, 0x7A5C])
    alphabet = np.arange(vocab_size - alphabet_size, vocab_size)
    tasks = []
    for i in range(k):
        rule = RULES[i % len(RULES)]
        n_tok = 1 if rule in ("marker_presence", "parity_of_count") else 2
        rule_tokens = tuple(int(t) for t in rng.choice(alphabet, size=n_tok, replace=False))
        spec = TaskSpec(
            task_id=f"task{i + 1:02d}_{rule}",
            rule=rule,
            marker=MARKER_BASE + i,
            labels=(LABEL_BASE + 2 * i, LABEL_BASE + 2 * i + 1),
            rule_tokens=rule_tokens,
            train_size=train_size,
            test_size=test_size,
            input_len=input_len,
        )
        train = _materialize(spec, train_size, rng, alphabet, set())
        p = len(spec.prefix)
        train_keys = {row[p : p + input_len].tobytes() for row in train}
        test = _materialize(spec, test_size, rng, alphabet, train_keys)
        tasks.append(TaskData(spec, train, test))
    return tasks


# ------------------------------------------------------- external JSONL


class ByteTokenizer:
    """Bytes folded into the non-reserved id range, BOS prepended."""

    def __init__(self, vocab_size: int = 128, offset: int = RESERVED):
        if vocab_size <= offset:
            raise ValueError("vocab too small for byte tokens")
        self.vocab_size = vocab_size
        self.offset = offset

    def encode(self, text: str) -> list[int]:
        span = self.vocab_size - self.offset
        return [BOS] + [self.offset + (b % span) for b in text.encode("utf-8")]


def load_jsonl_replay(path, tokenizer: ByteTokenizer, max_len: int = 562):
    from .distill import ReplayPool

    seqs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                text = doc["text"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed replay line ({exc})") from exc
            if not isinstance(text, str):
                raise ValueError(f"{path}:{lineno}: field 'text' is not a string")
            if not text:
                log.warning("%s:%d: empty text, skipped", path, lineno)
                continue
            seqs.append(np.asarray(tokenizer.encode(text)[:max_len], dtype=np.int64))
    return ReplayPool(seqs)


# ------------------------------------------------------------ file I/O


def write_token_jsonl(path, rows: np.ndarray, extra: list[dict] | None = None) -> None:
    with open(path, "w") as fh:
        for i, row in enumerate(rows):
            doc = {"tokens": [int(t) for t in row]}
            if extra is not None:
                doc.update(extra[i])
            fh.write(json.dumps(doc) + "\n")


def read_token_jsonl(path) -> list[np.ndarray]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(np.asarray(json.loads(line)["tokens"], dtype=np.int64))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed token line ({exc})") from exc
    return out


@dataclass
class SynthBundle:
    corpus: GeneralCorpus
    tasks: list[TaskData]
    manifest: dict = field(default_factory=dict)


def write_bundle(out: Path, corpus: GeneralCorpus, tasks: list[TaskData]) -> dict:
    out = Path(out)
    (out / "general").mkdir(parents=True, exist_ok=True)
    for split in ("pretrain", "replay_pool", "heldout"):
        write_token_jsonl(out / "general" / f"{split}.jsonl", getattr(corpus, split))
    task_entries = []
    for t in tasks:
        d = out / "tasks" / t.task_id
        d.mkdir(parents=True, exist_ok=True)
        write_token_jsonl(d / "train.jsonl", t.train)
        write_token_jsonl(d / "test.jsonl", t.test)
        (d / "spec.json").write_text(json.dumps(asdict(t.spec), indent=2, sort_keys=True) + "\n")
        task_entries.append({"task_id": t.task_id, "hash": array_hash(t.train, t.test)})
    manifest = {
        "seed": corpus.seed,
        "general_hash": corpus.digest(),
        "splits": {s: int(len(getattr(corpus, s))) for s in ("pretrain", "replay_pool", "heldout")},
        "tasks": task_entries,
    }
    (out / "data_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_general_split(root: Path, split: str) -> np.ndarray:
    rows = read_token_jsonl(Path(root) / "general" / f"{split}.jsonl")
    return np.stack(rows)


def read_tasks(root: Path) -> list[TaskData]:
    tdir = Path(root) / "tasks"
    if not tdir.is_dir():
        raise FileNotFoundError(f"no tasks directory under {root}")
    tasks = []
    for d in sorted(p for p in tdir.iterdir() if p.is_dir()):
        spec_doc = json.loads((d / "spec.json").read_text())
        spec_doc["labels"] = tuple(spec_doc["labels"])
        spec_doc["rule_tokens"] = tuple(spec_doc["rule_tokens"])
        spec = TaskSpec(**spec_doc)
        tasks.append(TaskData(spec, np.stack(read_token_jsonl(d / "train.jsonl")), np.stack(read_token_jsonl(d / "test.jsonl"))))
    return tasks
