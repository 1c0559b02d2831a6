import json
import logging

import numpy as np
import pytest
from sklearn.feature_extraction.text import CountVectorizer
from sklearn.linear_model import LogisticRegression

from gere.synth import (
    BOS,
    RESERVED,
    ByteTokenizer,
    gen_general_corpus,
    gen_tasks,
    load_jsonl_replay,
    read_general_split,
    read_tasks,
    write_bundle,
)


@pytest.fixture(scope="module")
def corpus():
    return gen_general_corpus(0)


@pytest.fixture(scope="module")
def tasks():
    return gen_tasks(0)


def test_corpus_deterministic(corpus):
    again = gen_general_corpus(0)
    assert corpus.digest() == again.digest()
    assert gen_general_corpus(1, pretrain=50, replay_pool=10, heldout=10).digest() != gen_general_corpus(
        0, pretrain=50, replay_pool=10, heldout=10
    ).digest()


def test_corpus_splits(corpus):
    assert corpus.pretrain.shape == (4000, 32)
    assert corpus.replay_pool.shape == (1000, 32)
    assert corpus.heldout.shape == (300, 32)
    rows = [set(map(bytes, split)) for split in (corpus.pretrain, corpus.replay_pool, corpus.heldout)]
    assert not (rows[0] & rows[1]) and not (rows[0] & rows[2]) and not (rows[1] & rows[2])
    assert (corpus.pretrain[:, 0] == BOS).all()
    assert corpus.pretrain[:, 1:].min() >= RESERVED


def test_argmax_oracle_beats_chance(corpus):
    pred = corpus.source.argmax_next(corpus.heldout)[:, :-1]
    target = corpus.heldout[:, 1:]
    ok = pred >= 0
    acc = float((pred[ok] == target[ok]).mean())
    assert acc > 0.6  # chance over the 32-token alphabet is ~0.03


def test_default_suite_shape(tasks):
    assert len(tasks) == 4
    assert len({t.spec.rule for t in tasks}) == 4
    labels = [l for t in tasks for l in t.spec.labels]
    assert len(set(labels)) == 8 and all(12 <= l < 28 for l in labels)
    for t in tasks:
        assert t.train.shape == (2000, t.spec.seq_len)
        assert t.test.shape == (500, t.spec.seq_len)


def test_labels_balanced(tasks):
    for t in tasks:
        for split in (t.train, t.test):
            frac = float((split[:, -1] == t.spec.labels[1]).mean())
            assert abs(frac - 0.5) <= 0.02


def test_rule_oracle_is_exact(tasks):
    for t in tasks:
        p = len(t.spec.prefix)
        for row in t.test:
            assert t.spec.answer_of(row[p : p + t.spec.input_len]) == row[-1]


def test_train_test_disjoint(tasks):
    for t in tasks:
        p = len(t.spec.prefix)
        train = {r[p:-2].tobytes() for r in t.train}
        assert not any(r[p:-2].tobytes() in train for r in t.test)


def test_task_count_limits():
    with pytest.raises(ValueError):
        gen_tasks(0, k=9)
    with pytest.raises(ValueError):
        gen_tasks(0, k=0)
    assert len(gen_tasks(0, k=8, train_size=20, test_size=10)) == 8


def _ngram_docs(rows, spec):
    p = len(spec.prefix)
    return [" ".join(f"t{tok}" for tok in r[p : p + spec.input_len]) for r in rows]


def test_tasks_learnable_by_linear_probe(tasks):
    for t in tasks:
        vec = CountVectorizer(ngram_range=(1, 2), token_pattern=r"\S+")
        xtr = vec.fit_transform(_ngram_docs(t.train, t.spec))
        xte = vec.transform(_ngram_docs(t.test, t.spec))
        clf = LogisticRegression(max_iter=2000, C=10.0).fit(xtr, t.train[:, -1])
        acc = clf.score(xte, t.test[:, -1])
        assert acc > 0.9, (t.task_id, acc)


def test_byte_tokenizer_range():
    tok = ByteTokenizer()
    ids = tok.encode("héllo\x00\xff")
    assert ids[0] == BOS
    assert all(RESERVED <= i < 128 for i in ids[1:])
    assert tok.encode("abc") == tok.encode("abc")


def test_jsonl_replay_loading(tmp_path, caplog):
    path = tmp_path / "replay.jsonl"
    lines = [json.dumps({"text": f"sample number {i}"}) for i in range(1000)]
    path.write_text("\n".join(lines) + "\n")
    assert len(load_jsonl_replay(path, ByteTokenizer())) == 1000

    path.write_text(json.dumps({"text": "x" * 10_000}) + "\n")
    pool = load_jsonl_replay(path, ByteTokenizer())
    assert len(pool.sequences[0]) == 562

    path.write_text(json.dumps({"text": "a"}) + "\n" + json.dumps({"text": ""}) + "\n")
    with caplog.at_level(logging.WARNING):
        pool = load_jsonl_replay(path, ByteTokenizer())
    assert len(pool) == 1
    assert "empty text" in caplog.text

    path.write_text(json.dumps({"text": "a"}) + "\n{broken\n")
    with pytest.raises(ValueError, match=":2:"):
        load_jsonl_replay(path, ByteTokenizer())


def test_bundle_roundtrip(tmp_path):
    corpus = gen_general_corpus(3, pretrain=20, replay_pool=8, heldout=5, length=10)
    tasks = gen_tasks(3, k=2, train_size=12, test_size=6)
    manifest = write_bundle(tmp_path, corpus, tasks)
    assert manifest["general_hash"] == corpus.digest()
    np.testing.assert_array_equal(read_general_split(tmp_path, "replay_pool"), corpus.replay_pool)
    back = read_tasks(tmp_path)
    assert [t.spec for t in back] == [t.spec for t in tasks]
    for a, b in zip(back, tasks):
        np.testing.assert_array_equal(a.train, b.train)
        np.testing.assert_array_equal(a.test, b.test)
    # regenerating gives byte-identical files
    write_bundle(tmp_path / "again", gen_general_corpus(3, pretrain=20, replay_pool=8, heldout=5, length=10), gen_tasks(3, k=2, train_size=12, test_size=6))
    for rel in ("general/pretrain.jsonl", "tasks/task01_marker_presence/train.jsonl", "data_manifest.json"):
        assert (tmp_path / rel).read_bytes() == (tmp_path / "again" / rel).read_bytes()
