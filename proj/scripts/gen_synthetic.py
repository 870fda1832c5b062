#!/usr/bin/env python3
"""Regenerate the bundled synthetic corpus under data/synthetic/.

Layout: 25 topics, each with one graded-relevant document and three
distractors that outrank it for the topic query, plus 100 filler documents
that never match any query. The relevant document sits a few ranks down in
every baseline, so feedback-grounded rewriting has room to improve.
"""

import os

OUT_DIR = os.path.join(os.path.dirname(__file__), "..", "data", "synthetic")
N_TOPICS = 25
N_NOISE = 100
NOISE_VOCAB = [f"noise{j:02d}" for j in range(30)]


def main():
    os.makedirs(OUT_DIR, exist_ok=True)
    docs = []
    queries = []
    qrels = []

    for i in range(N_TOPICS):
        topic = f"topic{i:02d}"
        rel_terms = " ".join(f"rel{i:02d}{c}" for c in "abcdef")
        rel_id = f"d{i * 4:03d}"
        docs.append((rel_id, f"{topic} overview {rel_terms}"))
        for m in (1, 2, 3):
            docs.append((f"d{i * 4 + m:03d}", f"{topic} {topic} overview pad{m} extra{m}"))
        queries.append((f"q{i:02d}", f"{topic} overview"))
        qrels.append((f"q{i:02d}", rel_id, 3))

    for j in range(N_NOISE):
        terms = " ".join(
            NOISE_VOCAB[k % len(NOISE_VOCAB)] for k in (j, j * 7 + 1, j * 13 + 2)
        )
        docs.append((f"d{N_TOPICS * 4 + j:03d}", terms))

    with open(os.path.join(OUT_DIR, "collection.tsv"), "w") as f:
        for doc_id, text in docs:
            f.write(f"{doc_id}\t{text}\n")
    with open(os.path.join(OUT_DIR, "queries.tsv"), "w") as f:
        for query_id, text in queries:
            f.write(f"{query_id}\t{text}\n")
    with open(os.path.join(OUT_DIR, "qrels.txt"), "w") as f:
        for query_id, doc_id, grade in qrels:
            f.write(f"{query_id} 0 {doc_id} {grade}\n")
    print(f"wrote {len(docs)} docs, {len(queries)} queries, {len(qrels)} qrels to {OUT_DIR}")


if __name__ == "__main__":
    main()
