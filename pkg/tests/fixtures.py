"""Hand-built fixtures shared between unit and acceptance tests."""

import numpy as np

from fedsearch import evaluation as ev
from fedsearch import retrieval as rt


def hand_enumerated_fixture():
    """Eight queries with hand-placed vectors, enumerated before implementation.

    Index entries sit on a line in two clusters of three.  Cluster A
    (positions 0.0/0.1/0.2) votes malignant 2:1; cluster B (positions
    10.0/10.1/10.2) votes benign 2:1.  With K=3 each query lands fully
    inside its cluster, so the prediction equals the cluster majority:

        q0 malignant @ -0.5 -> cluster A -> predicted malignant  (tp)
        q1 malignant @  0.05 -> cluster A -> predicted malignant (tp)
        q2 malignant @  0.3 -> cluster A -> predicted malignant  (tp)
        q3 benign    @  0.15 -> cluster A -> predicted malignant (fp)
        q4 malignant @ 10.15 -> cluster B -> predicted benign    (fn)
        q5 benign    @  9.5 -> cluster B -> predicted benign     (tn)
        q6 benign    @ 10.05 -> cluster B -> predicted benign    (tn)
        q7 benign    @ 10.4 -> cluster B -> predicted benign     (tn)

    Expected: tp=3 fp=1 fn=1 tn=3; accuracy = precision = f1 = 0.75.
    """

    def vec(position):
        return np.array([position, 0.0, 0.0, 0.0], dtype=np.float32)

    cluster = [
        (0.0, "malignant"),
        (0.1, "malignant"),
        (0.2, "benign"),
        (10.0, "benign"),
        (10.1, "benign"),
        (10.2, "malignant"),
    ]
    entries = tuple(
        rt.IndexEntry(
            id=f"entry{i}", vector=vec(pos), label=label,
            magnification="40x", center="fixture", split="train",
        )
        for i, (pos, label) in enumerate(cluster)
    )
    index = rt.FeatureIndex(entries=entries, layout_id=bytes(8), feature_dim=4)

    query_points = [
        (-0.5, "malignant"),
        (0.05, "malignant"),
        (0.3, "malignant"),
        (0.15, "benign"),
        (10.15, "malignant"),
        (9.5, "benign"),
        (10.05, "benign"),
        (10.4, "benign"),
    ]
    queries = [
        ev.QueryVector(id=f"q{i}", label=label, vector=vec(pos), magnification="40x")
        for i, (pos, label) in enumerate(query_points)
    ]
    return index, queries
