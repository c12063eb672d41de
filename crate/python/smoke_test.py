"""Smoke test for the `milab` extension module.

Build and run:

    cargo build -p milab-py --release --features extension-module
    cp target/release/libmilab.so python/milab.so
    python3 python/smoke_test.py
"""

import math
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import milab  # noqa: E402


def counsellor_model():
    turns = iter([
        "Hi, I'm glad you're here. What brings you to think about smoking today?",
        "Stress seems to be a big part of it for you.",
        "You've been carrying a lot. Thank you for sharing today.",
        "Take care, and thanks again.",
    ])

    def respond(agent, system_prompt, messages):
        assert system_prompt
        if agent == "moderator":
            return "Normal"
        if agent == "offtrack":
            return "False"
        if agent == "end":
            last = messages[-1][1].lower()
            return "Done.\nTrue" if "bye" in last.splitlines()[-1] else "Going.\nFalse"
        if agent == "counsellor":
            return next(turns)
        return None

    return respond


def check_scores():
    assert milab.five_way_label("AF") == "MICO"
    assert milab.five_way_label("CON") == "MIIN"
    assert milab.five_way_label("R") == "R"
    assert milab.supercategory("GI") == "Other"
    assert milab.score_care([5] * 10) == 50
    assert milab.score_care([5] * 8 + [None, None]) == 50
    assert milab.score_care([5] * 7 + [None] * 3) is None
    assert milab.score_hsi(25, 3) == 5
    assert milab.eligibility(importance=2, confidence=9, readiness=5) is False
    assert milab.eligibility(importance=7, confidence=3, readiness=5) is True
    try:
        milab.score_hsi(10, 0)
    except ValueError:
        pass
    else:
        raise AssertionError("zero minutes must be rejected")


def check_stats():
    assert milab.cohen_kappa(list("aabb"), list("aabb")) == 1.0
    k = milab.cohen_kappa(list("aabbab"), list("abbbaa"))
    assert -1.0 <= k <= 1.0
    counts = [[3, 0], [0, 3], [2, 1], [3, 0], [0, 3], [1, 2]]
    kappa, var, z, p = milab.fleiss_significance(counts)
    assert math.isclose(kappa, milab.fleiss_kappa(counts))
    assert var > 0 and 0 <= p <= 1
    assert 0 <= milab.posthoc_power(counts, n_sims=1000, seed=3) <= 1
    stat, p, method = milab.wilcoxon([1, 2, 3, 4, 5, 6], [2, 4, 5, 7, 9, 10], "greater")
    assert method == "exact" and p < 0.05 and stat == 21.0
    m = milab.summary_metrics_from_labels(["R", "Q", "AF", "CON", "C", "S", "C"])
    assert math.isclose(m["pct_mic"], 75.0)
    assert math.isclose(m["rq_ratio"], 1.0)
    assert math.isclose(m["pct_ct"], 100 * 2 / 3)
    assert milab.summary_metrics_from_labels(["GI"])["pct_mic"] is None


def check_session():
    s = milab.Session(counsellor_model(), participant_id="smoke")
    assert s.phase == "active"
    assert s.transcript()[0][0] == "counsellor"
    reply = s.send("I smoke when I'm stressed at work.")
    assert [k for k, _ in reply] == ["turn"]
    reply = s.send("Thanks, I have to go, bye.")
    assert [k for k, _ in reply] == ["summary", "continue-question"], reply
    assert s.phase == "await-continue"
    reply = s.choose(False)
    assert s.phase == "closed"
    speakers = [sp for sp, _ in s.transcript()]
    assert speakers[:4] == ["counsellor", "client", "counsellor", "client"]
    labels, metrics = s.annotate(lambda agent, system, messages: None)
    assert labels and all(code for _, code in labels)
    assert set(metrics) == {"pct_mic", "rq_ratio", "pct_ct"}


def check_annotate():
    labels, _ = milab.annotate(
        [("counsellor", "How do you feel about smoking?"), ("client", "I want to quit.")],
        lambda agent, system, messages: None,
    )
    assert [code for _, code in labels][0] == "Q"


if __name__ == "__main__":
    check_scores()
    check_stats()
    check_session()
    check_annotate()
    print("smoke test passed")
