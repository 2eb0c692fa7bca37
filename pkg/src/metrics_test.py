import math
import random
import itertools
import pytest

from ranking import FormatStatus, PermutationError
from metrics import (
    RelevanceJudgments,
    RewardParams,
    final_reward,
    multi_view_reward,
    ndcg_at_k,
    rbo,
    recall_at_k,
    score_rollout,
)


def ranked_with_relevant_at(*ranks: int, length: int = 20) -> list[str]:
    return [f"r{i}" if i in ranks else f"n{i}" for i in range(1, length + 1)]


def binary(ranked: list[str]) -> dict[str, int]:
    return {id: 1 for id in ranked if id.startswith("r")}


def brute_ndcg(ranked, grades, k):
    def dcg(values):
        return sum(
            (2**g - 1) / math.log2(i + 2) for i, g in enumerate(values[:k])
        )

    ideal = dcg(sorted((g for g in grades.values() if g > 0), reverse=True))
    if ideal == 0:
        return 0.0
    return dcg([grades.get(id, 0) for id in ranked]) / ideal


def brute_recall(ranked, grades, k):
    relevant = [id for id, g in grades.items() if g > 0]
    if not relevant:
        return 0.0
    return sum(1 for id in relevant if id in ranked[:k]) / len(relevant)


def brute_rbo(a, b, p):
    total = 0.0
    for d in range(1, len(a) + 1):
        overlap = len(set(a[:d]) & set(b[:d]))
        total += p ** (d - 1) * overlap / d
    return (1 - p) * total


def test_ndcg_worked_examples():
    early = ranked_with_relevant_at(2, 11)
    late = ranked_with_relevant_at(9, 10)
    judgments = {"r2": 1, "r11": 1}
    assert ndcg_at_k(early, judgments, 10) == pytest.approx(0.3869, abs=5e-4)
    late_judgments = {"r9": 1, "r10": 1}
    assert ndcg_at_k(late, late_judgments, 10) == pytest.approx(
        0.3618, abs=5e-4
    )
    assert ndcg_at_k(late, late_judgments) < ndcg_at_k(early, judgments)


def test_ndcg_ideal_and_empty():
    ranked = ["a", "b", "c", "d"]
    assert ndcg_at_k(ranked, {"a": 3, "b": 2, "c": 1}) == pytest.approx(1.0)
    assert ndcg_at_k(ranked, {}) == 0.0
    assert ndcg_at_k(ranked, {"a": 0}) == 0.0


def test_recall_examples():
    late = ranked_with_relevant_at(9, 10)
    early = ranked_with_relevant_at(2, 11)
    assert recall_at_k(late, binary(late), 10) == 1.0
    assert recall_at_k(early, binary(early), 10) == 0.5
    assert recall_at_k(early, {}, 10) == 0.0


def test_rbo_examples():
    ids = [str(i) for i in range(20)]
    assert rbo(ids, ids, 0.9) == pytest.approx(1 - 0.9**20)
    assert rbo(["1", "2"], ["2", "1"], 0.5) == pytest.approx(0.25)
    with pytest.raises(PermutationError):
        rbo(["1", "2"], ["1", "3"])
    with pytest.raises(ValueError):
        rbo(["1"], ["1"], 1.0)


def test_multi_view_reward():
    gold = ranked_with_relevant_at(1, 2, 3)
    breakdown = multi_view_reward(gold, binary(gold), gold)
    assert breakdown.r_m == pytest.approx(1 + 0.2 + 0.1 * (1 - 0.9**20))
    assert breakdown.r_m == pytest.approx(1.2878, abs=1e-4)

    ndcg_only = multi_view_reward(
        gold[::-1], binary(gold), gold, RewardParams(phi=0, gamma=0)
    )
    assert ndcg_only.r_m == ndcg_at_k(gold[::-1], binary(gold), 10)


def test_reward_without_relevant_or_overlap():
    rollout = ["b", "a"]
    breakdown = multi_view_reward(rollout, {}, ["a", "b"])
    assert breakdown.ndcg == 0.0 and breakdown.recall == 0.0
    # Depth 1 shares nothing, depth 2 shares both ids
    assert breakdown.rbo == pytest.approx(0.1 * 0.9)


@pytest.mark.parametrize(
    "status,r_m,expected",
    [
        (FormatStatus.BOTH_GOOD, 0.9, 0.9),
        (FormatStatus.OUTPUT_ONLY, 0.9, 0.0),
        (FormatStatus.BAD, 0.9, -1.0),
    ],
)
def test_final_reward(status, r_m, expected):
    assert final_reward(status, r_m) == expected


def test_reward_gating_fixture():
    generator = random.Random(5)
    for case in range(200):
        m = generator.randint(2, 20)
        ids = [f"p{i}" for i in range(m)]
        grades = {id: generator.randint(0, 1) for id in ids}
        gold = ids[:]
        generator.shuffle(gold)
        order = list(range(1, m + 1))
        generator.shuffle(order)
        answer = " > ".join(f"[{k}]" for k in order)

        match case % 3:
            case 0:
                raw = f"<think>r</think><answer>{answer}</answer>"
                ranked = [ids[k - 1] for k in order]
                expected = multi_view_reward(ranked, grades, gold).r_m
                status = FormatStatus.BOTH_GOOD
            case 1:
                broken = answer + " > [1]"
                raw = f"<think>r</think><answer>{broken}</answer>"
                expected = 0.0
                status = FormatStatus.OUTPUT_ONLY
            case _:
                raw = f"{answer}"
                expected = -1.0
                status = FormatStatus.BAD

        breakdown = score_rollout(raw, grades, gold, ids)
        assert breakdown.format_status == status
        assert breakdown.final == pytest.approx(expected, abs=1e-12)


def test_metrics_match_brute_force():
    generator = random.Random(1234)
    for _ in range(1000):
        length = generator.randint(1, 20)
        ids = [f"p{i}" for i in range(length)]
        grades = {id: generator.randint(0, 3) for id in ids}
        ranked = ids[:]
        generator.shuffle(ranked)
        gold = ids[:]
        generator.shuffle(gold)
        k = generator.randint(1, 20)
        p = generator.uniform(0.05, 0.95)

        assert ndcg_at_k(ranked, grades, k) == pytest.approx(
            brute_ndcg(ranked, grades, k), abs=1e-9
        )
        assert recall_at_k(ranked, grades, k) == pytest.approx(
            brute_recall(ranked, grades, k), abs=1e-9
        )
        assert rbo(ranked, gold, p) == pytest.approx(
            brute_rbo(ranked, gold, p), abs=1e-9
        )


def test_relevance_judgments():
    judgments = RelevanceJudgments()
    judgments.add("q1", "d1", 2)
    assert "q1" in judgments and "q2" not in judgments
    assert judgments.query("q1") == {"d1": 2}
    assert judgments.query("q2") == {}
    with pytest.raises(ValueError):
        judgments.add("q1", "d2", -1)


def test_ndcg_never_drops_when_a_better_passage_moves_up():
    generator = random.Random(5)
    for _ in range(2000):
        length = generator.randint(2, 20)
        ranked = [f"p{i}" for i in range(length)]
        grades = {id: generator.randint(0, 3) for id in ranked}
        k = generator.randint(1, length)
        j, i = sorted(generator.sample(range(length), 2))
        if grades[ranked[j]] >= grades[ranked[i]]:
            continue
        swapped = ranked[:]
        swapped[i], swapped[j] = swapped[j], swapped[i]
        before = ndcg_at_k(ranked, grades, k)
        after = ndcg_at_k(swapped, grades, k)
        if j < k:
            assert after > before
        else:
            assert after == before


def test_ndcg_is_one_exactly_for_ideal_orderings():
    generator = random.Random(8)
    for length in range(1, 7):
        ids = [f"p{i}" for i in range(length)]
        for _ in range(20):
            grades = {id: generator.randint(0, 3) for id in ids}
            if not any(grades.values()):
                continue
            k = generator.randint(1, length)
            ideal = sorted(grades.values(), reverse=True)[:k]
            for ranked in itertools.permutations(ids):
                is_ideal = [grades[id] for id in ranked[:k]] == ideal
                value = ndcg_at_k(ranked, grades, k)
                assert math.isclose(value, 1.0, abs_tol=1e-12) == is_ideal


def test_rbo_symmetry_and_maximum():
    generator = random.Random(13)
    for length in range(1, 7):
        ids = [f"p{i}" for i in range(length)]
        for _ in range(5):
            p = generator.uniform(0.05, 0.95)
            ceiling = 1 - p**length
            gold = ids[:]
            generator.shuffle(gold)
            for ranked in itertools.permutations(ids):
                value = rbo(ranked, gold, p)
                assert value == pytest.approx(rbo(gold, ranked, p), abs=1e-12)
                if list(ranked) == gold:
                    assert value == pytest.approx(ceiling, abs=1e-12)
                else:
                    assert value < ceiling - 1e-12


def test_multi_view_reward_grows_with_each_component():
    generator = random.Random(21)
    params = RewardParams()
    ids = [f"p{i}" for i in range(12)]
    for _ in range(300):
        grades = {id: generator.randint(0, 2) for id in ids}
        gold = sorted(ids, key=lambda id: -grades[id])
        breakdowns = []
        for _ in range(6):
            ranked = ids[:]
            generator.shuffle(ranked)
            breakdowns.append(multi_view_reward(ranked, grades, gold, params))
        for a, b in itertools.permutations(breakdowns, 2):
            views = zip((a.ndcg, a.recall, a.rbo), (b.ndcg, b.recall, b.rbo))
            differences = [x - y for x, y in views]
            if min(differences) >= 0 and max(differences) > 1e-12:
                assert a.r_m > b.r_m
