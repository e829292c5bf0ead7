import numpy as np
import pytest

from gensearch.sim import (
    CorpusConfig,
    RewardConfig,
    SearchSimulator,
    attention,
    format_record,
    generate_corpus,
    grade_label,
    hashed_uniform,
    interaction_reward,
    live_toggle_events,
    parse_record,
    read_corpus,
    sample_clicks,
    system_reward_value,
    write_corpus,
    zipf_probabilities,
)

# Independent oracle: head mass of a Zipf(1.1) law over 500 ranks, top 100 ranks.
# sum_{r<=100} r^-1.1 / sum_{r<=500} r^-1.1 = 0.82058 (math.fsum, computed offline).
ZIPF_HEAD_MASS_500_1P1 = 0.8206


def test_zipf_head_mass_oracle():
    p = zipf_probabilities(500, 1.1)
    assert p[:100].sum() == pytest.approx(ZIPF_HEAD_MASS_500_1P1, abs=1e-4)


def test_generation_is_deterministic(tmp_path):
    cfg = CorpusConfig(n_items=200, n_queries=50, n_sessions=300, seed=3)
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    write_corpus(generate_corpus(cfg), a)
    write_corpus(generate_corpus(cfg), b)
    assert a.read_bytes() == b.read_bytes()


def test_round_trip_is_lossless(tmp_path):
    corpus = generate_corpus(CorpusConfig(n_items=200, n_queries=50, n_sessions=300, seed=5))
    path = tmp_path / "c.txt"
    write_corpus(corpus, path)
    back = read_corpus(path)
    assert back.config == corpus.config
    assert [format_record(r) for r in back.records] == [format_record(r) for r in corpus.records]
    for a, b in zip(back.items, corpus.items):
        assert a.feature_tokens == b.feature_tokens and a.quality == b.quality and a.live == b.live
        assert np.array_equal(a.topic_vector, b.topic_vector)
    for rec in corpus.records[:50]:
        assert parse_record(format_record(rec)) == rec


def test_records_have_positive_and_negative(default_corpus):
    for rec in default_corpus.records:
        assert len(rec.candidates) == len(rec.labels)
        assert any(l > 0 for l in rec.labels)
        assert any(l == 0 for l in rec.labels)


def test_default_corpus_head_mass(default_corpus):
    heads = np.array([default_corpus.queries[r.query_id].head for r in default_corpus.records])
    assert heads.mean() >= 0.6
    assert heads.mean() == pytest.approx(ZIPF_HEAD_MASS_500_1P1, abs=0.03)


def _avg_ranks(x):
    x = np.asarray(x, dtype=float)
    values, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    upper = np.cumsum(counts)
    return ((upper - counts + 1 + upper) / 2.0)[inverse]


def spearman(a, b):
    return float(np.corrcoef(_avg_ranks(a), _avg_ranks(b))[0, 1])


def test_spearman_helper():
    assert spearman([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0)
    assert spearman([1, 1, 2], [3, 2, 1]) == pytest.approx(-0.8660254)


def test_grades_track_hidden_relevance(default_corpus):
    grades, cos = [], []
    for rec in default_corpus.records[:1500]:
        grades += rec.labels
        cos += default_corpus.relevance(rec.query_id, rec.candidates).tolist()
    assert spearman(grades, cos) > 0.7


def test_items_unit_topics_and_features(default_corpus):
    norms = np.linalg.norm(default_corpus.item_topics, axis=1)
    assert np.allclose(norms, 1.0, atol=1e-6)
    assert all(it.feature_tokens for it in default_corpus.items)


def test_new_users_only_in_test(default_corpus):
    for rec in default_corpus.records:
        if default_corpus.is_new_user(rec.user_id):
            assert rec.split == "test"


def test_degenerate_config_rejected():
    with pytest.raises(ValueError):
        generate_corpus(CorpusConfig(n_items=5, n_topics=10))


def test_grade_label_monotone_in_cosine():
    cfg = CorpusConfig()
    for q in (0.1, 0.5, 0.9):
        grades = [grade_label(c, q, cfg) for c in np.linspace(0, 1, 50)]
        assert grades == sorted(grades)


def test_system_reward_examples():
    cfg = RewardConfig(w_relevance=0.75, w_quality=0.25, w_noise=0.0)
    assert system_reward_value(1.0, 1.0, 0.3, cfg) == pytest.approx(1.0)
    assert system_reward_value(0.5, 0.8, 0.9, cfg) == pytest.approx(0.575)


def test_system_reward_deterministic(default_corpus):
    sim = SearchSimulator(default_corpus)
    assert sim.system_reward(3, 4, 17) == sim.system_reward(3, 4, 17)
    assert 0.0 <= sim.system_reward(3, 4, 17) <= 1.0


def test_attention_ratio():
    assert attention(4) / attention(1) == pytest.approx(1.0 / 2.321928, rel=1e-6)


def test_zero_attractiveness_never_clicks():
    rng = np.random.default_rng(0)
    assert not sample_clicks(np.zeros(10), rng).any()


def test_click_rate_monte_carlo():
    rng = np.random.default_rng(0)
    rate = np.mean([sample_clicks(np.array([0.5]), rng)[0] for _ in range(10_000)])
    assert rate == pytest.approx(0.5, abs=0.02)


def test_interactions_watch_zero_without_click(default_corpus):
    sim = SearchSimulator(default_corpus)
    rng = np.random.default_rng(1)
    rec = default_corpus.records[0]
    for _ in range(20):
        for out in sim.simulate_interactions(rec.candidates, rec.query_id, rec.user_id, rng):
            assert 0.0 <= out.watch_fraction <= 1.0
            if not out.click:
                assert out.watch_fraction == 0.0
                assert interaction_reward(out) == 0.0
    with pytest.raises(ValueError):
        sim.simulate_interactions([], 0, 0, rng)


def test_hashed_uniform_range_and_determinism():
    u = hashed_uniform(7, np.arange(1000), 3)
    assert np.all((u >= 0) & (u < 1))
    assert np.array_equal(u, hashed_uniform(7, np.arange(1000), 3))
    assert abs(u.mean() - 0.5) < 0.05


def test_live_toggles_only_touch_fraction(default_corpus):
    events = live_toggle_events(default_corpus, 20)
    touched = {i for tick in events for i, _ in tick}
    assert 0 < len(touched) <= round(0.1 * len(default_corpus.items))
