import csv
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ipt_lab.analysis import (case_study, distance_stats, nearest_tokens, plm_sentence_embeddings, project_2d,
                              prompt_sentence_embeddings, render_case_study, sample_indices,
                              write_projection_csv, write_scatter_svg)
from ipt_lab.strategies import StrategyConfig, build_strategy


def brute_force_stats(x, cats):
    intra, inter = [], []
    for i, j in itertools.combinations(range(len(x)), 2):
        d = 1.0 - x[i] @ x[j] / (np.linalg.norm(x[i]) * np.linalg.norm(x[j]))
        (intra if cats[i] == cats[j] else inter).append(d)
    return np.mean(intra), np.mean(inter)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_distance_stats_matches_pairwise_loop(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(12, 5))
    cats = ["a", "b", "c"] * 4
    stats = distance_stats(x, cats)
    intra, inter = brute_force_stats(x, cats)
    assert stats["intra_mean"] == pytest.approx(intra, abs=1e-12)
    assert stats["inter_mean"] == pytest.approx(inter, abs=1e-12)
    assert stats["ratio"] == pytest.approx(intra / inter, rel=1e-10)


def test_clustered_points_have_a_small_ratio():
    rng = np.random.default_rng(0)
    centers = rng.normal(size=(3, 16)) * 10
    x = np.concatenate([c + rng.normal(scale=0.1, size=(5, 16)) for c in centers])
    stats = distance_stats(x, [c for c in "abc" for _ in range(5)])
    assert stats["ratio"] < 0.1


def test_distance_stats_errors():
    x = np.ones((4, 3))
    with pytest.raises(ValueError, match="at least 2 categories"):
        distance_stats(x, ["a"] * 4)
    with pytest.raises(ValueError, match="fewer than 2 points"):
        distance_stats(x, ["a", "a", "a", "b"])
    x[2] = 0.0
    with pytest.raises(ValueError, match="zero vector at row 2"):
        distance_stats(x, ["a", "a", "b", "b"])


def test_nearest_tokens_matches_exhaustive_search():
    rng = np.random.default_rng(1)
    prompts = rng.normal(size=(6, 4))
    ref = rng.normal(size=(20, 4))
    ids = list(range(100, 120))
    found = nearest_tokens(prompts, ref, ids, top_k=3)
    for r, row in enumerate(found):
        sims = [prompts[r] @ ref[j] / (np.linalg.norm(prompts[r]) * np.linalg.norm(ref[j])) for j in range(20)]
        expected = sorted(range(20), key=lambda j: -sims[j])[:3]
        assert [n.token_id for n in row] == [ids[j] for j in expected]
        assert row[0].similarity == pytest.approx(max(sims))
        assert row[0].row == r


def test_nearest_token_ties_go_to_the_lower_id():
    ref = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0]])
    found = nearest_tokens(np.array([[3.0, 0.0]]), ref, [7, 4, 9])
    assert found[0][0].token_id == 4
    # a repeated id is only reported once
    dup = nearest_tokens(np.array([[3.0, 0.0]]), np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), [5, 5, 2], top_k=2)
    assert [n.token_id for n in dup[0]] == [5, 2]


def test_nearest_tokens_errors():
    with pytest.raises(ValueError, match="empty"):
        nearest_tokens(np.ones((1, 2)), np.zeros((0, 2)), [])
    with pytest.raises(ValueError, match="reference rows"):
        nearest_tokens(np.ones((1, 2)), np.ones((2, 2)), [1])


def test_projection_matches_svd():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(30, 6)) @ np.diag([5.0, 3.0, 1.0, 0.5, 0.2, 0.1])
    proj = project_2d(x, ["c"] * 30)
    centered = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    np.testing.assert_allclose(proj.explained, (s ** 2 / (s ** 2).sum())[:2], atol=1e-8)
    for j in range(2):
        comp = proj.components[:, j]
        np.testing.assert_allclose(np.abs(comp), np.abs(vt[j]), atol=1e-8)
        assert comp[np.argmax(np.abs(comp))] > 0
    np.testing.assert_allclose(proj.coords, centered @ proj.components, atol=1e-10)
    assert proj.ids[:3] == ["0", "1", "2"]


def test_projection_errors():
    with pytest.raises(ValueError, match="rank 0"):
        project_2d(np.ones((5, 3)), ["a"] * 5)
    with pytest.raises(ValueError, match="at least 3 vectors"):
        project_2d(np.ones((2, 3)), ["a"] * 2)
    with pytest.raises(ValueError, match="labels"):
        project_2d(np.eye(4), ["a"] * 3)


def test_sample_indices():
    assert sample_indices(5, size=10) == [0, 1, 2, 3, 4]
    picked = sample_indices(100, size=10, seed=3)
    assert len(set(picked)) == 10 and picked == sorted(picked)
    assert picked == sample_indices(100, size=10, seed=3)


def test_sentence_embeddings_have_one_row_per_instance(backbone, vocab, instances):
    strategy = build_strategy(StrategyConfig(strategy="random-ipt", prompt_len=3), backbone, vocab)
    assert plm_sentence_embeddings(backbone, instances[:5]).shape == (5, backbone.config.d_model)
    assert prompt_sentence_embeddings(strategy, instances[:5]).shape == (5, backbone.config.d_model)


def test_case_study(backbone, vocab, spec, instances):
    strategy = build_strategy(StrategyConfig(strategy="random-ipt", prompt_len=3), backbone, vocab)
    report = case_study(strategy, instances[:2], spec, vocab)
    assert report.strategy == "random-ipt"
    for entry, inst in zip(report.entries, instances):
        assert entry.gold == spec.labels[inst.label_id]
        assert entry.predicted in spec.labels
        assert len(entry.input_nearest) == len(entry.vocab_nearest) == 3
        for a, b in zip(entry.input_nearest, entry.vocab_nearest):
            assert a.token in entry.tokens
            assert b.similarity >= a.similarity - 1e-12
    text = render_case_study([report])
    assert text.startswith("# Case study")
    assert f"## Instance {instances[0].id}" in text
    assert "**" in text
    assert render_case_study([]) == "# Case study\n\nNo instances.\n"


def test_projection_files(tmp_path):
    rng = np.random.default_rng(4)
    projections = {"plm": project_2d(rng.normal(size=(6, 3)), list("aabbcc")),
                   "prompt": project_2d(rng.normal(size=(6, 3)), list("aabbcc"))}
    csv_path = tmp_path / "projection.csv"
    write_projection_csv(str(csv_path), projections)
    with open(csv_path, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["space", "id", "category", "x", "y"]
    assert len(rows) == 13
    assert {r[0] for r in rows[1:]} == {"plm", "prompt"}
    svg = tmp_path / "projection.svg"
    write_scatter_svg(str(svg), projections)
    assert "<svg" in svg.read_text()


def test_coincident_points_have_zero_ratio():
    identical = np.tile([0.1, 0.2, 0.3], (6, 1))
    stats = distance_stats(identical, ["a"] * 3 + ["b"] * 3)
    assert stats == {"intra_mean": 0.0, "inter_mean": 0.0, "ratio": 0.0}
    scaled = identical * np.array([0.1, 1.0, 2.5, 4.0, 7.0, 13.0])[:, None]
    assert distance_stats(scaled, ["a"] * 3 + ["b"] * 3)["ratio"] == 0.0


def test_projection_matches_an_eigen_decomposition():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(40, 5)) @ rng.normal(size=(5, 5))
    proj = project_2d(x, ["c"] * 40)
    eigvals = np.sort(np.linalg.eigvalsh(np.cov(x, rowvar=False)))[::-1]
    np.testing.assert_allclose(proj.explained, eigvals[:2] / eigvals.sum(), atol=1e-8)
    again = project_2d(x.copy(), ["c"] * 40)
    np.testing.assert_array_equal(proj.coords, again.coords)
