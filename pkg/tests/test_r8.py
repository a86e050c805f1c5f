"""Dataset-table counts for R8; skipped when the data is not installed."""

import pytest

from duat.corpus import load_corpus
from duat.graph import build_graph, collect_window_stats

from test_acceptance import R8_DIR, r8_files

pytestmark = pytest.mark.skipif(r8_files() is None, reason=f"R8 data not found in {R8_DIR}")


@pytest.fixture(scope="module")
def r8():
    corpus = load_corpus(*r8_files())
    return corpus, build_graph(corpus, collect_window_stats(corpus, 20))


class TestR8Counts:
    def test_splits(self, r8):
        corpus, _ = r8
        assert len(corpus.ids("train")) == 5485
        assert len(corpus.ids("test")) == 2189
        assert len(corpus.labels) == 8

    def test_vocabulary(self, r8):
        assert len(r8[0].vocabulary) == 7688

    def test_nodes(self, r8):
        assert r8[1].n_nodes == 15362 == 5485 + 2189 + 7688
