import json

import pytest

from neuronscope.attribution import NeuronRanking, NeuronScore
from neuronscope.intervention import load_mask, mask_from_ranking, union
from neuronscope.model import AblationMask

RANKING = NeuronRanking(tuple(NeuronScore(l, j, 10.0 - i) for i, (l, j) in enumerate([(1, 2), (0, 4), (1, 0)])))


def test_top_k():
    assert mask_from_ranking(RANKING, 2) == AblationMask.of([(1, 2), (0, 4)])
    assert len(mask_from_ranking(RANKING, 0)) == 0


@pytest.mark.parametrize("k", [-1, 4])
def test_k_out_of_range(k):
    with pytest.raises(ValueError):
        mask_from_ranking(RANKING, k)


def test_union_and_load(tmp_path):
    m = union(AblationMask.of([(0, 1)]), AblationMask.of([(0, 1), (1, 1)]))
    assert list(m) == [(0, 1), (1, 1)]
    p = tmp_path / "m.json"
    p.write_text(json.dumps(m.to_json()))
    assert load_mask(p) == m
