from collections import deque
from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddunet import postprocess as P


def flood_fill(mask, connectivity):
    """Plain BFS labelling; returns the components as a set of frozensets of voxel indices."""
    m = np.asarray(mask, bool)
    if connectivity == 6:
        steps = [s for s in product((-1, 0, 1), repeat=3) if sum(map(abs, s)) == 1]
    else:
        steps = [s for s in product((-1, 0, 1), repeat=3) if any(s)]
    seen = np.zeros_like(m)
    comps = set()
    for start in zip(*np.nonzero(m)):
        if seen[start]:
            continue
        seen[start] = True
        queue, comp = deque([start]), []
        while queue:
            v = queue.popleft()
            comp.append(v)
            for s in steps:
                nb = tuple(a + b for a, b in zip(v, s))
                if all(0 <= nb[i] < m.shape[i] for i in range(3)) and m[nb] and not seen[nb]:
                    seen[nb] = True
                    queue.append(nb)
        comps.add(frozenset(comp))
    return comps


def partition(labeling):
    return {frozenset(zip(*np.nonzero(labeling.ids == k))) for k in range(1, labeling.count + 1)}


def blob_volume(sizes, shape=(12, 12, 12)):
    """One separated rod per size along row-major order (spacing two)."""
    v = np.zeros(shape, np.uint8)
    for i, n in enumerate(sizes):
        flat = np.zeros(shape[1] * shape[2], bool)
        flat[:n] = True
        v[2 * i][flat.reshape(shape[1:])] = 2
    return v


# -- channel fusion ---------------------------------------------------------------


def test_fusion_priority():
    probs = np.zeros((3, 1, 1, 4))
    probs[:, 0, 0, 0] = [0.9, 0.9, 0.9]
    probs[:, 0, 0, 1] = [0.1, 0.9, 0.9]
    probs[:, 0, 0, 2] = [0.1, 0.1, 0.9]
    probs[:, 0, 0, 3] = [0.5, 0.5, 0.5]
    assert P.fuse_channels(probs)[0, 0].tolist() == [4, 1, 2, 0]


def test_fusion_et_wins_even_when_inconsistent():
    probs = np.zeros((3, 1, 1, 1))
    probs[0] = 0.8
    assert P.fuse_channels(probs)[0, 0, 0] == 4


# -- small-ET rule --------------------------------------------------------------------


def test_et_299_relabelled_300_kept():
    v = np.zeros((10, 10, 10), np.uint8)
    v.flat[:299] = 4
    out = P.suppress_small_et(v)
    assert np.all(out.flat[:299] == 1) and not np.any(out == 4)
    v.flat[:300] = 4
    np.testing.assert_array_equal(P.suppress_small_et(v), v)


def test_no_et_unchanged():
    v = np.full((4, 4, 4), 2, np.uint8)
    np.testing.assert_array_equal(P.suppress_small_et(v), v)


# -- connected components -----------------------------------------------------------


def test_diagonal_pair_connectivity():
    m = np.zeros((3, 3, 3), bool)
    m[0, 0, 0] = m[1, 1, 1] = True
    assert P.connected_components(m, 6).count == 2
    assert P.connected_components(m, 26).count == 1
    with pytest.raises(ValueError):
        P.connected_components(m, 18)


def test_ids_follow_first_voxel_order():
    m = np.zeros((4, 4, 4), bool)
    m[3, 3, 3] = m[0, 0, 2] = m[0, 0, 0] = True
    cc = P.connected_components(m, 6)
    assert cc.ids[0, 0, 0] == 1 and cc.ids[0, 0, 2] == 2 and cc.ids[3, 3, 3] == 3


@pytest.mark.parametrize("connectivity", [6, 26])
def test_components_match_flood_fill(connectivity):
    rng = np.random.default_rng(connectivity)
    for _ in range(30):
        m = rng.random(tuple(rng.integers(1, 13, 3))) < rng.uniform(0.1, 0.6)
        cc = P.connected_components(m, connectivity)
        assert partition(cc) == flood_fill(m, connectivity)
        assert sorted(cc.sizes.tolist()) == sorted(len(c) for c in flood_fill(m, connectivity))


# -- component filter ---------------------------------------------------------------


def test_fraction_filter_70_20_10():
    v = blob_volume([70, 20, 10])
    out = P.filter_components(v, 0.3, 26)
    assert np.count_nonzero(out) == 70
    assert np.all(out[0] == v[0])


def test_fraction_filter_keeps_equal_halves():
    v = blob_volume([50, 50])
    np.testing.assert_array_equal(P.filter_components(v, 0.3, 26), v)


def test_per_label_mode():
    v = blob_volume([70, 20, 10])
    v[v == 2] = 1
    v[4][v[4] > 0] = 4  # 10-voxel rod is the only ET component
    out = P.filter_components(v, 0.3, 26, mode="per_label")
    assert np.count_nonzero(out == 4) == 10 and np.count_nonzero(out == 1) == 70
    with pytest.raises(ValueError):
        P.filter_components(v, mode="whatever")


def test_empty_volume():
    z = np.zeros((4, 4, 4), np.uint8)
    np.testing.assert_array_equal(P.filter_components(z), z)
    np.testing.assert_array_equal(P.postprocess(np.zeros((3, 4, 4, 4))), z)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000), st.sampled_from([6, 26]), st.sampled_from(["whole_tumor", "per_label"]))
def test_pipeline_never_adds_foreground(seed, connectivity, mode):
    rng = np.random.default_rng(seed)
    probs = rng.random((3, 8, 8, 8))
    labels = P.fuse_channels(probs)
    out = P.postprocess(probs, connectivity=connectivity, mode=mode, min_et_voxels=int(rng.integers(0, 400)))
    assert np.all((out > 0) <= (labels > 0))
    assert set(np.unique(out)) <= {0, 1, 2, 4}
