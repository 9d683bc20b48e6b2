import math

import numpy as np
import pytest

from src.core.exceptions import DimensionError
from src.infra.latgeo_core.attention import MultiHeadAttention, causal_mask
from src.infra.numeric.tensor import Tensor


def brute_force_attention(block: MultiHeadAttention, query, key, value, eta=None, mask=None):
    """Per-pair loop over w[a, b] = g[a, b] exp(s[a, b]) / sum_l g[a, l] exp(s[a, l])."""
    def project(linear, x):
        return x @ linear.weight.data + linear.bias.data

    q, k, v = project(block.w_q, query), project(block.w_k, key), project(block.w_v, value)
    t, n, m, d_k = query.shape[0], key.shape[0], block.memory_slots, block.d_k
    heads = []
    for j in range(block.heads):
        cols = slice(j * d_k, (j + 1) * d_k)
        keys = [k[b, cols] for b in range(n)] + [block.memory_k.data[s, cols] for s in range(m)]
        values = [v[b, cols] for b in range(n)] + [block.memory_v.data[s, cols] for s in range(m)]
        out = np.zeros((t, d_k))
        for a in range(t):
            numerators = []
            for b in range(n + m):
                if b < n and mask is not None and not mask[a, b]:
                    numerators.append(0.0)
                    continue
                score = sum(q[a, j * d_k + c] * keys[b][c] for c in range(d_k)) / math.sqrt(d_k)
                g = eta[j][a, b] + block.eta_floor if eta is not None and b < n else 1.0
                numerators.append(g * math.exp(score))
            total = sum(numerators)
            for b in range(n + m):
                out[a] += numerators[b] / total * values[b]
        heads.append(out)
    return np.concatenate(heads, axis=1) @ block.w_o.weight.data + block.w_o.bias.data


@pytest.mark.parametrize("seed", range(50))
def test_matches_brute_force_oracle(seed):
    rng = np.random.default_rng(seed)
    n, m, heads = int(rng.integers(1, 7)), int(rng.integers(0, 5)), int(rng.choice([1, 2, 4]))
    block = MultiHeadAttention(rng, d_model=8, heads=heads, memory_slots=m)
    x = rng.standard_normal((n, 8))
    eta = [rng.uniform(0.0, 2.0, size=(n, n)) * (rng.uniform(size=(n, n)) > 0.2) for _ in range(heads)]
    out = block(Tensor(x), Tensor(x), Tensor(x), eta_g=[Tensor(e) for e in eta])
    assert np.allclose(out.data, brute_force_attention(block, x, x, x, eta), atol=1e-6)


def test_masked_cross_attention_matches_oracle():
    rng = np.random.default_rng(1)
    block = MultiHeadAttention(rng, d_model=8, heads=2)
    query, memory = rng.standard_normal((4, 8)), rng.standard_normal((6, 8))
    out = block(Tensor(query), Tensor(memory), Tensor(memory))
    assert np.allclose(out.data, brute_force_attention(block, query, memory, memory), atol=1e-6)

    mask = causal_mask(4)
    out = block(Tensor(query), Tensor(query), Tensor(query), mask=mask)
    assert np.allclose(out.data, brute_force_attention(block, query, query, query, mask=mask), atol=1e-6)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("memory_slots", [0, 2])
def test_unit_geometry_bias_is_bit_identical_to_plain_attention(seed, memory_slots):
    rng = np.random.default_rng(seed)
    block = MultiHeadAttention(rng, d_model=8, heads=2, memory_slots=memory_slots, eta_floor=0.0)
    x = Tensor(rng.standard_normal((4, 8)))
    plain = block(x, x, x)
    biased = block(x, x, x, eta_g=[Tensor(np.ones((4, 4)))] * 2)
    assert np.array_equal(plain.data, biased.data)


def test_floor_is_added_to_the_geometric_bias():
    rng = np.random.default_rng(6)
    block = MultiHeadAttention(rng, d_model=8, heads=2, memory_slots=2, eta_floor=0.5)
    x = Tensor(rng.standard_normal((4, 8)))
    floored = block(x, x, x, eta_g=[Tensor(np.full((4, 4), 0.25))] * 2)
    block.eta_floor = 0.0
    shifted = block(x, x, x, eta_g=[Tensor(np.full((4, 4), 0.75))] * 2)
    assert np.array_equal(floored.data, shifted.data)


def test_dead_geometry_row_still_attends_to_real_keys():
    rng = np.random.default_rng(7)
    block = MultiHeadAttention(rng, d_model=8, heads=2)
    block.record = True
    x = Tensor(rng.standard_normal((3, 8)))
    block(x, x, x, eta_g=[Tensor(np.zeros((3, 3)))] * 2)
    for weights in block.last_weights:
        assert np.isfinite(weights).all()
        assert np.allclose(weights.sum(axis=1), 1.0)


def test_recorded_weights_sum_to_one_over_keys_and_memory():
    rng = np.random.default_rng(3)
    block = MultiHeadAttention(rng, d_model=8, heads=2, memory_slots=3)
    block.record = True
    x = Tensor(rng.standard_normal((5, 8)))
    block(x, x, x, eta_g=[Tensor(rng.uniform(0, 1, (5, 5)))] * 2)
    assert len(block.last_weights) == 2
    for weights in block.last_weights:
        assert weights.shape == (5, 8)
        assert np.allclose(weights.sum(axis=1), 1.0)


def test_causal_mask_keeps_weights_off_future_positions():
    rng = np.random.default_rng(4)
    block = MultiHeadAttention(rng, d_model=8, heads=2)
    block.record = True
    y = Tensor(rng.standard_normal((4, 8)))
    block(y, y, y, mask=causal_mask(4))
    for weights in block.last_weights:
        assert not np.triu(weights, k=1).any()


def test_shape_errors():
    rng = np.random.default_rng(5)
    block = MultiHeadAttention(rng, d_model=8, heads=2)
    x = Tensor(rng.standard_normal((3, 8)))
    with pytest.raises(DimensionError):
        block(x, x, x, mask=np.ones((3, 2), dtype=bool))
    with pytest.raises(DimensionError):
        block(x, x, x, eta_g=[Tensor(np.ones((3, 3)))])
    with pytest.raises(DimensionError):
        block(x, x, x, eta_g=[Tensor(np.ones((2, 3)))] * 2)
