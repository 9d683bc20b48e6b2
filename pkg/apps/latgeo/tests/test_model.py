"""Label gate, connectivity and end-to-end properties of the captioning network."""

import csv

import numpy as np
import pytest

from src.core.exceptions import ConfigError, ContractError, DimensionError
from src.domain.run_models import Connectivity, ModelConfig
from src.domain.scene_models import END, START, UNK
from src.infra.latgeo_core import model as model_module
from src.infra.latgeo_core.connectivity import build_connectivity
from src.infra.latgeo_core.label_attention import (
    LabelAttention,
    LabelSet,
    gate_encoder_outputs,
    labels_embed,
    rank_labels,
)
from src.infra.latgeo_core.model import embed_visual, positional_encoding
from src.infra.numeric.module import Linear
from src.infra.numeric.tensor import Tensor, no_grad
from src.services.evaluation_service import dump_attention, expected_attention_rows
from src.services.gradcheck_service import micro_scene

PREFIX = [START, 4, 8, 5, 6]


def logits_of(model, scene, prefix=PREFIX):
    with no_grad():
        return model(scene, prefix).data


# --- Label attention ---

def test_labels_embed_uses_unk_row_for_unknown_words(vocab):
    table = Tensor(np.arange(len(vocab) * 4, dtype=float).reshape(len(vocab), 4))
    rows = labels_embed(["cat", "zebra", "cat"], vocab, table).data
    assert np.array_equal(rows[0], table.data[vocab.id_of("cat")])
    assert np.array_equal(rows[1], table.data[UNK])
    assert np.array_equal(rows[0], rows[2])


def test_rank_labels_scales_rows():
    l_o = Tensor(np.arange(6.0).reshape(2, 3))
    assert np.array_equal(rank_labels(l_o, [1.0, 1.0]).data, l_o.data)
    assert np.array_equal(rank_labels(l_o, [1.0, 0.5]).data[1], l_o.data[1] / 2)


def test_label_gate_range_background_row_and_equivariance():
    rng = np.random.default_rng(0)
    lam = LabelAttention(rng, 8, 2)
    l_o = Tensor(rng.standard_normal((3, 8)))
    probs = np.array([0.9, 0.8, 0.75])
    gate = lam(LabelSet(l_o=l_o, r_o=rank_labels(l_o, probs), probs=probs), with_background=True).data
    assert gate.shape == (4, 8)
    assert ((gate[:3] > 0) & (gate[:3] < 1)).all()
    assert np.array_equal(gate[3], np.ones(8))

    order = [2, 0, 1]
    l_p = Tensor(l_o.data[order])
    permuted = lam(LabelSet(l_o=l_p, r_o=rank_labels(l_p, probs[order]), probs=probs[order]), False).data
    assert np.allclose(permuted, gate[:3][order], atol=1e-12)


def test_single_label_gate_is_sigmoid_of_value_path():
    rng = np.random.default_rng(1)
    lam = LabelAttention(rng, 8, 2)
    l_o = Tensor(rng.standard_normal((1, 8)))
    gate = lam(LabelSet(l_o=l_o, r_o=rank_labels(l_o, [0.8]), probs=np.array([0.8])), False).data
    att = lam.attention
    value = l_o.data @ att.w_v.weight.data + att.w_v.bias.data
    expected = 1.0 / (1.0 + np.exp(-(value @ att.w_o.weight.data + att.w_o.bias.data)))
    assert np.allclose(gate, expected, atol=1e-12)


def test_gate_encoder_outputs():
    outputs = [Tensor(np.full((2, 3), 4.0)), Tensor(np.full((2, 3), -2.0))]
    passed = gate_encoder_outputs(outputs, Tensor(np.ones((2, 3))), 2)
    assert all(np.array_equal(g.data, o.data) for g, o in zip(passed, outputs))
    halved = gate_encoder_outputs(outputs, Tensor(np.full((2, 3), 0.5)), 2)
    assert np.array_equal(halved[0].data, np.full((2, 3), 2.0))
    with pytest.raises(ConfigError):
        gate_encoder_outputs(outputs, Tensor(np.ones((2, 3))), 3)
    with pytest.raises(DimensionError):
        gate_encoder_outputs(outputs, Tensor(np.ones((3, 3))), 2)


# --- Visual tokens and positions ---

def test_embed_visual_identity_and_width_check():
    projection = Linear(np.random.default_rng(0), 8, 8, bias=False)
    projection.weight.data = np.eye(8)
    features = np.random.default_rng(1).standard_normal((3, 8))
    assert np.array_equal(embed_visual(features, projection).data, features)
    assert not embed_visual(np.zeros((2, 8)), projection).data.any()
    with pytest.raises(ConfigError):
        embed_visual(np.zeros((2, 6)), projection)


def test_positional_encoding():
    pe = positional_encoding(22, 16)
    assert pe.shape == (22, 16)
    assert (np.abs(pe) <= 1.0).all()
    assert np.allclose(pe[:, 1], np.cos(np.arange(1, 23)))
    assert len({row.tobytes() for row in pe}) == 22
    with pytest.raises(ConfigError):
        positional_encoding(5, 7)


# --- Connectivity ---

def test_connectivity_plans():
    assert build_connectivity(ModelConfig(layers=3)).branches == [[0, 1, 2]] * 3
    assert build_connectivity(ModelConfig(layers=3, connectivity="single")).branches == [[0], [1], [2]]
    assert build_connectivity(ModelConfig(layers=3, connectivity="skipped")).branches == [[0, 2]] * 3
    custom = ModelConfig(layers=3, connectivity="skipped", skipped_layers=[2])
    assert build_connectivity(custom).branches == [[1]] * 3

    encdec = build_connectivity(ModelConfig(layers=3, connectivity=Connectivity.RESIDUAL_ENCDEC))
    assert encdec.residual_encoder and encdec.residual_decoder
    encoder_only = build_connectivity(ModelConfig(layers=3, connectivity=Connectivity.RESIDUAL_ENCODER))
    assert encoder_only.residual_encoder and not encoder_only.residual_decoder


def test_connectivity_rejects_out_of_range_layers():
    with pytest.raises(ConfigError):
        build_connectivity(ModelConfig(layers=3, connectivity="skipped", skipped_layers=[4]))
    with pytest.raises(ConfigError):
        build_connectivity(ModelConfig(layers=3, connectivity="skipped", skipped_layers=[]))


def test_fully_connected_has_more_parameters_than_single(make_model):
    fully = make_model(layers=3)
    single = make_model(layers=3, connectivity="single")
    assert [len(layer.gates) for layer in fully.decoder.layers] == [3, 3, 3]
    assert [len(layer.gates) for layer in single.decoder.layers] == [1, 1, 1]
    assert fully.parameter_count() > single.parameter_count()


def test_tied_output_projection_reuses_word_table(make_model, scene, vocab):
    tied = make_model(tie_embeddings=True)
    assert "output.weight" not in tied.state_dict()
    assert tied.parameter_count() < make_model().parameter_count()
    assert logits_of(tied, scene).shape == (len(PREFIX), len(vocab))


# --- End to end ---

def test_logits_shape(make_model, scene, vocab):
    assert logits_of(make_model(), scene).shape == (len(PREFIX), len(vocab))


def test_prefix_validation(make_model, scene):
    model = make_model()
    with pytest.raises(ContractError):
        model(scene, [4, 5])
    with pytest.raises(ContractError):
        model(scene, [START] + [4] * 8)


def test_logits_are_causal(make_model, scene):
    model = make_model()
    full = logits_of(model, scene)
    changed = logits_of(model, scene, PREFIX[:3] + [END, 11])
    assert np.allclose(full[:3], changed[:3], atol=1e-12)
    assert not np.allclose(full[3:], changed[3:])
    for t in range(1, len(PREFIX)):
        assert np.allclose(logits_of(model, scene, PREFIX[:t]), full[:t], atol=1e-12)


@pytest.mark.parametrize("overrides", [
    {},
    {"use_background": False},
    {"connectivity": "single"},
    {"geometry_kind": "l1", "h_geo": 1},
])
def test_logits_invariant_to_proposal_order(make_model, scene, overrides):
    model = make_model(**overrides)
    assert np.allclose(logits_of(model, scene), logits_of(model, scene.permuted([2, 0, 1])), atol=1e-10)


@pytest.mark.parametrize("seed", range(10))
def test_unit_geometry_weights_reduce_exactly_to_geometry_off(make_model, monkeypatch, seed):
    model = make_model(seed=seed, eta_floor=0.0)
    scene = micro_scene(np.random.default_rng(seed))
    heads = model.config.heads

    def unit_weights(xi, projection, heads_, *args):
        n = xi.shape[0]
        return [Tensor(np.ones((n, n)))] * heads

    monkeypatch.setattr(model_module, "geometry_weights", unit_weights)
    with_unit_bias = logits_of(model, scene)
    model.geometry = None
    assert np.array_equal(with_unit_bias, logits_of(model, scene))


@pytest.mark.parametrize("seed", range(10))
def test_unit_label_gate_reduces_exactly_to_lam_off(make_model, monkeypatch, seed):
    model = make_model(seed=seed)
    scene = micro_scene(np.random.default_rng(seed))
    monkeypatch.setattr(
        type(model.label_attention),
        "__call__",
        lambda self, labels, with_background: Tensor(np.ones((labels.l_o.shape[0] + int(with_background), 16))),
    )
    gated = logits_of(model, scene)
    model.label_attention = None
    assert np.array_equal(gated, logits_of(model, scene))


def test_baseline_flags_build_the_plain_meshed_model(make_model, scene, vocab):
    model = make_model(use_geometry=False, use_lam=False, use_background=False)
    assert model.geometry is None and model.label_attention is None
    encoded = model.encode(scene)
    assert encoded.gate is None and encoded.geometry is None
    assert encoded.memories[0].shape == (len(scene.proposals), 16)
    assert logits_of(model, scene).shape == (len(PREFIX), len(vocab))


def test_residual_encoder_adds_previous_layer(make_model, scene):
    model = make_model(connectivity="residual_encoder", use_geometry=False)
    with no_grad():
        tokens = embed_visual(model_module.scene_inputs(scene, True), model.visual)
        outputs = model.encoder(tokens)
        second = model.encoder.layers[1](outputs[0])
    assert np.allclose(outputs[1].data, second.data + outputs[0].data, atol=1e-12)


def test_equal_seeds_build_identical_models(make_model, scene):
    a, b = make_model(seed=5), make_model(seed=5)
    assert all(np.array_equal(pa, pb) for pa, pb in zip(a.state_dict().values(), b.state_dict().values()))
    assert np.array_equal(logits_of(a, scene), logits_of(b, scene))


def test_feature_width_mismatch_is_config_error(make_model, scene_factory):
    with pytest.raises(ConfigError):
        make_model().encode(scene_factory([(50, 50, 10, 10)], d_feat=6))


def test_attention_dump_writes_every_mesh_branch(make_model, scene, tmp_path):
    model = make_model()
    dump = dump_attention(model, scene, tmp_path, prefix=PREFIX)
    with open(dump.attention_csv, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == dump.attention_rows == expected_attention_rows(model, scene, len(PREFIX))

    cross = [r for r in rows if r["module"] == "cross"]
    assert {(r["layer"], r["memory"]) for r in cross} == {("1", "1"), ("1", "2"), ("2", "1"), ("2", "2")}
    n_tokens = len(scene.proposals) + 1
    totals: dict[tuple, float] = {}
    for r in cross:
        key = (r["layer"], r["memory"], r["head"], r["query"])
        totals[key] = totals.get(key, 0.0) + float(r["weight"])
    assert len(totals) == 4 * 2 * len(PREFIX)
    assert np.allclose(list(totals.values()), 1.0)
    assert len(cross) == len(totals) * n_tokens
