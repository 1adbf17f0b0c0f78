import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from circuitkit.errors import ContextError, FormatError, IdentifierError, UsageError, VocabError
from circuitkit.model import (
    Model, ModelConfig, forward, init_random_model, load_model, node_contribution, quantize, save_model,
    weight_shapes,
)
from circuitkit.zoo import build_or_gate_model, build_reverse_model

from conftest import random_model, random_tokens, small_config


def test_forward_deterministic(rng):
    m = random_model()
    toks = random_tokens(rng, m.config)
    a, _ = forward(m, toks)
    b, _ = forward(m, toks)
    assert np.array_equal(a, b)


def test_or_gate_mlp_output_is_one():
    m, _ = build_or_gate_model((1, 1))
    _, cache = forward(m, np.zeros((1, 1), dtype=int))
    assert cache["m0"][0, 0, 1] == pytest.approx(1.0)


def test_reverse_model_decodes():
    m, _ = build_reverse_model(4)
    logits, _ = forward(m, np.array([[0, 3, 2, 1]]))
    assert logits.argmax(-1).tolist() == [[1, 2, 3, 0]]


@pytest.mark.parametrize("norm", ["none", "pre-layernorm"])
@pytest.mark.parametrize("pos", ["learned", "none"])
def test_contributions_sum_to_final_residual(norm, pos, rng):
    m = random_model(norm=norm, pos_embed=pos)
    _, cache = forward(m, random_tokens(rng, m.config))
    names = ["tok"] + (["pos"] if pos != "none" else [])
    for l in range(m.config.n_layers):
        names += [f"a{l}.h{h}" for h in range(m.config.n_heads)] + [f"m{l}"]
    total = sum(node_contribution(cache, n) for n in names)
    assert np.max(np.abs(total - cache["resid_final"])) <= 1e-9


def test_zero_layer_contributions(rng):
    m = random_model(n_layers=0)
    toks = random_tokens(rng, m.config)
    _, cache = forward(m, toks)
    np.testing.assert_array_equal(cache["resid_final"], cache["tok"] + cache["pos"])
    np.testing.assert_array_equal(cache["tok"], m["embed.W_E"][toks])


def test_zeroing_a_head_matches_zeroed_output_projection(rng):
    # last-layer head of an attention-only model: nothing downstream reads it
    m = random_model(norm="none", d_mlp=0)
    toks = random_tokens(rng, m.config)
    _, cache = forward(m, toks)
    m2 = m.copy()
    m2.weights["blocks.1.attn.W_O"][1] = 0.0
    _, cache2 = forward(m2, toks)
    assert np.max(np.abs(cache["resid_final"] - cache["a1.h1"] - cache2["resid_final"])) <= 1e-9


def test_contribution_unknown_node(rng):
    m = random_model()
    _, cache = forward(m, random_tokens(rng, m.config))
    for bad in ("a5.h0", "resid_final", "a0.h0.q"):
        with pytest.raises(IdentifierError):
            node_contribution(cache, bad)


def test_token_errors():
    m = random_model()
    with pytest.raises(VocabError):
        forward(m, np.array([[0, 99]]))
    with pytest.raises(VocabError):
        forward(m, np.array([[0.5, 1.0]]))
    with pytest.raises(ContextError):
        forward(m, np.zeros((1, 9), dtype=int))
    with pytest.raises(UsageError):
        forward(m, np.zeros((1, 1, 1), dtype=int))


def test_config_validation():
    with pytest.raises(UsageError):
        ModelConfig(1, 1, 2, 1, activation="swish")
    with pytest.raises(UsageError):
        ModelConfig(1, 1, 2, 1, attn_scale=0)
    with pytest.raises(FormatError):
        Model(small_config(), {})


def test_ctm_round_trip(tmp_path, rng):
    m = quantize(random_model(3, n_layers=1))
    save_model(m, tmp_path / "m.ctm")
    m2 = load_model(tmp_path / "m.ctm")
    toks = random_tokens(rng, m.config)
    assert m2.config == m.config
    assert np.array_equal(forward(m, toks)[0], forward(m2, toks)[0])


def test_quantization_drift_small(tmp_path, rng):
    m = init_random_model(small_config(n_layers=1), 5)
    save_model(m, tmp_path / "m.ctm")
    toks = random_tokens(rng, m.config)
    drift = np.max(np.abs(forward(m, toks)[0] - forward(load_model(tmp_path / "m.ctm"), toks)[0]))
    assert drift <= 1e-5


def _rewrite_manifest(path, edit):
    raw = path.read_bytes()
    (n,) = struct.unpack("<Q", raw[:8])
    man = json.loads(raw[8 : 8 + n])
    edit(man)
    head = json.dumps(man).encode()
    path.write_bytes(struct.pack("<Q", len(head)) + head + raw[8 + n :])


def test_ctm_missing_tensor_named(tmp_path):
    p = tmp_path / "m.ctm"
    save_model(random_model(n_layers=1), p)
    _rewrite_manifest(p, lambda man: man.update(tensors=[t for t in man["tensors"] if t["name"] != "unembed.W_U"]))
    with pytest.raises(FormatError, match="unembed.W_U"):
        load_model(p)


@pytest.mark.parametrize(
    "edit",
    [
        lambda man: man.update(format_version=2),
        lambda man: man["tensors"][0].update(dtype="f16"),
        lambda man: man["tensors"][0].update(offset=10**9),
        lambda man: man["tensors"][1].update(offset=0),
        lambda man: man["config"].update(bogus=1),
    ],
)
def test_ctm_malformed(tmp_path, edit):
    p = tmp_path / "m.ctm"
    save_model(random_model(n_layers=1), p)
    _rewrite_manifest(p, edit)
    with pytest.raises(FormatError):
        load_model(p)


def test_ctm_truncated(tmp_path):
    p = tmp_path / "m.ctm"
    p.write_bytes(b"\x01\x02")
    with pytest.raises(FormatError):
        load_model(p)
    p.write_bytes(struct.pack("<Q", 1000) + b"{}")
    with pytest.raises(FormatError):
        load_model(p)


def test_weight_shapes_attention_only():
    shapes = weight_shapes(small_config(d_mlp=0, norm="none"))
    assert not any("mlp" in k or "ln" in k for k in shapes)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.integers(1, 5))
def test_causal_prefix_invariance(seed, T):
    m = random_model(seed)
    toks = np.random.default_rng(seed).integers(0, m.config.vocab, (2, 5))
    full = forward(m, toks)[0]
    prefix = forward(m, toks[:, :T])[0]
    np.testing.assert_allclose(full[:, :T], prefix, atol=1e-12)
