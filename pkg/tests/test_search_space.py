import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spnas import oracle
from spnas.search_space import (
    BlockConfig,
    DerivedArchitecture,
    MacroArchConfig,
    build_supernet,
    count_params,
    derive_architecture,
    digest,
    fixed_param_count,
    load_architecture,
    load_checkpoint,
    materialize,
    save_architecture,
    save_checkpoint,
    set_decisions,
    supernet_param_count,
)
from spnas.superkernel import DecisionTriple, all_decisions
from spnas.tensor import Tensor

FULL = DecisionTriple.from_name("5x5e6")
SKIP = DecisionTriple.from_op(skip=True)


def test_toy_structure(toy_arch):
    assert toy_arch.num_layers == 4
    assert toy_arch.skip_mask == [False, True, False, True]
    specs = toy_arch.layer_specs()
    assert [s[:4] for s in specs] == [(4, 4, 1, 8), (4, 4, 1, 8), (4, 8, 2, 8), (8, 8, 1, 4)]


def test_config_validation():
    with pytest.raises(ValueError):
        MacroArchConfig(blocks=(BlockConfig(1, 4, 3),))
    with pytest.raises(ValueError):
        MacroArchConfig(num_classes=1)
    with pytest.raises(ValueError):
        MacroArchConfig.from_dict({"input_size": 8})


def test_config_dict_roundtrip(toy_arch):
    assert MacroArchConfig.from_dict(json.loads(json.dumps(toy_arch.to_dict()))) == toy_arch


def test_same_seed_same_weights(toy_arch):
    a, b = build_supernet(toy_arch), build_supernet(toy_arch)
    for (ka, va), (kb, vb) in zip(a.parameters().items(), b.parameters().items()):
        assert ka == kb and np.array_equal(va.data, vb.data)


def test_param_count_matches_tensors(toy_arch):
    net = build_supernet(toy_arch)
    assert count_params(net.parameters().values()) == supernet_param_count(toy_arch)


def _shape_params(config, ops):
    """Count by building the plain network and summing its tensor sizes."""
    from spnas.search_space import CompactNet
    return count_params(CompactNet(config, ops).parameters().values())


configs = st.builds(
    lambda s, c, blocks: MacroArchConfig(input_size=s, input_channels=c, stem_channels=4, blocks=tuple(blocks)),
    st.integers(4, 10), st.integers(1, 3),
    st.lists(st.builds(BlockConfig, st.integers(1, 3), st.sampled_from([2, 4, 6]), st.sampled_from([1, 2])),
             min_size=1, max_size=3))


@given(configs)
def test_single_path_parameter_identity(config):
    full = [FULL] * config.num_layers
    assert fixed_param_count(config, full) == _shape_params(config, full)
    assert supernet_param_count(config) == fixed_param_count(config, full) + 3 * config.num_layers


@given(configs, st.data())
def test_smaller_ops_have_fewer_params(config, data):
    ops = [data.draw(st.sampled_from(all_decisions(s))) for s in config.skip_mask]
    count = fixed_param_count(config, ops)
    assert count == _shape_params(config, ops)
    if all(o == FULL for o in ops):
        assert count == supernet_param_count(config) - 3 * config.num_layers
    else:
        assert count < fixed_param_count(config, [FULL] * config.num_layers)


# ---------------------------------------------------------------- derivation


def test_derive_extremes(toy_arch):
    net = build_supernet(toy_arch)
    for layer in net.layers:
        layer.set_thresholds(-1.0, -1.0, -1.0)
    assert derive_architecture(net).summary() == "5x5e6,5x5e6,5x5e6,5x5e6"
    for layer in net.layers:
        layer.set_thresholds(1e9, 1e9, 1e9)
    assert derive_architecture(net).summary() == "3x3e3,s,3x3e3,s"


def test_derive_matches_hand_evaluation(toy_arch, rng):
    net = build_supernet(toy_arch)
    expected = []
    for layer in net.layers:
        w = layer.dw_super.data
        ring = float(np.sum(w ** 2) - np.sum(w[1:4, 1:4] ** 2))
        tk = ring * rng.choice([0.5, 1.5])
        wk = w if ring > tk else np.pad(w[1:4, 1:4], ((1, 1), (1, 1), (0, 0)))
        half = layer.channels // 2
        lo, hi = float(np.sum(wk[..., :half] ** 2)), float(np.sum(wk[..., half:] ** 2))
        t3, t6 = lo * rng.choice([0.5, 1.5]), hi * rng.choice([0.5, 1.5])
        layer.set_thresholds(tk, t3, t6)
        if layer.skip_allowed and lo <= t3:
            expected.append("s")
        else:
            expected.append(f"{5 if ring > tk else 3}x{5 if ring > tk else 3}e{6 if hi > t6 else 3}")
    assert derive_architecture(net).summary() == ",".join(expected)


def test_derived_rejects_bad_layouts(toy_arch):
    with pytest.raises(ValueError):
        DerivedArchitecture(toy_arch, [FULL] * 3)
    with pytest.raises(ValueError):
        DerivedArchitecture(toy_arch, [SKIP, FULL, FULL, FULL])


def test_architecture_json_schema(toy_arch):
    d = DerivedArchitecture(toy_arch, [FULL, SKIP, DecisionTriple.from_name("3x3e3"), FULL], {"note": "x"})
    data = d.to_dict()
    assert data["version"] == 1
    assert data["layers"] == [{"k": 5, "e": 6}, {"skip": True}, {"k": 3, "e": 3}, {"k": 5, "e": 6}]
    assert DerivedArchitecture.from_dict(data).decisions == d.decisions


def test_save_load_save_byte_identical(toy_arch, tmp_path):
    net = build_supernet(toy_arch)
    d = derive_architecture(net, seed=0)
    save_architecture(d, tmp_path / "a.json")
    save_architecture(load_architecture(tmp_path / "a.json"), tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_load_rejects_wrong_layer_count(toy_arch, tmp_path):
    d = derive_architecture(build_supernet(toy_arch)).to_dict()
    d["layers"] = d["layers"][:3]
    (tmp_path / "a.json").write_text(json.dumps(d))
    with pytest.raises(ValueError):
        load_architecture(tmp_path / "a.json")
    other = MacroArchConfig()
    save_architecture(derive_architecture(build_supernet(other)), tmp_path / "b.json")
    with pytest.raises(ValueError):
        load_architecture(tmp_path / "b.json", toy_arch)


def test_load_rejects_unknown_version(toy_arch, tmp_path):
    d = derive_architecture(build_supernet(toy_arch)).to_dict()
    d["version"] = 99
    (tmp_path / "a.json").write_text(json.dumps(d))
    with pytest.raises(ValueError):
        load_architecture(tmp_path / "a.json")


def test_provenance_hash_recomputes(toy_arch, tmp_path):
    save_architecture(derive_architecture(build_supernet(toy_arch)), tmp_path / "a.json")
    loaded = load_architecture(tmp_path / "a.json")
    assert loaded.provenance["config_hash"] == digest(loaded.config.to_dict()) == toy_arch.digest()


def test_checkpoint_roundtrip(toy_arch, tmp_path):
    net = build_supernet(toy_arch)
    net.layers[1].set_thresholds(1e9, 1e9, 1e9)
    save_checkpoint(net, tmp_path / "c.npz")
    again = load_checkpoint(tmp_path / "c.npz")
    assert again.config == toy_arch
    for k, v in net.parameters().items():
        assert np.array_equal(v.data, again.parameters()[k].data)
    assert derive_architecture(again).summary() == derive_architecture(net).summary()


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "c.npz").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "c.npz")


# ---------------------------------------------------------------- materialization


@pytest.mark.parametrize("names", [
    ["5x5e6", "5x5e6", "5x5e6", "5x5e6"],
    ["3x3e3", "s", "5x5e3", "3x3e6"],
    ["3x3e6", "5x5e3", "3x3e3", "s"],
])
def test_materialized_equals_supernet(toy_arch, rng, names):
    ops = [DecisionTriple.from_name(n) for n in names]
    net = build_supernet(toy_arch)
    for p in net.parameters().values():
        if p.data.ndim == 1 and p.size > 1:
            p.data = p.data + rng.normal(0, 0.1, p.shape)
    set_decisions(net, ops)
    compact = materialize(ops, net)
    x = rng.normal(size=(4, 8, 8, 2))
    super_out, _ = net.forward(Tensor(x))
    np.testing.assert_allclose(compact(Tensor(x)).data, super_out.data, atol=1e-10)
    np.testing.assert_allclose(oracle.build_sliced_reference(ops, net)(x), super_out.data, atol=1e-10)
    assert count_params(compact.parameters().values()) == fixed_param_count(toy_arch, ops)


def test_skipped_layers_vanish():
    config = MacroArchConfig(stem_channels=4, blocks=(BlockConfig(3, 4, 1),))
    net = build_supernet(config)
    with pytest.raises(ValueError):
        materialize([SKIP, SKIP, SKIP], net)
    compact = materialize([DecisionTriple.from_name("3x3e3"), SKIP, SKIP], net)
    assert compact.layers[1] is None and compact.layers[2] is None
    assert not any(k.startswith(("layer1.", "layer2.")) for k in compact.parameters())


def test_materialize_copies_weights(toy_arch):
    net = build_supernet(toy_arch)
    compact = materialize([FULL] * 4, net)
    compact.layers[0].dw.data[...] = 0.0
    assert np.any(net.layers[0].dw_super.data)
