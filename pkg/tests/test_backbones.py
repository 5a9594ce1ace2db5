import numpy as np
import pytest

from _helpers import TINY_ARCH, TINY_SCHEMA, model_grad_report, random_features, repr_grad_report
from rmtl import nncore
from rmtl.backbones import (
    VARIANTS,
    ArchConfig,
    Features,
    FeatureSchema,
    actor_forward,
    check_features,
    count_params,
    init_model,
    init_repr,
    load_model,
    model_backward,
    model_forward,
    save_model,
    state_repr_forward,
)
from rmtl.errors import CheckpointError, SchemaMismatchError, ValidationError


@pytest.mark.parametrize("variant", VARIANTS)
def test_backbone_gradients(variant):
    report = model_grad_report(variant, 0)
    assert report.passed, report.failures()


def test_state_repr_gradients():
    report = repr_grad_report(1)
    assert report.passed, report.failures()


def test_state_repr_shapes_and_zero_state():
    rng = nncore.make_rng(2)
    params = init_repr(TINY_SCHEMA, rng, 3, 4, (5, 4))
    feats = random_features(TINY_SCHEMA, 7, rng)
    s, _ = state_repr_forward(TINY_SCHEMA, params, feats)
    assert s.shape == (7, 4) and np.all(s >= 0)
    for layer in params.bottom.layers:
        layer.weight[:] = 0.0
        layer.bias[:] = 0.0
    s0, _ = state_repr_forward(TINY_SCHEMA, params, feats)
    assert np.array_equal(s0, np.zeros((7, 4)))


def test_esmm_ctcvr_never_exceeds_ctr():
    rng = nncore.make_rng(3)
    model = init_model(TINY_SCHEMA, "esmm", rng, TINY_ARCH)
    a1, a2 = model.predict(random_features(TINY_SCHEMA, 200, rng))
    assert np.all(a2 <= a1 + 1e-15)


@pytest.mark.parametrize("variant", ["mmoe", "ple"])
def test_gates_are_distributions(variant):
    rng = nncore.make_rng(4)
    model = init_model(TINY_SCHEMA, variant, rng, TINY_ARCH)
    s, _ = model.states(random_features(TINY_SCHEMA, 9, rng))
    _, _, cache = actor_forward(model.actor, s)
    for g in cache.gate_out:
        assert np.all(g >= 0) and np.allclose(g.sum(axis=1), 1.0)


def test_ple_gate_groups_share_only_shared_experts():
    arch = ArchConfig(embed_dim=2, proj_dim=2, bottom_dims=(3,), tower_dims=(2,), expert_dims=(3,),
                      ple_split=(3, 3, 2))
    model = init_model(TINY_SCHEMA, "ple", nncore.make_rng(0), arch)
    g1, g2 = model.actor.gate_experts
    assert g1 == (0, 1, 2, 6, 7) and g2 == (3, 4, 5, 6, 7)
    assert model.actor.expert_count == 8


def test_single_task_towers_are_independent():
    rng = nncore.make_rng(5)
    model = init_model(TINY_SCHEMA, "single_task", rng, TINY_ARCH)
    assert len(model.reprs) == 2
    feats = random_features(TINY_SCHEMA, 4, rng)
    a1, a2, cache = model_forward(model, feats)
    grads = model_backward(model, cache, np.ones(4), np.zeros(4))
    assert all(np.all(g == 0) for k, g in grads.items() if k.startswith(("repr.1", "actor.tower.1")))


def test_outputs_are_probabilities_for_all_variants():
    rng = nncore.make_rng(6)
    feats = random_features(TINY_SCHEMA, 30, rng)
    for v in VARIANTS:
        a1, a2 = init_model(TINY_SCHEMA, v, rng, TINY_ARCH).predict(feats)
        for a in (a1, a2):
            assert a.shape == (30,) and np.all((a > 0) & (a < 1))


def test_feature_validation():
    rng = nncore.make_rng(7)
    feats = random_features(TINY_SCHEMA, 3, rng)
    check_features(TINY_SCHEMA, feats)
    with pytest.raises(SchemaMismatchError):
        check_features(TINY_SCHEMA, Features(feats.cat[:, :2], feats.num))
    bad = feats.cat.copy()
    bad[0, 1] = 6
    with pytest.raises(ValidationError):
        check_features(TINY_SCHEMA, Features(bad, feats.num))
    num = feats.num.copy()
    num[1, 0] = np.nan
    with pytest.raises(ValidationError):
        check_features(TINY_SCHEMA, Features(feats.cat, num))
    with pytest.raises(ValidationError):
        FeatureSchema(categorical=(("a", 2), ("a", 3)))


def test_schema_dict_round_trip():
    assert FeatureSchema.from_dict(TINY_SCHEMA.to_dict()) == TINY_SCHEMA


def test_checkpoint_round_trip_and_schema_check(tmp_path):
    rng = nncore.make_rng(8)
    model = init_model(TINY_SCHEMA, "ple", rng, TINY_ARCH)
    save_model(tmp_path / "m.npz", model, "actor", {"seed": 3})
    loaded, meta = load_model(tmp_path / "m.npz", TINY_SCHEMA)
    assert meta["seed"] == 3 and meta["role"] == "actor"
    feats = random_features(TINY_SCHEMA, 20, rng)
    for x, y in zip(model.predict(feats), loaded.predict(feats)):
        assert x.tobytes() == y.tobytes()
    other = FeatureSchema(categorical=(("user_id", 5),), numerical=())
    with pytest.raises(SchemaMismatchError):
        load_model(tmp_path / "m.npz", other)
    (tmp_path / "broken.npz").write_bytes(b"\x00" * 10)
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "broken.npz")


def test_parameter_counts_grow_with_experts():
    counts = {v: count_params(init_model(TINY_SCHEMA, v, nncore.make_rng(0), TINY_ARCH).named_arrays())
              for v in VARIANTS}
    assert counts["shared_bottom"] == counts["esmm"]
    assert counts["single_task"] > counts["shared_bottom"]
    assert counts["mmoe"] > counts["shared_bottom"]
