from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gradutil import param_grad_error, pullback_errors
from pathfuse.evalstats import cox_loss_grad
from pathfuse.fusion import (
    CheckpointError,
    ConfigurationError,
    FusionConfig,
    FusionHyper,
    GatedFusionNet,
    build_embedders,
    fusion_predict,
    gate,
    kron_fuse,
    load_branch_params,
    train_schedule,
)
from pathfuse.nets import CnnConfig, GcnConfig, SnnConfig, UnimodalNet
from pathfuse.numcore import ParamStore, rng_stream
from pathfuse.training import InstanceSet

seeds = st.integers(0, 2**32 - 1)


# ---------------------------------------------------------------------------
# gate


def test_gate_saturated_passes_relu_features():
    rng = np.random.default_rng(0)
    h, ctx = rng.normal(size=4), rng.normal(size=6)
    W_h, b_h = rng.normal(size=(4, 4)), rng.normal(size=4)
    out, _ = gate(h, ctx, W_h, b_h, np.zeros((6, 4)), np.full(4, 50.0))
    np.testing.assert_allclose(out, np.maximum(h @ W_h + b_h, 0), rtol=1e-15, atol=0)


def test_gate_zero_attention_halves():
    rng = np.random.default_rng(1)
    h, ctx = rng.normal(size=4), rng.normal(size=6)
    W_h, b_h = rng.normal(size=(4, 4)), rng.normal(size=4)
    out, _ = gate(h, ctx, W_h, b_h, np.zeros((6, 4)), np.zeros(4))
    np.testing.assert_array_equal(out, 0.5 * np.maximum(h @ W_h + b_h, 0))


def test_gate_hand_matrix_oracle():
    h = np.array([1.0, -2.0, 0.5])
    ctx = np.array([0.2, 0.4, -1.0])
    W_h = np.array([[1.0, 0.0, 2.0], [0.5, -1.0, 0.0], [0.0, 1.0, 1.0]])
    W_z = np.array([[1.0, -1.0, 0.0], [0.0, 2.0, 1.0], [1.0, 0.0, -1.0]])
    pre = [1 * 1 + -2 * 0.5 + 0.5 * 0, 1 * 0 + -2 * -1 + 0.5 * 1, 1 * 2 + -2 * 0 + 0.5 * 1]
    zpre = [0.2 - 1.0, -0.2 + 0.8, 0.4 + 1.0]
    expected = [max(p, 0) / (1 + np.exp(-z)) for p, z in zip(pre, zpre)]
    out, _ = gate(h, ctx, W_h, np.zeros(3), W_z, np.zeros(3))
    np.testing.assert_allclose(out, expected, rtol=1e-15)


@given(seeds, st.integers(1, 5), st.integers(1, 6))
def test_gate_gradients_property(seed, d, c):
    rng = np.random.default_rng(seed)
    args = [rng.normal(size=(2, d)), rng.normal(size=(2, c)), rng.normal(size=(d, d)),
            rng.normal(size=d), rng.normal(size=(c, d)), rng.normal(size=d)]
    assert max(pullback_errors(gate, args, seed=seed % 983)) < 1e-5


# ---------------------------------------------------------------------------
# Kronecker fusion


def test_kron_hand_product():
    flat, extents, _ = kron_fuse([np.array([1.0]), np.array([2.0]), np.array([3.0])])
    T = flat.reshape(extents)
    assert extents == (2, 2, 2)
    assert T[0, 0, 0] == 6.0 and T[1, 1, 1] == 1.0
    assert T[0, 1, 1] == 1.0 and T[1, 0, 1] == 2.0 and T[1, 1, 0] == 3.0


def test_kron_trimodal_32_wide_extents():
    _, extents, _ = kron_fuse([np.ones(32)] * 3)
    assert extents == (33, 33, 33)


def test_kron_matches_triple_loop():
    rng = np.random.default_rng(2)
    a, b, c = rng.normal(size=3), rng.normal(size=4), rng.normal(size=5)
    flat, _, _ = kron_fuse([a, b, c])
    a1, b1, c1 = np.r_[a, 1], np.r_[b, 1], np.r_[c, 1]
    ref = [a1[i] * b1[j] * c1[k] for i in range(4) for j in range(5) for k in range(6)]
    assert np.max(np.abs(flat - ref)) <= 1e-15


@given(seeds, st.integers(1, 6), st.integers(1, 6), st.integers(1, 6))
def test_kron_slice_recovery(seed, di, dg, dn):
    rng = np.random.default_rng(seed)
    hi, hg, hn = rng.normal(size=di), rng.normal(size=dg), rng.normal(size=dn)
    flat, extents, _ = kron_fuse([hi, hg, hn])
    T = flat.reshape(extents)
    assert T[-1, -1, -1] == 1.0
    assert np.array_equal(T[:-1, -1, -1], hi)
    assert np.array_equal(T[-1, :-1, -1], hg)
    assert np.array_equal(T[-1, -1, :-1], hn)
    # bimodal slab: the last index of the third factor gives the outer product of the first two
    assert np.max(np.abs(T[:-1, :-1, -1] - np.outer(hi, hg))) <= 1e-15


@given(seeds, st.integers(2, 3), st.integers(1, 4))
def test_kron_gradients_property(seed, k, d):
    rng = np.random.default_rng(seed)
    vs = [rng.normal(size=(2, d + i)) for i in range(k)]

    def fn(*vs):
        flat, _, back = kron_fuse(list(vs))
        return flat, back

    assert max(pullback_errors(fn, vs, seed=seed % 977)) < 1e-6


def test_bimodal_with_ones_vector_structure():
    # saturated gates + identity maps: fusing (h, 1) puts h in the informative slab
    h = np.array([0.3, 1.2, 2.0])
    flat, extents, _ = kron_fuse([h, np.ones(2)])
    T = flat.reshape(extents)
    for j in range(3):
        assert np.array_equal(T[:-1, j], h)
    assert np.array_equal(T[-1], np.ones(3))


def test_kron_rejects_nonfinite():
    with pytest.raises(ValueError):
        kron_fuse([np.array([np.inf]), np.ones(2)])


# ---------------------------------------------------------------------------
# full fusion model


def toy_embedders(mode, widths=4):
    return build_embedders(
        mode,
        SnnConfig(input_dim=5, widths=(6, widths)),
        GcnConfig(input_dim=3, hidden=5, head_widths=(5, widths)),
        CnnConfig(input_side=8, layers=((3, 3, 1),), hidden=5, embed_dim=widths),
    )


def toy_inputs(rng, n):
    graphs = []
    for _ in range(n):
        m = int(rng.integers(2, 6))
        A = np.triu((rng.random((m, m)) < 0.5).astype(float), 1)
        graphs.append(SimpleNamespace(X=rng.normal(size=(m, 3)), A=A + A.T))
    return {"snn": rng.normal(size=(n, 5)), "gcn": graphs, "cnn": rng.normal(size=(n, 8, 8, 3)),
            "snn_b": rng.normal(size=(n, 5))}


def test_trimodal_default_extents():
    model = GatedFusionNet(FusionConfig(), build_embedders("cnn-gcn-snn", SnnConfig(), GcnConfig(),
                                                           CnnConfig()))
    assert model.extents == (33, 17, 17)
    assert model.tensor_width == 9537
    assert model.describe()["branch_order"] == ["snn", "cnn", "gcn"]


@pytest.mark.parametrize("mode", ["cnn-snn", "gcn-snn"])
def test_bimodal_default_extents(mode):
    model = GatedFusionNet(FusionConfig(mode=mode),
                           build_embedders(mode, SnnConfig(), GcnConfig(), CnnConfig()))
    assert model.extents == (33, 33)
    assert model.tensor_width == 1089


def test_grade_gating_uses_image():
    model = GatedFusionNet(FusionConfig(task="grade"),
                           build_embedders("cnn-gcn-snn", SnnConfig(), GcnConfig(), CnnConfig()))
    assert model.gater == "cnn"


@pytest.mark.parametrize("mode", ["cnn-gcn-snn", "gcn-snn", "snn-snn"])
def test_fusion_gradients_toy_widths(mode):
    model = GatedFusionNet(FusionConfig(mode=mode, reduced_dim=3, head_widths=(6, 4)),
                           toy_embedders(mode))
    params = ParamStore()
    for b in model.branches:
        b.embedder.init(params, rng_stream(0, b.name))
    model.init_fusion(params, rng_stream(1))
    rng = np.random.default_rng(2)
    for name in params.names():
        params.set(name, rng.normal(scale=0.5, size=params[name].shape))
    inputs = toy_inputs(rng, 5)
    time, event = rng.exponential(size=5) + 0.1, np.array([1, 0, 1, 1, 1])

    def loss(p):
        out, back = model.forward(p, inputs, rng_stream(3), True)  # fixed dropout masks
        value, grad = cox_loss_grad(time, event, out)
        back(grad)
        return value

    assert param_grad_error(loss, params) < 1e-4

    def fn(x):
        out, back = model.forward(params, {**inputs, "snn": x}, rng_stream(3), True)
        return out, lambda d: back(d)["snn"]

    assert pullback_errors(fn, [inputs["snn"]])[0] < 1e-4


def test_missing_modality_is_configuration_error():
    model = GatedFusionNet(FusionConfig(mode="cnn-snn", reduced_dim=3, head_widths=(4, 4)),
                           toy_embedders("cnn-snn"))
    params = ParamStore()
    for b in model.branches:
        b.embedder.init(params, rng_stream(0))
    model.init_fusion(params, rng_stream(1))
    with pytest.raises(ConfigurationError):
        model.forward(params, {"snn": np.zeros((1, 5))})
    with pytest.raises(ConfigurationError):
        FusionConfig(mode="cnn-cnn-cnn")


# ---------------------------------------------------------------------------
# training schedule


def toy_cohort(rng, n, with_images=True):
    inputs = toy_inputs(rng, n)
    risk = inputs["snn"][:, 0] + np.array([g.X[:, 0].mean() for g in inputs["gcn"]])
    time = rng.exponential(1 / np.exp(risk))
    return InstanceSet([f"p{i}" for i in range(n)], time, np.ones(n, dtype=int),
                       np.zeros(n, dtype=int), genomic=inputs["snn"], graphs=inputs["gcn"],
                       images=inputs["cnn"] if with_images else None)


def pretrained(model, data, seed=0):
    from pathfuse.training import TrainHyper, train_unimodal

    ckpts = {}
    for b in model.branches:
        net = UnimodalNet(b.embedder, "survival")
        ckpts[b.name], _ = train_unimodal(net, data, b.modality, TrainHyper(epochs=2), seed)
    return ckpts


def test_schedule_graph_genomic_without_images():
    rng = np.random.default_rng(4)
    data = toy_cohort(rng, 24, with_images=False)
    model = GatedFusionNet(FusionConfig(mode="gcn-snn", head_widths=(6, 4)), toy_embedders("gcn-snn"))
    ckpts = pretrained(model, data)
    params, history = train_schedule(model, ckpts, data,
                                     FusionHyper(frozen_epochs=2, finetune_epochs=3), seed=0)
    assert len(history.loss) == 5
    assert history.lr[:2] == [1e-4, 1e-4]
    assert history.lr[2] == 1e-4 and history.lr[-1] < 1e-4
    assert fusion_predict(model, params, data).shape == (24,)


def test_schedule_same_modality_ablation_accepted():
    rng = np.random.default_rng(5)
    data = toy_cohort(rng, 20, with_images=False)
    model = GatedFusionNet(FusionConfig(mode="snn-snn", head_widths=(6, 4)), toy_embedders("snn-snn"))
    assert [b.name for b in model.branches] == ["snn", "snn_b"]
    params, _ = train_schedule(model, pretrained(model, data), data,
                               FusionHyper(frozen_epochs=1, finetune_epochs=1), seed=0)
    assert np.all(np.isfinite(fusion_predict(model, params, data)))


def test_schedule_freezes_image_and_phase_one_embedders():
    rng = np.random.default_rng(6)
    data = toy_cohort(rng, 20)
    model = GatedFusionNet(FusionConfig(mode="cnn-gcn-snn", reduced_dim=3, head_widths=(6, 4)),
                           toy_embedders("cnn-gcn-snn"))
    ckpts = pretrained(model, data)
    start = load_branch_params(model, ckpts)
    # phase 1 only: every embedder stays put
    p1, _ = train_schedule(model, ckpts, data, FusionHyper(frozen_epochs=2, finetune_epochs=0), 0)
    for name in start.names():
        assert np.array_equal(p1[name], start[name]), name
    # phase 2: genomic and graph move, image does not
    p2, _ = train_schedule(model, ckpts, data, FusionHyper(frozen_epochs=1, finetune_epochs=2), 0)
    moved = {name.split(".")[0] for name in start.names() if not np.array_equal(p2[name], start[name])}
    assert moved == {"snn", "gcn"}


def test_schedule_missing_checkpoint():
    rng = np.random.default_rng(7)
    data = toy_cohort(rng, 10, with_images=False)
    model = GatedFusionNet(FusionConfig(mode="gcn-snn"), toy_embedders("gcn-snn"))
    ckpts = pretrained(model, data)
    with pytest.raises(CheckpointError):
        train_schedule(model, {"snn": ckpts["snn"]}, data, FusionHyper(), 0)
    bad = ckpts["snn"].copy()
    bad.entries["snn.fc0.W"].value = np.zeros((2, 2))
    with pytest.raises(CheckpointError):
        load_branch_params(model, {"snn": bad, "gcn": ckpts["gcn"]})


def test_fusion_hyper_defaults():
    hyper = FusionHyper()
    assert (hyper.lr, hyper.frozen_epochs, hyper.finetune_epochs, hyper.l1) == (1e-4, 5, 25, 3e-4)
    assert FusionConfig().gate_dropout == 0.25 and FusionConfig().tensor_dropout == 0.25
