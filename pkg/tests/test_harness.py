import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ocreg.autodiff import Parameter
from ocreg.core import ConsistencyMethod
from ocreg.data import DomainSpec, gen_domain
from ocreg.errors import ConfigError, ContractError, NumericError
from ocreg.harness import (
    ExperimentConfig,
    TTAConfig,
    adversarial_examples,
    attack,
    build_datasets,
    corruption_stream,
    evaluate,
    fourier_basis,
    fourier_map,
    grid_frequencies,
    heldout_source,
    layer_ablation,
    topk_from_logits,
    train,
    tta_adapt,
)
from ocreg.nets import Backbone, Model, PrototypeHead, load_checkpoint


def tiny_config(**changes):
    base = dict(
        num_classes=3, n_per_class=8, n_target_per_class=6, image_size=8, hidden_dims=[16, 8],
        epochs=1, batch_size=16,
    )
    base.update(changes)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    return build_datasets(tiny_config())


@pytest.fixture(scope="module")
def tiny_model(tiny_data):
    return train(tiny_config(epochs=2), datasets=tiny_data, write_outputs=False).model


# -- evaluation -------------------------------------------------------------------

def test_topk_hand_table():
    logits = np.array([[3.0, 2.0, 1.0]] * 3)
    acc = topk_from_logits(logits, np.array([0, 1, 2]), [1, 2, 3])
    assert acc == {1: 1 / 3, 2: 2 / 3, 3: 1.0}


def test_topk_ties_go_to_lowest_index():
    acc = topk_from_logits(np.array([[1.0, 1.0, 0.0]]), np.array([1]), [1, 2])
    assert acc == {1: 0.0, 2: 1.0}


def test_topk_one_hot_and_bad_k():
    labels = np.array([2, 0, 1])
    assert topk_from_logits(np.eye(3)[labels], labels, [1])[1] == 1.0
    with pytest.raises(ContractError):
        topk_from_logits(np.eye(3), labels, [4])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 9))
def test_topk_monotone_and_full_k(seed, c):
    rng = np.random.default_rng(seed)
    logits = rng.integers(-2, 3, size=(20, c)).astype(float)
    labels = rng.integers(0, c, size=20)
    acc = topk_from_logits(logits, labels, list(range(1, c + 1)))
    values = [acc[k] for k in range(1, c + 1)]
    assert all(b >= a for a, b in zip(values, values[1:]))
    assert acc[c] == 1.0


# -- attacks --------------------------------------------------------------------------

def linear_model(w):
    d = w.size
    backbone = Backbone([(Parameter(np.eye(d), "w"), Parameter(np.zeros(d), "b"))])
    return Model(backbone, PrototypeHead(Parameter(np.stack([w, -w]), "p")))


def test_fgsm_on_linear_model_closed_form():
    rng = np.random.default_rng(0)
    w = rng.normal(size=12)
    model = linear_model(w)
    x = np.full((1, 3, 2, 2), 0.5)
    eps = 0.01
    adv = adversarial_examples(model, x, np.array([0]), "fgsm", eps, 1, eps, rng)
    np.testing.assert_allclose((adv - x).ravel(), -eps * np.sign(w), atol=1e-15)
    before, after = model.predict_logits(x)[0], model.predict_logits(adv)[0]
    drop = (before[0] - before[1]) - (after[0] - after[1])
    assert abs(drop - 2 * eps * np.abs(w).sum()) <= 1e-12


def test_attack_eps_zero_is_clean_accuracy(tiny_model, tiny_data):
    target = tiny_data[1]
    clean = evaluate(tiny_model, target, [1])[1]
    for method in ("fgsm", "bim", "pgd"):
        assert attack(tiny_model, target, method, eps=0.0) == clean


def test_attacks_stay_in_box_and_ball(tiny_model, tiny_data):
    x = tiny_data[1].images.astype(np.float64)
    y = tiny_data[1].labels
    for method in ("fgsm", "bim", "pgd"):
        adv = adversarial_examples(tiny_model, x, y, method, 0.05, 5, 0.02, np.random.default_rng(1))
        assert adv.min() >= 0 and adv.max() <= 1
        assert np.abs(adv - x).max() <= 0.05 + 1e-12


def test_iterative_attacks_not_weaker_than_fgsm(tiny_model, tiny_data):
    target = tiny_data[1]
    fgsm = attack(tiny_model, target, "fgsm", eps=0.05, step_size=0.01)
    assert attack(tiny_model, target, "bim", eps=0.05, step_size=0.01) <= fgsm
    assert attack(tiny_model, target, "pgd", eps=0.05, step_size=0.01) <= fgsm


def test_attack_config_errors(tiny_model, tiny_data):
    with pytest.raises(ConfigError):
        attack(tiny_model, tiny_data[1], "cw")
    with pytest.raises(ConfigError):
        attack(tiny_model, tiny_data[1], "bim", steps=0)


# -- Fourier sensitivity ----------------------------------------------------------------

def test_fourier_basis_orthonormal():
    size = 8
    freqs = grid_frequencies(7)
    basis = np.array([fourier_basis(a, b, size).ravel() for a in freqs for b in freqs])
    np.testing.assert_allclose(basis @ basis.T, np.eye(len(basis)), atol=1e-12)


def test_fourier_dc_cell_is_constant_shift():
    u = 4.0 * fourier_basis(0, 0, 32)
    np.testing.assert_allclose(u, 4.0 / 32)


def test_fourier_map_eps_zero_is_clean_error(tiny_model, tiny_data):
    target = tiny_data[1]
    grid = fourier_map(tiny_model, target, grid=5, eps=0.0)
    clean_error = 1.0 - evaluate(tiny_model, target, [1])[1]
    np.testing.assert_allclose(grid, clean_error)
    assert grid.shape == (5, 5)


def test_fourier_map_grid_too_large(tiny_model, tiny_data):
    with pytest.raises(ConfigError):
        fourier_map(tiny_model, tiny_data[1], grid=9)


# -- test-time adaptation ---------------------------------------------------------------

@pytest.fixture(scope="module")
def stream(tiny_data):
    return corruption_stream(heldout_source(tiny_config(), 4), severity=3)


def test_bn_only_matches_frozen_model(tiny_model, stream):
    frozen = [evaluate(tiny_model, seg, [1])[1] for seg in stream]
    for continual in (False, True):
        np.testing.assert_allclose(tta_adapt(tiny_model, stream, "bn-only", continual), frozen, atol=1e-15)


@pytest.mark.parametrize("method", ["entropy", "entropy+ocr"])
def test_episodic_tta_is_order_independent(tiny_model, stream, method):
    cfg = TTAConfig(batch_size=8, lr=0.05)
    forward = tta_adapt(tiny_model, stream, method, False, cfg)
    backward = tta_adapt(tiny_model, stream[::-1], method, False, cfg)
    assert forward == backward[::-1]


def test_tta_leaves_source_model_untouched(tiny_model, stream):
    before = {k: v.copy() for k, v in tiny_model.state_dict().items()}
    tta_adapt(tiny_model, stream, "entropy+ocr", True, TTAConfig(batch_size=8, lr=0.05))
    for k, v in tiny_model.state_dict().items():
        assert v.tobytes() == before[k].tobytes()


def test_tta_rejects_unknown_method(tiny_model, stream):
    with pytest.raises(ConfigError):
        tta_adapt(tiny_model, stream, "cotta")
    with pytest.raises(ConfigError):
        TTAConfig(update="head")


# -- training ---------------------------------------------------------------------------

def test_zero_epochs_gives_init_checkpoint(tmp_path, tiny_data):
    cfg = tiny_config(epochs=0, method={"kind": "none", "weight": 0.0}, out_dir=str(tmp_path))
    result = train(cfg, datasets=tiny_data)
    assert len(result.metrics) == 1
    init = Model.create(cfg.dims, cfg.num_classes, cfg.seed)
    back = load_checkpoint(tmp_path / "checkpoint.bin")
    for name, value in init.state_dict().items():
        assert back.state_dict()[name].tobytes() == value.tobytes()


def test_metrics_csv_is_byte_stable(tmp_path, tiny_data):
    texts = []
    for run in ("a", "b"):
        cfg = tiny_config(out_dir=str(tmp_path / run), seed=4)
        train(cfg, datasets=tiny_data)
        texts.append((tmp_path / run / "metrics.csv").read_bytes())
    assert texts[0] == texts[1]
    header = texts[0].decode().splitlines()[0]
    assert header.startswith("iter,epoch,train_loss,ocr_loss,lambda,top1,top3,top5")


def test_metrics_rows_respect_invariants(tiny_data):
    rows = train(tiny_config(epochs=2, eval_interval=1), datasets=tiny_data, write_outputs=False).metrics
    assert len(rows) == 1 + 2 * 5  # 72 samples, batch 16
    for r in rows:
        assert 0 <= r["top1"] <= r["top3"] <= r["top5"] <= 1
        assert 0 <= r["residual_entropy_ratio"] <= 1


def test_summary_json_written(tmp_path, tiny_data):
    train(tiny_config(out_dir=str(tmp_path)), datasets=tiny_data)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["method"] == "ocr" and summary["iterations"] == 5
    assert set(summary["final"]) >= {"top1", "order_tau", "residual_mi"}


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergent_training_raises_numeric_error(tiny_data):
    with pytest.raises(NumericError):
        train(tiny_config(lr=1e12, epochs=3), datasets=tiny_data, write_outputs=False)


def test_train_rejects_mismatched_classes(tiny_data):
    with pytest.raises(ConfigError):
        train(tiny_config(num_classes=4), datasets=tiny_data, write_outputs=False)


@pytest.mark.parametrize("strategy", ["fixed", "random", "eq4", "reversed-eq4"])
def test_every_strategy_trains(strategy, tiny_data):
    rows = train(tiny_config(strategy=strategy), datasets=tiny_data, write_outputs=False).metrics
    assert np.isfinite(rows[-1]["train_loss"])


@pytest.mark.parametrize("kind", ["representation-l1", "representation-l2", "prediction-ce"])
def test_baseline_methods_train(kind, tiny_data):
    cfg = tiny_config(method=ConsistencyMethod(kind, 1.0))
    assert np.isfinite(train(cfg, datasets=tiny_data, write_outputs=False).metrics[-1]["train_loss"])


# -- layer placement --------------------------------------------------------------------

def test_penultimate_is_the_default_path(tiny_data):
    cfg = tiny_config()
    default = train(cfg, datasets=tiny_data, write_outputs=False).metrics
    penult = train(cfg.replace(ocr_level="penultimate"), datasets=tiny_data, write_outputs=False).metrics
    assert default == penult
    assert layer_ablation(cfg, "penultimate", tiny_data) == default[-1]["top1"]


def test_layer_ablation_levels(tiny_data):
    cfg = tiny_config()
    for level in ("input", "hidden1"):
        assert 0.0 <= layer_ablation(cfg, level, tiny_data) <= 1.0
    with pytest.raises(ConfigError, match="valid names"):
        layer_ablation(cfg, "conv5", tiny_data)


# -- configuration ----------------------------------------------------------------------

def test_config_round_trip_and_errors(tmp_path):
    cfg = tiny_config(lambda0=0.7, strategy="fixed")
    assert ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ConfigError, match="unknown config keys"):
        ExperimentConfig.from_dict({"epochz": 3})
    with pytest.raises(ConfigError):
        ExperimentConfig(strategy="cosine")
    with pytest.raises(ConfigError):
        ExperimentConfig(lambda0=1.5)
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "bad.json")
    with pytest.raises(ConfigError, match="dataset file not found"):
        ExperimentConfig(data_dir=str(tmp_path))


def test_heldout_source_differs_from_training_data():
    cfg = tiny_config()
    sources, _ = build_datasets(cfg)
    held = heldout_source(cfg, 8)
    assert len(held) == 3 * 8 * len(sources)
    assert not np.array_equal(held.images[:24], sources[0].images)
    ref = gen_domain(3, 8, DomainSpec(**{**cfg.source_domains[0].to_dict(), "seed": 1011}), size=8)
    np.testing.assert_array_equal(held.images[:24], ref.images)
