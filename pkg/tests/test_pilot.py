import json
import math

import numpy as np
import pytest

from cotpilot.features import SEM_DIM, UNC_DIM, Z_DIM, from_parts
from cotpilot.pilot import (BCE_EPS, ConstantDifficultyPilot, CorruptCheckpoint,
                            DimensionMismatch, EmptyDataset, PilotModel,
                            ScriptedDifficultyPilot, TrainConfig, TrainSample,
                            UnsupportedVersion, bce_loss, difficulty, load,
                            load_checkpoint, loss_and_grads, make_synth_dataset,
                            save, save_checkpoint, synth_teacher, teacher_score,
                            train)


# Scalar-arithmetic reference recomputation of the recurrence, written
# element by element with no numpy linear algebra.

def _sig(x):
    return 1.0 / (1.0 + math.exp(-x)) if x >= 0 else math.exp(x) / (1.0 + math.exp(x))


def scalar_gru_forward(params, zs):
    H = len(params["update_b"])
    D = len(zs[0])
    Wu = params["update_w"].tolist()
    Wr = params["reset_w"].tolist()
    Wc = params["cand_w"].tolist()
    bu = params["update_b"].tolist()
    br = params["reset_b"].tolist()
    bc = params["cand_b"].tolist()
    hw = params["head_w"].tolist()
    hb = params["head_b"].tolist()[0]

    h = [0.0] * H
    out = []
    for z in zs:
        cat = list(z) + h
        u = [_sig(sum(Wu[i][j] * cat[j] for j in range(D + H)) + bu[i]) for i in range(H)]
        r = [_sig(sum(Wr[i][j] * cat[j] for j in range(D + H)) + br[i]) for i in range(H)]
        cat_c = list(z) + [r[i] * h[i] for i in range(H)]
        c = [math.tanh(sum(Wc[i][j] * cat_c[j] for j in range(D + H)) + bc[i]) for i in range(H)]
        h = [u[i] * h[i] + (1.0 - u[i]) * c[i] for i in range(H)]
        out.append(_sig(sum(hw[i] * h[i] for i in range(H)) + hb))
    return out


def test_zero_parameters_give_half():
    model = PilotModel.zeros(input_dim=Z_DIM, hidden_dim=8)
    traj = [np.zeros(Z_DIM), np.ones(Z_DIM)]
    assert model.forward(traj) == [0.5, 0.5]


def test_empty_trajectory():
    model = PilotModel.init_random(seed=0)
    assert model.forward([]) == []


def test_forward_matches_scalar_oracle():
    model = PilotModel.init_random(input_dim=9, hidden_dim=6, seed=42)
    rng = np.random.default_rng(7)
    zs = [rng.standard_normal(9) for _ in range(3)]
    got = model.forward(zs)
    want = scalar_gru_forward(model.params, [z.tolist() for z in zs])
    assert len(got) == 3
    for g, w in zip(got, want):
        assert g == pytest.approx(w, abs=1e-10)
        assert 0.0 < g < 1.0


def test_forward_causality_prefix_invariance():
    model = PilotModel.init_random(input_dim=12, hidden_dim=5, seed=3)
    rng = np.random.default_rng(5)
    zs = [rng.standard_normal(12) for _ in range(7)]
    full = model.forward(zs)
    prefix = model.forward(zs[:4])
    assert np.allclose(full[:4], prefix, atol=1e-15)


def test_forward_accepts_feature_vectors():
    model = PilotModel.init_random(seed=0)
    fv = from_parts(np.zeros(UNC_DIM), np.zeros(SEM_DIM))
    out = model.forward([fv, fv])
    assert len(out) == 2


def test_dimension_mismatch():
    model = PilotModel.init_random(input_dim=10, hidden_dim=4, seed=0)
    with pytest.raises(DimensionMismatch):
        model.forward([np.zeros(11)])


def test_difficulty_complement():
    assert difficulty(0.5) == 0.5
    assert difficulty(1.0) == 0.0
    assert difficulty(0.2) == pytest.approx(0.8)


def test_bce_trivials():
    assert bce_loss(1.0 - BCE_EPS, 1.0) == pytest.approx(0.0, abs=1e-6)
    assert bce_loss(0.5, 0.5) == pytest.approx(math.log(2), abs=1e-12)
    assert bce_loss(0.5, 1.0) == pytest.approx(math.log(2), abs=1e-12)
    assert bce_loss(0.0, 0.0) == pytest.approx(0.0, abs=1e-6)  # clamp keeps it finite


def test_bce_convex_in_logit_around_target():
    # for fixed target, loss(sigmoid(l)) has nonnegative curvature in l
    target = 0.3
    ls = np.linspace(-4, 4, 41)
    vals = [bce_loss(float(1 / (1 + math.exp(-l))), target) for l in ls]
    second = np.diff(vals, 2)
    assert np.all(second >= -1e-9)


def test_parameter_count_formula():
    for h, d in ((4, 12), (96, Z_DIM)):
        model = PilotModel.init_random(input_dim=d, hidden_dim=h, seed=0)
        assert model.parameter_count() == 3 * h * (d + h + 1) + h + 1
    assert PilotModel.init_random(seed=0).parameter_count() == 141793


def _mk_samples(n, input_dim, seed, min_len=3, max_len=6):
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n):
        T = int(rng.integers(min_len, max_len + 1))
        traj = [rng.standard_normal(input_dim) for _ in range(T)]
        targets = rng.uniform(0.05, 0.95, size=T).tolist()
        samples.append(TrainSample(
            trajectory=[_raw_fv(z) for z in traj], targets=targets))
    return samples


class _RawWrapper:
    """Duck-typed stand-in so TrainSample can carry raw vectors in tests."""

    def __init__(self, z):
        self.z = np.asarray(z, dtype=np.float64)


def _raw_fv(z):
    return _RawWrapper(z)


def test_train_zero_epochs_is_identity():
    model = PilotModel.init_random(input_dim=8, hidden_dim=4, seed=1)
    before = {k: v.copy() for k, v in model.params.items()}
    trained, history = train(model, _mk_samples(4, 8, 0),
                             TrainConfig(epochs=0))
    assert history == []
    for k in before:
        assert np.array_equal(trained.params[k], before[k])
        assert np.array_equal(model.params[k], before[k])  # input untouched


def test_train_zero_lr_keeps_parameters():
    model = PilotModel.init_random(input_dim=8, hidden_dim=4, seed=1)
    trained, history = train(model, _mk_samples(4, 8, 0),
                             TrainConfig(learning_rate=0.0, epochs=3))
    assert len(history) == 3
    assert history[0] == pytest.approx(history[-1], rel=1e-12)
    for k, v in model.params.items():
        assert np.array_equal(trained.params[k], v)


def test_train_rejects_empty():
    model = PilotModel.init_random(input_dim=8, hidden_dim=4, seed=1)
    with pytest.raises(EmptyDataset):
        train(model, [], TrainConfig())


def test_train_deterministic_given_seed():
    data = _mk_samples(6, 8, 3)
    cfg = TrainConfig(epochs=4, batch_size=2, seed=9)
    m1, h1 = train(PilotModel.init_random(8, 4, seed=2), data, cfg)
    m2, h2 = train(PilotModel.init_random(8, 4, seed=2), data, cfg)
    assert h1 == h2
    for k in m1.params:
        assert np.array_equal(m1.params[k], m2.params[k])


def test_train_reduces_loss():
    data = _mk_samples(12, 8, 3)
    model = PilotModel.init_random(input_dim=8, hidden_dim=6, seed=2)
    _, history = train(model, data, TrainConfig(epochs=30, batch_size=4))
    assert history[-1] < history[0]


def numerical_gradients(params, Z, targets, mask, h=1e-5):
    grads = {}
    for key, arr in params.items():
        g = np.zeros_like(arr)
        flat_arr = arr.ravel()
        flat_g = g.ravel()
        for i in range(flat_arr.size):
            orig = flat_arr[i]
            flat_arr[i] = orig + h
            up, _ = loss_and_grads(params, Z, targets, mask)
            flat_arr[i] = orig - h
            down, _ = loss_and_grads(params, Z, targets, mask)
            flat_arr[i] = orig
            flat_g[i] = (up - down) / (2 * h)
        grads[key] = g
    return grads


def relative_gradient_error(analytic, numeric):
    worst = 0.0
    for key in analytic:
        a = analytic[key].ravel()
        n = numeric[key].ravel()
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def test_bptt_gradients_match_finite_differences():
    rng = np.random.default_rng(11)
    for draw in range(5):
        model = PilotModel.init_random(input_dim=7, hidden_dim=4,
                                       seed=100 + draw)
        B, T = 2, 4
        Z = rng.standard_normal((B, T, 7))
        targets = rng.uniform(0.1, 0.9, size=(B, T))
        mask = np.ones((B, T))
        mask[1, 3] = 0.0   # exercise padding
        _, analytic = loss_and_grads(model.params, Z, targets, mask)
        numeric = numerical_gradients(model.params, Z, targets, mask)
        assert relative_gradient_error(analytic, numeric) < 1e-4


def test_teacher_score_fixed_point():
    assert teacher_score(0.0, 0.0) == pytest.approx(0.5, abs=1e-12)


def test_synth_teacher_deterministic_and_bounded():
    rng = np.random.default_rng(0)
    traj = [rng.standard_normal(Z_DIM) for _ in range(50)]
    a = synth_teacher(traj, seed=5)
    b = synth_teacher(traj, seed=5)
    c = synth_teacher(traj, seed=6)
    assert a == b
    assert a != c
    assert all(0.0 < v < 1.0 for v in a)


def test_synth_dataset_targets_strictly_inside_unit_interval():
    samples = make_synth_dataset(40, seed=1, min_len=8, max_len=16)
    values = [v for s in samples for v in s.targets]
    assert len(values) >= 320
    assert all(0.0 < v < 1.0 for v in values)
    # deterministic regeneration
    again = make_synth_dataset(40, seed=1, min_len=8, max_len=16)
    assert [s.targets for s in samples] == [s.targets for s in again]


def test_distillation_smoke():
    # small-scale version of the fidelity gate: the full 500-trajectory
    # run lives in the acceptance suite
    data = make_synth_dataset(120, seed=7, min_len=6, max_len=12)
    fit, hold = data[:100], data[100:]
    model = PilotModel.init_random(hidden_dim=32, seed=0)
    trained, _ = train(model, fit, TrainConfig(epochs=30, batch_size=32, seed=0))
    preds, targets = [], []
    for s in hold:
        preds.extend(trained.forward(s.trajectory))
        targets.extend(s.targets)
    r = np.corrcoef(preds, targets)[0, 1]
    assert r > 0.8


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = PilotModel.init_random(input_dim=13, hidden_dim=5, seed=8)
    path = tmp_path / "ckpt.json"
    save_checkpoint(model, path, seed=8, loss_history=[0.7, 0.5])
    loaded = load_checkpoint(path)
    assert loaded.input_dim == 13
    assert loaded.hidden_dim == 5
    for k in model.params:
        assert np.array_equal(loaded.params[k], model.params[k])
    doc = json.loads(path.read_text())
    assert doc["meta"]["seed"] == 8
    assert doc["meta"]["loss_history"] == [0.7, 0.5]
    assert set(doc["params"]) == {"update", "reset", "candidate", "head"}


def test_checkpoint_version_rejected():
    model = PilotModel.init_random(input_dim=6, hidden_dim=3, seed=0)
    doc = save(model)
    doc["format_version"] = 2
    with pytest.raises(UnsupportedVersion):
        load(doc)


def test_checkpoint_truncated_file(tmp_path):
    model = PilotModel.init_random(input_dim=6, hidden_dim=3, seed=0)
    path = tmp_path / "ckpt.json"
    save_checkpoint(model, path)
    text = path.read_text()
    path.write_text(text[:len(text) // 2])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)


def test_checkpoint_wrong_shapes():
    model = PilotModel.init_random(input_dim=6, hidden_dim=3, seed=0)
    doc = save(model)
    doc["params"]["head"]["weight"] = [1.0, 2.0]
    with pytest.raises(CorruptCheckpoint):
        load(doc)


def test_train_sample_validation():
    with pytest.raises(ValueError):
        TrainSample(trajectory=[_raw_fv(np.zeros(4))], targets=[0.2, 0.3])
    with pytest.raises(ValueError):
        TrainSample(trajectory=[_raw_fv(np.zeros(4))], targets=[1.5])


def test_stub_pilots():
    stub = ConstantDifficultyPilot(0.3)
    session = stub.new_session()
    assert session.step(np.zeros(3)) == pytest.approx(0.7)
    assert session.step(np.ones(3)) == pytest.approx(0.7)

    scripted = ScriptedDifficultyPilot([0.1, 0.9])
    s = scripted.new_session()
    assert 1.0 - s.step(None) == pytest.approx(0.1)
    assert 1.0 - s.step(None) == pytest.approx(0.9)
    assert 1.0 - s.step(None) == pytest.approx(0.9)  # last value repeats
