import numpy as np
import pytest

from geoseg.evaluation import thin_thick_split
from geoseg.model import ModelConfig, forward, init_params
from geoseg.objective import RegWeights, loss_mse, loss_noise
from geoseg.trainer import (AdamState, DatasetSplit, Sample, TrainConfig, TrainingDiverged,
                            adam_step, build_priors, crop, generate_synthetic_dataset,
                            load_state, render_synthetic, sample_patch_coords, sample_patches,
                            steps_per_epoch, train, write_log_csv)


@pytest.fixture(scope="module")
def synth():
    return generate_synthetic_dataset(3, size=64, seed=11)


def _cfg(**kw):
    base = dict(model=ModelConfig.tiny(), reg=RegWeights(0.0, 0.0), learning_rate=1e-2,
                batch_size=4, epochs=2, patch_size=24, patches_per_epoch=12, seed=5)
    base.update(kw)
    return TrainConfig(**base)


# -- config -----------------------------------------------------------------

def test_train_config_defaults_and_validation():
    c = TrainConfig()
    assert (c.learning_rate, c.batch_size, c.epochs, c.patch_size) == (5e-4, 64, 60, 128)
    assert (c.adam_beta1, c.adam_beta2, c.adam_eps) == (0.9, 0.999, 1e-8)
    assert c.patches_per_epoch == 7000
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(patch_size=9)  # below the 11 x 11 filters of scale 5


# -- sampling ---------------------------------------------------------------

def test_patch_sampling_is_deterministic_and_in_fov(synth):
    fov = np.zeros((64, 64), bool)
    fov[20:50, 10:40] = True
    s = synth.samples[0]
    split = DatasetSplit([Sample(s.image, s.label, fov, "a")])
    a = sample_patch_coords(split, 16, 50, seed=3)
    assert a == sample_patch_coords(split, 16, 50, seed=3)
    assert a != sample_patch_coords(split, 16, 50, seed=4)
    for _, r, c in a:
        assert fov[r + 8, c + 8]
    patches = sample_patches(split, 16, 5, seed=3)
    for (x, y), (_, r, c) in zip(patches, a):
        np.testing.assert_array_equal(x, s.image[r:r + 16, c:c + 16])
        np.testing.assert_array_equal(y, s.label[r:r + 16, c:c + 16])


def test_small_images_skipped_or_rejected(synth, caplog):
    small = Sample(np.zeros((10, 10)), np.zeros((10, 10), bool), np.ones((10, 10), bool), "small")
    split = DatasetSplit([small] + synth.samples[:1])
    coords = sample_patch_coords(split, 32, 5, seed=0)
    assert all(i == 1 for i, _, _ in coords)
    assert "smaller than patch" in caplog.text
    with pytest.raises(ValueError):
        sample_patch_coords(DatasetSplit([small]), 32, 5, seed=0)


def test_vessel_balance_option(synth):
    coords = sample_patch_coords(synth, 24, 20, seed=0, min_vessel_fraction=0.05)
    _, Y = crop(synth, coords, 24)
    assert np.all(Y.mean(axis=(1, 2)) >= 0.05)


# -- adam -------------------------------------------------------------------

def _scalar_params(value):
    p = init_params(ModelConfig.tiny(), 0).map(np.zeros_like)
    p.task.head_bias[:] = value
    return p


def test_adam_first_step():
    p = _scalar_params(0.0)
    g = p.map(np.zeros_like)
    g.task.head_bias[:] = 1.0
    new, state = adam_step(p, g, AdamState.zeros_like(p), 1, lr=5e-4)
    assert abs(new.task.head_bias[0] - (-5e-4 / (1 + 1e-8))) < 1e-18
    assert abs(new.task.head_bias[0] + 4.99999995e-4) < 1e-15
    assert state.t == 1


def test_adam_against_scalar_reference(rng):
    p = _scalar_params(0.3)
    state = AdamState.zeros_like(p)
    m = v = 0.0
    x = 0.3
    for t in range(1, 6):
        gval = float(rng.standard_normal())
        g = p.map(np.zeros_like)
        g.task.head_bias[:] = gval
        p, state = adam_step(p, g, state, t, lr=1e-2)
        m = 0.9 * m + 0.1 * gval
        v = 0.999 * v + 0.001 * gval ** 2
        x -= 1e-2 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert abs(p.task.head_bias[0] - x) < 1e-15


def test_adam_zero_grad_and_symmetry(rng):
    p = init_params(ModelConfig.tiny(), 0)
    zero = p.map(np.zeros_like)
    state = AdamState.zeros_like(p)
    q = p
    for t in range(1, 4):
        q, state = adam_step(q, zero, state, t)
    for a, b in zip(p.tensors(), q.tensors()):
        np.testing.assert_array_equal(a, b)
    g = p.map(lambda a: rng.standard_normal(a.shape))
    up, _ = adam_step(p, g, AdamState.zeros_like(p), 1)
    down, _ = adam_step(p, g.map(np.negative), AdamState.zeros_like(p), 1)
    for a, u, d in zip(p.tensors(), up.tensors(), down.tensors()):
        np.testing.assert_allclose(u - a, -(d - a), atol=1e-18)


def test_adam_rejects_nonfinite():
    p = init_params(ModelConfig.tiny(), 0)
    g = p.map(np.zeros_like)
    g.task.head[0, 0, 0, 0] = np.nan
    state = AdamState.zeros_like(p)
    with pytest.raises(FloatingPointError):
        adam_step(p, g, state, 1)
    assert state.t == 0 and not any(m.any() for m in state.m)
    with pytest.raises(ValueError):
        adam_step(p, p.map(np.zeros_like), state, 0)


# -- training ---------------------------------------------------------------

def test_epochs_zero_returns_init(synth):
    cfg = _cfg(epochs=0)
    params, rows = train(synth, None, cfg)
    assert rows == []
    for a, b in zip(params.tensors(), init_params(cfg.model, cfg.seed).tensors()):
        np.testing.assert_array_equal(a, b)


def test_training_is_deterministic_and_logs(synth, tmp_path):
    cfg = _cfg()
    a, rows_a = train(synth, None, cfg)
    b, rows_b = train(synth, None, cfg)
    for x, y in zip(a.tensors(), b.tensors()):
        np.testing.assert_array_equal(x, y)
    assert rows_a == rows_b
    assert len(rows_a) == cfg.epochs * steps_per_epoch(cfg) == 6
    assert [r["step"] for r in rows_a] == list(range(1, 7))
    write_log_csv(rows_a, tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "step,epoch,mse,l_or,l_no,total" and len(lines) == 7


def test_resume_matches_uninterrupted(synth, tmp_path):
    cfg = _cfg(checkpoint_every=2, epochs=3)
    full, rows = train(synth, None, cfg, checkpoint_dir=tmp_path)
    states = sorted(tmp_path.glob("step_*.state.npz"))
    assert [s.name for s in states] == [f"step_{k:07d}.state.npz" for k in (2, 4, 6, 8)]
    # step 4 sits mid-epoch (3 steps per epoch)
    resumed, rest = train(synth, None, cfg, resume=states[1])
    for x, y in zip(full.tensors(), resumed.tensors()):
        np.testing.assert_array_equal(x, y)
    assert rest == rows[4:]
    params, state, step, epoch = load_state(states[0])
    assert (step, epoch, state.t) == (2, 0, 2)


def test_training_reduces_mse():
    split = generate_synthetic_dataset(4, size=64, seed=2)
    cfg = _cfg(model=ModelConfig.tiny(n_filters=4, width=4), epochs=6, patches_per_epoch=16,
               patch_size=32, learning_rate=1e-2)
    before, _ = train(split, None, TrainConfig(**{**cfg.__dict__, "epochs": 0}))
    after, _ = train(split, None, cfg)
    X, Y = crop(split, sample_patch_coords(split, 32, 16, seed=99), 32)
    assert loss_mse(forward(X, after), Y) < loss_mse(forward(X, before), Y)


def test_regularizer_reduces_noise_energy():
    split = generate_synthetic_dataset(4, size=64, seed=2)
    cfg = _cfg(model=ModelConfig.tiny(n_filters=2), epochs=2, patch_size=32,
               noise_patch_size=32, noise_candidates=8, noise_keep=4)
    priors = build_priors(cfg.model, split, 16, 8, 4, stride=4)
    assert len(priors.noise[0].patches) == 4
    plain, _ = train(split, priors, cfg)
    strong, _ = train(split, priors, TrainConfig(**{**cfg.__dict__, "reg": RegWeights(0.0, 1e-1)}))
    assert loss_noise(strong.rep, priors.noise) < loss_noise(plain.rep, priors.noise)


def test_divergence_is_reported(synth):
    cfg = _cfg(learning_rate=1e200, epochs=3)
    with pytest.raises((TrainingDiverged, FloatingPointError, ValueError)):
        with np.errstate(all="ignore"):
            train(synth, None, cfg)


# -- synthetic data ---------------------------------------------------------

def test_synthetic_generator_properties():
    a = generate_synthetic_dataset(3, size=96, seed=4)
    b = generate_synthetic_dataset(3, size=96, seed=4)
    for s, t in zip(a.samples, b.samples):
        np.testing.assert_array_equal(s.image, t.image)
        np.testing.assert_array_equal(s.label, t.label)
        assert s.fov.all()
        assert s.image.min() >= 0 and s.image.max() <= 1
    with pytest.raises(ValueError):
        generate_synthetic_dataset(1, size=32)


def test_labels_mark_raised_intensity():
    rng = np.random.default_rng(0)
    image, label, width_map, clean, background = render_synthetic(96, rng)
    assert label.any()
    assert np.all(clean[label] > background[label])
    np.testing.assert_array_equal(clean[~label], background[~label])
    np.testing.assert_array_equal(label, width_map > 0)


def test_synthetic_widths_cover_thin_and_thick():
    split = generate_synthetic_dataset(12, size=128, seed=0)
    widths = np.concatenate([s.width_map[s.label] for s in split.samples])
    assert set(np.unique(widths)) == {1, 2, 3, 4, 5}
    # the evaluator's measured widths also see both classes
    thin = sum(thin_thick_split(s.label)[0].sum() for s in split.samples)
    thick = sum(thin_thick_split(s.label)[1].sum() for s in split.samples)
    assert thin > 0 and thick > 0
