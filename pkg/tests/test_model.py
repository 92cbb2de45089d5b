import numpy as np
import pytest
from sklearn.base import clone

from fawa.model import CTCRecognizer, TrainingDidNotConverge, n_frames, pad_batch
from fawa.textgen import GlyphFont, render_text
from oracles import central_difference


def tiny(**kw):
    base = dict(conv1_channels=3, conv2_channels=4, hidden=5, seed=0)
    base.update(kw)
    return CTCRecognizer(**base)


@pytest.fixture(scope="module")
def random_model():
    m = tiny()
    m.set_weights(m.init_params(np.random.default_rng(0)))
    return m


def test_frame_count():
    assert [n_frames(w) for w in (1, 4, 5, 8, 9)] == [1, 1, 2, 2, 3]
    m = tiny()
    m.set_weights(m.init_params())
    assert m.forward(np.ones((32, 21))).shape == (6, 28)


def test_pad_batch_uses_white():
    out = pad_batch([np.zeros((32, 3)), np.zeros((32, 5))])
    assert out.shape == (2, 32, 5)
    assert np.all(out[0, :, 3:] == 1.0)


def test_parameter_layout(random_model):
    names = random_model.param_names()
    assert "lstmr_wx" in names
    assert random_model.params_["out_w"].shape == (10, 28)
    uni = tiny(bidirectional=False)
    assert "lstmr_wx" not in uni.param_names()
    assert uni.init_params()["out_w"].shape == (5, 28)


def test_input_gradient_matches_finite_differences(random_model):
    rng = np.random.default_rng(1)
    x = rng.uniform(0, 1, (32, 24))
    target = random_model.encode("ab")
    g = random_model.input_saliency(x, target)

    def loss(img):
        per, _, _ = random_model.loss_and_input_grad(img[None], [target])
        return per[0]

    for _ in range(15):
        idx = (int(rng.integers(32)), int(rng.integers(24)))
        num = central_difference(loss, x, idx)
        assert abs(g[idx] - num) <= 1e-3 * max(abs(num), 1e-4)


def test_batch_items_are_independent(random_model):
    rng = np.random.default_rng(2)
    a, b = rng.uniform(0, 1, (2, 32, 16))
    per, grads, _ = random_model.loss_and_input_grad(np.stack([a, b]), [[0], [1, 2]])
    per_a, grad_a, _ = random_model.loss_and_input_grad(a[None], [[0]])
    assert per[0] == pytest.approx(per_a[0])
    np.testing.assert_allclose(grads[0], grad_a[0])


def test_predict_handles_mixed_widths(random_model):
    imgs = [np.ones((32, 12)), np.ones((32, 20)), np.zeros((32, 12))]
    out = random_model.predict(imgs)
    assert out == [random_model.transcribe(im) for im in imgs]


def test_check_image_rejects_bad_input(random_model):
    with pytest.raises(ValueError):
        random_model.predict([np.ones((16, 10))])
    with pytest.raises(ValueError):
        random_model.predict([np.full((32, 10), 2.0)])


def test_fit_small_corpus_converges():
    words = ["ab", "ba", "cab"]
    X = [render_text(w, GlyphFont("regular")) for w in words]
    # repeats give the optimizer several steps per epoch
    m = CTCRecognizer(conv1_channels=8, conv2_channels=16, hidden=16, max_epochs=300, learning_rate=1e-2, seed=0)
    m.fit(X * 8, words * 8)
    assert m.score(X, words) == 1.0
    assert m.train_accuracy_ == 1.0


def test_fit_is_deterministic_and_order_free():
    words = ["ab", "ba"]
    X = [render_text(w) for w in words]
    a = tiny(max_epochs=2).set_weights(tiny().init_params())
    with pytest.raises(TrainingDidNotConverge):
        a.fit(X, words)
    b = tiny(max_epochs=2)
    with pytest.raises(TrainingDidNotConverge):
        b.fit(X[::-1], words[::-1])
    for k in a.params_:
        np.testing.assert_array_equal(a.params_[k], b.params_[k])


def test_non_convergence_reports_accuracy():
    with pytest.raises(TrainingDidNotConverge) as info:
        tiny(max_epochs=1).fit([render_text("abc")], ["abc"])
    assert info.value.epochs == 1
    assert 0.0 <= info.value.accuracy < 1.0


def test_fit_rejects_text_that_cannot_fit():
    with pytest.raises(ValueError):
        tiny().fit([np.ones((32, 4))], ["abcd"])
    with pytest.raises(ValueError):
        tiny().fit([render_text("ab")], ["a!"])


def test_save_load_round_trip(tmp_path, random_model):
    path = tmp_path / "m.npz"
    random_model.save(path)
    loaded = CTCRecognizer.load(path)
    x = np.random.default_rng(3).uniform(0, 1, (32, 30))
    np.testing.assert_array_equal(loaded.forward(x), random_model.forward(x))
    assert loaded.get_params() == random_model.get_params()


def test_load_rejects_foreign_file(tmp_path):
    path = tmp_path / "bad.npz"
    np.savez(path, __meta__=np.frombuffer(b'{"format": "other", "version": 1}', dtype=np.uint8))
    with pytest.raises(ValueError):
        CTCRecognizer.load(path)


def test_sklearn_clone_keeps_hyperparameters():
    m = tiny(tone_jitter=0.1)
    c = clone(m)
    assert c.get_params() == m.get_params()
    assert not hasattr(c, "params_")


def test_jitter_keeps_ink_black():
    m = tiny(tone_jitter=0.3)
    batch = np.stack([np.array([[0.0, 1.0]])] * 50)
    out = m._jitter(batch, np.random.default_rng(0))
    assert np.all(out[:, 0, 0] == 0.0)
    assert out[:, 0, 1].min() >= 0.7 and out[:, 0, 1].max() <= 1.0


def test_padded_batch_matches_unpadded_items(random_model):
    rng = np.random.default_rng(5)
    widths = [13, 21, 30, 17]
    imgs = [rng.uniform(0, 1, (32, w)) for w in widths]
    targets = [[0], [1, 2], [3, 3], [4]]
    batch = pad_batch(imgs)
    logits = random_model.forward_batch(batch, widths)
    per, grads, _ = random_model.loss_and_input_grad(batch, targets, widths)
    for k, (im, w) in enumerate(zip(imgs, widths)):
        alone = random_model.forward(im)
        np.testing.assert_allclose(logits[k, : n_frames(w)], alone, atol=1e-12)
        p1, g1, _ = random_model.loss_and_input_grad(im[None], [targets[k]])
        assert per[k] == pytest.approx(p1[0], abs=1e-12)
        np.testing.assert_allclose(grads[k, :, :w], g1[0], atol=1e-12)
        assert np.all(grads[k, :, w:] == 0.0)
