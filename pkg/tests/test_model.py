import numpy as np
import pytest

from f3lab import autodiff as ad
from f3lab import data as D
from f3lab.autodiff import Tape, Tensor, grad_check
from f3lab.model import (ConstantObjective, LvlmObjective, ModelConfig, ToyVLM, TrainingDiverged,
                         accuracy_of, cross_entropy, input_grad, load_checkpoint,
                         normalize_over_tokens, save_checkpoint, train)
from f3lab.purify import AttentionObjective

SMALL = ModelConfig(image_size=8, layers=2, seed=3)


@pytest.fixture(scope="module")
def model():
    return ToyVLM(ModelConfig(seed=5))


@pytest.fixture(scope="module")
def batch():
    ds = D.generate(8, 11)
    return ds.images, ds.questions, ds.labels


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(image_size=10, patch_size=4)
    with pytest.raises(ValueError):
        ModelConfig(width=30, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(layers=0)
    assert ModelConfig().num_visual == 16


def test_encode_image_zero_and_locality(model):
    zero = model.encode_image(np.zeros((16, 16, 3))).data[0]
    assert np.array_equal(zero, np.broadcast_to(model.params["patch_b"].data, zero.shape))
    img = np.zeros((16, 16, 3))
    img[4:8, 8:12] = 0.7          # patch row 1, column 2 -> token 6
    tok = model.encode_image(img).data[0]
    differs = np.any(tok != zero, axis=1)
    assert differs.sum() == 1 and differs[6]


def test_encode_image_deterministic_and_checks_shape(model, batch):
    a = model.encode_image(batch[0]).data
    b = ToyVLM(ModelConfig(seed=5)).encode_image(batch[0]).data
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ValueError):
        model.encode_image(np.zeros((8, 8, 3)))


def test_attention_shape_and_row_normalization(model, batch):
    res = model.forward(*batch[:2])
    cfg = model.config
    assert res.attention.shape == (8, cfg.layers, cfg.heads, cfg.num_visual)
    single = model.forward(batch[0][0], batch[1][0]).attention.data[0]
    assert single.shape == (cfg.layers, cfg.heads, cfg.num_visual)
    for row in res.full_rows:
        assert row.shape[-1] == cfg.num_visual + D.QUESTION_LEN + 1
        assert np.all(np.abs(row.data.sum(axis=-1) - 1) <= 1e-12)
    a = res.attention.data
    assert np.all(a >= 0) and np.all(a <= 1)
    assert np.all(a.sum(axis=-1) <= 1 + 1e-12)
    norm = normalize_over_tokens(a)
    assert np.all(np.abs(norm.sum(axis=-1) - 1) <= 1e-12)


def test_attention_equals_independently_recomputed_rows(model, batch):
    """Recompute the slot's softmax rows with plain numpy from the same weights."""
    P = {k: v.data for k, v in model.params.items()}
    cfg = model.config
    x_img, q = batch[0][:2], batch[1][:2]
    got = model.attention(x_img, q)

    def ln(x):
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5)

    for b in range(2):
        g, p = cfg.grid, cfg.patch_size
        patches = [x_img[b, i * p:(i + 1) * p, j * p:(j + 1) * p].reshape(-1)
                   for i in range(g) for j in range(g)]
        vis = np.array(patches) @ P["patch_w"] + P["patch_b"] + P["pos_visual"]
        txt = P["token_emb"][q[b]] + P["pos_text"][:len(q[b])]
        x = np.vstack([vis, txt, P["slot"][None]])
        for layer in range(cfg.layers):
            xn = ln(x)
            qm, km, vm = (xn @ P[f"l{layer}.{w}"] for w in ("wq", "wk", "wv"))
            dh = cfg.head_dim
            outs = []
            for h in range(cfg.heads):
                s = qm[:, h * dh:(h + 1) * dh] @ km[:, h * dh:(h + 1) * dh].T / np.sqrt(dh)
                e = np.exp(s - s.max(-1, keepdims=True))
                pr = e / e.sum(-1, keepdims=True)
                assert np.allclose(pr[-1, :cfg.num_visual], got[b, layer, h], rtol=0, atol=1e-13)
                outs.append(pr @ vm[:, h * dh:(h + 1) * dh])
            x = x + np.hstack(outs) @ P[f"l{layer}.wo"]
            hid = np.tanh(ln(x) @ P[f"l{layer}.w1"] + P[f"l{layer}.b1"])
            x = x + hid @ P[f"l{layer}.w2"] + P[f"l{layer}.b2"]


def test_forward_is_pure(model, batch):
    a = model.attention(*batch[:2])
    b = model.attention(*batch[:2])
    assert a.tobytes() == b.tobytes()


def test_attention_is_question_conditioned(model):
    ds = D.generate(50, 21)
    rng = np.random.default_rng(0)
    differs = 0
    for i in range(50):
        q1 = ds.questions[i]
        q2 = ds.questions[(i + 1 + rng.integers(49)) % 50]
        while np.array_equal(q1, q2):
            q2 = ds.questions[rng.integers(50)]
        a1 = model.attention(ds.images[i], q1)
        a2 = model.attention(ds.images[i], q2)
        differs += not np.array_equal(a1, a2)
    assert differs >= 48


def test_cross_entropy_examples():
    uniform = cross_entropy(Tensor(np.zeros((1, 8))), [3], 8)
    assert abs(uniform.item() - np.log(8)) < 1e-12
    peaked = np.full((1, 8), -50.0)
    peaked[0, 2] = 50.0
    assert cross_entropy(Tensor(peaked), [2], 8).item() < 1e-12
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((1, 8))), [8], 8)


def test_lvlm_loss_gradient_matches_finite_differences():
    m = ToyVLM(SMALL)
    ds = D.generate(1, 4, image_size=8)
    err = grad_check(lambda x: m.lvlm_loss(x, ds.questions, ds.labels), ds.images)
    assert err <= 1e-4


def test_attention_distance_gradient_matches_finite_differences():
    m = ToyVLM(ModelConfig(image_size=8, seed=9))
    ds = D.generate(1, 6, image_size=8)
    target = m.attention(np.clip(ds.images + 0.05, 0, 1), ds.questions)
    for kind in ("mse", "kl"):
        obj = AttentionObjective(target, kind)
        err = grad_check(lambda x: obj(m, x, ds.questions), ds.images)
        assert err <= 1e-4, kind


def test_input_grad_paths_agree(model, batch):
    x, q, y = batch
    g = input_grad(model, x, q, LvlmObjective(y))
    with Tape() as tape:
        xt = Tensor(x, requires_grad=True)
        loss = model.lvlm_loss(xt, q, y)
    ad.backward(loss)
    assert g.tobytes() == xt.grad.tobytes()
    assert g.shape == x.shape
    assert not np.any(input_grad(model, x, q, ConstantObjective(2.0)))


def test_zero_epochs_leaves_params_and_is_near_chance():
    ds = D.generate(400, 2)
    before = ToyVLM(ModelConfig(seed=1))
    res = train(ds, 0, 0.1, seed=0, config=ModelConfig(seed=1))
    assert res.model == before
    assert abs(res.train_accuracy - 1 / 8) < 0.2


def test_training_is_deterministic_and_learns():
    ds = D.generate(256, 3)
    cfg = ModelConfig(layers=1, seed=2)
    a = train(ds, 3, 0.03, seed=4, config=cfg, noise=16 / 255)
    b = train(ds, 3, 0.03, seed=4, config=cfg, noise=16 / 255)
    assert a.model == b.model
    assert a.history == b.history
    assert a.history[-1] < a.history[0]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts_with_diagnostic():
    ds = D.generate(64, 3)
    with pytest.raises(TrainingDiverged, match="epoch"):
        train(ds, 5, 1e300, seed=0, config=ModelConfig(layers=1))


def test_empty_accuracy_is_an_error(model):
    with pytest.raises(ValueError):
        accuracy_of(model, np.zeros((0, 16, 16, 3)), np.zeros((0, 6), int), np.zeros(0, int))


def test_checkpoint_round_trip(tmp_path, model):
    path = tmp_path / "m.f3ck"
    save_checkpoint(model, path)
    assert load_checkpoint(path) == model
    path2 = tmp_path / "m2.f3ck"
    save_checkpoint(load_checkpoint(path), path2)
    assert path.read_bytes() == path2.read_bytes()
