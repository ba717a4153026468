import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pairnn import autodiff as ad
from pairnn.catalog import ProductRecord, UserProfile
from pairnn.corpus import Word2VecConfig, train_word2vec
from pairnn.towers import (
    DataError,
    ModelCheckpoint,
    PairNN,
    TowerConfig,
    embed_product,
    embed_user,
    product_tokens,
    score,
)

DOCS = ["red bike fast", "blue sofa soft", "red sofa", "bike lock", "soft blue couch"]


@pytest.fixture(scope="module")
def vectors():
    return train_word2vec(DOCS, Word2VecConfig(dim=8, epochs=2, seed=0))


def make_model(vectors, modality="both", **kw):
    cfg = TowerConfig(modality=modality, image_dim=4, demo_dim=3, conv_channels=6, **kw)
    return PairNN.from_vectors(cfg, vectors)


def user(uid="u1", keywords=("red", "bike"), demo=(0.1, 0.5, 0.9)):
    return UserProfile(uid, list(keywords), list(demo), (0.0, 0.0), 10.0)


def product(pid="p1", title="red bike", description="fast", image=(0.3, -0.2, 1.0, 0.0)):
    return ProductRecord(pid, title, description, None if image is None else list(image), (0.0, 0.0), 0.0)


def test_outputs_are_unit_norm_50d(vectors):
    m = make_model(vectors)
    assert embed_user(user(), m).shape == (50,)
    assert np.linalg.norm(embed_user(user(), m)) == pytest.approx(1, abs=1e-6)
    assert np.linalg.norm(embed_product(product(), m)) == pytest.approx(1, abs=1e-6)


def test_hidden_sizes_are_100_100(vectors):
    m = make_model(vectors)
    shapes = [m.params[f"user.mlp.{k}.weight"].shape for k in range(3)]
    assert shapes == [(100, 8 + 3), (100, 100), (50, 100)]
    assert m.params["product.mlp.0.weight"].shape == (100, 2 * 6 + 4)


def test_identical_profiles_identical_embeddings(vectors):
    m = make_model(vectors)
    np.testing.assert_array_equal(embed_user(user("a"), m), embed_user(user("b"), m))


def test_keyword_free_user_is_finite_unit(vectors):
    m = make_model(vectors)
    e = embed_user(user(keywords=()), m)
    assert np.isfinite(e).all() and np.linalg.norm(e) == pytest.approx(1, abs=1e-6)
    e = embed_user(user(keywords=("zzz-unknown",)), m)
    assert np.linalg.norm(e) == pytest.approx(1, abs=1e-6)


def test_demographic_mismatch_is_shape_error(vectors):
    with pytest.raises(ad.ShapeError, match="demographics"):
        embed_user(user(demo=(0.1,)), make_model(vectors))


def test_missing_image_names_product(vectors):
    with pytest.raises(DataError, match="p9"):
        embed_product(product("p9", image=None), make_model(vectors))
    # text-only does not need image features
    e = embed_product(product("p9", image=None), make_model(vectors, "text"))
    assert np.linalg.norm(e) == pytest.approx(1, abs=1e-6)


def test_empty_text_under_text_modality(vectors):
    e = embed_product(product(title="", description=""), make_model(vectors, "text"))
    assert np.isfinite(e).all() and np.linalg.norm(e) == pytest.approx(1, abs=1e-6)


def test_text_only_ignores_image_and_image_only_ignores_text(vectors):
    m = make_model(vectors, "text")
    a = embed_product(product(image=(1, 2, 3, 4)), m)
    b = embed_product(product(image=(-9, 0, 5, 1)), m)
    np.testing.assert_array_equal(a, b)
    m = make_model(vectors, "image")
    assert "product.embedding" not in m.params
    np.testing.assert_array_equal(embed_product(product(title="red"), m), embed_product(product(title="sofa soft"), m))


def test_both_uses_both_branches(vectors):
    m = make_model(vectors, "both")
    base = embed_product(product(), m)
    assert not np.array_equal(base, embed_product(product(image=(5, 5, 5, 5)), m))
    assert not np.array_equal(base, embed_product(product(title="blue sofa soft couch"), m))


def test_truncation_title_first():
    long = product(title=" ".join(["a"] * 100), description=" ".join(["b"] * 100))
    toks = product_tokens(long, 128)
    assert len(toks) == 128 and toks[:100] == ["a"] * 100 and toks[100:] == ["b"] * 28


def test_score_examples():
    e = np.array([0.6, 0.8])
    assert score(e, e) == pytest.approx(1.0)
    assert score([1, 0], [0, 1]) == 0.0


@settings(max_examples=25, deadline=None)
@given(st.lists(st.sampled_from(["red", "bike", "sofa", "soft", "x"]), max_size=5), st.sampled_from(DOCS))
def test_score_equals_raw_cosine_and_symmetric(vectors, keywords, title):
    m = make_model(vectors, init_scale=0.3)
    u, p = user(keywords=keywords), product(title=title)
    ui, pi = m.encode_users([u]), m.encode_products([p])
    raw_u, raw_p = m.user_raw(ui).data[0].astype(np.float64), m.product_raw(pi).data[0].astype(np.float64)
    if np.linalg.norm(raw_u) < 1e-6 or np.linalg.norm(raw_p) < 1e-6:
        return
    cos = raw_u @ raw_p / (np.linalg.norm(raw_u) * np.linalg.norm(raw_p))
    eu, ep = embed_user(u, m), embed_product(p, m)
    assert score(eu, ep) == pytest.approx(cos, abs=1e-5)
    assert score(eu, ep) == score(ep, eu)
    assert -1 <= score(eu, ep) <= 1


@pytest.mark.parametrize("side", ["user", "product"])
def test_full_tower_gradient_check(vectors, side):
    m = make_model(vectors, "both", init_scale=0.25)
    ui, pi = m.encode_users([user()]), m.encode_products([product(title="red bike fast soft", description="blue")])
    target = ad.Tensor(np.linspace(-1, 1, 50))
    params = [p for name, p in m.params.items() if name.startswith(side)]
    if side == "user":
        fn = lambda: ad.dot(m.user_forward(ui), ad.Tensor(target.data[None, :]))
    else:
        fn = lambda: ad.dot(m.product_forward(pi), ad.Tensor(target.data[None, :]))
    report = ad.grad_check_report(lambda: ad.sum(fn()), params, max_coords=300, seed=1)
    assert report.max_rel_error < 1e-4, report


def test_init_is_seeded_and_in_range(vectors):
    a, b = make_model(vectors, seed=3), make_model(vectors, seed=3)
    c = make_model(vectors, seed=4)
    w = a.params["user.mlp.0.weight"].data
    assert np.array_equal(w, b.params["user.mlp.0.weight"].data)
    assert not np.array_equal(w, c.params["user.mlp.0.weight"].data)
    assert np.abs(w).max() <= 0.05 and not a.params["user.mlp.0.bias"].data.any()
    np.testing.assert_array_equal(a.params["user.embedding"].data, vectors.matrix)


def test_checkpoint_round_trip_byte_identical(tmp_path, vectors):
    m = make_model(vectors)
    ck = m.to_checkpoint({"epochs": 3})
    ck.save(tmp_path / "m.ckpt")
    loaded = ModelCheckpoint.load(tmp_path / "m.ckpt")
    assert loaded.to_bytes() == (tmp_path / "m.ckpt").read_bytes()
    assert loaded.modality == {"text": True, "image": True}
    again = loaded.to_model(vectors.vocab)
    np.testing.assert_array_equal(embed_user(user(), again), embed_user(user(), m))
    assert again.to_checkpoint({"epochs": 3}).payload() == ck.payload()


def test_checkpoint_modality_decides_branches(vectors):
    ck = make_model(vectors, "image").to_checkpoint()
    assert ck.modality == {"text": False, "image": True}
    assert not any(k.startswith("product.conv") for k in ck.arrays)


def test_checkpoint_rejects_wrong_vocabulary_and_corruption(vectors):
    ck = make_model(vectors).to_checkpoint()
    other = train_word2vec(["completely different words"], Word2VecConfig(dim=8, epochs=1))
    with pytest.raises(ValueError, match="vocabulary"):
        ck.to_model(other.vocab)
    with pytest.raises(ValueError):
        ModelCheckpoint.from_bytes(ck.to_bytes()[:-4])
