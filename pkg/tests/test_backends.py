import numpy as np
import pytest
import torch

from makeup_prior.backends import (FACE_LAYOUT, PARSER_CLASSES, LinearEmbedder, RegionMaskSet,
                                   SyntheticParser, ToyEncoder, check_image, collapse_labels,
                                   embed_face, extract_content_features, extract_keys,
                                   make_toy_suite, parse_face, rasterize_layout, resolve_backend)
from makeup_prior.errors import BackendFault, ConfigurationError
from makeup_prior.toyfaces import make_identity, render_face


def _rand_image(size=64, seed=0):
    return torch.rand(3, size, size, generator=torch.Generator().manual_seed(seed))


def test_check_image_rejects_bad_inputs():
    with pytest.raises(ConfigurationError):
        check_image(torch.rand(3, 40, 40))          # not divisible by 16
    with pytest.raises(ConfigurationError):
        check_image(torch.rand(3, 16, 16), factor=8)  # below 32
    with pytest.raises(ConfigurationError):
        check_image(torch.rand(1, 32, 32))
    with pytest.raises(ConfigurationError):
        check_image(torch.full((3, 32, 32), 1.5))
    bad = torch.rand(3, 32, 32)
    bad[0, 0, 0] = float("nan")
    with pytest.raises(ConfigurationError):
        check_image(bad)
    check_image(torch.rand(3, 32, 48))


def test_encoder_zero_image_and_shapes():
    enc = ToyEncoder(0)
    pyr = extract_content_features(enc, torch.zeros(3, 64, 64))
    assert all(torch.isfinite(l).all() for l in pyr.levels)
    # a zero input only sees biases, so the first stage is spatially constant away from the border
    assert [tuple(l.shape) for l in pyr.levels] == [(16, 8, 8), (16, 16, 16)]
    assert pyr.scales == [1 / 8, 1 / 4]


def test_encoder_deterministic():
    enc = ToyEncoder(3)
    img = _rand_image()
    a = extract_content_features(enc, img)
    b = extract_content_features(enc, img)
    for la, lb in zip(a.levels, b.levels):
        assert torch.equal(la, lb)


def test_encoder_declared_shape_mismatch():
    class Liar(ToyEncoder):
        def encode(self, x):
            return [l[:, :3] for l in super().encode(x)]

    with pytest.raises(ConfigurationError):
        extract_content_features(Liar(0), _rand_image())


def test_encoder_nonfinite_is_backend_fault():
    class Broken(ToyEncoder):
        def encode(self, x):
            return [l * float("nan") for l in super().encode(x)]

    with pytest.raises(BackendFault):
        extract_content_features(Broken(0), _rand_image())


def test_embeddings_unit_norm_and_deterministic(suite):
    img = _rand_image(32)
    for e in suite.embedders:
        v = embed_face(e, img)
        assert v.shape == (128,)
        assert abs(float(v.norm()) - 1) < 1e-5
        assert torch.equal(v, embed_face(e, img.clone()))


def test_linear_embedder_closed_form():
    g = torch.Generator().manual_seed(5)
    w = torch.randn(6, 3, generator=g)
    b = torch.randn(6, generator=g)
    emb = LinearEmbedder(w, b)
    c = torch.tensor([0.2, 0.5, 0.7])
    img = c.view(3, 1, 1).expand(3, 32, 32).clone()
    want = w @ c + b
    want = want / want.norm()
    assert torch.allclose(embed_face(emb, img), want, atol=1e-6)


def test_embedder_nonfinite_is_backend_fault():
    emb = LinearEmbedder(torch.ones(4, 3), torch.tensor([float("nan")] * 4))
    with pytest.raises(BackendFault):
        embed_face(emb, _rand_image(32))


def test_toy_embedders_pairwise_distinct(suite):
    img = render_face(make_identity(3), 32)
    embs = [embed_face(e, img) for e in suite.embedders]
    for i in range(4):
        for j in range(i + 1, 4):
            assert float(embs[i] @ embs[j]) < 0.99


def test_toy_suite_seeded_determinism():
    a = make_toy_suite(7, vit_patch=8)
    b = make_toy_suite(7, vit_patch=8)
    img = _rand_image(32, 2)
    for ea, eb in zip(a.embedders, b.embedders):
        assert torch.equal(embed_face(ea, img), embed_face(eb, img))
    assert torch.equal(extract_keys(a.vit, img).keys, extract_keys(b.vit, img).keys)
    for la, lb in zip(extract_content_features(a.encoder, img).levels,
                      extract_content_features(b.encoder, img).levels):
        assert torch.equal(la, lb)


def test_toy_embedder_separates_identities(suite):
    """Same-identity shots sit closer than different identities on the held-out embedder."""
    e = suite.embedders[3]
    genuine, impostor = [], []
    for i in range(6):
        a = embed_face(e, render_face(make_identity(i), 32, variation=0))
        b = embed_face(e, render_face(make_identity(i), 32, variation=1))
        c = embed_face(e, render_face(make_identity(i + 100), 32, variation=0))
        genuine.append(1 - float(a @ b))
        impostor.append(1 - float(a @ c))
    assert max(genuine) < min(impostor)


def test_vit_key_grid_and_layer_bounds():
    vit = resolve_backend("toy:vit:0")
    img = _rand_image(64)
    ks = extract_keys(vit, img)
    assert ks.patch_grid == (4, 4)
    assert ks.keys.shape[0] == 17 and ks.has_cls_token
    assert ks.patch_keys.shape[0] == 16
    assert torch.equal(ks.keys, extract_keys(vit, img, ks.layer_index).keys)
    with pytest.raises(ValueError):
        extract_keys(vit, img, vit.depth + 1)
    with pytest.raises(ValueError):
        extract_keys(vit, img, 0)


def test_parser_hard_rectangles_without_smoothing():
    img = _rand_image(64)
    parser = SyntheticParser()
    masks = parse_face(parser, img, smoothing_sigma=0)
    labels = rasterize_layout(FACE_LAYOUT, (64, 64))
    want, _ = collapse_labels(labels)
    for region in ("eyes", "lips", "skin"):
        assert np.array_equal(masks[region].numpy(), want[region])
    fg = masks["eyes"] + masks["lips"] + masks["skin"]
    assert torch.equal(masks["background"], (1 - fg).clamp(0, 1))


def test_parser_smoothing_band():
    img = _rand_image(64)
    hard = parse_face(SyntheticParser(), img, smoothing_sigma=0)["lips"].numpy()
    soft = parse_face(SyntheticParser(), img, smoothing_sigma=1.5)["lips"].numpy()
    # pixels on either side of the rectangle edge become fractional
    edge = np.argwhere(hard > 0)
    y0, x0 = edge.min(0)
    y1, x1 = edge.max(0)
    cx = (x0 + x1) // 2
    assert 0 < soft[y0, cx] < 1 and 0 < soft[y0 - 1, cx] < 1
    assert 0 < soft[y1, cx] < 1 and 0 < soft[y1 + 1, cx] < 1
    assert soft.min() >= 0 and soft.max() <= 1


def test_parser_region_overlap_small():
    masks = parse_face(SyntheticParser(), _rand_image(64))
    for a, b in (("eyes", "lips"), ("eyes", "skin"), ("lips", "skin")):
        assert masks.overlap(a, b) <= 0.05


def test_parser_missing_eyes_flagged():
    layout = {k: v for k, v in FACE_LAYOUT.items() if "eye" not in k and "brow" not in k}
    masks = parse_face(SyntheticParser(layout), _rand_image(64))
    assert masks.is_empty("eyes")
    assert float(masks["eyes"].abs().sum()) == 0
    assert "eyes" in masks.metadata["empty_regions"]


def test_parser_unknown_label_warns():
    layout = dict(FACE_LAYOUT)
    layout[99] = [(0.0, 0.0, 0.1, 0.1)]
    masks = parse_face(SyntheticParser(layout), _rand_image(64), smoothing_sigma=0)
    assert masks.metadata["warnings"]
    assert float(masks["background"][:3, :3].min()) == 1.0


def test_label_map_covers_all_regions():
    labels = np.array([[PARSER_CLASSES.index(n) for n in ("skin", "nose", "l_eye", "u_lip", "hair")]])
    masks, warn = collapse_labels(labels)
    assert not warn
    assert masks["skin"].tolist() == [[1, 1, 0, 0, 0]]
    assert masks["eyes"].tolist() == [[0, 0, 1, 0, 0]]
    assert masks["lips"].tolist() == [[0, 0, 0, 1, 0]]


def test_region_mask_background_default():
    m = RegionMaskSet({r: torch.full((2, 2), 0.5) for r in ("eyes", "lips", "skin")}, 0.0)
    assert torch.equal(m["background"], torch.zeros(2, 2))


def test_resolve_backend_names(monkeypatch, tmp_path):
    from makeup_prior import backends as B

    assert resolve_backend("toy:vit8:0").patch_size == 8
    assert resolve_backend("toy:embedder4:0").name == "toy:embedder4:0"
    with pytest.raises(ConfigurationError):
        resolve_backend("toy:bogus:0")
    with pytest.raises(ConfigurationError):
        resolve_backend("nope")
    seen = {}
    B.register_backend("test:fake", lambda w: seen.setdefault("w", w))
    monkeypatch.setenv(B.WEIGHTS_ENV, str(tmp_path))
    resolve_backend("test:fake", "fake.pt")
    assert seen["w"] == str(tmp_path / "fake.pt")
