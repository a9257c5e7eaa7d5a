"""Task heads: shapes, soft-argmax recovery, digests, serialization."""

import numpy as np
import pytest

import eyelab.autodiff as ad
from eyelab.encoder import EmbeddingSet
from eyelab.errors import DataError, DimMismatch
from eyelab.heads import (
    classify_logits,
    classify_probs,
    detect_landmarks,
    forecast_logit,
    forecast_prob,
    head_digest,
    init_classifier,
    init_forecaster,
    init_landmark_head,
    init_regressor,
    init_segmenter,
    landmark_logits,
    load_head,
    regress_biomarkers,
    save_head,
    segment,
    segment_logits,
    soft_argmax,
)


def fake_embeddings(rng, b=2, grid=4, dim=32):
    return EmbeddingSet(
        cls=rng.normal(size=(b, dim)),
        patches=rng.normal(size=(b, grid * grid, dim)),
        grid=(grid, grid),
    )


class TestClassifier:
    def test_logit_shape_and_probs(self, rng):
        head = init_classifier(32, 3, seed=0)
        emb = fake_embeddings(rng)
        logits = classify_logits(head, ad.Tensor(emb.cls)).data
        assert logits.shape == (2, 3)
        probs = classify_probs(head, emb.cls)
        assert np.allclose(probs.sum(axis=1), 1.0)

    def test_dim_mismatch(self, rng):
        head = init_classifier(16, 3, seed=0)
        with pytest.raises(DimMismatch):
            classify_probs(head, rng.normal(size=(2, 32)))

    def test_seed_controls_init(self):
        a = init_classifier(32, 3, seed=1)
        b = init_classifier(32, 3, seed=1)
        c = init_classifier(32, 3, seed=2)
        assert head_digest(a) == head_digest(b)
        assert head_digest(a) != head_digest(c)


class TestSegmenter:
    def test_output_covers_image(self, rng):
        head = init_segmenter(32, 2, grid=4, upsample=8, seed=0)
        emb = fake_embeddings(rng)
        logits = segment_logits(head, emb.patches).data
        assert logits.shape == (2, 32, 32, 2)
        pred = segment(head, emb)
        assert pred.shape == (2, 32, 32)
        assert set(np.unique(pred)) <= {0, 1}

    def test_coarse_path_broadcasts_per_patch(self, rng):
        # zero the fine path: logits must be constant within each patch cell
        head = init_segmenter(32, 2, grid=4, upsample=8, seed=0)
        head.params["w_fine"].data[:] = 0.0
        head.params["b_fine"].data[:] = 0.0
        emb = fake_embeddings(rng)
        logits = segment_logits(head, emb.patches).data
        cell = logits[0, 0:8, 0:8, 0]
        assert np.allclose(cell, cell[0, 0])
        next_cell = logits[0, 0:8, 8:16, 0]
        assert not np.allclose(next_cell[0, 0], cell[0, 0])


class TestSoftArgmax:
    def test_delta_map_exact(self):
        # single lit pixel: expectation recovers it to within half a pixel
        for (y, x) in [(3, 5), (0, 0), (7, 2)]:
            hm = np.zeros((8, 8))
            hm[y, x] = 1.0
            px, py = soft_argmax(hm)
            assert abs(px - x) <= 0.5
            assert abs(py - y) <= 0.5

    def test_uniform_map_gives_center(self):
        px, py = soft_argmax(np.ones((9, 9)))
        assert px == pytest.approx(4.0, abs=1e-9)
        assert py == pytest.approx(4.0, abs=1e-9)

    def test_logits_mode_softmaxes(self):
        hm = np.full((8, 8), -3.0)
        hm[2, 6] = 10.0
        px, py = soft_argmax(hm, logits=True)
        assert abs(px - 6) <= 0.5
        assert abs(py - 2) <= 0.5

    def test_negative_mass_rejected(self):
        with pytest.raises(DataError):
            soft_argmax(-np.ones((4, 4)))

    def test_gaussian_blob_subpixel(self):
        yy, xx = np.mgrid[0:16, 0:16]
        cy, cx = 7.3, 9.6
        hm = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 4.0)
        px, py = soft_argmax(hm)
        assert abs(px - cx) <= 0.5
        assert abs(py - cy) <= 0.5


class TestLandmarker:
    def test_three_heatmaps(self, rng):
        head = init_landmark_head(32, grid=4, upsample=8, seed=0)
        emb = fake_embeddings(rng)
        logits = landmark_logits(head, emb.patches).data
        assert logits.shape == (2, 32, 32, 3)
        pts = detect_landmarks(head, emb)
        assert pts.shape == (2, 3, 2)
        assert (pts >= 0).all() and (pts <= 31).all()


class TestRegressor:
    def test_standardization_round_trip(self, rng):
        head = init_regressor(32, 38, seed=0)
        head.target_mu[:] = 100.0
        head.target_sigma[:] = 10.0
        emb = fake_embeddings(rng)
        z = regress_biomarkers(head, emb.cls, raw=True).data
        out = regress_biomarkers(head, emb.cls)
        assert np.allclose(out, z * 10.0 + 100.0)

    def test_output_width(self, rng):
        head = init_regressor(32, 5, seed=0)
        emb = fake_embeddings(rng)
        assert regress_biomarkers(head, emb.cls).shape == (2, 5)


class TestForecaster:
    def test_prob_in_unit_interval(self, rng):
        head = init_forecaster(32, seed=0)
        emb = fake_embeddings(rng)
        deltas = np.array([100.0, 1500.0])
        p = forecast_prob(head, emb.cls, deltas)
        assert p.shape == (2,)
        assert ((p > 0) & (p < 1)).all()

    def test_interval_matters(self, rng):
        head = init_forecaster(32, seed=0)
        emb = fake_embeddings(rng)
        a = forecast_prob(head, emb.cls, np.array([100.0, 100.0]))
        b = forecast_prob(head, emb.cls, np.array([1900.0, 1900.0]))
        assert not np.allclose(a, b)

    def test_nonpositive_interval_rejected(self, rng):
        head = init_forecaster(32, seed=0)
        emb = fake_embeddings(rng)
        with pytest.raises(DataError):
            forecast_logit(head, ad.Tensor(emb.cls), np.array([0.0, 100.0]))


class TestSerialization:
    @pytest.mark.parametrize("build", [
        lambda: init_classifier(32, 3, seed=4),
        lambda: init_segmenter(32, 2, grid=4, upsample=8, seed=4),
        lambda: init_landmark_head(32, grid=4, upsample=8, seed=4),
        lambda: init_regressor(32, 38, seed=4),
        lambda: init_forecaster(32, seed=4),
    ])
    def test_round_trip_preserves_digest(self, tmp_path, build):
        head = build()
        path = save_head(head, tmp_path / "head.npz")
        back = load_head(path)
        assert type(back) is type(head)
        assert head_digest(back) == head_digest(head)

    def test_regressor_standardization_survives(self, tmp_path, rng):
        head = init_regressor(32, 38, seed=4)
        head.target_mu[:] = rng.normal(size=38)
        head.target_sigma[:] = np.abs(rng.normal(size=38)) + 0.5
        back = load_head(save_head(head, tmp_path / "r.npz"))
        assert np.array_equal(back.target_mu, head.target_mu)
        assert np.array_equal(back.target_sigma, head.target_sigma)
