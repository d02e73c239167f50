import json

import numpy as np
import pytest
import torch

from refonly.data import TrainingPair, extract_blueprint, mine_pairs
from refonly.errors import ConfigError, DimensionError, EmptyImageError
from refonly.evaluation import color_distance, control_experiment, edge_iou, mask_iou
from refonly.model import DualCondModel, ModelConfig
from refonly.sampler import SampleConfig

SMALL = dict(resolution=32, base_width=8, context_dim=16, patch=8, prompt_depth=1, prompt_heads=2, heads=2, T=10)


def first_pair_per_identity(corpus, n):
    pairs = mine_pairs(corpus, 0.9)
    out = {}
    for p in pairs:
        out.setdefault(corpus[p.target_index].identity_id, p)
    return list(out.values())[:n]


class TestMaskIou:
    def test_identical(self):
        m = torch.zeros(1, 8, 8)
        m[0, 2:5, 3] = 1
        assert mask_iou(m, m) == 1.0

    def test_both_empty(self):
        assert mask_iou(torch.zeros(8, 8), torch.zeros(8, 8)) == 1.0

    def test_disjoint_far(self):
        a, b = torch.zeros(9, 9), torch.zeros(9, 9)
        a[0, 0] = 1
        b[8, 8] = 1
        assert mask_iou(a, b) == 0.0

    def test_one_pixel_shift_tolerated(self):
        a, b = torch.zeros(9, 9), torch.zeros(9, 9)
        a[4, 1:8] = 1
        b[5, 1:8] = 1
        assert mask_iou(a, b, dilate=0) == 0.0
        # each line grows to three rows; two of four covered rows overlap
        assert mask_iou(a, b, dilate=1) == pytest.approx(0.5)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            mask_iou(torch.zeros(4, 4), torch.zeros(5, 5))


class TestEdgeIou:
    def test_target_against_own_blueprint(self, small_corpus):
        s = small_corpus[0]
        assert edge_iou(s.image, extract_blueprint(s.image)) == 1.0

    def test_bounded(self, small_corpus):
        v = edge_iou(small_corpus[0].image, extract_blueprint(small_corpus[7].image))
        assert 0 <= v < 1


class TestColorDistance:
    def test_same_image(self, small_corpus):
        s = small_corpus[0]
        assert color_distance(s.image, s.image, s.alpha, s.alpha) == 0.0

    def test_disjoint_colours(self):
        red, blue = torch.zeros(3, 4, 4), torch.zeros(3, 4, 4)
        red[0] = 1
        blue[2] = 1
        mask = torch.ones(1, 4, 4)
        # the red and blue channels put all mass in opposite end bins; green agrees
        assert color_distance(red, blue, mask, mask) == pytest.approx(4 / 3)

    def test_empty_mask(self):
        with pytest.raises(EmptyImageError):
            color_distance(torch.rand(3, 4, 4), torch.rand(3, 4, 4), torch.zeros(1, 4, 4), torch.ones(1, 4, 4))


class TestControlExperiment:
    def test_untrained_model_has_no_gap(self, corpus32, tmp_path):
        pairs = first_pair_per_identity(corpus32, 20)
        model = DualCondModel(ModelConfig(**SMALL), 0)
        report = control_experiment(model, pairs, SampleConfig(steps=3), out_dir=tmp_path)
        assert report.n_samples == 20
        assert abs(report.control_gap) < 0.01
        assert report.prompt_gap == 0.0
        assert all(0 <= r["edge_iou"] <= 1 for r in report.per_pair)
        saved = json.loads((tmp_path / "report.json").read_text())
        assert saved["n_samples"] == 20
        assert (tmp_path / "0019" / "shuf_bp.png").exists()

    def test_needs_enough_pairs(self, small_corpus):
        pairs = mine_pairs(small_corpus, 0.9)[:3]
        with pytest.raises(ConfigError):
            control_experiment(DualCondModel(ModelConfig(**SMALL), 0), pairs, SampleConfig(steps=1))

