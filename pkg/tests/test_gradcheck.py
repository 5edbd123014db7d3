"""Analytic gradients against the central finite-difference oracle."""

import pytest
import torch

from transtext.cli import gradcheck_batch
from transtext.config import load_config
from transtext.flowmatch import grad_check

SMALL = ["data.height=16", "data.width=16", "data.frames=5"]


class TestGradCheck:
    def test_small_config_under_tolerance(self):
        cfg = load_config(None, SMALL)
        batch = gradcheck_batch(cfg)
        model = batch.pop("model")
        err = grad_check(model, batch, num_params=220)
        assert err < 1e-4

    def test_linear_only_toy_network(self):
        # with attention disabled the loss is quadratic along every parameter
        # coordinate, so central differences are exact up to rounding; the
        # coarser step suppresses cancellation noise far below 1e-7
        cfg = load_config(None, SMALL + ["denoiser.blocks=0"])
        batch = gradcheck_batch(cfg)
        model = batch.pop("model")
        err = grad_check(model, batch, num_params=220, step=1e-2)
        assert err < 1e-7

    def test_deterministic_given_seed(self):
        cfg = load_config(None, SMALL)
        batch = gradcheck_batch(cfg)
        model = batch.pop("model")
        a = grad_check(model, batch, num_params=40, seed=5)
        b = grad_check(model, batch, num_params=40, seed=5)
        assert a == b

    def test_samples_at_least_requested(self):
        cfg = load_config(None, SMALL)
        batch = gradcheck_batch(cfg)
        model = batch.pop("model")
        total = sum(p.numel() for p in model.parameters())
        assert total >= 220  # the default check covers >= 200 parameters

    def test_temporal_layout_batch(self):
        cfg = load_config(None, SMALL + ["train.layout=temporal"])
        batch = gradcheck_batch(cfg)
        model = batch.pop("model")
        err = grad_check(model, batch, num_params=60)
        assert err < 1e-4
