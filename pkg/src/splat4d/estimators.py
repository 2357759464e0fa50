"""scikit-learn style wrappers around scene fitting and the toy regressor.

``X`` is always a list of posed images ``(image, CameraView)`` (or of
episodes for the regressor); ``predict`` renders images for a list of views.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import InvalidInputError
from .losses import psnr
from .optimizer import Episode, fit_scene, train_toy
from .rasterizer import INFERENCE_OPTIONS, RenderOptions, render_tiled
from .transformer import ModelConfig, forward
from .validation import check_posed_images, check_views


class SceneFitter(BaseEstimator):
    """Fit a Scene4D to posed view-time images."""

    def __init__(self, n_gaussians=64, iters=2000, seed=0, lr=1e-2, lam=0.5, batch_size=16):
        self.n_gaussians = n_gaussians
        self.iters = iters
        self.seed = seed
        self.lr = lr
        self.lam = lam
        self.batch_size = batch_size

    def fit(self, X, y=None, holdout=None):
        targets = check_posed_images(X, min_count=2)
        holdout = check_posed_images(holdout, name="holdout") if holdout is not None else None
        result = fit_scene(
            targets, self.n_gaussians, self.iters, self.seed,
            lr=self.lr, lam=self.lam, batch_size=self.batch_size, holdout=holdout,
        )
        self.scene_ = result.scene
        self.trace_ = result.trace
        return self

    def predict(self, views, opts: RenderOptions = INFERENCE_OPTIONS):
        check_is_fitted(self, "scene_")
        return [render_tiled(self.scene_, v, opts=opts) for v in check_views(views)]

    def transform(self, views):
        return self.predict(views)

    def score(self, X, y=None):
        """Mean PSNR (dB) of inference renders against posed images."""
        pairs = check_posed_images(X)
        renders = self.predict([v for _, v in pairs])
        return float(np.mean([psnr(r, img) for r, (img, _) in zip(renders, pairs)]))


class ToyRegressor(BaseEstimator):
    """Toy image-to-4DGS transformer trained on :class:`Episode` lists."""

    def __init__(self, hidden_dim=64, layers=4, heads=4, mlp_ratio=4, patch_size=8, free_tokens=0,
                 iters=1000, seed=0, lr=4e-4, lam=0.5):
        self.hidden_dim = hidden_dim
        self.layers = layers
        self.heads = heads
        self.mlp_ratio = mlp_ratio
        self.patch_size = patch_size
        self.free_tokens = free_tokens
        self.iters = iters
        self.seed = seed
        self.lr = lr
        self.lam = lam

    def _config(self):
        return ModelConfig(self.hidden_dim, self.layers, self.heads, self.mlp_ratio, self.patch_size,
                           self.free_tokens, self.seed)

    def fit(self, X, y=None):
        episodes = list(X)
        if not episodes or not all(isinstance(e, Episode) for e in episodes):
            raise InvalidInputError("ToyRegressor.fit expects a non-empty list of Episode")
        for e in episodes:
            check_posed_images(e.inputs, name="inputs")
            check_posed_images(e.supervision, name="supervision")
        self.config_ = self._config()
        result = train_toy(episodes, self.config_, self.iters, self.seed, lr=self.lr, lam=self.lam, eval_every=0)
        self.weights_ = result.weights
        self.trace_ = result.trace
        return self

    def transform(self, inputs):
        """Posed input images -> Scene4D."""
        check_is_fitted(self, "weights_")
        return forward(check_posed_images(inputs, name="inputs"), self.config_, self.weights_)

    def predict(self, inputs, views, opts: RenderOptions = INFERENCE_OPTIONS):
        scene = self.transform(inputs)
        return [render_tiled(scene, v, opts=opts) for v in check_views(views)]

    def score(self, X, y=None):
        """Mean supervision PSNR over episodes."""
        scores = []
        for e in X:
            renders = self.predict(e.inputs, [v for _, v in e.supervision])
            scores += [psnr(r, img) for r, (img, _) in zip(renders, e.supervision)]
        return float(np.mean(scores))
