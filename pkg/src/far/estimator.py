"""scikit-learn style facade over shape model, basis and solver."""
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import solver
from .shapewarp import as_shape, build_shape_model, delaunay
from .subspace import build_basis


class FrontalAligner(BaseEstimator, TransformerMixin):
    """Align faces and reconstruct their frontal appearance.

    ``fit(images, shapes)`` builds the shape model, triangulation and clean
    appearance basis from frontal training pairs. ``predict`` returns fitted
    landmarks and ``transform`` returns cropped frontal textures.

    Parameters
    ----------
    frame : (rows, cols) of the reference frame.
    k : number of principal appearance directions (the mean is added on top).
    n_shape : shape deformation modes, None to keep 95% of the variance.
    lam, rho, mu0, mu_max, eps1, eps2, eps3, max_inner, max_outer, dp_multiplier :
        solver settings, see :class:`far.solver.SolverConfig`.
    """

    def __init__(
        self,
        frame=(40, 40),
        k=20,
        n_shape=None,
        lam=0.3,
        rho=1.1,
        mu0=1e-6,
        mu_max=1e10,
        eps1=1e-3,
        eps2=1e-5,
        eps3=1e-7,
        max_inner=500,
        max_outer=30,
        dp_multiplier=False,
    ):
        self.frame = frame
        self.k = k
        self.n_shape = n_shape
        self.lam = lam
        self.rho = rho
        self.mu0 = mu0
        self.mu_max = mu_max
        self.eps1 = eps1
        self.eps2 = eps2
        self.eps3 = eps3
        self.max_inner = max_inner
        self.max_outer = max_outer
        self.dp_multiplier = dp_multiplier

    def _config(self):
        return solver.SolverConfig(
            lam=self.lam,
            rho=self.rho,
            mu0=self.mu0,
            mu_max=self.mu_max,
            eps1=self.eps1,
            eps2=self.eps2,
            eps3=self.eps3,
            max_inner=self.max_inner,
            max_outer=self.max_outer,
            dp_multiplier=self.dp_multiplier,
        )

    def fit(self, X, y):
        """X: sequence of 2-D images; y: matching sequence of (v, 2) shapes."""
        if y is None:
            raise ValueError("FrontalAligner.fit needs training landmarks y")
        images = [np.asarray(img, dtype=np.float64) for img in X]
        shapes = [as_shape(s) for s in y]
        self.shape_model_ = build_shape_model(shapes, n_s=self.n_shape, frame=tuple(self.frame))
        self.triangulation_ = delaunay(self.shape_model_.mean_shape)
        self.basis_ = build_basis(images, shapes, self.shape_model_, self.triangulation_, self.k)
        self.n_features_in_ = self.basis_.n_pixels
        return self

    def _check(self):
        if not hasattr(self, "basis_"):
            raise NotFittedError("FrontalAligner is not fitted yet; call fit first")

    def _inits(self, X, init):
        if init is None:
            return [self.shape_model_.mean_shape] * len(X)
        init = np.asarray(init, dtype=np.float64)
        if init.ndim == 2:
            return [init] * len(X)
        if len(init) != len(X):
            raise ValueError(f"{len(X)} images but {len(init)} initial shapes")
        return list(init)

    def fit_results(self, X, init=None):
        """Full :class:`far.solver.FitResult` per image."""
        self._check()
        cfg = self._config()
        return [
            solver.fit(img, s, self.shape_model_, self.triangulation_, self.basis_, cfg)
            for img, s in zip(X, self._inits(X, init))
        ]

    def predict(self, X, init=None):
        """Fitted landmarks, shape ``(n_images, v, 2)``."""
        return np.stack([r.shape for r in self.fit_results(X, init)])

    def transform(self, X, init=None):
        """Cropped frontal textures, one per image."""
        self._check()
        cfg = self._config()
        out = []
        for img, s in zip(X, self._inits(X, init)):
            frontal, _ = solver.frontalize(img, s, self.shape_model_, self.triangulation_, self.basis_, cfg)
            out.append(frontal)
        return np.stack(out)
