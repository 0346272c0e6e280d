"""BPR matrix factorization and SVD++ on the same training surface as DiffNet."""

from __future__ import annotations

import numpy as np

from .data import Dataset
from .model import RankingModel, Trace, mean_matrix


def bpr_predict(a: int, i: int, U: np.ndarray, V: np.ndarray) -> float:
    return float(V[:, i] @ U[:, a])


def svdpp_predict(a: int, i: int, U: np.ndarray, V: np.ndarray, Yimp: np.ndarray, rated: np.ndarray) -> float:
    """``v_i . (u_a + mean of y_j over the user's training positives)``."""
    user = U[:, a]
    if len(rated):
        user = user + Yimp[:, np.asarray(rated, dtype=np.int64)].mean(axis=1)
    return float(V[:, i] @ user)


class _FactorModel(RankingModel):
    def __init__(self, train: Dataset, embed_dim: int, rng_seed: int, init_scale: float | None, dtype: str) -> None:
        super().__init__()
        self.num_users, self.num_items = train.num_users, train.num_items
        self.embed_dim = embed_dim
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(rng_seed)
        self.scale = init_scale if init_scale is not None else 0.1 / np.sqrt(embed_dim)

    def _init(self, cols: int) -> np.ndarray:
        return self.rng.uniform(-self.scale, self.scale, size=(self.embed_dim, cols)).astype(self.dtype)


class BPRMF(_FactorModel):
    """Plain inner-product model: ``score = v_i . u_a``."""

    kind = "bpr"

    def __init__(
        self, train: Dataset, embed_dim: int = 64, rng_seed: int = 0,
        init_scale: float | None = None, dtype: str = "float64",
    ) -> None:
        super().__init__(train, embed_dim, rng_seed, init_scale, dtype)
        self.params = {"U": self._init(self.num_users), "V": self._init(self.num_items)}
        self.regularized = ("U", "V")

    def forward(self, training: bool = False, update_stats: bool = True) -> Trace:
        return Trace(u=self.params["U"], v=self.params["V"], version=self.version)

    def _backward_from_vectors(self, trace, du, dv):
        return {"U": du, "V": dv}


class SVDPP(_FactorModel):
    """SVD++ with the ``1/|R_a|`` history average."""

    kind = "svdpp"

    def __init__(
        self, train: Dataset, embed_dim: int = 64, rng_seed: int = 0,
        init_scale: float | None = None, dtype: str = "float64",
    ) -> None:
        super().__init__(train, embed_dim, rng_seed, init_scale, dtype)
        self.params = {
            "U": self._init(self.num_users),
            "V": self._init(self.num_items),
            "Yimp": self._init(self.num_items),
        }
        self.regularized = ("U", "V", "Yimp")
        self.history = mean_matrix(train.interactions, self.num_items).astype(self.dtype)

    def forward(self, training: bool = False, update_stats: bool = True) -> Trace:
        u = self.params["U"] + np.asarray(self.history @ self.params["Yimp"].T).T
        return Trace(u=u, v=self.params["V"], version=self.version)

    def _backward_from_vectors(self, trace, du, dv):
        return {"U": du, "V": dv, "Yimp": np.asarray(self.history.T @ du.T).T}
