"""
Low-pass graph convolutional recommender models.

Each layer filters the user and item embeddings through a rank-1 spectral
kernel restricted to the passband, mixes the features with a shared
transform, and applies a sigmoid::

    U(l) = sigmoid( P diag(k_user(l)) P^T U(l-1) T(l) )
    V(l) = sigmoid( Q diag(k_item(l)) Q^T V(l-1) T(l) )

Predictions are the inner products of the concatenated layer outputs, so
``R^ = sum_l U(l) V(l)^T``. With zero layers the model is plain matrix
factorization (MF).
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.special import expit

from pfh.specrec.spectral import TruncatedBases
from pfh.specrec.util import rng_stream


__all__ = [
    "NumericOverflowError",
    "LayerParams",
    "ModelParams",
    "ForwardCache",
    "init_params",
    "lcfn_forward",
    "predict_matrix",
    "predict_user",
    "predict_users",
    "score_pairs",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]


def __dir__():
    return __all__


CHECKPOINT_MAGIC = "LCFN1"
INIT_SCALE = 0.01


class NumericOverflowError(FloatingPointError):
    """A forward or loss computation produced a non-finite value."""

    def __init__(self, message: str, layer: int | None = None) -> None:
        super().__init__(message)
        self.layer = layer


@dataclass
class LayerParams:
    """
    The trainable parameters of one convolution layer.

    Parameters
    ----------
    k_user : array of float, shape (Phi,)
        The user-side spectral kernel.
    k_item : array of float, shape (Psi,)
        The item-side spectral kernel.
    transform : array of float, shape (K, K)
        The feature transform shared by both sides.
    """

    k_user: np.ndarray
    k_item: np.ndarray
    transform: np.ndarray


@dataclass
class ModelParams:
    """
    All trainable parameters of the model.

    Parameters
    ----------
    u0 : array of float, shape (M, K)
        The user input embeddings.
    v0 : array of float, shape (N, K)
        The item input embeddings.
    layers : list of LayerParams
        One entry per convolution layer (empty for MF).
    """

    u0: np.ndarray
    v0: np.ndarray
    layers: list[LayerParams] = field(default_factory=list)

    @property
    def M(self) -> int:
        return self.u0.shape[0]

    @property
    def N(self) -> int:
        return self.v0.shape[0]

    @property
    def K(self) -> int:
        return self.u0.shape[1]

    @property
    def L(self) -> int:
        return len(self.layers)

    @property
    def phi(self) -> int:
        return len(self.layers[0].k_user) if self.layers else 0

    @property
    def psi(self) -> int:
        return len(self.layers[0].k_item) if self.layers else 0

    def tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        """
        Yield ``(name, array)`` for every parameter tensor.

        The order is fixed: ``u0``, ``v0``, then ``k_user``, ``k_item``,
        ``transform`` for each layer. Optimizer state, checkpoints, and
        gradient containers all rely on it.
        """
        yield "u0", self.u0
        yield "v0", self.v0
        for n, layer in enumerate(self.layers, start=1):
            yield f"k_user.{n}", layer.k_user
            yield f"k_item.{n}", layer.k_item
            yield f"transform.{n}", layer.transform

    def arrays(self) -> list[np.ndarray]:
        return [a for _, a in self.tensors()]

    def with_arrays(self, arrays) -> ModelParams:
        """Build a parameter set of the same structure from new arrays."""
        arrays = list(arrays)
        if len(arrays) != 2 + 3 * self.L:
            raise ValueError("Wrong number of parameter arrays")
        layers = [
            LayerParams(*arrays[2 + 3 * n : 5 + 3 * n]) for n in range(self.L)
        ]
        return ModelParams(arrays[0], arrays[1], layers)

    def copy(self) -> ModelParams:
        return self.with_arrays([a.copy() for a in self.arrays()])

    def zeros_like(self) -> ModelParams:
        return self.with_arrays([np.zeros_like(a) for a in self.arrays()])

    def sum_squares(self) -> float:
        return float(sum(np.sum(a * a) for a in self.arrays()))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


@dataclass
class ForwardCache:
    """
    The layer outputs of a forward pass, plus what the backward pass needs.

    Parameters
    ----------
    user_layers, item_layers : list of array of float
        ``U(0) .. U(L)`` and ``V(0) .. V(L)``.
    user_spectra, item_spectra : list of array of float
        ``P^T U(l-1)`` and ``Q^T V(l-1)`` for each layer, shapes (Phi, K) and
        (Psi, K).
    user_filtered, item_filtered : list of array of float
        The convolved embeddings ``P diag(k) P^T U(l-1)`` before the transform.
    """

    user_layers: list[np.ndarray]
    item_layers: list[np.ndarray]
    user_spectra: list[np.ndarray] = field(default_factory=list)
    item_spectra: list[np.ndarray] = field(default_factory=list)
    user_filtered: list[np.ndarray] = field(default_factory=list)
    item_filtered: list[np.ndarray] = field(default_factory=list)

    @property
    def L(self) -> int:
        return len(self.user_layers) - 1


def init_params(
    m: int,
    n: int,
    K: int,
    L: int,
    bases: TruncatedBases | None,
    seed: int,
    init: str | tuple = "random",
) -> ModelParams:
    """
    Create the initial model parameters.

    Parameters
    ----------
    m, n : int
        The number of users and items.
    K : int
        The embedding size of each level.
    L : int
        The number of convolution layers. `bases` may be None when ``L = 0``.
    bases : TruncatedBases or None
        Sets the kernel lengths ``Phi`` and ``Psi``.
    seed : int
        Seeds the ``"init"`` random stream.
    init : {"random"} or tuple of (u0, v0)
        Random input embeddings drawn from ``N(0, 0.01^2)``, or pretrained
        embeddings (eg, from MF), which are copied.

    Returns
    -------
    ModelParams
        Kernels are all ones, transforms are the identity plus
        ``N(0, 0.01^2)`` noise.
    """
    if K < 1:
        raise ValueError("`K` must be at least 1")
    if L < 0:
        raise ValueError("`L` must be non-negative")
    if L and bases is None:
        raise ValueError("`bases` are required when `L > 0`")
    if bases is not None and (bases.M, bases.N) != (m, n):
        raise ValueError("`bases` do not match the number of users and items")

    rng = rng_stream(seed, "init")
    u0 = INIT_SCALE * rng.standard_normal((m, K))
    v0 = INIT_SCALE * rng.standard_normal((n, K))
    if isinstance(init, tuple):
        u0_pre, v0_pre = (np.asarray(a, dtype=np.float64) for a in init)
        if u0_pre.shape != (m, K) or v0_pre.shape != (n, K):
            raise ValueError(
                f"Pretrained embeddings must have shapes ({m}, {K}) and ({n}, {K}), "
                f"got {u0_pre.shape} and {v0_pre.shape}"
            )
        u0, v0 = u0_pre.copy(), v0_pre.copy()
    elif init != "random":
        raise ValueError("`init` must be 'random' or a tuple of (u0, v0)")

    layers = []
    for _ in range(L):
        layers.append(
            LayerParams(
                k_user=np.ones(bases.phi),
                k_item=np.ones(bases.psi),
                transform=np.eye(K) + INIT_SCALE * rng.standard_normal((K, K)),
            )
        )
    return ModelParams(u0, v0, layers)


def _check_shapes(params: ModelParams, bases: TruncatedBases | None):
    if params.u0.shape[1] != params.v0.shape[1]:
        raise ValueError("`u0` and `v0` must have the same embedding size")
    if not params.L:
        return
    if bases is None:
        raise ValueError("`bases` are required when the model has layers")
    if (bases.M, bases.N) != (params.M, params.N):
        raise ValueError("`bases` do not match the parameter shapes")
    for layer in params.layers:
        if layer.k_user.shape != (bases.phi,) or layer.k_item.shape != (bases.psi,):
            raise ValueError("Kernel lengths do not match the passband")
        if layer.transform.shape != (params.K, params.K):
            raise ValueError("Transforms must be K x K")


_SQUASH_LO = np.nextafter(0.0, 1.0)
_SQUASH_HI = np.nextafter(1.0, 0.0)


def _squash(z):
    # expit rounds to exactly 0 or 1 for large |z|; layer outputs stay in (0, 1)
    return np.clip(expit(z), _SQUASH_LO, _SQUASH_HI)


def lcfn_forward(params: ModelParams, bases: TruncatedBases | None) -> ForwardCache:
    """
    Run the forward pass of every layer.

    Parameters
    ----------
    params : ModelParams
    bases : TruncatedBases or None
        May be None for a model without layers.

    Returns
    -------
    ForwardCache
    """
    _check_shapes(params, bases)
    cache = ForwardCache([params.u0], [params.v0])
    if not params.L:
        return cache
    P = bases.user_basis.vectors
    Q = bases.item_basis.vectors
    U, V = params.u0, params.v0
    for n, layer in enumerate(params.layers, start=1):
        Su = P.T @ U
        Sv = Q.T @ V
        Fu = P @ (layer.k_user[:, None] * Su)
        Fv = Q @ (layer.k_item[:, None] * Sv)
        Zu = Fu @ layer.transform
        Zv = Fv @ layer.transform
        if not (np.all(np.isfinite(Zu)) and np.all(np.isfinite(Zv))):
            raise NumericOverflowError(f"Non-finite activations in layer {n}", layer=n)
        U, V = _squash(Zu), _squash(Zv)
        cache.user_spectra.append(Su)
        cache.item_spectra.append(Sv)
        cache.user_filtered.append(Fu)
        cache.item_filtered.append(Fv)
        cache.user_layers.append(U)
        cache.item_layers.append(V)
    return cache


def predict_matrix(cache: ForwardCache):
    """
    Score every (user, item) pair.

    Returns
    -------
    ndarray of float, shape (M, N)
        ``[U(0) .. U(L)] [V(0) .. V(L)]^T``
    """
    R = cache.user_layers[0] @ cache.item_layers[0].T
    for U, V in zip(cache.user_layers[1:], cache.item_layers[1:]):
        R += U @ V.T
    return R


def predict_user(cache: ForwardCache, u: int):
    """Score all items for user `u` without forming the full matrix."""
    M = cache.user_layers[0].shape[0]
    if not 0 <= u < M:
        raise ValueError(f"User index {u} out of range [0, {M})")
    scores = cache.item_layers[0] @ cache.user_layers[0][u]
    for U, V in zip(cache.user_layers[1:], cache.item_layers[1:]):
        scores += V @ U[u]
    return scores


def predict_users(cache: ForwardCache, users):
    """Score all items for a block of users, shape (len(users), N)."""
    users = np.asarray(users)
    scores = cache.user_layers[0][users] @ cache.item_layers[0].T
    for U, V in zip(cache.user_layers[1:], cache.item_layers[1:]):
        scores += U[users] @ V.T
    return scores


def score_pairs(cache: ForwardCache, users, items):
    """Scores for individual ``(users[n], items[n])`` pairs."""
    scores = np.zeros(len(users))
    for U, V in zip(cache.user_layers, cache.item_layers):
        scores += np.einsum("pk,pk->p", U[users], V[items])
    return scores


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, params: ModelParams) -> None:
    """
    Write the parameters in the versioned binary checkpoint format.

    The file starts with an ASCII header line ``LCFN1 M N K L Phi Psi``
    followed by every tensor (in `ModelParams.tensors` order) as row-major
    little-endian 64-bit floats.
    """
    header = f"{CHECKPOINT_MAGIC} {params.M} {params.N} {params.K} {params.L} "
    header += f"{params.phi} {params.psi}\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        for _, a in params.tensors():
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes(order="C"))


def load_checkpoint(path) -> ModelParams:
    """Read a checkpoint written by `save_checkpoint`."""
    data = Path(path).read_bytes()
    stream = io.BytesIO(data)
    fields = stream.readline().decode("ascii").split()
    if len(fields) != 7 or fields[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"'{path}' is not a {CHECKPOINT_MAGIC} checkpoint")
    M, N, K, L, phi, psi = (int(x) for x in fields[1:])
    shapes = [(M, K), (N, K)] + [(phi,), (psi,), (K, K)] * L
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape))
        buf = stream.read(8 * count)
        if len(buf) != 8 * count:
            raise ValueError(f"Checkpoint '{path}' is truncated")
        arrays.append(np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape))
    if stream.read(1):
        raise ValueError(f"Checkpoint '{path}' has trailing data")
    layers = [LayerParams(*arrays[2 + 3 * n : 5 + 3 * n]) for n in range(L)]
    return ModelParams(arrays[0], arrays[1], layers)
