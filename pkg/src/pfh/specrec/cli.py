"""
The ``specrec`` command line.

Every command reads and writes artifacts in a single output directory
(``--out``), so a full pipeline is::

    specrec --out run ingest ratings.tsv --core-user 10 --core-item 10
    specrec --out run split
    specrec --out run eigen
    specrec --out run pretrain
    specrec --out run train
    specrec --out run evaluate --phase test

Artifacts
---------
interactions.tsv, users.tsv, items.tsv, stats.json
    The canonical dataset written by ``ingest``.
train.tsv, validation.tsv, test.tsv, split.json
    The partition written by ``split``.
eigen_user.lcfb, eigen_item.lcfb
    Passband eigenbases of the train-split Laplacians (``eigen``).
mf.lcfn, pretrain_history.jsonl
    The pretrained MF checkpoint (``pretrain``).
model.lcfn, history.jsonl
    The trained model (``train`` and ``tune``).
tune.jsonl, tune_best.cfg
    One record per grid cell, and the winning configuration (``tune``).
metrics_<phase>.json
    The evaluation report (``evaluate``).
demo_<signal>.csv, demo_<signal>.json
    The cycle-graph spectrum demonstration (``demo-gft``).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import sys
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from pfh.specrec import evaluation, spectral, training
from pfh.specrec.hypergraph import (
    InteractionSet,
    ncore_filter,
    user_item_laplacians,
)
from pfh.specrec.linalg import ConvergenceError, SpectralBasis, lanczos_smallest
from pfh.specrec.model import (
    NumericOverflowError,
    load_checkpoint,
    save_checkpoint,
)


__all__ = [
    "CacheError",
    "IngestError",
    "MissingArtifactError",
    "LockError",
    "RunConfig",
    "load_run_config",
    "EIGEN_MAGIC",
    "write_eigen_cache",
    "read_eigen_cache",
    "ingest",
    "split_cmd",
    "eigen_cmd",
    "pretrain_cmd",
    "train_cmd",
    "tune_cmd",
    "evaluate_cmd",
    "demo_gft",
    "main",
]


def __dir__():
    return __all__


_logger = logging.getLogger(__name__)

EIGEN_MAGIC = "LCFB1"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class CacheError(RuntimeError):
    """An eigenbasis cache does not belong to the current dataset."""


class IngestError(ValueError):
    """A malformed line in an interaction file."""

    def __init__(self, message: str, lineno: int) -> None:
        super().__init__(message)
        self.lineno = lineno


class MissingArtifactError(FileNotFoundError):
    """A command needs the output of a command that has not been run."""

    def __init__(self, path, command: str) -> None:
        super().__init__(f"Missing '{path}'; run `specrec {command}` first")
        self.path = Path(path)
        self.command = command


class LockError(RuntimeError):
    """Another command is using the output directory."""


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class RunConfig:
    """
    Everything a command needs: training hyperparameters plus plumbing.

    Parameters
    ----------
    train : training.TrainConfig
        The hyperparameters.
    out : Path
        The artifact directory.
    format : {"tsv", "movielens"}
        The input format for ``ingest``.
    core_user, core_item : int
        The n-core thresholds applied by ``ingest``.
    ratios : tuple of float
        The train/validation/test proportions used by ``split``.
    init : {"pretrained", "random"}
        How ``train`` and ``tune`` initialize the input embeddings.
    lanczos_tol : float
        The eigenpair residual tolerance used by ``eigen``.
    lanczos_max_iters : int
        The restart limit used by ``eigen`` (0 for the solver default).
    """

    train: training.TrainConfig = field(default_factory=training.TrainConfig)
    out: Path = Path(".")
    format: str = "tsv"
    core_user: int = 0
    core_item: int = 0
    ratios: tuple[float, ...] = (0.8, 0.1, 0.1)
    init: str = "pretrained"
    lanczos_tol: float = 1e-8
    lanczos_max_iters: int = 0

    def __post_init__(self):
        if self.format not in ("tsv", "movielens"):
            raise ValueError("`format` must be 'tsv' or 'movielens'")
        if self.init not in ("pretrained", "random"):
            raise ValueError("`init` must be 'pretrained' or 'random'")
        if self.core_user < 0 or self.core_item < 0:
            raise ValueError("Core thresholds must be non-negative")
        self.out = Path(self.out)


_TRAIN_KEYS = {f.name: f for f in dataclasses.fields(training.TrainConfig)}
_RUN_KEYS = {f.name: f for f in dataclasses.fields(RunConfig) if f.name != "train"}


def _coerce(key: str, text: str, default):
    """Convert `text` to the type of a field's default value."""
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return text.lower() in ("true", "1")
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(x) for x in text.split(",") if x.strip())
        if isinstance(default, Path):
            return Path(text)
        return type(default)(text)
    except ValueError:
        raise ValueError(f"Invalid value '{text}' for `{key}`") from None


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """
    Build a RunConfig from a ``key=value`` file and command-line overrides.

    Parameters
    ----------
    path : path-like, optional
        A file of ``key=value`` lines. Blank lines and lines starting with
        ``#`` are ignored. Keys are RunConfig or TrainConfig field names, plus
        ``dim_total`` which sets ``embed_dim = dim_total // (layers + 1)``.
    overrides : dict, optional
        Values (strings or already-typed) that take precedence over the file.

    Returns
    -------
    RunConfig
    """
    values: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Config file '{path}' does not exist")
        for lineno, line in enumerate(path.read_text("utf-8").splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected `key=value`")
            values[key.strip()] = value.strip()
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value

    dim_total = values.pop("dim_total", None)
    train_kwargs, run_kwargs = {}, {}
    for key, value in values.items():
        if key in _TRAIN_KEYS:
            default = training.TrainConfig.__dataclass_fields__[key].default
            target = train_kwargs
        elif key in _RUN_KEYS:
            f = _RUN_KEYS[key]
            default = f.default if f.default is not dataclasses.MISSING else None
            target = run_kwargs
        else:
            raise ValueError(f"Unknown configuration key `{key}`")
        target[key] = _coerce(key, value, default) if isinstance(value, str) else value

    if dim_total is not None:
        dim_total = int(dim_total)
        layers = train_kwargs.get("layers", training.TrainConfig.layers)
        if dim_total // (layers + 1) < 1:
            raise ValueError("`dim_total` is too small for the number of layers")
        train_kwargs["embed_dim"] = dim_total // (layers + 1)
    return RunConfig(train=training.TrainConfig(**train_kwargs), **run_kwargs)


# ---------------------------------------------------------------------------
# Artifact input/output


def _require(path: Path, command: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(path, command)
    return path


def _write_lines(path: Path, lines) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for line in lines:
            f.write(line + "\n")


def _write_json(path: Path, record) -> None:
    text = record if isinstance(record, str) else json.dumps(record, sort_keys=True)
    _write_lines(path, [text])


def _write_pairs(path: Path, interactions: InteractionSet) -> None:
    _write_lines(
        path,
        (
            f"{interactions.user_ids[u]}\t{interactions.item_ids[i]}"
            for u, i in zip(interactions.users, interactions.items)
        ),
    )


def _read_ids(path: Path) -> np.ndarray:
    text = _require(path, "ingest").read_text("utf-8")
    return np.array(text.splitlines(), dtype=str)


def _read_pairs(path: Path, user_ids, item_ids, command: str) -> InteractionSet:
    users = {uid: n for n, uid in enumerate(user_ids)}
    items = {iid: n for n, iid in enumerate(item_ids)}
    rows, cols = [], []
    text = _require(path, command).read_text("utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        fields = line.split("\t")
        if len(fields) != 2 or fields[0] not in users or fields[1] not in items:
            raise IngestError(f"{path}:{lineno}: unknown or malformed pair", lineno)
        rows.append(users[fields[0]])
        cols.append(items[fields[1]])
    return InteractionSet(
        np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64), user_ids, item_ids
    )


def _load_dataset(out: Path) -> InteractionSet:
    user_ids = _read_ids(out / "users.tsv")
    item_ids = _read_ids(out / "items.tsv")
    return _read_pairs(out / "interactions.tsv", user_ids, item_ids, "ingest")


def _load_split(out: Path) -> evaluation.SplitData:
    user_ids = _read_ids(out / "users.tsv")
    item_ids = _read_ids(out / "items.tsv")
    meta = json.loads(_require(out / "split.json", "split").read_text("utf-8"))
    sets = [
        _read_pairs(out / f"{phase}.tsv", user_ids, item_ids, "split")
        for phase in ("train", "validation", "test")
    ]
    return evaluation.SplitData(*sets, seed=meta["seed"], ratios=tuple(meta["ratios"]))


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_eigen_cache(path, basis: SpectralBasis, digest: str, side: str, f: float):
    """
    Write an eigenbasis cache.

    The file starts with the ASCII header line
    ``LCFB1 <digest> <side> <F> <dim> <count>``, followed by the frequencies
    and then the eigenvectors (column-major), all as little-endian 64-bit
    floats.
    """
    header = f"{EIGEN_MAGIC} {digest} {side} {float(f)!r} {basis.dim} {basis.count}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.asarray(basis.frequencies, dtype="<f8").tobytes())
        fh.write(np.asarray(basis.vectors, dtype="<f8").tobytes(order="F"))


def _read_eigen_header(path: Path):
    with open(path, "rb") as fh:
        fields = fh.readline().decode("ascii", errors="replace").split()
    if len(fields) != 6 or fields[0] != EIGEN_MAGIC:
        raise CacheError(f"'{path}' is not a {EIGEN_MAGIC} eigenbasis cache")
    _, digest, side, f, dim, count = fields
    return digest, side, float(f), int(dim), int(count)


def read_eigen_cache(path, digest: str, side: str, f: float) -> SpectralBasis:
    """
    Load an eigenbasis cache, verifying it matches the dataset and passband.

    Raises
    ------
    CacheError
        If the cache was built from different data, for another side, or
        for another cut-off ratio, or if the payload is corrupt.
    """
    path = Path(path)
    cached_digest, cached_side, cached_f, dim, count = _read_eigen_header(path)
    if cached_digest != digest:
        raise CacheError(
            f"'{path}' was built from a different train split; "
            "rerun `specrec eigen`"
        )
    if cached_side != side or cached_f != f:
        raise CacheError(
            f"'{path}' holds the {cached_side} basis for F={cached_f}, expected the "
            f"{side} basis for F={f}; rerun `specrec eigen --cutoff-ratio {f}`"
        )
    data = path.read_bytes()
    payload = data[data.index(b"\n") + 1 :]
    if len(payload) != 8 * count * (dim + 1):
        raise CacheError(f"'{path}' is truncated or corrupt")
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    basis = SpectralBasis(
        np.asfortranarray(values[count:].reshape((dim, count), order="F")),
        values[:count].copy(),
    )
    try:
        return basis.check()
    except ValueError as e:
        raise CacheError(f"'{path}' is corrupt: {e}") from e


def _load_bases(run: RunConfig, split: evaluation.SplitData) -> spectral.TruncatedBases:
    out, f = run.out, run.train.cutoff_ratio
    digest = _file_digest(_require(out / "train.tsv", "split"))
    user = read_eigen_cache(_require(out / "eigen_user.lcfb", "eigen"), digest, "user", f)
    item = read_eigen_cache(_require(out / "eigen_item.lcfb", "eigen"), digest, "item", f)
    if (user.dim, item.dim) != (split.M, split.N):
        raise CacheError("Eigenbasis dimensions do not match the dataset")
    return spectral.TruncatedBases(user, item, f)


@contextmanager
def _locked(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".specrec.lock"
    try:
        fh = open(lock, "x")
    except FileExistsError:
        raise LockError(
            f"Another specrec command is using '{out}' (remove '{lock}' if stale)"
        ) from None
    fh.close()
    try:
        yield
    finally:
        lock.unlink()


# ---------------------------------------------------------------------------
# Commands


def _parse_records(path: Path, fmt: str):
    sep = "::" if fmt == "movielens" else "\t"
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split(sep)
            if len(fields) < 2 or not fields[0].strip() or not fields[1].strip():
                raise IngestError(f"{path}:{lineno}: malformed line {line!r}", lineno)
            yield fields[0].strip(), fields[1].strip()  # Any rating counts


def ingest(run: RunConfig, path) -> InteractionSet:
    """
    Parse an interaction file, apply the n-core filter, and persist it.

    Parameters
    ----------
    run : RunConfig
        Supplies the format, the core thresholds, and the output directory.
    path : path-like
        A ``user<TAB>item[<TAB>...]`` file, or MovieLens
        ``user::item::rating::timestamp`` records.

    Returns
    -------
    InteractionSet
        The filtered dataset.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Interaction file '{path}' does not exist")
    raw = InteractionSet.from_records(_parse_records(path, run.format))
    interactions = ncore_filter(raw, run.core_user, run.core_item)
    out = run.out
    _write_pairs(out / "interactions.tsv", interactions)
    _write_lines(out / "users.tsv", interactions.user_ids)
    _write_lines(out / "items.tsv", interactions.item_ids)
    stats = {
        "source": path.name,
        "format": run.format,
        "core_user": run.core_user,
        "core_item": run.core_item,
        "users": interactions.M,
        "items": interactions.N,
        "interactions": len(interactions),
        "density": len(interactions) / (interactions.M * interactions.N),
    }
    _write_json(out / "stats.json", stats)
    _logger.info(
        "Ingested %d interactions (%d users, %d items) from %d raw pairs",
        len(interactions),
        interactions.M,
        interactions.N,
        len(raw),
    )
    return interactions


def split_cmd(run: RunConfig) -> evaluation.SplitData:
    """Partition the ingested dataset into train, validation, and test files."""
    interactions = _load_dataset(run.out)
    data = evaluation.split(interactions, run.ratios, run.train.seed)
    for phase in ("train", "validation", "test"):
        subset = getattr(data, phase)
        _write_pairs(run.out / f"{phase}.tsv", subset)
        _logger.info("%s: %d pairs", phase, len(subset))
    _write_json(
        run.out / "split.json",
        {
            "seed": run.train.seed,
            "ratios": list(run.ratios),
            "sizes": [len(data.train), len(data.validation), len(data.test)],
        },
    )
    return data


def eigen_cmd(run: RunConfig) -> spectral.TruncatedBases:
    """
    Compute and cache the passband eigenbases of the train-split Laplacians.

    Existing caches built from the same train split and cut-off ratio are
    reused without recomputation.
    """
    out, f = run.out, run.train.cutoff_ratio
    data = _load_split(out)
    digest = _file_digest(out / "train.tsv")
    phi, psi = spectral.cutoff_counts(f, data.M, data.N)
    max_iters = run.lanczos_max_iters or None

    laplacians = []
    bases = {}
    for n, (side, count) in enumerate((("user", phi), ("item", psi))):
        path = out / f"eigen_{side}.lcfb"
        if path.exists():
            try:
                basis = read_eigen_cache(path, digest, side, f)
            except CacheError as e:
                _logger.info("Cache miss for the %s basis: %s", side, e)
            else:
                if basis.count == count:
                    _logger.info("Cache hit: reusing '%s'", path)
                    bases[side] = basis
                    continue
        if not laplacians:
            train = data.train
            laplacians = user_item_laplacians(
                train.matrix(), train.user_ids, train.item_ids
            )
        _logger.info("Computing %d %s eigenvectors (dim %d)", count, side, laplacians[n].dim)
        basis = lanczos_smallest(
            laplacians[n], count, tol=run.lanczos_tol, max_iters=max_iters, seed=run.train.seed
        )
        write_eigen_cache(path, basis, digest, side, f)
        _logger.info(
            "Wrote '%s' (cut-off frequency %.6g)", path, basis.frequencies[-1]
        )
        bases[side] = basis
    return spectral.TruncatedBases(bases["user"], bases["item"], f)


def _write_history(path: Path, history) -> None:
    _write_lines(path, (record.to_json() for record in history))


def _train_inputs(run: RunConfig, data: evaluation.SplitData):
    bases = _load_bases(run, data) if run.train.layers else None
    if run.init == "random":
        return bases, "random"
    mf = load_checkpoint(_require(run.out / "mf.lcfn", "pretrain"))
    if mf.K != run.train.embed_dim or (mf.M, mf.N) != (data.M, data.N):
        raise ValueError(
            f"The pretrained embeddings have K={mf.K}, expected {run.train.embed_dim}; "
            "rerun `specrec pretrain` with the same `embed_dim`"
        )
    return bases, (mf.u0, mf.v0)


def pretrain_cmd(run: RunConfig):
    """Train MF (no layers) and save its checkpoint for initialization."""
    data = _load_split(run.out)
    config = run.train.replace(layers=0)
    params, history = training.train(config, data, None, "random")
    save_checkpoint(run.out / "mf.lcfn", params)
    _write_history(run.out / "pretrain_history.jsonl", history)
    return params, history


def train_cmd(run: RunConfig):
    """Train the configured model and save the best-validation checkpoint."""
    data = _load_split(run.out)
    bases, init = _train_inputs(run, data)
    params, history = training.train(run.train, data, bases, init)
    save_checkpoint(run.out / "model.lcfn", params)
    _write_history(run.out / "history.jsonl", history)
    if history:
        best = max(history, key=lambda r: r.metric_value)
        _logger.info(
            "Best %s %.5f at epoch %d", best.metric_name, best.metric_value, best.epoch
        )
    return params, history


def tune_cmd(run: RunConfig, fine: bool = False) -> training.GridResult:
    """Grid-search the learning rate and regularization coefficient."""
    data = _load_split(run.out)
    bases, init = _train_inputs(run, data)
    result = training.tune(run.train, data, bases, init, fine=fine)
    _write_lines(run.out / "tune.jsonl", (cell.to_json() for cell in result.cells))
    save_checkpoint(run.out / "model.lcfn", result.best_params)
    best = result.best_config
    _write_lines(
        run.out / "tune_best.cfg",
        (f"{k}={','.join(map(str, v)) if isinstance(v, list) else v}"
         for k, v in best.to_dict().items()),
    )
    _logger.info(
        "Best cell: learning_rate=%g, reg_lambda=%g",
        best.learning_rate,
        best.reg_lambda,
    )
    return result


def evaluate_cmd(run: RunConfig, phase: str = "test", checkpoint=None):
    """Evaluate a checkpoint and write ``metrics_<phase>.json``."""
    data = _load_split(run.out)
    path = Path(checkpoint) if checkpoint else run.out / "model.lcfn"
    params = load_checkpoint(_require(path, "train"))
    bases = None
    if params.L:
        bases = _load_bases(run, data)
        if (bases.phi, bases.psi) != (params.phi, params.psi):
            raise CacheError(
                f"Checkpoint '{path}' was trained with a different cut-off ratio "
                f"than F={run.train.cutoff_ratio}"
            )
    report = evaluation.evaluate(
        evaluation.ModelScorer(params, bases),
        data,
        phase,
        ks=run.train.eval_ks,
        seed=run.train.seed,
        config_digest=run.train.digest(),
    )
    _write_json(run.out / f"metrics_{phase}.json", report.to_json())
    for name, value in report.metric_fields().items():
        _logger.info("%s %s = %.5f", phase, name, value)
    return report


def demo_gft(run: RunConfig, n: int, signal: str, passband: float, plot=False):
    """
    Write the graph Fourier spectrum of a demo signal on the `n`-cycle.

    For ``s3`` the signal is also gate-filtered, keeping the lowest
    ``ceil(passband * n)`` frequencies (whole eigenspaces), and the relative
    error between the reconstruction and ``s1`` is reported.
    """
    if not 0 < passband <= 1:
        raise ValueError("`passband` must be in (0, 1]")
    s = spectral.demo_signal(signal, n)
    basis = spectral.cycle_basis(n)
    spectrum = spectral.gft_1d(s, basis)
    rows = spectral.spectrum_rows(spectrum, basis)
    np.savetxt(
        run.out / f"demo_{signal}.csv",
        np.array(rows),
        fmt=["%d", "%.17g", "%.17g"],
        delimiter=",",
        header="index,frequency,magnitude",
        comments="",
    )
    summary = {"n": n, "signal": signal, "passband": passband}
    if signal in spectral.DEMO_FREQUENCIES:
        f0 = spectral.DEMO_FREQUENCIES[signal]
        summary["frequency"] = f0
        summary["energy"] = spectral.eigenspace_energy(spectrum, basis, f0)
    if signal == "s3":
        cutoff = basis.frequencies[math.ceil(round(passband * n, 9)) - 1]
        filtered = spectral.gate_filter_1d(s, basis, cutoff)
        target = spectral.demo_signal("s1", n)
        error = np.linalg.norm(filtered - target) / np.linalg.norm(target)
        summary["cutoff_frequency"] = float(cutoff)
        summary["reconstruction_error"] = float(error)
        _logger.info("Low-pass reconstruction error vs s1: %.3g", error)
    _write_json(run.out / f"demo_{signal}.json", summary)
    if plot:
        from pfh.specrec.extras import plots

        fig, _ = plots.plot_spectrum(basis.frequencies, spectrum, title=signal)
        fig.savefig(run.out / f"demo_{signal}.png")
    return summary


# ---------------------------------------------------------------------------
# Argument parsing


def _training_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("training")
    g.add_argument("--learning-rate", type=float, dest="learning_rate")
    g.add_argument("--reg-lambda", type=float, dest="reg_lambda")
    g.add_argument("--embed-dim", type=int, dest="embed_dim")
    g.add_argument("--dim-total", type=int, dest="dim_total")
    g.add_argument("--layers", type=int)
    g.add_argument("--cutoff-ratio", type=float, dest="cutoff_ratio")
    g.add_argument("--batch-size", type=int, dest="batch_size")
    g.add_argument("--epochs", type=int)
    g.add_argument("--negatives", type=int, dest="negatives_per_positive")
    g.add_argument("--selection-metric", dest="selection_metric")
    g.add_argument("--init", choices=("pretrained", "random"))
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="specrec",
        description="Spectral collaborative filtering pipelines",
    )
    parser.add_argument("--config", type=Path, help="A key=value config file")
    parser.add_argument("--seed", type=int, help="The global random seed")
    parser.add_argument("--out", type=Path, help="The artifact directory")
    parser.add_argument("--threads", type=int, help="Numba worker threads")
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=("DEBUG", "INFO", "WARNING", "ERROR"),
    )
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override any configuration key",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    train_flags = _training_flags()

    p = sub.add_parser("ingest", help="Parse and n-core filter interactions")
    p.add_argument("path", type=Path)
    p.add_argument("--format", choices=("tsv", "movielens"))
    p.add_argument("--core-user", type=int, dest="core_user")
    p.add_argument("--core-item", type=int, dest="core_item")

    p = sub.add_parser("split", help="Split into train/validation/test")
    p.add_argument("--ratios", help="eg, 0.8,0.1,0.1")

    p = sub.add_parser("eigen", help="Cache the passband eigenbases")
    p.add_argument("--cutoff-ratio", type=float, dest="cutoff_ratio")

    sub.add_parser("pretrain", parents=[train_flags], help="Pretrain MF embeddings")
    sub.add_parser("train", parents=[train_flags], help="Train a model")
    p = sub.add_parser("tune", parents=[train_flags], help="Grid-search eta and lambda")
    p.add_argument("--fine", action="store_true", help="Refine around the winner")

    p = sub.add_parser("evaluate", help="Compute F1@k and NDCG@k")
    p.add_argument("--phase", default="test", choices=("validation", "test"))
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--ks", dest="eval_ks", help="eg, 2,5,10")
    p.add_argument("--cutoff-ratio", type=float, dest="cutoff_ratio")

    p = sub.add_parser("demo-gft", help="Spectrum of a signal on a cycle graph")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--signal", default="s3", choices=("s1", "s2", "s3"))
    p.add_argument("--passband", type=float, default=0.2)
    p.add_argument("--plot", action="store_true")
    return parser


_OVERRIDE_KEYS = set(_TRAIN_KEYS) | set(_RUN_KEYS) | {"dim_total"}


def _run_config(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"`--set` expects KEY=VALUE, got '{item}'")
        overrides[key.strip()] = value.strip()
    for key, value in vars(args).items():
        if key in _OVERRIDE_KEYS and value is not None:
            overrides[key] = value
    return load_run_config(args.config, overrides)


_FAILURES = (
    ValueError,
    FileNotFoundError,
    ConvergenceError,
    CacheError,
    LockError,
    NumericOverflowError,
    training.DivergenceError,
    training.TuningError,
    evaluation.SyntheticDataError,
)


def main(argv=None) -> int:
    """Run the command line, returning the process exit status."""
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format=LOG_FORMAT, force=True)

    try:
        run = _run_config(args)
        if args.threads:
            numba.set_num_threads(args.threads)
        with _locked(run.out):
            if args.command == "ingest":
                ingest(run, args.path)
            elif args.command == "split":
                split_cmd(run)
            elif args.command == "eigen":
                eigen_cmd(run)
            elif args.command == "pretrain":
                pretrain_cmd(run)
            elif args.command == "train":
                train_cmd(run)
            elif args.command == "tune":
                tune_cmd(run, fine=args.fine)
            elif args.command == "evaluate":
                evaluate_cmd(run, args.phase, args.checkpoint)
            elif args.command == "demo-gft":
                demo_gft(run, args.n, args.signal, args.passband, args.plot)
    except _FAILURES as e:
        # DegenerateGraphError, EmptyDatasetError, IngestError, SplitError and
        # EvaluationError are all ValueErrors
        _logger.error("%s: %s", type(e).__name__, e)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
